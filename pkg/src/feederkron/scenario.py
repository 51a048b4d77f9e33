"""Slack-anchored linear solves and the operating-scenario library.

Loads are represented as constant current injections. Constant-PQ data is
converted once, by fixed-point iteration, when the library is built.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from feederkron.errors import SolverError, ValidationError
from feederkron.grid import PHASES, Network, assemble_admittance

SOLVE_RTOL = 1e-10
PQ_TOL = 1e-9
PQ_MAX_ITER = 50


class AnchoredSolver:
    """Factorized ``Y V = I`` with the slack voltage held fixed.

    Slack rows and absent-phase rows/columns are eliminated and the remaining
    complex sparse block is LU-factorized once. :meth:`solve` reuses that
    factorization for any number of right-hand sides and may be called from
    several threads.
    """

    def __init__(self, y, present_flat: np.ndarray, slack: int, slack_voltage):
        y = sp.csc_array(y)
        dim = y.shape[0]
        self.dim = dim
        self.present = np.asarray(present_flat, dtype=bool)
        self.slack_idx = np.arange(3 * slack, 3 * slack + 3)
        self.slack_voltage = np.asarray(slack_voltage, dtype=complex)
        is_free = self.present.copy()
        is_free[self.slack_idx] = False
        self.free = np.flatnonzero(is_free)
        self._lock = threading.Lock()
        self._lu = None
        rows = y[self.free, :]
        self._y_fs = sp.csr_array(rows[:, self.slack_idx])
        if self.free.size:
            y_ff = sp.csc_array(rows[:, self.free])
            try:
                self._lu = splu(y_ff)
            except RuntimeError as exc:
                raise SolverError(f"anchored admittance is singular: {exc}") from exc
            pivots = np.abs(self._lu.U.diagonal())
            k = int(np.argmin(pivots))
            scale = max(float(np.abs(y_ff.data).max(initial=0.0)), 1.0)
            if pivots[k] <= 1e-13 * scale:
                raise SolverError(
                    f"anchored admittance is numerically singular: smallest pivot "
                    f"{pivots[k]:.3e} at reduced row {k} (node {self.free[k] // 3}, "
                    f"phase {PHASES[self.free[k] % 3]})")
        self._slack_rhs = self._y_fs @ self.slack_voltage

    @classmethod
    def for_network(cls, net: Network, y=None) -> "AnchoredSolver":
        if y is None:
            y = assemble_admittance(net)
        return cls(y, net.present_flat, net.slack, net.slack_voltage)

    def solve_free(self, rhs: np.ndarray) -> np.ndarray:
        """Raw factorized solve on the eliminated system (rows = ``self.free``)."""
        with self._lock:
            return self._lu.solve(np.ascontiguousarray(rhs, dtype=complex))

    def solve(self, injections: np.ndarray) -> np.ndarray:
        """Voltages for one (3n,) or several (k, 3n) injection vectors."""
        inj = np.asarray(injections, dtype=complex)
        single = inj.ndim == 1
        inj2 = np.atleast_2d(inj)
        if inj2.shape[1] != self.dim:
            raise ValidationError(f"injection length {inj2.shape[1]} != {self.dim}")
        if np.any(inj2[:, ~self.present] != 0):
            raise ValidationError("nonzero injection at an absent phase")
        out = np.zeros_like(inj2)
        out[:, self.slack_idx] = self.slack_voltage
        if self.free.size:
            rhs = (inj2[:, self.free] - self._slack_rhs).T
            out[:, self.free] = self.solve_free(rhs).T
        return out[0] if single else out

    def flat(self) -> np.ndarray:
        return self.solve(np.zeros(self.dim, dtype=complex))


def solve_anchored(y, injections, net: Network) -> np.ndarray:
    """One-shot anchored solve; build an :class:`AnchoredSolver` to reuse the factorization."""
    return AnchoredSolver(y, net.present_flat, net.slack, net.slack_voltage).solve(injections)


def residual(y, voltages, injections, net: Network) -> float:
    """Max |Y V - I| over non-slack present-phase rows."""
    mask = net.present_flat.copy()
    mask[3 * net.slack:3 * net.slack + 3] = False
    r = (sp.csr_array(y) @ np.asarray(voltages)) - np.asarray(injections)
    return float(np.abs(r[mask]).max(initial=0.0))


@dataclass(frozen=True)
class Scenario:
    id: str
    injections: np.ndarray
    voltages: np.ndarray
    loads: np.ndarray | None = None


@dataclass
class ScenarioLibrary:
    network: Network
    scenarios: list[Scenario] = field(default_factory=list)

    def __post_init__(self):
        dim = 3 * self.network.n
        for sc in self.scenarios:
            if sc.injections.shape != (dim,) or sc.voltages.shape != (dim,):
                raise ValidationError(f"scenario {sc.id}: vectors must have length {dim}")

    def __len__(self) -> int:
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)

    def __getitem__(self, k):
        return self.scenarios[k]

    @property
    def ids(self) -> list[str]:
        return [sc.id for sc in self.scenarios]

    @property
    def injections(self) -> np.ndarray:
        return np.array([sc.injections for sc in self.scenarios]).reshape(len(self), -1)

    @property
    def voltages(self) -> np.ndarray:
        return np.array([sc.voltages for sc in self.scenarios]).reshape(len(self), -1)

    def subset(self, ids: Iterable[str]) -> "ScenarioLibrary":
        by_id = {sc.id: sc for sc in self.scenarios}
        try:
            return ScenarioLibrary(self.network, [by_id[i] for i in ids])
        except KeyError as exc:
            raise ValidationError(f"unknown scenario id {exc}") from exc


def _check_phase_pattern(net: Network, values: np.ndarray, what: str):
    bad = np.flatnonzero((values.reshape(-1) != 0) & ~net.present_flat)
    if bad.size:
        k = int(bad[0])
        raise ValidationError(f"{what} at absent phase {PHASES[k % 3]} of node {k // 3}")
    slack = values.reshape(-1)[3 * net.slack:3 * net.slack + 3]
    if np.any(slack != 0):
        raise ValidationError(f"{what} at the slack node {net.slack}")


def scenario_from_currents(net: Network, currents, scenario_id: str = "0",
                           solver: AnchoredSolver | None = None) -> Scenario:
    inj = np.asarray(currents, dtype=complex).reshape(-1)
    _check_phase_pattern(net, inj, "current injection")
    solver = solver or AnchoredSolver.for_network(net)
    return Scenario(str(scenario_id), inj, solver.solve(inj))


def injections_from_pq(net: Network, loads, tol: float = PQ_TOL, max_iter: int = PQ_MAX_ITER,
                       scenario_id: str = "0", solver: AnchoredSolver | None = None) -> Scenario:
    """Convert constant-PQ loads to a consistent (voltage, current) pair.

    ``loads`` is an (n, 3) array of consumed complex power per node-phase
    (p.u.). Iterates ``I = -conj(S / V)``, ``V = solve(I)`` until the voltage
    update falls below ``tol``.
    """
    s = np.asarray(loads, dtype=complex).reshape(net.n, 3)
    _check_phase_pattern(net, s, "load")
    solver = solver or AnchoredSolver.for_network(net)
    s_flat = s.reshape(-1)
    v = solver.flat()
    active = s_flat != 0
    inj = np.zeros_like(v)
    delta = np.inf
    for _ in range(max_iter):
        inj = np.zeros_like(v)
        inj[active] = -np.conj(s_flat[active] / v[active])
        v_new = solver.solve(inj)
        delta = float(np.abs(v_new - v).max(initial=0.0))
        v = v_new
        if delta < tol:
            return Scenario(str(scenario_id), inj, v, loads=s.copy())
    raise SolverError(f"PQ fixed point did not converge in {max_iter} iterations "
                      f"(last |dV|inf = {delta:.3e})")


_PQ_HEADER = ["scenario_id", "node_id", "phase", "p_pu", "q_pu"]
_I_HEADER = ["scenario_id", "node_id", "phase", "i_re", "i_im"]


def read_scenario_table(net: Network, path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    """Parse a scenario CSV into ``(mode, {scenario_id: (n, 3) complex array})``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return "pq", {}
        header = [h.strip() for h in header]
        if header == _PQ_HEADER:
            mode = "pq"
        elif header == _I_HEADER:
            mode = "current"
        else:
            raise ValidationError(f"{path}: unrecognized header {header}")
        tables: dict[str, np.ndarray] = {}
        filled: dict[str, set[tuple[int, int]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise ValidationError(f"{path}:{lineno}: expected 5 columns")
            sid, node_s, phase_s, x, y = (c.strip() for c in row)
            try:
                node = int(node_s)
                value = complex(float(x), float(y))
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            if not 0 <= node < net.n:
                raise ValidationError(f"{path}:{lineno}: unknown node {node}")
            if phase_s.lower() not in ("a", "b", "c"):
                raise ValidationError(f"{path}:{lineno}: unknown phase {phase_s!r}")
            phase = PHASES.index(phase_s.lower())
            if phase not in net.nodes[node].phases:
                raise ValidationError(f"{path}:{lineno}: node {node} has no phase {phase_s}")
            tab = tables.setdefault(sid, np.zeros((net.n, 3), dtype=complex))
            keys = filled.setdefault(sid, set())
            if (node, phase) in keys:
                raise ValidationError(f"{path}:{lineno}: duplicate entry for node {node} phase {phase_s}")
            keys.add((node, phase))
            tab[node, phase] = value
    if filled:
        patterns = {frozenset(k) for k in filled.values()}
        if len(patterns) > 1:
            sizes = {sid: len(k) for sid, k in filled.items()}
            raise ValidationError(f"{path}: scenarios cover different node-phase sets {sizes}")
    return mode, tables


def load_library(net: Network, path: str | Path, tol: float = PQ_TOL,
                 max_iter: int = PQ_MAX_ITER, solver: AnchoredSolver | None = None) -> ScenarioLibrary:
    mode, tables = read_scenario_table(net, path)
    solver = solver or (AnchoredSolver.for_network(net) if tables else None)
    scenarios = []
    for sid, tab in tables.items():
        if mode == "pq":
            scenarios.append(injections_from_pq(net, tab, tol, max_iter, sid, solver))
        else:
            scenarios.append(scenario_from_currents(net, tab, sid, solver))
    return ScenarioLibrary(net, scenarios)


def write_scenario_csv(path: str | Path, net: Network, tables: Mapping[str, np.ndarray],
                       mode: str = "pq") -> None:
    """Write per-scenario (n, 3) complex tables; zero entries are omitted."""
    header = _PQ_HEADER if mode == "pq" else _I_HEADER
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for sid, tab in tables.items():
            tab = np.asarray(tab, dtype=complex).reshape(net.n, 3)
            for node in range(net.n):
                for p in net.nodes[node].phases.indices:
                    z = tab[node, p]
                    if z != 0:
                        w.writerow([sid, node, PHASES[p], repr(float(z.real)), repr(float(z.imag))])


def write_library_csv(path: str | Path, lib: ScenarioLibrary, mode: str = "current") -> None:
    if mode == "pq":
        if any(sc.loads is None for sc in lib):
            raise ValidationError("PQ export needs scenarios built from PQ loads")
        tables = {sc.id: sc.loads for sc in lib}
    else:
        tables = {sc.id: sc.injections.reshape(-1, 3) for sc in lib}
    write_scenario_csv(path, lib.network, tables, mode)


def library_from_tables(net: Network, tables: Mapping[str, np.ndarray], mode: str = "pq",
                        solver: AnchoredSolver | None = None, **kw) -> ScenarioLibrary:
    solver = solver or AnchoredSolver.for_network(net)
    if mode == "pq":
        return ScenarioLibrary(net, [injections_from_pq(net, t, scenario_id=s, solver=solver, **kw)
                                     for s, t in tables.items()])
    return ScenarioLibrary(net, [scenario_from_currents(net, t, s, solver) for s, t in tables.items()])

