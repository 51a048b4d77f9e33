"""Seeded synthetic three-phase radial feeders and loading scenarios."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from feederkron.errors import ValidationError
from feederkron.grid import BALANCED_SLACK, Branch, Network, Node, PhaseMask, assemble_admittance
from feederkron.scenario import AnchoredSolver, ScenarioLibrary, injections_from_pq


@dataclass(frozen=True)
class GenParams:
    n: int = 100
    seed: int = 0
    branch_prob: float = 0.3
    frac_two_phase: float = 0.1
    frac_one_phase: float = 0.15
    r_self: tuple[float, float] = (0.002, 0.006)
    x_self: tuple[float, float] = (0.003, 0.009)
    mutual_ratio: tuple[float, float] = (0.1, 0.4)
    p_load: tuple[float, float] = (0.002, 0.012)
    power_factor: tuple[float, float] = (0.88, 0.98)
    load_fraction: float = 0.7
    n_scenarios: int = 2
    spread: float = 0.4
    node_jitter: float = 0.15
    target_drop: float | None = 0.05

    def check(self) -> "GenParams":
        if self.n < 2:
            raise ValidationError("n must be at least 2")
        fracs = (self.branch_prob, self.frac_two_phase, self.frac_one_phase,
                 self.load_fraction, self.node_jitter)
        if any(not 0 <= f <= 1 for f in fracs):
            raise ValidationError("probabilities and fractions must lie in [0, 1]")
        if self.frac_two_phase + self.frac_one_phase > 1:
            raise ValidationError("two-phase and one-phase lateral fractions must sum to <= 1")
        for name in ("r_self", "x_self", "mutual_ratio", "p_load", "power_factor"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValidationError(f"{name}: need 0 <= lo <= hi, got ({lo}, {hi})")
        if self.r_self[0] <= 0:
            raise ValidationError("self resistance must be positive")
        if self.mutual_ratio[1] > 0.5:
            raise ValidationError("mutual_ratio above 0.5 breaks diagonal dominance")
        if not (0 < self.power_factor[0] and self.power_factor[1] <= 1):
            raise ValidationError("power factor must lie in (0, 1]")
        if self.n_scenarios < 1 or not 0 <= self.spread < 1:
            raise ValidationError("need n_scenarios >= 1 and 0 <= spread < 1")
        if self.target_drop is not None and not 0 < self.target_drop < 0.5:
            raise ValidationError("target_drop must lie in (0, 0.5)")
        return self


def _lateral_phases(rng, parent: PhaseMask, p: GenParams) -> PhaseMask:
    idx = parent.indices
    u = rng.random()
    if len(idx) == 3 and u < p.frac_two_phase:
        drop = rng.integers(3)
        return PhaseMask.from_flags([k != drop for k in range(3)])
    if len(idx) >= 2 and u < p.frac_two_phase + p.frac_one_phase:
        keep = idx[rng.integers(len(idx))]
        return PhaseMask(1 << keep)
    return parent


def _impedance(rng, p: GenParams) -> np.ndarray:
    r = rng.uniform(*p.r_self, size=3)
    x = rng.uniform(*p.x_self, size=3)
    z = np.diag(r + 1j * x)
    r_min = r.min()
    for i in range(3):
        for j in range(i + 1, 3):
            # |mutual| <= mutual_ratio * min self resistance keeps self real part >= 2x mutual
            mag = rng.uniform(*p.mutual_ratio) * r_min
            ang = rng.uniform(0.6, 1.4)
            z[i, j] = z[j, i] = mag * np.exp(1j * ang)
    return z


def _tree(rng, p: GenParams):
    parents = [-1]
    phases = [PhaseMask.full()]
    for k in range(1, p.n):
        if k == 1 or rng.random() >= p.branch_prob:
            par = k - 1
            ph = phases[par]
        else:
            par = int(rng.integers(k))
            ph = _lateral_phases(rng, phases[par], p)
        parents.append(par)
        phases.append(ph)
    return parents, phases


def _build(parents, phases, impedances, scale: float) -> Network:
    nodes = [Node(0, phases[0], True, BALANCED_SLACK.copy())]
    nodes += [Node(k, phases[k]) for k in range(1, len(parents))]
    branches = [Branch.from_impedance(parents[k], k, impedances[k - 1] * scale, phases[k])
                for k in range(1, len(parents))]
    return Network(nodes, branches)


def generate_loads(p: GenParams, net: Network, rng) -> dict[str, np.ndarray]:
    """Per-scenario (n, 3) consumed complex power tables."""
    n = net.n
    loaded = rng.random(n) < p.load_fraction
    loaded[net.slack] = False
    pf = rng.uniform(*p.power_factor, size=(n, 3))
    pw = rng.uniform(*p.p_load, size=(n, 3))
    base = (pw + 1j * pw * np.tan(np.arccos(pf))) * net.present * loaded[:, None]
    lo, hi = 1 - p.spread, 1 + p.spread
    tables = {}
    if p.n_scenarios >= 2:
        tables["low"] = base * lo
    tables["high"] = base * hi
    for h in range(p.n_scenarios - len(tables)):
        level = rng.uniform(lo, hi)
        jitter = 1 + p.node_jitter * rng.uniform(-1, 1, size=(n, 1))
        tables[f"h{h:03d}"] = base * np.clip(level * jitter, lo, hi)
    return tables


def generate(params: GenParams) -> tuple[Network, ScenarioLibrary]:
    p = params.check()
    rng = np.random.default_rng(p.seed)
    parents, phases = _tree(rng, p)
    impedances = [_impedance(rng, p) for _ in range(1, p.n)]
    net = _build(parents, phases, impedances, 1.0)
    tables = generate_loads(p, net, rng)
    if p.target_drop is not None:
        # rescale impedances so the heaviest scenario sags by about target_drop
        solver = AnchoredSolver.for_network(net)
        heavy = tables["high"].reshape(-1)
        flat = solver.flat()
        inj = np.zeros_like(flat)
        act = heavy != 0
        inj[act] = -np.conj(heavy[act] / flat[act])
        drop = float(np.max(np.abs(flat) - np.abs(solver.solve(inj)), initial=0.0))
        if drop > 0:
            net = _build(parents, phases, impedances, p.target_drop / drop)
    solver = AnchoredSolver.for_network(net, assemble_admittance(net))
    lib = ScenarioLibrary(net, [injections_from_pq(net, t, scenario_id=sid, solver=solver)
                                for sid, t in tables.items()])
    return net, lib
