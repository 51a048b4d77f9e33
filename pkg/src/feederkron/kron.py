"""Node-level Kron reduction of the three-phase block admittance matrix."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from feederkron.errors import ContractError, SolverError
from feederkron.grid import BALANCED_SLACK
from feederkron.scenario import AnchoredSolver

TOPOLOGY_TOL = 1e-9


def node_rows(nodes: Sequence[int]) -> np.ndarray:
    """Flat 3n-layout indices of all phases of ``nodes`` (node-major)."""
    nodes = np.asarray(nodes, dtype=int)
    return (3 * nodes[:, None] + np.arange(3)).reshape(-1)


def present_from_admittance(y) -> np.ndarray:
    """Phase-presence per flat row: absent phases have a structurally zero diagonal."""
    return np.asarray(sp.csr_array(y).diagonal() != 0)


@dataclass(frozen=True)
class Partition:
    keep: tuple[int, ...]
    reduce: tuple[int, ...]

    def __init__(self, keep: Iterable[int], reduce: Iterable[int]):
        object.__setattr__(self, "keep", tuple(int(k) for k in keep))
        object.__setattr__(self, "reduce", tuple(int(r) for r in reduce))
        if set(self.keep) & set(self.reduce):
            raise ContractError("keep and reduce sets overlap")
        if len(set(self.keep)) != len(self.keep) or len(set(self.reduce)) != len(self.reduce):
            raise ContractError("partition contains repeated nodes")

    @classmethod
    def keeping(cls, keep: Iterable[int], n: int) -> "Partition":
        keep = sorted(set(int(k) for k in keep))
        kept = set(keep)
        return cls(keep, [i for i in range(n) if i not in kept])

    def check(self, n: int, slack: int | None = None) -> "Partition":
        if sorted(self.keep + self.reduce) != list(range(n)):
            raise ContractError(f"partition does not cover nodes 0..{n - 1} exactly once")
        if slack is not None and slack not in self.keep:
            raise ContractError(f"slack node {slack} must be kept")
        return self


@dataclass
class KronResult:
    """Kron-reduced admittance over the kept nodes (3|K| x 3|K|, dense)."""

    y_kron: np.ndarray
    keep: np.ndarray
    present: np.ndarray
    slack: int | None = None
    slack_voltage: np.ndarray = field(default_factory=lambda: BALANCED_SLACK.copy())

    @property
    def k(self) -> int:
        return len(self.keep)

    @cached_property
    def keep_index_map(self) -> dict[int, int]:
        return {int(node): pos for pos, node in enumerate(self.keep)}

    @property
    def slack_position(self) -> int:
        if self.slack is None:
            raise ContractError("Kron result has no slack node")
        return self.keep_index_map[self.slack]

    @cached_property
    def solver(self) -> AnchoredSolver:
        return AnchoredSolver(sp.csc_array(self.y_kron), self.present.reshape(-1),
                              self.slack_position, self.slack_voltage)

    def blocks(self) -> dict[tuple[int, int], np.ndarray]:
        """Nonzero 3x3 blocks keyed by reduced positions."""
        k = self.k
        tiles = self.y_kron.reshape(k, 3, k, 3).transpose(0, 2, 1, 3)
        nz = np.argwhere(np.any(tiles != 0, axis=(2, 3)))
        return {(int(i), int(j)): tiles[i, j].copy() for i, j in nz}


def _factorize_reduced(y_rr, r_nodes_of_row: np.ndarray):
    try:
        return splu(sp.csc_array(y_rr))
    except RuntimeError:
        pattern = (sp.csr_array(y_rr) != 0).astype(np.int8)
        _, labels = connected_components(pattern, directed=False)
        bad = []
        for lab in np.unique(labels):
            rows = np.flatnonzero(labels == lab)
            try:
                splu(sp.csc_array(y_rr[rows][:, rows]))
            except RuntimeError:
                bad.extend(sorted(set(r_nodes_of_row[rows].tolist())))
        raise SolverError(f"reduced block Y_RR is singular on node set {sorted(set(bad)) or 'unknown'}")


def kron_reduce(y, part: Partition, present: np.ndarray | None = None,
                slack: int | None = None, slack_voltage=None) -> KronResult:
    """Schur complement ``Y_KK - Y_KR Y_RR^+ Y_RK``.

    The pseudo-inverse is realized by inverting the present-phase principal
    submatrix of ``Y_RR``; absent-phase rows and columns stay zero.
    """
    y = sp.csr_array(y)
    n = y.shape[0] // 3
    part.check(n, slack)
    if present is None:
        present = present_from_admittance(y)
    present = np.asarray(present, dtype=bool).reshape(-1)
    keep = np.array(part.keep, dtype=int)
    k_rows = node_rows(keep)
    red = np.array(part.reduce, dtype=int)
    r_rows = node_rows(red) if red.size else np.empty(0, dtype=int)
    r_rows = r_rows[present[r_rows]]

    y_kk = y[k_rows][:, k_rows].toarray()
    if r_rows.size:
        y_rr = sp.csc_array(y[r_rows][:, r_rows])
        lu = _factorize_reduced(y_rr, r_rows // 3)
        y_rk = sp.csc_array(y[r_rows][:, k_rows])
        cols = np.flatnonzero(np.diff(y_rk.indptr))
        if cols.size:
            x = lu.solve(y_rk[:, cols].toarray())
            y_kr = sp.csr_array(y[k_rows][:, r_rows])
            y_kk[:, cols] -= y_kr @ x
    y_kk[~present[k_rows], :] = 0.0
    y_kk[:, ~present[k_rows]] = 0.0
    return KronResult(
        y_kron=y_kk,
        keep=keep,
        present=present[k_rows].reshape(-1, 3),
        slack=slack,
        slack_voltage=BALANCED_SLACK.copy() if slack_voltage is None
        else np.asarray(slack_voltage, dtype=complex),
    )


def kron_reduce_network(net, y, keep: Iterable[int]) -> KronResult:
    """Convenience wrapper: keep ``keep`` (slack always added) of ``net``."""
    keep = set(int(k) for k in keep) | {net.slack}
    part = Partition.keeping(keep, net.n)
    return kron_reduce(y, part, net.present_flat, net.slack, net.slack_voltage)


def solve_kept(kr: KronResult, i_kept) -> np.ndarray:
    """Anchored solve ``I_K = Y_Kron V_K`` for one (3k,) or several (m, 3k) injections."""
    return kr.solver.solve(i_kept)


def reduced_topology(kr: KronResult, tol: float = TOPOLOGY_TOL) -> np.ndarray:
    """Boolean adjacency over kept nodes from the off-diagonal block pattern."""
    k = kr.k
    mags = np.abs(kr.y_kron).reshape(k, 3, k, 3).max(axis=(1, 3))
    scale = mags.max(initial=0.0)
    adj = mags > tol * scale if scale > 0 else np.zeros((k, k), dtype=bool)
    np.fill_diagonal(adj, False)
    return adj
