"""Exhaustive one-node-per-iteration aggregation search.

Every iteration enumerates all feasible (super-node, absorbed super-node)
pairs on the current super-node graph, scores each one against the full,
fixed admittance matrix, commits the pair with the smallest summed
maximum intra-cluster error and updates the assignment bookkeeping.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from feederkron.delta import LocalEvaluator, Sensitivity
from feederkron.errors import ContractError, ValidationError
from feederkron.grid import Network, adjacency, assemble_admittance
from feederkron.kron import Partition, kron_reduce
from feederkron.model import ReducedModel
from feederkron.scenario import AnchoredSolver, ScenarioLibrary

log = logging.getLogger(__name__)

OBJECTIVES = ("magnitude", "complex")


@dataclass(frozen=True, order=True)
class Candidate:
    """Absorb super-node ``r`` (and its cluster) into super-node ``s``."""

    s: int
    r: int


@dataclass(frozen=True)
class CandidateScore:
    smice: float
    max_err: np.ndarray
    feasible: bool


@dataclass(frozen=True)
class ReductionConfig:
    e_bar: float
    objective: str = "magnitude"
    target_reduction: float | None = None
    workers: int = 1
    evaluation: str = "delta"
    chunk_size: int = 128
    max_sensitivity_bytes: int = 2 << 30

    def __post_init__(self):
        if not self.e_bar >= 0:
            raise ValueError(f"e_bar must be >= 0, got {self.e_bar}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.evaluation not in ("delta", "naive"):
            raise ValueError("evaluation must be 'delta' or 'naive'")
        if self.target_reduction is not None and not 0 <= self.target_reduction <= 1:
            raise ValueError("target_reduction must lie in [0, 1]")
        if self.workers < 1 or self.chunk_size < 1:
            raise ValueError("workers and chunk_size must be positive")


@dataclass(frozen=True)
class AssignmentState:
    """Assignment of every node to a super-node plus derived structures.

    ``supernode_of[j]`` is the super-node node ``j`` is assigned to (column
    ``j`` of the assignment matrix); ``adj`` is the super-node adjacency.
    """

    supernode_of: np.ndarray
    clusters: dict[int, frozenset[int]]
    adj: dict[int, frozenset[int]]
    i_agg: np.ndarray
    i_hat: np.ndarray = field(repr=False)
    slack: int = 0

    @property
    def n(self) -> int:
        return len(self.supernode_of)

    @property
    def supernodes(self) -> list[int]:
        return sorted(self.clusters)

    @property
    def pairs(self) -> set[tuple[int, int]]:
        """Assignment set: (super-node, member) for every node."""
        return {(int(s), j) for j, s in enumerate(self.supernode_of)}

    @property
    def assignment(self) -> np.ndarray:
        a = np.zeros((self.n, self.n), dtype=bool)
        a[self.supernode_of, np.arange(self.n)] = True
        return a

    @property
    def edge_count(self) -> int:
        return sum(len(v) for v in self.adj.values()) // 2


def aggregate(supernode_of: np.ndarray, i_hat: np.ndarray) -> np.ndarray:
    """(A kron I3) I for every scenario row of ``i_hat`` (L, 3n)."""
    L = i_hat.shape[0]
    n = len(supernode_of)
    out = np.zeros((L, n, 3), dtype=complex)
    np.add.at(out, (slice(None), supernode_of), i_hat.reshape(L, n, 3))
    return out.reshape(L, 3 * n)


def adjacency_from_assignment(a: np.ndarray, adj0: np.ndarray) -> np.ndarray:
    """Dense super-node adjacency (A adj0 A^T) masked to the off-diagonal."""
    a = a.astype(np.int64)
    m = (a @ adj0.astype(np.int64) @ a.T) > 0
    np.fill_diagonal(m, False)
    return m


def init_state(net: Network, lib: ScenarioLibrary) -> AssignmentState:
    if len(lib) == 0:
        raise ValidationError("scenario library is empty")
    if lib.network.n != net.n:
        raise ValidationError("scenario library was built for a different network")
    i_hat = lib.injections
    return AssignmentState(
        supernode_of=np.arange(net.n),
        clusters={i: frozenset([i]) for i in range(net.n)},
        adj={i: net.neighbors[i] for i in range(net.n)},
        i_agg=i_hat.copy(),
        i_hat=i_hat,
        slack=net.slack,
    )


def enumerate_candidates(state: AssignmentState, net: Network) -> list[Candidate]:
    """Both directions of every super-node edge, phase- and slack-filtered."""
    out = []
    for s in state.supernodes:
        ph_s = net.nodes[s].phases
        for r in sorted(state.adj[s]):
            if r != state.slack and net.nodes[r].phases.issubset(ph_s):
                out.append(Candidate(s, r))
    return out


def commit(state: AssignmentState, cand: Candidate,
           score: CandidateScore | None = None) -> AssignmentState:
    s, r = cand.s, cand.r
    if score is not None and not score.feasible:
        raise ContractError(f"cannot commit infeasible candidate {cand}")
    if s not in state.clusters or r not in state.clusters:
        raise ContractError(f"{cand}: both ends must be current super-nodes")
    if r not in state.adj[s]:
        raise ContractError(f"{cand}: super-nodes are not adjacent")
    if r == state.slack:
        raise ContractError("the slack node cannot be absorbed")
    members_r = state.clusters[r]
    sup = state.supernode_of.copy()
    sup[list(members_r)] = s
    clusters = dict(state.clusters)
    clusters[s] = clusters[s] | members_r
    del clusters[r]
    adj = dict(state.adj)
    for t in state.adj[r]:
        if t != s:
            adj[t] = (adj[t] - {r}) | {s}
    adj[s] = (state.adj[s] | state.adj[r]) - {s, r}
    del adj[r]
    return AssignmentState(sup, clusters, adj, aggregate(sup, state.i_hat), state.i_hat, state.slack)


def check_state(state: AssignmentState, net: Network) -> list[str]:
    """All violated assignment invariants (empty when consistent)."""
    problems = []
    a = state.assignment
    if not np.all(a.sum(axis=0) == 1):
        problems.append("assignment columns must sum to 1")
    diag = np.diag(a)
    off = a & ~np.eye(state.n, dtype=bool)
    if np.any(off & ~diag[:, None]):
        problems.append("node assigned to a non-super-node")
    if set(np.flatnonzero(diag)) != set(state.clusters):
        problems.append("cluster keys differ from assignment diagonal")
    if state.supernode_of[state.slack] != state.slack:
        problems.append("slack is not its own super-node")
    for s, members in state.clusters.items():
        if s not in members:
            problems.append(f"cluster {s} does not contain its super-node")
        for j in members:
            if state.supernode_of[j] != s:
                problems.append(f"node {j} listed in cluster {s} but assigned elsewhere")
            if not net.nodes[j].phases.issubset(net.nodes[s].phases):
                problems.append(f"node {j} phases not available at super-node {s}")
        seen = {s}
        stack = [s]
        while stack:
            u = stack.pop()
            for v in net.neighbors[u]:
                if v in members and v not in seen:
                    seen.add(v)
                    stack.append(v)
        if seen != set(members):
            problems.append(f"cluster {s} is not connected in the original network")
    expected = aggregate(state.supernode_of, state.i_hat)
    if not np.array_equal(expected, state.i_agg):
        problems.append("aggregated injections differ from (A kron I3) I")
    dense = np.zeros((state.n, state.n), dtype=bool)
    for u, nb in state.adj.items():
        dense[u, list(nb)] = True
    if not np.array_equal(dense, adjacency_from_assignment(a, adjacency(net))):
        problems.append("super-node adjacency differs from (A adj A^T) off-diagonal")
    if state.edge_count != len(state.clusters) - 1:
        problems.append("super-node graph is not radial")
    return problems


# --------------------------------------------------------------------------
# scoring
# --------------------------------------------------------------------------

def mice(errors: np.ndarray, clusters: dict[int, Iterable[int]]) -> tuple[dict[int, float], float]:
    """Per-cluster maximum error and its sum.

    ``errors`` is (n, 3) for one scenario or (L, n, 3); MICE of a cluster is
    the maximum over members, phases and (summed) scenarios are added last.
    """
    err = np.asarray(errors, dtype=float)
    if err.ndim == 2:
        err = err[None]
    per_cluster = {}
    total = 0.0
    for l in range(err.shape[0]):
        node_max = err[l].max(axis=1)
        for s in sorted(clusters):
            val = float(node_max[list(clusters[s])].max())
            per_cluster[s] = per_cluster.get(s, 0.0) + val
            total += val
    return per_cluster, total


def evaluate_candidate(state: AssignmentState, cand: Candidate, lib: ScenarioLibrary,
                       solver: AnchoredSolver, config: ReductionConfig) -> CandidateScore:
    """Score one candidate with a full solve on the fixed admittance matrix."""
    n = state.n
    s, r = cand.s, cand.r
    ic = state.i_agg.copy().reshape(-1, n, 3)
    ic[:, s, :] += ic[:, r, :]
    ic[:, r, :] = 0.0
    vc = solver.solve(ic.reshape(ic.shape[0], -1)).reshape(-1, n, 3)
    sup = state.supernode_of.copy()
    sup[sup == r] = s
    present = lib.network.present
    v_assigned = vc[:, sup, :] * present
    v_hat = lib.voltages.reshape(-1, n, 3)
    mag_err = np.abs(np.abs(v_hat) - np.abs(v_assigned))
    max_err = mag_err.reshape(mag_err.shape[0], -1).max(axis=1)
    if not np.all(max_err <= config.e_bar):
        return CandidateScore(np.inf, max_err, False)
    if config.objective == "complex":
        obj_err = np.abs(v_hat - v_assigned)
    else:
        obj_err = mag_err
    clusters = dict(state.clusters)
    clusters[s] = clusters[s] | clusters.pop(r)
    _, smice = mice(obj_err, clusters)
    return CandidateScore(smice, max_err, True)


def evaluate_candidate_delta(state: AssignmentState, cand: Candidate, base_voltages: np.ndarray,
                             sensitivity: Sensitivity | None, lib: ScenarioLibrary,
                             config: ReductionConfig,
                             solver: AnchoredSolver | None = None) -> CandidateScore:
    """Superposition score ``V_c = V_b + (Z_s - Z_r) i_r``; falls back to a full solve."""
    if sensitivity is None or base_voltages is None:
        if solver is None:
            raise ContractError("no sensitivity cache and no solver to fall back on")
        return evaluate_candidate(state, cand, lib, solver, config)
    ev = LocalEvaluator(sensitivity, state.supernode_of, state.i_agg, lib.voltages,
                        base_voltages, config.objective, config.e_bar)
    smice, max_err = ev.score(np.array([cand.s]), np.array([cand.r]))
    return CandidateScore(float(smice[0]), max_err[0], bool(np.isfinite(smice[0])))


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------

@dataclass
class TraceRow:
    iteration: int
    s: int
    r: int
    smice: float
    max_err: np.ndarray
    supernode_count: int
    candidate_count: int
    feasible_count: int
    wall_time_ms: float


def count_explored(supernode_counts: Sequence[int]) -> int:
    """Distinct assignments explored: sum of 2 (n_s - 1) over iterations.

    ``supernode_counts`` holds the super-node count at the start of each
    iteration (before that iteration's reductions).
    """
    return int(sum(2 * (ns - 1) for ns in supernode_counts))


def batch_schedule(n: int, dn: int, batch_sizes: Sequence[int]) -> list[int]:
    """Start-of-iteration super-node counts when removing ``batch_sizes[t]`` nodes at t.

    Batches are truncated so that exactly ``dn`` nodes are removed in total.
    """
    counts = []
    left = dn
    ns = n
    for q in batch_sizes:
        if left <= 0:
            break
        take = max(1, min(q, left))
        counts.append(ns)
        ns -= take
        left -= take
    if left > 0:
        raise ValueError("batch schedule removes fewer than dn nodes")
    return counts


def _score_all(cands: list[Candidate], state, lib, solver, sens, v_base, config, pool):
    """Scores for every candidate; identical for any worker count."""
    c = len(cands)
    s = np.fromiter((x.s for x in cands), dtype=np.int64, count=c)
    r = np.fromiter((x.r for x in cands), dtype=np.int64, count=c)
    chunks = [(a, min(c, a + config.chunk_size)) for a in range(0, c, config.chunk_size)]
    if sens is not None:
        ev = LocalEvaluator(sens, state.supernode_of, state.i_agg, lib.voltages, v_base,
                            config.objective, config.e_bar)
        work = lambda ab: ev.score(s[ab[0]:ab[1]], r[ab[0]:ab[1]])
    else:
        def work(ab):
            scores = [evaluate_candidate(state, cands[k], lib, solver, config)
                      for k in range(ab[0], ab[1])]
            return (np.array([sc.smice for sc in scores]),
                    np.array([sc.max_err for sc in scores]).reshape(len(scores), -1))
    results = list(pool.map(work, chunks)) if pool is not None else [work(ab) for ab in chunks]
    smice = np.concatenate([res[0] for res in results]) if results else np.empty(0)
    max_err = np.concatenate([res[1] for res in results]) if results else np.empty((0, len(lib)))
    return smice, max_err


def run_reduction(net: Network, lib: ScenarioLibrary, config: ReductionConfig,
                  y=None, callback: Callable[[AssignmentState, TraceRow], None] | None = None,
                  seed_pairs: Sequence[tuple[int, int]] = ()) -> ReducedModel:
    """Greedy exhaustive search until no candidate meets the error bound.

    ``seed_pairs`` are (s, r) commits replayed before the search resumes,
    e.g. from an earlier trace; each must be a feasible candidate at its turn.
    """
    if y is None:
        y = assemble_admittance(net)
    state = init_state(net, lib)
    solver = AnchoredSolver.for_network(net, y)
    sens = None
    if config.evaluation == "delta" and net.n > 1:
        if Sensitivity.nbytes(net) <= config.max_sensitivity_bytes:
            sens = Sensitivity(net, solver)
        else:
            log.warning("sensitivity cache would need %d bytes; using full solves",
                        Sensitivity.nbytes(net))
    v_base = solver.solve(state.i_agg)
    n = net.n
    trace: list[TraceRow] = []
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    pending = [Candidate(int(a), int(b)) for a, b in seed_pairs]
    try:
        while True:
            if config.target_reduction is not None and \
                    (n - len(state.clusters)) / n >= config.target_reduction - 1e-12:
                break
            t0 = time.perf_counter()
            cands = enumerate_candidates(state, net)
            n_cands = len(cands)
            if pending:
                cand = pending.pop(0)
                if cand not in cands:
                    raise ValidationError(f"seeded commit ({cand.s}, {cand.r}) is not a candidate "
                                          f"at iteration {len(trace) + 1}")
                exact = evaluate_candidate(state, cand, lib, solver, config)
                if not exact.feasible:
                    raise ValidationError(f"seeded commit ({cand.s}, {cand.r}) violates e_bar")
                cands, smice = [cand], np.array([exact.smice])
            elif not cands:
                break
            else:
                smice, _ = _score_all(cands, state, lib, solver, sens, v_base, config, pool)
            order = np.argsort(smice, kind="stable")  # candidates are already lexicographic
            chosen = None
            for k in order:
                if not np.isfinite(smice[k]):
                    break
                exact = evaluate_candidate(state, cands[k], lib, solver, config)
                if exact.feasible:
                    chosen = (cands[k], exact)
                    break
            if chosen is None:
                break
            cand, exact = chosen
            state = commit(state, cand, exact)
            v_base = solver.solve(state.i_agg)
            row = TraceRow(
                iteration=len(trace) + 1, s=cand.s, r=cand.r, smice=exact.smice,
                max_err=exact.max_err, supernode_count=len(state.clusters),
                candidate_count=n_cands, feasible_count=int(np.isfinite(smice).sum()),
                wall_time_ms=1e3 * (time.perf_counter() - t0),
            )
            trace.append(row)
            log.debug("iter %d: absorb %d into %d, smice %.3e", row.iteration, cand.r, cand.s, exact.smice)
            if callback is not None:
                callback(state, row)
    finally:
        if pool is not None:
            pool.shutdown()
    return build_model(net, lib, state, config, y, v_base, trace)


def state_errors(state: AssignmentState, lib: ScenarioLibrary, v_state: np.ndarray) -> np.ndarray:
    """Per-scenario max magnitude error of the current assignment."""
    n = state.n
    v = v_state.reshape(-1, n, 3)[:, state.supernode_of, :] * lib.network.present
    err = np.abs(np.abs(lib.voltages.reshape(-1, n, 3)) - np.abs(v))
    return err.reshape(err.shape[0], -1).max(axis=1)


def build_model(net: Network, lib: ScenarioLibrary, state: AssignmentState,
                config: ReductionConfig, y, v_state: np.ndarray, trace: list[TraceRow]) -> ReducedModel:
    kr = kron_reduce(y, Partition.keeping(state.supernodes, net.n), net.present_flat,
                     net.slack, net.slack_voltage)
    max_err = state_errors(state, lib, v_state)
    return ReducedModel(
        n_original=net.n,
        kron=kr,
        clusters={s: tuple(sorted(m)) for s, m in state.clusters.items()},
        injection_owner=state.supernode_of.copy(),
        voltage_owner=state.supernode_of.copy(),
        e_bar=float(config.e_bar),
        objective=config.objective,
        scenario_ids=lib.ids,
        train_max_err={sid: float(e) for sid, e in zip(lib.ids, max_err)},
        trace=trace,
    )
