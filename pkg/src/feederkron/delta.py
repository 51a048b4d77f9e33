"""Superposition scoring of aggregation candidates.

With ``Y`` fixed, absorbing super-node ``r`` into ``s`` changes the voltages
by ``(Z[:, s] - Z[:, r]) i_r``, where ``Z`` holds the slack-anchored
responses to unit injections. On a shunt-free radial feeder
``Z[j, k]`` only depends on the lowest common ancestor of ``j`` and ``k``,
so the change is confined to the subtrees hanging below the s-r path. Every
other cluster keeps the error it has in the current state, and each
candidate is scored by touching only the clusters inside those subtrees.
"""

from __future__ import annotations

import numpy as np

from feederkron.grid import Network
from feederkron.scenario import AnchoredSolver


def ragged_arange(starts: np.ndarray, stops: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate ``arange(starts[i], stops[i])``; also return the owning ``i``."""
    starts = np.asarray(starts, dtype=np.int64)
    lengths = np.maximum(np.asarray(stops, dtype=np.int64) - starts, 0)
    total = int(lengths.sum())
    owner = np.repeat(np.arange(len(starts)), lengths)
    if total == 0:
        return np.empty(0, dtype=np.int64), owner
    offsets = np.cumsum(lengths) - lengths
    idx = np.arange(total) - offsets[owner] + starts[owner]
    return idx, owner


class Sensitivity:
    """Anchored-solve responses to unit current at every node-phase.

    ``cols[k, q, p]`` is the voltage change at compact row ``q`` per unit
    current injected at node ``k`` phase ``p``; rows follow the order of the
    present node-phases (``rows``). Slack and absent-phase columns are zero.
    """

    def __init__(self, net: Network, solver: AnchoredSolver, block: int = 512):
        self.rows = np.flatnonzero(net.present_flat)
        m = len(self.rows)
        self.m = m
        self.row_node = self.rows // 3
        self.row_phase = self.rows % 3
        self.pos3 = np.full((net.n, 3), -1, dtype=np.int64)
        self.pos3[self.row_node, self.row_phase] = np.arange(m)
        self.cols = np.zeros((net.n, m, 3), dtype=complex)
        free = solver.free
        at = np.searchsorted(self.rows, free)
        nf = len(free)
        for start in range(0, nf, block):
            stop = min(nf, start + block)
            rhs = np.zeros((nf, stop - start), dtype=complex)
            rhs[np.arange(start, stop), np.arange(stop - start)] = 1.0
            resp = solver.solve_free(rhs)
            out = np.zeros((stop - start, m), dtype=complex)
            out[:, at] = resp.T
            cf = free[start:stop]
            self.cols[cf // 3, :, cf % 3] = out
        self.local = not any(br.shunt_from is not None or br.shunt_to is not None
                             for br in net.branches)
        self.tree = TreeIndex(net)

    @staticmethod
    def nbytes(net: Network) -> int:
        return 16 * 3 * net.n * int(net.present_flat.sum())


class TreeIndex:
    """Euler tour and binary-lifting tables of the feeder rooted at the slack."""

    def __init__(self, net: Network):
        n = net.n
        parent = net.parent.copy()
        self.depth = net.depth
        children = [[] for _ in range(n)]
        for v in range(n):
            if parent[v] >= 0:
                children[parent[v]].append(v)
        tin = np.zeros(n, dtype=np.int64)
        tout = np.zeros(n, dtype=np.int64)
        clock = 0
        stack = [(net.slack, False)]
        while stack:
            v, done = stack.pop()
            if done:
                tout[v] = clock
                continue
            tin[v] = clock
            clock += 1
            stack.append((v, True))
            for ch in reversed(children[v]):
                stack.append((ch, False))
        self.tin, self.tout = tin, tout
        levels = max(1, int(self.depth.max(initial=0)).bit_length())
        up = np.empty((levels, n), dtype=np.int64)
        root_parent = parent.copy()
        root_parent[net.slack] = net.slack
        up[0] = root_parent
        for j in range(1, levels):
            up[j] = up[j - 1][up[j - 1]]
        self.up = up

    def lift(self, u: np.ndarray, steps: np.ndarray) -> np.ndarray:
        u = u.copy()
        for j in range(self.up.shape[0]):
            bit = ((steps >> j) & 1).astype(bool)
            u[bit] = self.up[j][u[bit]]
        return u

    def lca(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        du, dv = self.depth[u], self.depth[v]
        swap = du < dv
        a = np.where(swap, v, u)
        b = np.where(swap, u, v)
        a = self.lift(a, np.abs(du - dv))
        for j in range(self.up.shape[0] - 1, -1, -1):
            differ = a != b
            ua, ub = self.up[j][a], self.up[j][b]
            move = differ & (ua != ub)
            a = np.where(move, ua, a)
            b = np.where(move, ub, b)
        return np.where(a == b, a, self.up[0][a])


class RangeMax:
    """Sparse table for range-maximum queries along the last axis."""

    def __init__(self, values: np.ndarray):
        self.table = [values]
        width = 1
        while 2 * width <= values.shape[-1]:
            prev = self.table[-1]
            self.table.append(np.maximum(prev[..., :-width], prev[..., width:]))
            width *= 2

    def query(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """max over [lo, hi) per query; 0 for empty ranges. Shape (L, q)."""
        L = self.table[0].shape[0]
        out = np.zeros((L, len(lo)))
        ok = hi > lo
        if not ok.any():
            return out
        lo_, hi_ = lo[ok], hi[ok]
        level = np.floor(np.log2(hi_ - lo_)).astype(np.int64)
        res = np.zeros((L, len(lo_)))
        for lv in np.unique(level):
            sel = level == lv
            t = self.table[lv]
            res[:, sel] = np.maximum(t[:, lo_[sel]], t[:, hi_[sel] - (1 << lv)])
        out[:, ok] = res
        return out


class LocalEvaluator:
    """Scores for all candidates of one iteration from an immutable snapshot.

    ``score`` is pure and may run concurrently on disjoint candidate batches;
    per-candidate results do not depend on how candidates are batched.
    """

    def __init__(self, sens: Sensitivity, supernode_of: np.ndarray, i_agg: np.ndarray,
                 v_hat: np.ndarray, v_base: np.ndarray, objective: str, e_bar: float):
        self.sens = sens
        self.objective = objective
        self.e_bar = e_bar
        n = len(supernode_of)
        L = v_hat.shape[0]
        self.L = L
        tree = sens.tree
        sn = np.unique(supernode_of)
        sn = sn[np.argsort(tree.tin[sn], kind="stable")]
        self.sn = sn
        self.sn_tin = tree.tin[sn]
        K = len(sn)
        self.K = K
        self.sn_index = np.full(n, -1, dtype=np.int64)
        self.sn_index[sn] = np.arange(K)
        self.i3 = i_agg.reshape(L, n, 3)
        self.v_base = v_base[:, sens.rows]                              # (L, m)

        row_cluster = self.sn_index[supernode_of[sens.row_node]]         # (m,)
        key = row_cluster * 3 + sens.row_phase
        v_hat_rows = v_hat[:, sens.rows]
        mags = np.abs(v_hat_rows)
        lo = np.full((L, 3 * K), np.inf)
        hi = np.full((L, 3 * K), -np.inf)
        np.minimum.at(lo, (slice(None), key), mags)
        np.maximum.at(hi, (slice(None), key), mags)
        keys = np.flatnonzero(np.isfinite(lo[0]))
        # two points per cluster-phase: farthest |V_hat| from any |V| is min or max
        self.mag = self._points(np.repeat(keys, 2),
                                np.stack([lo[:, keys], hi[:, keys]], axis=2).reshape(L, -1))
        if objective == "complex":
            order = np.argsort(key, kind="stable")
            self.obj = self._points(key[order], v_hat_rows[:, order])
        else:
            self.obj = self.mag

        self.base_mag = self._base_max(self.mag)
        self.base_obj = self.base_mag if self.obj is self.mag else self._base_max(self.obj)
        self.base_total = self.base_obj.sum(axis=1)
        self.range_max = RangeMax(self.base_mag)

    def _points(self, keys: np.ndarray, values: np.ndarray) -> dict:
        cluster = keys // 3
        phase = keys % 3
        start = np.searchsorted(cluster, np.arange(self.K + 1))
        return {
            "start": start,
            "phase": phase,
            "pos": self.sens.pos3[self.sn[cluster], phase],
            "value": values,
        }

    def _err(self, pts: dict, idx: np.ndarray, v: np.ndarray) -> np.ndarray:
        val = pts["value"][:, idx]
        if pts is self.mag:
            return np.abs(val - np.abs(v))
        return np.abs(val - v)

    def _voltages(self, pos: np.ndarray, owner: np.ndarray | None, s=None, r=None) -> np.ndarray:
        v = self.v_base[:, pos]
        if owner is None:
            return v
        so, ro = s[owner], r[owner]
        d = self.sens.cols[so, pos, :] - self.sens.cols[ro, pos, :]      # (E, 3)
        ir = self.i3[:, ro, :]                                           # (L, E, 3)
        return v + np.einsum("ep,lep->le", d, ir)

    def _base_max(self, pts: dict) -> np.ndarray:
        """Per-cluster max error (L, K) at the base voltages."""
        idx, own = ragged_arange(pts["start"][:-1], pts["start"][1:])
        err = self._err(pts, idx, self._voltages(pts["pos"][idx], None))
        out = np.zeros((self.L, self.K))
        np.maximum.at(out, (slice(None), own), err)
        return out

    def _segments(self, s: np.ndarray, r: np.ndarray) -> np.ndarray:
        """(c, 2, 2) cluster-index ranges whose voltages the candidate changes."""
        c = len(s)
        seg = np.zeros((c, 2, 2), dtype=np.int64)
        if not self.sens.local:
            seg[:, 0, 1] = self.K
            return seg
        tree = self.sens.tree
        w = tree.lca(s, r)
        for side, x in enumerate((s, r)):
            moved = x != w
            if not moved.any():
                continue
            child = x.copy()
            child[moved] = tree.lift(x[moved], tree.depth[x[moved]] - tree.depth[w[moved]] - 1)
            a = np.searchsorted(self.sn_tin, tree.tin[child])
            b = np.searchsorted(self.sn_tin, tree.tout[child])
            seg[moved, side, 0] = a[moved]
            seg[moved, side, 1] = b[moved]
        return seg

    def score(self, s: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(smice, max_err) for candidate arrays; smice is inf when infeasible."""
        s = np.asarray(s, dtype=np.int64)
        r = np.asarray(r, dtype=np.int64)
        c = len(s)
        L = self.L
        si, ri = self.sn_index[s], self.sn_index[r]
        seg = self._segments(s, r)

        # clusters inside the changed subtrees, other than s and r
        ent, ent_c = ragged_arange(seg[:, :, 0].ravel(), seg[:, :, 1].ravel())
        ent_c = ent_c // 2
        keep = (ent != si[ent_c]) & (ent != ri[ent_c])
        ent, ent_c = ent[keep], ent_c[keep]

        def changed(pts):
            idx, own = ragged_arange(pts["start"][ent], pts["start"][ent + 1])
            v = self._voltages(pts["pos"][idx], ent_c[own], s, r)
            out = np.zeros((L, len(ent)))
            np.maximum.at(out, (slice(None), own), self._err(pts, idx, v))
            return out

        def merged(pts):
            starts = np.stack([pts["start"][si], pts["start"][ri]], axis=1).ravel()
            stops = np.stack([pts["start"][si + 1], pts["start"][ri + 1]], axis=1).ravel()
            idx, own = ragged_arange(starts, stops)
            own = own // 2
            pos = self.sens.pos3[s[own], pts["phase"][idx]]
            v = self._voltages(pos, own, s, r)
            out = np.zeros((L, c))
            np.maximum.at(out, (slice(None), own), self._err(pts, idx, v))
            return out

        new_mag = changed(self.mag)
        merged_mag = merged(self.mag)
        if self.obj is self.mag:
            new_obj, merged_obj = new_mag, merged_mag
        else:
            new_obj, merged_obj = changed(self.obj), merged(self.obj)

        sum_new = np.stack([np.bincount(ent_c, new_obj[l], minlength=c) for l in range(L)])
        sum_old = np.stack([np.bincount(ent_c, self.base_obj[l, ent], minlength=c) for l in range(L)])
        per_l = (self.base_total[:, None] - sum_old - self.base_obj[:, si] - self.base_obj[:, ri]
                 + sum_new + merged_obj)
        smice = np.zeros(c)
        for l in range(L):
            smice += per_l[l]

        new_max = np.zeros((L, c))
        np.maximum.at(new_max, (slice(None), ent_c), new_mag)
        max_err = np.maximum(np.maximum(new_max, merged_mag), self._untouched_max(seg, si, ri))
        feasible = np.all(max_err <= self.e_bar, axis=0)
        return np.where(feasible, smice, np.inf), max_err.T

    def _untouched_max(self, seg: np.ndarray, si: np.ndarray, ri: np.ndarray) -> np.ndarray:
        """Base max error over clusters outside the changed ranges and not s or r."""
        c = len(si)
        excl = np.concatenate([seg, np.stack([si, si + 1], axis=1)[:, None, :],
                               np.stack([ri, ri + 1], axis=1)[:, None, :]], axis=1)
        empty = excl[:, :, 1] <= excl[:, :, 0]
        excl[empty] = self.K
        order = np.argsort(excl[:, :, 0], axis=1, kind="stable")
        excl = np.take_along_axis(excl, order[:, :, None], axis=1)
        out = np.zeros((self.L, c))
        cur = np.zeros(c, dtype=np.int64)
        for j in range(excl.shape[1]):
            out = np.maximum(out, self.range_max.query(cur, excl[:, j, 0]))
            cur = np.maximum(cur, excl[:, j, 1])
        return np.maximum(out, self.range_max.query(cur, np.full(c, self.K)))
