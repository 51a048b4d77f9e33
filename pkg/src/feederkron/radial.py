"""Radialization of Kron-reduced feeders.

Eliminating a connected group of tree nodes couples all kept nodes on its
boundary, so the reduced topology of a tree is a union of edge-disjoint
maximal cliques. Reinserting the branching nodes of the original subtree
under each clique turns the reduced network back into a tree.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from feederkron.errors import StructuralError
from feederkron.grid import Network
from feederkron.kron import Partition, kron_reduce, reduced_topology
from feederkron.model import ReducedModel


@dataclass(frozen=True)
class Clique:
    members: tuple[int, ...]

    def __post_init__(self):
        if len(self.members) < 3:
            raise ValueError("a mesh-forming clique has at least 3 members")

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class CriticalSet:
    clique: Clique
    nodes: tuple[int, ...]


def _neighbor_sets(adj: np.ndarray) -> list[set[int]]:
    adj = np.asarray(adj, dtype=bool)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ValueError("adjacency must be square")
    if np.any(adj != adj.T) or np.any(np.diag(adj)):
        raise StructuralError("adjacency must be symmetric without self-loops")
    return [set(np.flatnonzero(row).tolist()) for row in adj]


def bron_kerbosch(adj: np.ndarray) -> list[tuple[int, ...]]:
    """All maximal cliques (any size) by Bron-Kerbosch with pivoting."""
    nbr = _neighbor_sets(adj)
    out: list[tuple[int, ...]] = []

    def expand(r: set[int], p: set[int], x: set[int]):
        if not p and not x:
            out.append(tuple(sorted(r)))
            return
        pivot = max(p | x, key=lambda u: len(nbr[u] & p))
        for v in sorted(p - nbr[pivot]):
            expand(r | {v}, p & nbr[v], x & nbr[v])
            p = p - {v}
            x = x | {v}

    expand(set(), set(range(len(nbr))), set())
    return sorted(out)


def find_maximal_cliques(adj: np.ndarray, cross_check: bool = False) -> list[tuple[int, ...]]:
    """Maximal cliques with at least three members, as sorted index tuples.

    Each edge ``(u, v)`` lies in exactly one maximal clique, namely
    ``{u, v}`` plus their common neighbours, so edges are grouped in one pass.
    Raises :class:`StructuralError` when the graph is not such a union.
    """
    nbr = _neighbor_sets(adj)
    seen: dict[tuple[int, int], tuple[int, ...]] = {}
    cliques = []
    for u in range(len(nbr)):
        for v in sorted(w for w in nbr[u] if w > u):
            if (u, v) in seen:
                continue
            members = tuple(sorted({u, v} | (nbr[u] & nbr[v])))
            for i, a in enumerate(members):
                for b in members[i + 1:]:
                    if b not in nbr[a]:
                        raise StructuralError(
                            f"nodes {a} and {b} share edge ({u}, {v})'s clique but are not adjacent; "
                            "topology is not a Kron reduction of a tree")
                    if (a, b) in seen and seen[(a, b)] != members:
                        raise StructuralError(
                            f"edge ({a}, {b}) lies in two maximal cliques {seen[(a, b)]} and {members}")
                    seen[(a, b)] = members
            if len(members) >= 3:
                cliques.append(members)
    # a union of edge-disjoint cliques forms a tree of cliques only if the
    # node-clique incidence graph is a forest
    groups = set(seen.values())
    root = list(range(len(nbr) + len(groups)))

    def find(x):
        while root[x] != x:
            root[x] = root[root[x]]
            x = root[x]
        return x

    for k, members in enumerate(sorted(groups)):
        for u in members:
            a, b = find(u), find(len(nbr) + k)
            if a == b:
                raise StructuralError(f"cliques around node {u} form a cycle; "
                                      "topology is not a Kron reduction of a tree")
            root[a] = b
    cliques.sort()
    if cross_check:
        general = [c for c in bron_kerbosch(adj) if len(c) >= 3]
        if general != cliques:
            raise StructuralError(f"clique grouping disagrees with enumeration: {cliques} vs {general}")
    return cliques


def steiner_subtree(members: Iterable[int], net: Network) -> dict[int, set[int]]:
    """Minimal subtree of the original tree spanning ``members`` (node -> neighbours)."""
    members = sorted(set(int(m) for m in members))
    if not members:
        return {}
    for m in members:
        if not 0 <= m < net.n:
            raise StructuralError(f"node {m} is not in the original network")
    root = members[0]
    parent = {root: -1}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for w in net.neighbors[u]:
            if w not in parent:
                parent[w] = u
                queue.append(w)
    tree: dict[int, set[int]] = {root: set()}
    for m in members[1:]:
        if m not in parent:
            raise StructuralError(f"clique members {root} and {m} are not connected in the original tree")
        path = [m]
        while path[-1] not in tree:
            path.append(parent[path[-1]])
        for a, b in zip(path, path[1:]):
            tree.setdefault(a, set()).add(b)
            tree.setdefault(b, set()).add(a)
    return tree


def critical_nodes(clique: Clique | Iterable[int], net: Network) -> CriticalSet:
    """Nodes of degree >= 3 in the subtree spanning the clique's members."""
    if not isinstance(clique, Clique):
        clique = Clique(tuple(sorted(int(m) for m in clique)))
    sub = steiner_subtree(clique.members, net)
    crit = tuple(sorted(v for v, nb in sub.items() if len(nb) >= 3))
    return CriticalSet(clique, crit)


def is_tree(adj: np.ndarray) -> bool:
    nbr = _neighbor_sets(adj)
    k = len(nbr)
    if k == 0:
        return True
    if sum(len(s) for s in nbr) // 2 != k - 1:
        return False
    seen = {0}
    stack = [0]
    while stack:
        for w in nbr[stack.pop()]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == k


def radialize(model: ReducedModel, net: Network, y) -> ReducedModel:
    """Reinsert critical nodes so the reduced topology is a tree.

    Reinserted nodes become singleton clusters whose voltage is their own,
    while their load stays with the super-node that absorbed it, so the
    super-node voltages are unchanged.
    """
    kept = [int(k) for k in model.kept]
    cliques = [Clique(tuple(kept[i] for i in c))
               for c in find_maximal_cliques(reduced_topology(model.kron))]
    reinsert = sorted({v for c in cliques for v in critical_nodes(c, net).nodes} - set(kept))
    if not reinsert:
        return replace(model, radial=True, reinserted=())
    kr = kron_reduce(y, Partition.keeping(kept + reinsert, net.n), net.present_flat,
                     net.slack, net.slack_voltage)
    voltage_owner = model.voltage_owner.copy()
    voltage_owner[reinsert] = reinsert
    clusters = {s: tuple(m for m in members if m not in set(reinsert))
                for s, members in model.clusters.items()}
    clusters.update({r: (r,) for r in reinsert})
    return replace(
        model,
        kron=kr,
        clusters=dict(sorted(clusters.items())),
        voltage_owner=voltage_owner,
        injection_owner=model.injection_owner.copy(),
        radial=True,
        reinserted=tuple(reinsert),
    )
