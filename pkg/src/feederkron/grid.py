"""Three-phase feeder graph, block admittance assembly and network JSON I/O.

Node-phase quantities are stored in "3n layout": entry ``3 * node + phase``
with phases ordered ``a, b, c``. Absent phases keep their slot and are held
at structural zero, so every block of the admittance matrix is a dense 3x3.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from feederkron.errors import StructuralError, ValidationError

PHASES = "abc"

#: balanced positive-sequence substation voltage, 1 p.u.
BALANCED_SLACK = np.exp(-2j * np.pi / 3 * np.arange(3))


@dataclass(frozen=True, order=True)
class PhaseMask:
    """Subset of ``{a, b, c}`` stored as three bit flags (a=1, b=2, c=4)."""

    bits: int

    def __post_init__(self):
        if not 0 <= self.bits <= 7:
            raise ValueError(f"phase bits out of range: {self.bits}")

    @classmethod
    def parse(cls, text: str) -> "PhaseMask":
        text = text.strip().lower()
        bits = 0
        for ch in text:
            if ch not in PHASES:
                raise ValidationError(f"unknown phase {ch!r} in {text!r}")
            bits |= 1 << PHASES.index(ch)
        return cls(bits)

    @classmethod
    def from_flags(cls, flags: Iterable[bool]) -> "PhaseMask":
        return cls(sum(1 << p for p, f in enumerate(flags) if f))

    @classmethod
    def full(cls) -> "PhaseMask":
        return cls(7)

    @property
    def flags(self) -> np.ndarray:
        return np.array([(self.bits >> p) & 1 for p in range(3)], dtype=bool)

    @property
    def indices(self) -> list[int]:
        return [p for p in range(3) if (self.bits >> p) & 1]

    def issubset(self, other: "PhaseMask") -> bool:
        return self.bits & ~other.bits == 0

    def __contains__(self, phase: int | str) -> bool:
        if isinstance(phase, str):
            phase = PHASES.index(phase)
        return bool((self.bits >> phase) & 1)

    def __len__(self) -> int:
        return bin(self.bits).count("1")

    def __bool__(self) -> bool:
        return self.bits != 0

    def __str__(self) -> str:
        return "".join(PHASES[p] for p in self.indices)


@dataclass(frozen=True)
class Node:
    id: int
    phases: PhaseMask
    is_slack: bool = False
    slack_voltage: np.ndarray | None = None


@dataclass(frozen=True)
class Branch:
    """Series three-phase element between two nodes.

    ``y_block`` is the 3x3 series admittance in p.u.; optional shunt blocks
    are added to the diagonal blocks of the respective end.
    """

    from_node: int
    to_node: int
    y_block: np.ndarray
    shunt_from: np.ndarray | None = None
    shunt_to: np.ndarray | None = None

    @classmethod
    def from_impedance(cls, from_node: int, to_node: int, z_block,
                       phases: PhaseMask, **shunts) -> "Branch":
        """Build a branch by inverting the present-phase submatrix of ``z_block``."""
        z = np.asarray(z_block, dtype=complex).reshape(3, 3)
        idx = phases.indices
        y = np.zeros((3, 3), dtype=complex)
        if idx:
            sub = z[np.ix_(idx, idx)]
            if abs(np.linalg.det(sub)) == 0.0:
                raise StructuralError(
                    f"branch ({from_node},{to_node}): singular impedance block on phases {phases}")
            y[np.ix_(idx, idx)] = np.linalg.inv(sub)
        return cls(from_node, to_node, y, **shunts)

    @property
    def pair(self) -> tuple[int, int]:
        return (min(self.from_node, self.to_node), max(self.from_node, self.to_node))


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    nodes: tuple[int, ...] = ()


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, kind: str, message: str, nodes: Sequence[int] = ()):
        self.violations.append(Violation(kind, message, tuple(nodes)))

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}

    def __str__(self) -> str:
        if self.ok:
            return "network valid"
        return "\n".join(f"[{v.kind}] {v.message}" for v in self.violations)


@dataclass(frozen=True)
class Network:
    """Immutable radial three-phase feeder.

    Construction does not validate; call :func:`validate` (or
    :meth:`checked`) before handing a network to the solvers.
    """

    nodes: tuple[Node, ...]
    branches: tuple[Branch, ...]

    def __init__(self, nodes: Iterable[Node], branches: Iterable[Branch]):
        object.__setattr__(self, "nodes", tuple(nodes))
        object.__setattr__(self, "branches", tuple(branches))

    @property
    def n(self) -> int:
        return len(self.nodes)

    @cached_property
    def slack(self) -> int:
        slacks = [nd.id for nd in self.nodes if nd.is_slack]
        if len(slacks) != 1:
            raise StructuralError(f"expected exactly one slack node, found {len(slacks)}")
        return slacks[0]

    @cached_property
    def slack_voltage(self) -> np.ndarray:
        v = self.nodes[self.slack].slack_voltage
        return BALANCED_SLACK.copy() if v is None else np.asarray(v, dtype=complex)

    @cached_property
    def present(self) -> np.ndarray:
        """(n, 3) boolean phase-presence table."""
        return np.array([nd.phases.flags for nd in self.nodes], dtype=bool).reshape(-1, 3)

    @cached_property
    def present_flat(self) -> np.ndarray:
        return self.present.ravel()

    @cached_property
    def neighbors(self) -> tuple[frozenset[int], ...]:
        nbrs: list[set[int]] = [set() for _ in range(self.n)]
        for br in self.branches:
            nbrs[br.from_node].add(br.to_node)
            nbrs[br.to_node].add(br.from_node)
        return tuple(frozenset(s) for s in nbrs)

    @cached_property
    def parent(self) -> np.ndarray:
        """BFS parent of every node in the tree rooted at the slack (-1 at the root)."""
        parent = np.full(self.n, -1, dtype=int)
        seen = np.zeros(self.n, dtype=bool)
        seen[self.slack] = True
        queue = deque([self.slack])
        while queue:
            u = queue.popleft()
            for v in sorted(self.neighbors[u]):
                if not seen[v]:
                    seen[v] = True
                    parent[v] = u
                    queue.append(v)
        return parent

    @cached_property
    def depth(self) -> np.ndarray:
        depth = np.zeros(self.n, dtype=int)
        for u in self.bfs_order[1:]:
            depth[u] = depth[self.parent[u]] + 1
        return depth

    @cached_property
    def bfs_order(self) -> np.ndarray:
        order = [self.slack]
        head = 0
        children = [[] for _ in range(self.n)]
        for v in range(self.n):
            p = self.parent[v]
            if p >= 0:
                children[p].append(v)
        while head < len(order):
            order.extend(children[order[head]])
            head += 1
        return np.array(order, dtype=int)

    def phases(self, node: int) -> PhaseMask:
        return self.nodes[node].phases

    def checked(self) -> "Network":
        report = validate(self)
        if not report.ok:
            raise StructuralError(str(report))
        return self


def _block(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=complex)
    if arr.size != 9:
        raise ValidationError(f"{name}: expected 9 entries, got {arr.size}")
    return arr.reshape(3, 3)


def validate(net: Network) -> ValidationReport:
    """Check every structural invariant; report all violations found."""
    report = ValidationReport()
    n = net.n
    if n == 0:
        report.add("empty", "network has no nodes")
        return report
    for k, nd in enumerate(net.nodes):
        if nd.id != k:
            report.add("node-id", f"node at position {k} has id {nd.id}; ids must be dense 0..n-1", [nd.id])
        if not nd.phases:
            report.add("phases", f"node {nd.id} carries no phase", [nd.id])
    slacks = [nd for nd in net.nodes if nd.is_slack]
    if len(slacks) != 1:
        report.add("slack", f"expected exactly one slack node, found {len(slacks)}",
                   [nd.id for nd in slacks])
    for nd in slacks:
        if nd.phases.bits != 7:
            report.add("slack", f"slack node {nd.id} must carry phases abc, has {nd.phases}", [nd.id])
    for nd in net.nodes:
        if not nd.is_slack and nd.slack_voltage is not None:
            report.add("slack", f"node {nd.id} has a slack voltage but is not the slack", [nd.id])

    seen: dict[tuple[int, int], int] = {}
    endpoints_ok = True
    for b, br in enumerate(net.branches):
        f, t = br.from_node, br.to_node
        if not (0 <= f < n and 0 <= t < n):
            report.add("branch-endpoint", f"branch {b} references unknown node ({f},{t})", [f, t])
            endpoints_ok = False
            continue
        if f == t:
            report.add("self-loop", f"branch {b} connects node {f} to itself", [f])
            continue
        if br.pair in seen:
            report.add("duplicate-branch",
                       f"branch {b} duplicates branch {seen[br.pair]} on pair {br.pair}", br.pair)
        else:
            seen[br.pair] = b
        both = net.nodes[f].phases.flags & net.nodes[t].phases.flags
        y = np.asarray(br.y_block)
        absent = ~both
        if np.any(y[absent, :] != 0) or np.any(y[:, absent] != 0):
            report.add("absent-phase",
                       f"branch {b} ({f},{t}) has nonzero admittance on a phase missing at an endpoint",
                       [f, t])
        for end, sh in ((f, br.shunt_from), (t, br.shunt_to)):
            if sh is None:
                continue
            miss = ~net.nodes[end].phases.flags
            sh = np.asarray(sh)
            if np.any(sh[miss, :] != 0) or np.any(sh[:, miss] != 0):
                report.add("absent-phase", f"branch {b} shunt at node {end} touches a missing phase", [end])

    if len(net.branches) != n - 1:
        report.add("not-radial", f"radial network needs {n - 1} branches, found {len(net.branches)}")

    if endpoints_ok and n > 0:
        nbrs = [set() for _ in range(n)]
        for br in net.branches:
            if br.from_node != br.to_node:
                nbrs[br.from_node].add(br.to_node)
                nbrs[br.to_node].add(br.from_node)
        root = slacks[0].id if len(slacks) == 1 and 0 <= slacks[0].id < n else 0
        parent = {root: -1}
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for v in sorted(nbrs[u]):
                if v not in parent:
                    parent[v] = u
                    queue.append(v)
        missing = sorted(set(range(n)) - set(parent))
        if missing:
            report.add("disconnected", f"{len(missing)} node(s) unreachable from node {root}", missing)
        for v, u in parent.items():
            if u >= 0 and v < len(net.nodes) and u < len(net.nodes):
                if not net.nodes[v].phases.issubset(net.nodes[u].phases):
                    report.add("phase-monotonicity",
                               f"node {v} phases {net.nodes[v].phases} not a subset of "
                               f"upstream node {u} phases {net.nodes[u].phases}", [u, v])

        # every present phase must be carried by at least one incident branch
        carried = np.zeros((n, 3), dtype=bool)
        for br in net.branches:
            if 0 <= br.from_node < n and 0 <= br.to_node < n:
                live = np.any(np.asarray(br.y_block) != 0, axis=1)
                carried[br.from_node] |= live
                carried[br.to_node] |= live
        if n > 1:
            for k, nd in enumerate(net.nodes):
                lost = nd.phases.flags & ~carried[k]
                if np.any(lost):
                    report.add("dead-phase",
                               f"node {nd.id} phase(s) {PhaseMask.from_flags(lost)} have no admittance",
                               [nd.id])
    return report


def blocks_to_bsr(blocks: dict[tuple[int, int], np.ndarray], n: int) -> sp.bsr_array:
    """Pack a dict of 3x3 blocks into a block-sparse (BSR) array of size 3n x 3n."""
    keys = sorted(blocks)
    data = np.zeros((len(keys), 3, 3), dtype=complex)
    indices = np.empty(len(keys), dtype=np.int32)
    indptr = np.zeros(n + 1, dtype=np.int32)
    for k, (i, j) in enumerate(keys):
        data[k] = blocks[(i, j)]
        indices[k] = j
        indptr[i + 1] += 1
    np.cumsum(indptr, out=indptr)
    return sp.bsr_array((data, indices, indptr), shape=(3 * n, 3 * n))


def assemble_admittance(net: Network) -> sp.bsr_array:
    """Nodal admittance Y (3n x 3n) with 3x3 blocks; absent phases zeroed."""
    n = net.n
    present = net.present
    blocks: dict[tuple[int, int], np.ndarray] = {}
    seen: set[tuple[int, int]] = set()

    def add(i, j, value):
        mask = np.outer(present[i], present[j])
        if (i, j) in blocks:
            blocks[(i, j)] = blocks[(i, j)] + value * mask
        else:
            blocks[(i, j)] = value * mask

    for i in range(n):
        blocks[(i, i)] = np.zeros((3, 3), dtype=complex)
    for br in net.branches:
        if br.pair in seen:
            raise StructuralError(f"duplicate branch on pair {br.pair}")
        seen.add(br.pair)
        f, t = br.from_node, br.to_node
        y = np.asarray(br.y_block, dtype=complex)
        add(f, f, y)
        add(t, t, y)
        add(f, t, -y)
        add(t, f, -y)
        if br.shunt_from is not None:
            add(f, f, np.asarray(br.shunt_from, dtype=complex))
        if br.shunt_to is not None:
            add(t, t, np.asarray(br.shunt_to, dtype=complex))
    if n > 1:
        for i in range(n):
            diag = blocks[(i, i)]
            dead = present[i] & ~np.any(diag != 0, axis=1)
            if np.any(dead):
                raise StructuralError(
                    f"node {i}: all-zero admittance row for present phase(s) {PhaseMask.from_flags(dead)}")
    return blocks_to_bsr(blocks, n)


def adjacency(net: Network) -> np.ndarray:
    adj = np.zeros((net.n, net.n), dtype=bool)
    for br in net.branches:
        adj[br.from_node, br.to_node] = True
        adj[br.to_node, br.from_node] = True
    np.fill_diagonal(adj, False)
    return adj


# --------------------------------------------------------------------------
# JSON encoding
# --------------------------------------------------------------------------

def encode_block(block) -> list[list[float]]:
    arr = np.asarray(block, dtype=complex).reshape(9)
    return [[float(z.real), float(z.imag)] for z in arr]


def decode_block(value, name: str = "block") -> np.ndarray:
    try:
        arr = np.array([complex(re, im) for re, im in value], dtype=complex)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{name}: expected 9 [re, im] pairs") from exc
    return _block(arr, name)


def network_from_dict(data: dict[str, Any]) -> Network:
    try:
        raw_nodes = sorted(data["nodes"], key=lambda d: int(d["id"]))
        raw_branches = data["branches"]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"network JSON missing field: {exc}") from exc
    nodes = []
    for d in raw_nodes:
        sv = d.get("slack_voltage")
        nodes.append(Node(
            id=int(d["id"]),
            phases=PhaseMask.parse(d.get("phases", "abc")),
            is_slack=bool(d.get("slack", False)),
            slack_voltage=None if sv is None else np.array([complex(re, im) for re, im in sv]),
        ))
    phases = {nd.id: nd.phases for nd in nodes}
    branches = []
    for k, d in enumerate(raw_branches):
        f, t = int(d["from"]), int(d["to"])
        shunts = {}
        for key in ("shunt_from", "shunt_to"):
            if d.get(key) is not None:
                shunts[key] = decode_block(d[key], f"branch {k} {key}")
        if "z_block" in d and "y_block" in d:
            raise ValidationError(f"branch {k}: give either z_block or y_block, not both")
        if "z_block" in d:
            if f not in phases or t not in phases:
                raise ValidationError(f"branch {k} references unknown node ({f},{t})")
            common = PhaseMask(phases[f].bits & phases[t].bits)
            branches.append(Branch.from_impedance(f, t, decode_block(d["z_block"], f"branch {k} z_block"),
                                                  common, **shunts))
        elif "y_block" in d:
            branches.append(Branch(f, t, decode_block(d["y_block"], f"branch {k} y_block"), **shunts))
        else:
            raise ValidationError(f"branch {k}: missing z_block or y_block")
    return Network(nodes, branches)


def network_to_dict(net: Network) -> dict[str, Any]:
    nodes = []
    for nd in net.nodes:
        d: dict[str, Any] = {"id": nd.id, "phases": str(nd.phases), "slack": nd.is_slack}
        if nd.is_slack:
            v = net.slack_voltage if nd.slack_voltage is None else nd.slack_voltage
            d["slack_voltage"] = [[float(z.real), float(z.imag)] for z in np.asarray(v, dtype=complex)]
        nodes.append(d)
    branches = []
    for br in net.branches:
        d = {"from": br.from_node, "to": br.to_node, "y_block": encode_block(br.y_block)}
        if br.shunt_from is not None:
            d["shunt_from"] = encode_block(br.shunt_from)
        if br.shunt_to is not None:
            d["shunt_to"] = encode_block(br.shunt_to)
        branches.append(d)
    return {"nodes": nodes, "branches": branches}


def load_network(path: str | Path) -> Network:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    return network_from_dict(data)


def save_network(net: Network, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(network_to_dict(net), fh, indent=1)
