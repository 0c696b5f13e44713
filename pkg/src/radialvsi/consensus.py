"""Distributed (average consensus) and hierarchical aggregation of the index.

The consensus simulator runs synchronous rounds: every node reads the
previous round's snapshot, so a round is a single vectorised update.
Convergence is detected with a global max-min spread, which real nodes
would not have; it is a simulation device only.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidPartition, NotConnected

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CommGraph:
    """Undirected communication graph over the buses ``nodes``."""

    nodes: tuple
    edges: tuple

    def __post_init__(self):
        nodes = tuple(int(v) for v in self.nodes)
        if len(set(nodes)) != len(nodes):
            raise ValueError("duplicate node ids")
        pos = {v: k for k, v in enumerate(nodes)}
        seen = set()
        for a, b in self.edges:
            if a == b:
                raise ValueError(f"self-loop at node {a}")
            if a not in pos or b not in pos:
                raise ValueError(f"edge ({a}, {b}) references an unknown node")
            seen.add((min(a, b), max(a, b)))
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", tuple(sorted(seen)))
        idx = np.array([[pos[a], pos[b]] for a, b in self.edges], dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "_idx", idx)

    @property
    def size(self):
        return len(self.nodes)

    @property
    def index_pairs(self):
        return self._idx

    @property
    def degree(self):
        return np.bincount(self._idx.ravel(), minlength=self.size)

    def is_connected(self):
        return _connected(self.size, self._idx)

    def union(self, *others):
        edges = set(self.edges)
        for g in others:
            if g.nodes != self.nodes:
                raise ValueError("graphs must share the node set")
            edges |= set(g.edges)
        return CommGraph(self.nodes, tuple(edges))

    @classmethod
    def complete(cls, nodes):
        nodes = tuple(nodes)
        return cls(nodes, tuple((a, b) for k, a in enumerate(nodes) for b in nodes[k + 1 :]))

    @classmethod
    def ring(cls, nodes):
        nodes = tuple(nodes)
        if len(nodes) < 3:
            return cls.complete(nodes)
        return cls(nodes, tuple(zip(nodes, nodes[1:] + nodes[:1])))

    @classmethod
    def from_tree(cls, tree, bridge_root=True):
        """Electrical tree restricted to buses ``1..n``.

        Removing the slack bus splits the tree into one component per root
        child; with ``bridge_root`` those children are chained together so
        the graph stays connected.
        """
        nodes = tuple(range(1, tree.n + 1))
        edges = [(ln.parent, ln.child) for ln in tree.lines if ln.parent != 0]
        if bridge_root:
            top = tree.children[0]
            edges += list(zip(top, top[1:]))
        return cls(nodes, tuple(edges))

    @classmethod
    def random_connected(cls, size, extra_edges=0, seed=0, first=1):
        """Random spanning tree plus ``extra_edges`` random chords."""
        rng = np.random.default_rng(seed)
        nodes = tuple(range(first, first + size))
        perm = rng.permutation(size)
        edges = set()
        for k in range(1, size):
            a = nodes[perm[k]]
            b = nodes[perm[int(rng.integers(0, k))]]
            edges.add((min(a, b), max(a, b)))
        max_edges = size * (size - 1) // 2
        while len(edges) < min(max_edges, size - 1 + extra_edges):
            a, b = rng.choice(size, 2, replace=False)
            a, b = nodes[a], nodes[b]
            edges.add((min(a, b), max(a, b)))
        return cls(nodes, tuple(edges))


def _connected(size, idx):
    if size <= 1:
        return True
    adj = [[] for _ in range(size)]
    for a, b in idx:
        adj[a].append(b)
        adj[b].append(a)
    seen = {0}
    queue = deque([0])
    while queue:
        for nb in adj[queue.popleft()]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return len(seen) == size


def metropolis_weights(graph):
    """Dense Metropolis weight matrix ``w_jk = 1 / (1 + max(d_j, d_k))``."""
    m = graph.size
    W = np.zeros((m, m))
    idx = graph.index_pairs
    if idx.size:
        d = graph.degree
        a, b = idx[:, 0], idx[:, 1]
        w = 1.0 / (1.0 + np.maximum(d[a], d[b]))
        W[a, b] = w
        W[b, a] = w
    W[np.arange(m), np.arange(m)] = 1.0 - W.sum(axis=1)
    return W


def _round_update(graph, x):
    idx = graph.index_pairs
    if not idx.size:
        return x.copy()
    d = graph.degree
    a, b = idx[:, 0], idx[:, 1]
    w = 1.0 / (1.0 + np.maximum(d[a], d[b]))
    flow = w * (x[b] - x[a])
    m = x.shape[0]
    return x + np.bincount(a, weights=flow, minlength=m) - np.bincount(b, weights=flow, minlength=m)


@dataclass(eq=False)
class ConsensusTrace:
    spread: np.ndarray
    mean: np.ndarray
    final: np.ndarray
    converged_round: int = None
    connected: bool = True
    states: np.ndarray = None
    nodes: tuple = field(default_factory=tuple)

    @property
    def converged(self):
        return self.converged_round is not None

    @property
    def rounds(self):
        return self.states

    @property
    def value(self):
        return float(np.mean(self.final))


def run_consensus(
    graph,
    initial,
    tol=1e-9,
    max_rounds=100_000,
    schedule=None,
    keep_states=True,
    strict=False,
):
    """Simulate synchronous Metropolis-weight average consensus.

    ``schedule`` is an optional sequence of graphs on the same node set;
    round ``k`` uses ``schedule[k % len(schedule)]``. Degrees and weights
    are recomputed every round. Stops once ``max - min <= tol``. A
    disconnected static graph (or schedule union) is logged and recorded in
    the trace, or raises :class:`NotConnected` when ``strict``.
    """
    graphs = list(schedule) if schedule else [graph]
    if graph is None:
        graph = graphs[0]
    x = np.array(initial, dtype=float)
    if x.shape != (graph.size,):
        raise ValueError(f"initial vector must have length {graph.size}")
    union = graphs[0].union(*graphs[1:]) if len(graphs) > 1 else graphs[0]
    connected = union.is_connected()
    if not connected:
        if strict:
            raise NotConnected("communication graph is not connected")
        log.warning("communication graph is not connected; consensus will not converge")

    spread = [float(x.max() - x.min())]
    mean = [float(x.mean())]
    states = [x.copy()] if keep_states else None
    converged_round = 0 if spread[0] <= tol else None
    k = 0
    while converged_round is None and k < max_rounds:
        x = _round_update(graphs[k % len(graphs)], x)
        k += 1
        spread.append(float(x.max() - x.min()))
        mean.append(float(x.mean()))
        if keep_states:
            states.append(x.copy())
        if spread[-1] <= tol:
            converged_round = k
    return ConsensusTrace(
        spread=np.array(spread),
        mean=np.array(mean),
        final=x,
        converged_round=converged_round,
        connected=connected,
        states=np.array(states) if keep_states else None,
        nodes=graph.nodes,
    )


# --------------------------------------------------------------------------
# hierarchy


@dataclass(frozen=True)
class PartitionNode:
    """A bus (``bus`` set) or an area made of nested parts (``children`` set)."""

    bus: int = None
    children: tuple = ()

    @classmethod
    def leaf(cls, bus):
        return cls(bus=int(bus))

    @classmethod
    def group(cls, *children):
        return cls(children=tuple(children))

    @property
    def is_leaf(self):
        return self.bus is not None

    def leaves(self):
        if self.is_leaf:
            return [self.bus]
        out = []
        for c in self.children:
            out.extend(c.leaves())
        return out

    def to_obj(self):
        return self.bus if self.is_leaf else [c.to_obj() for c in self.children]

    @classmethod
    def from_obj(cls, obj):
        """Nested lists of bus ids, e.g. ``[[1, 2, [3, 4]], [5]]``."""
        if isinstance(obj, bool):
            raise InvalidPartition("partition entries must be bus ids or lists")
        if isinstance(obj, int):
            return cls.leaf(obj)
        if isinstance(obj, list):
            if not obj:
                raise InvalidPartition("empty area in partition")
            return cls.group(*(cls.from_obj(o) for o in obj))
        raise InvalidPartition(f"bad partition entry {obj!r}")


def validate_partition(root, n):
    leaves = root.leaves()
    if sorted(leaves) != list(range(1, n + 1)):
        dup = sorted({b for b in leaves if leaves.count(b) > 1})
        missing = sorted(set(range(1, n + 1)) - set(leaves))
        raise InvalidPartition(f"partition must cover buses 1..{n} once (duplicates {dup}, missing {missing})")
    stack = [root]
    while stack:
        node = stack.pop()
        if not node.is_leaf:
            if not node.children:
                raise InvalidPartition("empty area in partition")
            stack.extend(node.children)


def aggregate(node, h):
    """Return ``(n(N'), H(N'))`` for the subtree ``node`` by post-order recursion."""
    if node.is_leaf:
        return 1, float(h[node.bus - 1])
    count, total = 0, 0.0
    for child in node.children:
        c, t = aggregate(child, h)
        count += c
        total += t
    return count, total


def hierarchical_aggregate(root, h):
    """``(H_total, n_total, avsi)`` computed over a recursive partition of the buses."""
    h = np.asarray(h, dtype=float)
    validate_partition(root, h.shape[0])
    n_total, H_total = aggregate(root, h)
    return H_total, n_total, H_total / n_total


def random_partition(buses, seed=0, max_children=4):
    """Random recursive partition of ``buses`` down to singletons."""
    rng = np.random.default_rng(seed)

    def build(items):
        if len(items) == 1:
            return PartitionNode.leaf(items[0])
        k = int(rng.integers(2, min(max_children, len(items)) + 1))
        cuts = np.sort(rng.choice(np.arange(1, len(items)), k - 1, replace=False))
        parts = np.split(np.array(items), cuts)
        return PartitionNode.group(*(build(list(p)) for p in parts))

    items = list(rng.permutation(list(buses)))
    return build([int(b) for b in items])


def partition_from_tree(tree, levels=2):
    """Areas following the feeder: each root lateral forms an area, split again below.

    With ``levels=2`` each area holds its head bus and then one sub-area per
    child lateral, mirroring a medium-voltage / low-voltage split.
    """

    def build(j, depth):
        kids = tree.children[j]
        if depth >= levels or not kids:
            return PartitionNode.group(*(PartitionNode.leaf(b) for b in _subtree(tree, j)))
        return PartitionNode.group(PartitionNode.leaf(j), *(build(k, depth + 1) for k in kids))

    return PartitionNode.group(*(build(j, 1) for j in tree.children[0]))


def _subtree(tree, j):
    out, stack = [], [j]
    while stack:
        b = stack.pop()
        out.append(b)
        stack.extend(tree.children[b])
    return sorted(out)
