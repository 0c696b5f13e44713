"""Radial network model: tree structure, load scenarios, file formats.

Buses are numbered ``0..n`` with ``0`` the slack (substation) bus. Every
non-root bus ``j`` has exactly one parent line ``(parent(j), j)``, so all
per-line vectors (flows, currents, r, x) share one ordering: position
``j - 1`` holds the quantity of the line feeding bus ``j``.
"""

from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import (
    BadImpedance,
    DimensionMismatch,
    DuplicateParent,
    MalformedFile,
    NotATree,
)


@dataclass(frozen=True)
class Line:
    parent: int
    child: int
    r: float
    x: float


@dataclass(frozen=True, eq=False)
class NetworkTree:
    """Validated rooted tree of ``n + 1`` buses and ``n`` lines.

    Construct through :meth:`from_lines`, which sorts lines by child bus and
    checks the tree structure. Instances are immutable.
    """

    lines: tuple

    def __post_init__(self):
        _validate_lines(self.lines)

    @classmethod
    def from_lines(cls, lines):
        lines = [
            ln if isinstance(ln, Line) else Line(int(ln[0]), int(ln[1]), float(ln[2]), float(ln[3]))
            for ln in lines
        ]
        return cls(tuple(sorted(lines, key=lambda ln: ln.child)))

    def __eq__(self, other):
        if not isinstance(other, NetworkTree):
            return NotImplemented
        return self.lines == other.lines

    def __hash__(self):
        return hash(self.lines)

    def __repr__(self):
        return f"NetworkTree(n={self.n})"

    @property
    def n(self):
        return len(self.lines)

    @cached_property
    def parent(self):
        """Integer array of length ``n + 1``; ``parent[0] == -1``."""
        par = np.full(self.n + 1, -1, dtype=np.int64)
        for ln in self.lines:
            par[ln.child] = ln.parent
        par.setflags(write=False)
        return par

    @cached_property
    def children(self):
        """Tuple indexed by bus id; entry ``i`` is the sorted tuple of children of ``i``."""
        ch = [[] for _ in range(self.n + 1)]
        for ln in self.lines:
            ch[ln.parent].append(ln.child)
        return tuple(tuple(sorted(c)) for c in ch)

    @cached_property
    def order(self):
        """Bus ids in breadth-first order from the root (parents before children)."""
        out = [0]
        queue = deque([0])
        while queue:
            i = queue.popleft()
            for j in self.children[i]:
                out.append(j)
                queue.append(j)
        return tuple(out)

    @cached_property
    def r(self):
        arr = np.array([ln.r for ln in self.lines], dtype=float)
        arr.setflags(write=False)
        return arr

    @cached_property
    def x(self):
        arr = np.array([ln.x for ln in self.lines], dtype=float)
        arr.setflags(write=False)
        return arr

    @cached_property
    def depth(self):
        d = np.zeros(self.n + 1, dtype=np.int64)
        for j in self.order[1:]:
            d[j] = d[self.parent[j]] + 1
        return d

    def with_impedances(self, r, x):
        """Same topology with new line parameters (used for uncertainty studies)."""
        r = np.asarray(r, dtype=float)
        x = np.asarray(x, dtype=float)
        if r.shape != (self.n,) or x.shape != (self.n,):
            raise DimensionMismatch(f"expected {self.n} impedances")
        return NetworkTree.from_lines(
            Line(ln.parent, ln.child, float(r[k]), float(x[k])) for k, ln in enumerate(self.lines)
        )

    def scaled_impedances(self, factor):
        return self.with_impedances(self.r * factor, self.x * factor)


def _validate_lines(lines):
    n = len(lines)
    if n == 0:
        raise NotATree("network has no lines")
    for ln in lines:
        if not isinstance(ln, Line):
            raise MalformedFile(f"expected Line, got {type(ln).__name__}")
        if not (np.isfinite(ln.r) and np.isfinite(ln.x)):
            raise BadImpedance(f"line {ln.parent}->{ln.child}: non-finite impedance")
        if ln.r < 0 or ln.x < 0:
            raise BadImpedance(f"line {ln.parent}->{ln.child}: negative impedance")
        if ln.r == 0 and ln.x == 0:
            raise BadImpedance(f"line {ln.parent}->{ln.child}: zero impedance")
        if ln.child == 0:
            raise NotATree("the root bus 0 cannot be a child")
        if ln.parent == ln.child:
            raise NotATree(f"self-loop at bus {ln.child}")

    if _has_directed_cycle(lines):
        raise NotATree("line set contains a cycle")

    seen = {}
    for ln in lines:
        if ln.child in seen:
            raise DuplicateParent(
                f"bus {ln.child} has two parents ({seen[ln.child]} and {ln.parent})"
            )
        seen[ln.child] = ln.parent

    buses = {0} | {ln.child for ln in lines} | {ln.parent for ln in lines}
    if buses != set(range(n + 1)):
        raise NotATree(f"bus ids must be exactly 0..{n}; got {sorted(buses)}")

    # With n lines, n distinct children and no cycles, every bus reaches 0.
    if [ln.child for ln in lines] != sorted(seen):
        raise NotATree("lines must be sorted by child bus; use NetworkTree.from_lines")


def _has_directed_cycle(lines):
    adj = {}
    for ln in lines:
        adj.setdefault(ln.parent, []).append(ln.child)
    state = {}
    for start in list(adj):
        if start in state:
            continue
        stack = [(start, iter(adj.get(start, ())))]
        state[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
            elif state.get(nxt) == 1:
                return True
            elif nxt not in state:
                state[nxt] = 1
                stack.append((nxt, iter(adj.get(nxt, ()))))
    return False


@dataclass(frozen=True, eq=False)
class LoadScenario:
    """Squared slack voltage ``v0`` and net nodal demands of buses ``1..n``.

    Negative entries model distributed generation.
    """

    p: np.ndarray
    q: np.ndarray
    v0: float = 1.0

    def __post_init__(self):
        p = np.array(self.p, dtype=float).reshape(-1)
        q = np.array(self.q, dtype=float).reshape(-1)
        if p.shape != q.shape:
            raise DimensionMismatch("p and q must have the same length")
        if not self.v0 > 0:
            raise ValueError("v0 must be positive")
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "v0", float(self.v0))

    @property
    def n(self):
        return self.p.shape[0]

    @classmethod
    def zeros(cls, n, v0=1.0):
        return cls(np.zeros(n), np.zeros(n), v0)

    def check(self, tree):
        if self.n != tree.n:
            raise DimensionMismatch(f"scenario has {self.n} buses, network has {tree.n}")
        return self

    def along(self, dp, dq, lam):
        """Scenario ``self + lam * (dp, dq)``."""
        return LoadScenario(self.p + lam * np.asarray(dp), self.q + lam * np.asarray(dq), self.v0)

    def __eq__(self, other):
        if not isinstance(other, LoadScenario):
            return NotImplemented
        return (
            self.v0 == other.v0
            and np.array_equal(self.p, other.p)
            and np.array_equal(self.q, other.q)
        )


@dataclass(frozen=True, eq=False)
class PathImpedance:
    """Root-to-bus sums of line resistance and reactance, indexed by ``bus - 1``."""

    rbar: np.ndarray
    xbar: np.ndarray

    def parent_values(self, tree):
        """Path sums at each line's sending bus (zero when the sender is the root)."""
        par = tree.parent[1:]
        rb = np.where(par == 0, 0.0, self.rbar[np.maximum(par - 1, 0)])
        xb = np.where(par == 0, 0.0, self.xbar[np.maximum(par - 1, 0)])
        return rb, xb


@dataclass(frozen=True)
class MonotoneFlowReport:
    active_ok: np.ndarray
    reactive_ok: np.ndarray
    holds: bool

    @property
    def flagged(self):
        """Bus ids whose feeding line violates the nonnegative-flow condition."""
        bad = ~(self.active_ok & self.reactive_ok)
        return [int(j) + 1 for j in np.flatnonzero(bad)]


# --------------------------------------------------------------------------
# tree recursions


def subtree_sum(tree, values):
    """``out[j-1] = sum of values[i-1] over buses i in the subtree rooted at j``.

    Accepts a vector of length ``n`` or a 2-D array whose rows are buses.
    Equals ``-A2^{-1} @ values`` for the reduced incidence matrix ``A2``.
    """
    vals = np.asarray(values, dtype=float)
    if vals.shape[0] != tree.n:
        raise DimensionMismatch(f"expected leading dimension {tree.n}")
    parent = tree.parent
    if vals.ndim == 1:
        out = vals.tolist()
        for j in reversed(tree.order[1:]):
            i = parent[j]
            if i:
                out[i - 1] += out[j - 1]
        return np.array(out)
    out = vals.copy()
    for j in reversed(tree.order[1:]):
        i = parent[j]
        if i:
            out[i - 1] += out[j - 1]
    return out


def path_sum(tree, values):
    """``out[j-1] = sum of values[k-1] over lines k on the path from 0 to j``.

    Accepts a vector or a 2-D array whose rows are lines. Equals
    ``-A2^{-T} @ values``.
    """
    vals = np.asarray(values, dtype=float)
    if vals.shape[0] != tree.n:
        raise DimensionMismatch(f"expected leading dimension {tree.n}")
    parent = tree.parent
    if vals.ndim == 1:
        src = vals.tolist()
        out = list(src)
        for j in tree.order[1:]:
            i = parent[j]
            if i:
                out[j - 1] = src[j - 1] + out[i - 1]
        return np.array(out)
    out = vals.copy()
    for j in tree.order[1:]:
        i = parent[j]
        if i:
            out[j - 1] += out[i - 1]
    return out


def path_impedances(tree):
    """Root-to-bus resistance and reactance sums in one root-to-leaf pass."""
    return PathImpedance(path_sum(tree, tree.r), path_sum(tree, tree.x))


def incidence_matrices(tree):
    """Return ``(Pi, Delta, A)``, each of shape ``(n + 1, n)``.

    Column ``j - 1`` refers to line ``(parent(j), j)``. ``Pi`` has its one in
    the receiving-bus row ``j`` and ``Delta`` in the sending-bus row
    ``parent(j)``, so ``A = Delta - Pi`` has ``+1`` at the sender and ``-1``
    at the receiver.
    """
    n = tree.n
    Pi = np.zeros((n + 1, n))
    Delta = np.zeros((n + 1, n))
    cols = np.arange(n)
    Pi[cols + 1, cols] = 1.0
    Delta[tree.parent[1:], cols] = 1.0
    return Pi, Delta, Delta - Pi


def reverse_edges_check(tree, op, atol=1e-12):
    """Check nonnegative active and reactive flow on every line."""
    pbar = np.asarray(op.pbar)
    qbar = np.asarray(op.qbar)
    if pbar.shape != (tree.n,) or qbar.shape != (tree.n,):
        raise DimensionMismatch(f"operating point does not match a network with {tree.n} lines")
    a_ok = pbar >= -atol
    r_ok = qbar >= -atol
    return MonotoneFlowReport(a_ok, r_ok, bool(np.all(a_ok) and np.all(r_ok)))


# --------------------------------------------------------------------------
# JSON network files


def _load_json(text, need_lines=True):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"invalid JSON: {exc}") from exc
    if not isinstance(obj, dict) or (need_lines and "lines" not in obj):
        raise MalformedFile("network file must be an object with a 'lines' array")
    return obj


def _parse_lines(obj):
    raw = obj["lines"]
    if not isinstance(raw, list):
        raise MalformedFile("'lines' must be an array")
    lines = []
    for k, item in enumerate(raw):
        try:
            lines.append(
                Line(int(item["parent"]), int(item["child"]), float(item["r"]), float(item["x"]))
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedFile(f"line {k}: {exc!r}") from exc
    return lines


def parse_network(text):
    """Parse a network file (JSON) into a validated :class:`NetworkTree`."""
    return NetworkTree.from_lines(_parse_lines(_load_json(text)))


def parse_loads(text, tree):
    """Read ``v0`` and the bus demands of a network file as a :class:`LoadScenario`."""
    obj = _load_json(text, need_lines=False)
    return _loads_from_obj(obj, tree)


def _loads_from_obj(obj, tree):
    n = tree.n
    p = np.zeros(n)
    q = np.zeros(n)
    for item in obj.get("buses", []) or []:
        try:
            bid = int(item["id"])
            pv = float(item.get("p", 0.0))
            qv = float(item.get("q", 0.0))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedFile(f"bad bus entry {item!r}") from exc
        if bid == 0:
            continue
        if not 1 <= bid <= n:
            raise MalformedFile(f"bus id {bid} outside 0..{n}")
        p[bid - 1] = pv
        q[bid - 1] = qv
    try:
        v0 = float(obj.get("v0", 1.0))
    except (TypeError, ValueError) as exc:
        raise MalformedFile("v0 must be a number") from exc
    if not v0 > 0:
        raise MalformedFile("v0 must be positive")
    return LoadScenario(p, q, v0)


def parse_case(text):
    """Parse a network file into ``(tree, scenario)``."""
    obj = _load_json(text)
    tree = NetworkTree.from_lines(_parse_lines(obj))
    return tree, _loads_from_obj(obj, tree)


def read_case(path):
    with open(path) as fh:
        text = fh.read()
    if str(path).endswith(".m"):
        return from_matpower(text)
    return parse_case(text)


def emit_network(tree, scenario=None, indent=None):
    """Serialize to the JSON network format (floats written at full precision)."""
    obj = {"v0": 1.0 if scenario is None else scenario.v0}
    if scenario is not None:
        scenario.check(tree)
        obj["buses"] = [
            {"id": j, "p": float(scenario.p[j - 1]), "q": float(scenario.q[j - 1])}
            for j in range(1, tree.n + 1)
        ]
    obj["lines"] = [
        {"parent": ln.parent, "child": ln.child, "r": ln.r, "x": ln.x} for ln in tree.lines
    ]
    return json.dumps(obj, indent=indent)


# --------------------------------------------------------------------------
# MATPOWER converter

_MATRIX_RE = r"mpc\.{name}\s*=\s*\[(.*?)\]\s*;"


def _matpower_matrix(text, name):
    m = re.search(_MATRIX_RE.format(name=name), text, flags=re.S)
    if m is None:
        raise MalformedFile(f"missing mpc.{name}")
    rows = []
    for raw in re.split(r"[;\n]", m.group(1)):
        raw = raw.split("%", 1)[0].strip()
        if not raw:
            continue
        try:
            rows.append([float(tok) for tok in raw.replace(",", " ").split()])
        except ValueError as exc:
            raise MalformedFile(f"mpc.{name}: bad row {raw!r}") from exc
    if not rows or len({len(r) for r in rows}) != 1:
        raise MalformedFile(f"mpc.{name}: ragged or empty matrix")
    return np.array(rows)


def from_matpower(text):
    """Convert a radial MATPOWER case (``.m`` text) into ``(tree, scenario)``.

    Buses are relabelled breadth-first from the reference bus (type 3), line
    orientation is taken from that traversal, and demands are divided by
    ``baseMVA``. Meshed cases are rejected with :class:`NotATree`.
    """
    m = re.search(r"mpc\.baseMVA\s*=\s*([0-9.eE+-]+)\s*;", text)
    if m is None:
        raise MalformedFile("missing mpc.baseMVA")
    base_mva = float(m.group(1))
    bus = _matpower_matrix(text, "bus")
    branch = _matpower_matrix(text, "branch")
    if bus.shape[1] < 4 or branch.shape[1] < 4:
        raise MalformedFile("bus needs >= 4 columns and branch >= 4 columns")
    if branch.shape[1] > 10:
        branch = branch[branch[:, 10] != 0]

    ids = [int(b) for b in bus[:, 0]]
    slack = [int(b) for b, t in zip(bus[:, 0], bus[:, 1]) if int(t) == 3]
    if len(slack) != 1:
        raise MalformedFile("case must have exactly one reference (type 3) bus")
    if len(branch) != len(ids) - 1:
        raise NotATree(f"{len(branch)} branches for {len(ids)} buses: case is not radial")

    adj = {b: [] for b in ids}
    for row in branch:
        f, t = int(row[0]), int(row[1])
        if f not in adj or t not in adj:
            raise MalformedFile(f"branch {f}-{t} references an unknown bus")
        adj[f].append((t, row[2], row[3]))
        adj[t].append((f, row[2], row[3]))

    label = {slack[0]: 0}
    lines = []
    queue = deque([slack[0]])
    while queue:
        b = queue.popleft()
        for nb, r, x in adj[b]:
            if nb in label:
                continue
            label[nb] = len(label)
            lines.append(Line(label[b], label[nb], float(r), float(x)))
            queue.append(nb)
    if len(label) != len(ids):
        raise NotATree("case is disconnected")

    tree = NetworkTree.from_lines(lines)
    p = np.zeros(tree.n)
    q = np.zeros(tree.n)
    vm0 = 1.0
    for row in bus:
        k = label[int(row[0])]
        if k == 0:
            if bus.shape[1] > 7:
                vm0 = float(row[7])
            continue
        p[k - 1] = row[2] / base_mva
        q[k - 1] = row[3] / base_mva
    return tree, LoadScenario(p, q, vm0**2)
