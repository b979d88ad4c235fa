"""Unrolled causal graphs of a factored MDP.

Nodes are actions ``a_t`` and state dimensions ``s^j_t``. Edges only ever go
from one timestep to the next, so every graph built here is acyclic by
construction. The module provides d-separation, exact DAIS/AIA extraction,
machine checks of the two graphical characterizations, and exact conditional
mutual information on discrete joint tables.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, FrozenSet, Iterable, Optional, Sequence, Tuple

import numpy as np

from .exceptions import DataError, StructuralAssumptionError
from .structures import StructureMasks

ACTION = "a"
STATE = "s"

DimSet = FrozenSet[int]


@dataclass(frozen=True)
class NodeRef:
    """A node of a ``TemporalDag``; ``dim`` is ``None`` for action nodes."""

    time: int
    kind: str
    dim: Optional[int] = None

    def __post_init__(self):
        if self.kind not in (ACTION, STATE):
            raise ValueError(f"unknown node kind {self.kind!r}")
        if (self.dim is None) != (self.kind == ACTION):
            raise ValueError("dim must be given for state nodes and only for them")
        if self.time < 0:
            raise ValueError("time must be non-negative")

    @classmethod
    def action(cls, t: int) -> "NodeRef":
        return cls(t, ACTION)

    @classmethod
    def state(cls, j: int, t: int) -> "NodeRef":
        return cls(t, STATE, j)

    def __str__(self):
        return f"a:{self.time}" if self.kind == ACTION else f"s{self.dim}:{self.time}"

    def __lt__(self, other):
        return (self.time, self.kind, -1 if self.dim is None else self.dim) < (
            other.time,
            other.kind,
            -1 if other.dim is None else other.dim,
        )


Edge = Tuple[NodeRef, NodeRef]


@dataclass(frozen=True)
class TemporalDag:
    """Causal graph unrolled over ``horizon`` timesteps.

    Action nodes exist for ``t < horizon - 1`` (the last step has nothing to
    influence). Construction validates the layering: every edge goes from ``t``
    to ``t + 1``, action nodes have no parents, and each state dimension keeps a
    self-edge from its predecessor.
    """

    d: int
    horizon: int
    edges: FrozenSet[Edge] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "edges", frozenset(self.edges))
        if self.d < 1 or self.horizon < 2:
            raise StructuralAssumptionError("need d >= 1 and horizon >= 2")
        nodes = self.nodes
        for u, v in self.edges:
            if u not in nodes or v not in nodes:
                raise StructuralAssumptionError(f"edge {u} -> {v} references a node outside the graph")
            if u == v:
                raise StructuralAssumptionError(f"self-loop on {u}")
            if v.time != u.time + 1:
                raise StructuralAssumptionError(f"edge {u} -> {v} does not go from t to t+1")
            if v.kind == ACTION:
                raise StructuralAssumptionError(f"edge {u} -> {v} points into an action")
        for t in range(1, self.horizon):
            for j in range(self.d):
                if (NodeRef.state(j, t - 1), NodeRef.state(j, t)) not in self.edges:
                    raise StructuralAssumptionError(f"missing self-edge into s{j}:{t}")

    @cached_property
    def nodes(self) -> FrozenSet[NodeRef]:
        states = (NodeRef.state(j, t) for t in range(self.horizon) for j in range(self.d))
        actions = (NodeRef.action(t) for t in range(self.horizon - 1))
        return frozenset(itertools.chain(states, actions))

    @cached_property
    def parents(self) -> Dict[NodeRef, FrozenSet[NodeRef]]:
        out = {n: set() for n in self.nodes}
        for u, v in self.edges:
            out[v].add(u)
        return {n: frozenset(p) for n, p in out.items()}

    @cached_property
    def children(self) -> Dict[NodeRef, FrozenSet[NodeRef]]:
        out = {n: set() for n in self.nodes}
        for u, v in self.edges:
            out[u].add(v)
        return {n: frozenset(c) for n, c in out.items()}

    def ancestors(self, nodes: Iterable[NodeRef]) -> FrozenSet[NodeRef]:
        """``nodes`` together with all their ancestors."""
        seen = set()
        stack = list(nodes)
        while stack:
            n = stack.pop()
            if n not in seen:
                seen.add(n)
                stack.extend(self.parents[n])
        return frozenset(seen)

    def descendants(self, node: NodeRef) -> FrozenSet[NodeRef]:
        seen = set()
        stack = [node]
        while stack:
            n = stack.pop()
            if n not in seen:
                seen.add(n)
                stack.extend(self.children[n])
        return frozenset(seen)

    def to_networkx(self):
        import networkx as nx

        g = nx.DiGraph()
        g.add_nodes_from(self.nodes)
        g.add_edges_from(self.edges)
        return g


def build_temporal_dag(masks: StructureMasks, horizon: int) -> TemporalDag:
    """Unroll one-step ``masks`` into a ``TemporalDag`` over ``horizon`` steps."""
    if horizon < 2:
        raise StructuralAssumptionError("horizon must be at least 2")
    if not isinstance(masks, StructureMasks):
        masks = StructureMasks(*masks)
    ss, a = masks.m_s_to_s, masks.m_a_to_s
    d = masks.d
    edges = set()
    for t in range(horizon - 1):
        for j in range(d):
            if a[j]:
                edges.add((NodeRef.action(t), NodeRef.state(j, t + 1)))
            for i in range(d):
                if ss[i, j]:
                    edges.add((NodeRef.state(i, t), NodeRef.state(j, t + 1)))
    return TemporalDag(d, horizon, frozenset(edges))


def d_separated(g: TemporalDag, A, B, S=()) -> bool:
    """True iff every path between ``A`` and ``B`` is blocked by ``S``.

    Reachability ("Bayes ball") over (node, direction) states: a trail may pass
    a non-collider that is not in ``S``, and a collider that is in ``S`` or has
    a descendant in ``S``.
    """
    A, B, S = frozenset(A), frozenset(B), frozenset(S)
    if A & B or A & S or B & S:
        raise ValueError("A, B and S must be pairwise disjoint")
    unknown = (A | B | S) - g.nodes
    if unknown:
        raise ValueError(f"nodes not in graph: {sorted(map(str, unknown))}")
    if not A or not B:
        return True

    # nodes that are in S or have a descendant in S
    opens_collider = g.ancestors(S)
    UP, DOWN = 0, 1  # UP: arrived from a child; DOWN: arrived from a parent
    visited = set()
    stack = [(n, UP) for n in A]
    while stack:
        node, direction = stack.pop()
        if (node, direction) in visited:
            continue
        visited.add((node, direction))
        if node in B and node not in S:
            return False
        if direction == UP and node not in S:
            stack.extend((p, UP) for p in g.parents[node])
            stack.extend((c, DOWN) for c in g.children[node])
        elif direction == DOWN:
            if node not in S:
                stack.extend((c, DOWN) for c in g.children[node])
            if node in opens_collider:
                stack.extend((p, UP) for p in g.parents[node])
    return True


def _check_time(g: TemporalDag, t: int, lo: int, hi: int) -> None:
    if not lo <= t < hi:
        raise ValueError(f"timestep {t} outside [{lo}, {hi})")


def dais_exact(g: TemporalDag, t: int) -> DimSet:
    """Dims ``j`` with an edge ``a_{t-1} -> s^j_t``."""
    _check_time(g, t, 1, g.horizon)
    return frozenset(n.dim for n in g.children[NodeRef.action(t - 1)])


def _dais_or_empty(g: TemporalDag, t: int) -> DimSet:
    return dais_exact(g, t) if t >= 1 else frozenset()


def aia_exact(g: TemporalDag, t: int) -> DimSet:
    """Dims at time ``t`` that cause a member of DAIS_{t+1} but are not in DAIS_t.

    Edges only span one step, so "ancestor of DAIS_{t+1} at time t" means
    "parent of a DAIS_{t+1} node".
    """
    _check_time(g, t, 0, g.horizon - 1)
    dais_next = dais_exact(g, t + 1)
    parents = set()
    for j in dais_next:
        parents.update(p.dim for p in g.parents[NodeRef.state(j, t + 1)] if p.kind == STATE)
    return frozenset(parents) - _dais_or_empty(g, t)


def _state_nodes(dims: Iterable[int], t: int) -> FrozenSet[NodeRef]:
    return frozenset(NodeRef.state(j, t) for j in dims)


def verify_dais_characterization(g: TemporalDag) -> bool:
    """Check ``j in DAIS_{t+1}  <=>  a_t`` d-connected to ``s^j_{t+1}`` given DAIS_t."""
    for t in range(g.horizon - 1):
        cond = _state_nodes(_dais_or_empty(g, t), t)
        members = dais_exact(g, t + 1)
        for i in range(g.d):
            connected = not d_separated(g, {NodeRef.action(t)}, {NodeRef.state(i, t + 1)}, cond)
            if connected != (i in members):
                return False
    return True


def verify_aia_characterization(g: TemporalDag) -> bool:
    """Check ``i in AIA_{t-1}  <=>  a_{t-1}`` d-connected to ``s^i_{t-1}`` given DAIS_t.

    Only dims without a direct action edge into time ``t-1`` are checked.
    On graphs longer than one transition this can legitimately fail: a
    DAIS dim with an edge into a non-DAIS dim opens the fork
    ``a_{t-1} -> s^k_t <- s^k_{t-1} <- s^k_{t-2} -> s^i_{t-1}``.
    """
    for t in range(1, g.horizon):
        cond = _state_nodes(dais_exact(g, t), t)
        members = aia_exact(g, t - 1)
        direct = _dais_or_empty(g, t - 1)
        for i in range(g.d):
            if i in direct:
                continue
            connected = not d_separated(g, {NodeRef.action(t - 1)}, {NodeRef.state(i, t - 1)}, cond)
            if connected != (i in members):
                return False
    return True


# -- exact information quantities on discrete tables -----------------------------


@dataclass(frozen=True, eq=False)
class JointTable:
    """Dense joint probability table; axis ``k`` is variable ``k``."""

    probs: np.ndarray
    variables: Optional[Tuple] = None

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        if self.variables is not None:
            if len(self.variables) != p.ndim:
                raise DataError("one variable label per table axis is required")
            object.__setattr__(self, "variables", tuple(self.variables))

    @property
    def arities(self) -> Tuple[int, ...]:
        return self.probs.shape

    def check(self, tol: float = 1e-12) -> None:
        if (self.probs < 0).any():
            raise DataError("joint table has negative entries")
        total = self.probs.sum()
        if abs(total - 1.0) > tol:
            raise DataError(f"joint table sums to {total!r}, not 1")

    def index(self, var) -> int:
        if isinstance(var, (int, np.integer)):
            return int(var)
        if self.variables is None:
            raise KeyError(var)
        return self.variables.index(var)

    def marginal(self, keep: Sequence[int]) -> np.ndarray:
        drop = tuple(sorted(set(range(self.probs.ndim)) - set(keep)))
        m = self.probs.sum(axis=drop) if drop else self.probs
        kept = sorted(keep)
        return m.transpose([kept.index(k) for k in keep])


def cmi_from_joint(table: JointTable, X, Y, Z=()) -> float:
    """Exact ``I(X; Y | Z)`` in nats by full enumeration.

    ``X``, ``Y``, ``Z`` are collections of axis indices or variable labels.
    Cells with zero probability contribute nothing.
    """
    table.check()
    xs = [table.index(v) for v in X]
    ys = [table.index(v) for v in Y]
    zs = [table.index(v) for v in Z]
    if not xs or not ys:
        raise ValueError("X and Y must be non-empty")
    if len(set(xs + ys + zs)) != len(xs) + len(ys) + len(zs):
        raise ValueError("X, Y and Z must be disjoint")
    order = zs + xs + ys
    pxyz = table.marginal(order)
    nz = len(zs)
    nx_ = len(xs)
    pz = pxyz.sum(axis=tuple(range(nz, pxyz.ndim)), keepdims=True)
    pxz = pxyz.sum(axis=tuple(range(nz + nx_, pxyz.ndim)), keepdims=True)
    pyz = pxyz.sum(axis=tuple(range(nz, nz + nx_)), keepdims=True)
    mask = pxyz > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (pxyz * pz) / (pxz * pyz)
        terms = np.where(mask, pxyz * np.log(np.where(mask, ratio, 1.0)), 0.0)
    return max(0.0, float(terms.sum()))


# -- text format --------------------------------------------------------------


def dumps_graph(g: TemporalDag) -> str:
    lines = [f"d={g.d} horizon={g.horizon}"]
    for u, v in sorted(g.edges):
        lines.append(f"{u} -> {v}")
    return "\n".join(lines) + "\n"


def _parse_node(tok: str) -> NodeRef:
    name, t = tok.split(":")
    if name == "a":
        return NodeRef.action(int(t))
    if name.startswith("s"):
        return NodeRef.state(int(name[1:]), int(t))
    raise ValueError(f"bad node token {tok!r}")


def loads_graph(text: str) -> TemporalDag:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError("empty graph file")
    try:
        header = dict(kv.split("=") for kv in lines[0].split())
        d, horizon = int(header["d"]), int(header["horizon"])
    except (ValueError, KeyError) as exc:
        raise DataError(f"line 1: bad graph header {lines[0]!r}") from exc
    edges = set()
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split("->")
        if len(parts) != 2:
            raise DataError(f"line {lineno}: expected '<node> -> <node>'")
        try:
            edges.add((_parse_node(parts[0].strip()), _parse_node(parts[1].strip())))
        except ValueError as exc:
            raise DataError(f"line {lineno}: {exc}") from exc
    return TemporalDag(d, horizon, frozenset(edges))
