"""Domain types shared by graph construction, solving, learning and evaluation.

Indicator layout
----------------
An assignment ``y`` over a :class:`CandidateGraph` is a binary vector of length
``5 * n_nodes + n_edges`` made of six consecutive blocks::

    [node | track | parent | daughter | continue | edge]

The first five blocks hold one entry per node in canonical node order
(sorted by ``(frame, id)``), the last block one entry per edge in canonical
edge order (sorted by ``(source, target)``).
"""
from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

STATES = ("parent", "daughter", "continue")
BLOCKS = ("node", "track", "parent", "daughter", "continue", "edge")
WEIGHT_NAMES = (
    "w_node_sel",
    "w_node_score",
    "w_track",
    "w_div",
    "w_parent",
    "w_daughter",
    "w_continue",
    "w_edge",
)
N_WEIGHTS = len(WEIGHT_NAMES)


def _clamp_unit(value: float, what: str) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"{what} is not finite: {value!r}")
    if value < 0.0 or value > 1.0:
        warnings.warn(f"{what}={value!r} outside [0, 1], clamped", stacklevel=4)
        value = min(1.0, max(0.0, value))
    return value


def _vec(values: Sequence[float], size: int, what: str) -> tuple[float, ...]:
    out = tuple(float(v) for v in values)
    if len(out) != size:
        raise ValueError(f"{what} must have {size} entries, got {len(out)}")
    if not all(math.isfinite(v) for v in out):
        raise ValueError(f"{what} has non-finite entries: {out!r}")
    return out


@dataclass(frozen=True)
class Detection:
    """A candidate nucleus.

    ``state_scores`` are ordered (parent, daughter, continue, polar_body).
    ``movement`` points from ``position`` toward the predicted location of
    the same (or parent) cell in the previous frame.
    """

    id: int
    frame: int
    position: tuple[float, float, float]
    score: float
    state_scores: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    movement: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if int(self.frame) != self.frame or self.frame < 0:
            raise ValueError(f"detection {self.id}: frame must be an integer >= 0")
        set_ = object.__setattr__
        set_(self, "id", int(self.id))
        set_(self, "frame", int(self.frame))
        set_(self, "position", _vec(self.position, 3, f"detection {self.id} position"))
        set_(self, "movement", _vec(self.movement, 3, f"detection {self.id} movement"))
        set_(self, "score", _clamp_unit(self.score, f"detection {self.id} score"))
        states = _vec(self.state_scores, 4, f"detection {self.id} state_scores")
        set_(
            self,
            "state_scores",
            tuple(_clamp_unit(s, f"detection {self.id} state score") for s in states),
        )

    @property
    def polar_score(self) -> float:
        return self.state_scores[3]


@dataclass(frozen=True)
class Edge:
    source: int
    target: int
    cost: float


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class CandidateGraph:
    """Detections plus forward one-frame candidate links.

    Nodes and edges are stored in canonical order regardless of the order
    they are passed in.
    """

    nodes: tuple[Detection, ...]
    edges: tuple[Edge, ...] = ()

    def __post_init__(self) -> None:
        nodes = tuple(sorted(self.nodes, key=lambda d: (d.frame, d.id)))
        edges = tuple(sorted(self.edges, key=lambda e: (e.source, e.target)))
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)

        frames = {}
        for d in nodes:
            if d.id in frames:
                raise GraphError(f"duplicate node id {d.id}")
            frames[d.id] = d.frame
        seen = set()
        for e in edges:
            if e.source not in frames or e.target not in frames:
                raise GraphError(f"edge {e.source}->{e.target} has a missing endpoint")
            if frames[e.target] != frames[e.source] + 1:
                raise GraphError(f"edge {e.source}->{e.target} does not span one frame forward")
            if not (e.cost >= 0.0 and math.isfinite(e.cost)):
                raise GraphError(f"edge {e.source}->{e.target} has invalid cost {e.cost!r}")
            if (e.source, e.target) in seen:
                raise GraphError(f"duplicate edge {e.source}->{e.target}")
            seen.add((e.source, e.target))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_indicators(self) -> int:
        return 5 * self.n_nodes + self.n_edges

    def block(self, name: str) -> slice:
        """Index range of one indicator block."""
        k = BLOCKS.index(name)
        v = self.n_nodes
        if name == "edge":
            return slice(5 * v, 5 * v + self.n_edges)
        return slice(k * v, (k + 1) * v)

    @cached_property
    def node_index(self) -> dict[int, int]:
        return {d.id: i for i, d in enumerate(self.nodes)}

    @cached_property
    def node_ids(self) -> np.ndarray:
        return np.array([d.id for d in self.nodes], dtype=np.int64)

    @cached_property
    def frames(self) -> np.ndarray:
        return np.array([d.frame for d in self.nodes], dtype=np.int64)

    @cached_property
    def positions(self) -> np.ndarray:
        return np.array([d.position for d in self.nodes], dtype=float).reshape(-1, 3)

    @cached_property
    def scores(self) -> np.ndarray:
        return np.array([d.score for d in self.nodes], dtype=float)

    @cached_property
    def state_scores(self) -> np.ndarray:
        return np.array([d.state_scores for d in self.nodes], dtype=float).reshape(-1, 4)

    @cached_property
    def edge_src(self) -> np.ndarray:
        """Node index (not id) of each edge source."""
        return np.array([self.node_index[e.source] for e in self.edges], dtype=np.int64)

    @cached_property
    def edge_dst(self) -> np.ndarray:
        return np.array([self.node_index[e.target] for e in self.edges], dtype=np.int64)

    @cached_property
    def edge_costs(self) -> np.ndarray:
        return np.array([e.cost for e in self.edges], dtype=float)

    @cached_property
    def edge_index(self) -> dict[tuple[int, int], int]:
        return {(e.source, e.target): j for j, e in enumerate(self.edges)}

    def subgraph(self, keep_ids: Iterable[int]) -> "CandidateGraph":
        keep = set(keep_ids)
        return CandidateGraph(
            tuple(d for d in self.nodes if d.id in keep),
            tuple(e for e in self.edges if e.source in keep and e.target in keep),
        )


def as_weights(w: Sequence[float] | Mapping[str, float]) -> np.ndarray:
    """Validate a weight vector; accepts a sequence or a name -> value mapping."""
    if isinstance(w, Mapping):
        unknown = set(w) - set(WEIGHT_NAMES)
        missing = set(WEIGHT_NAMES) - set(w)
        if unknown or missing:
            raise ValueError(f"bad weight names: unknown={sorted(unknown)} missing={sorted(missing)}")
        w = [w[name] for name in WEIGHT_NAMES]
    arr = np.asarray(w, dtype=float)
    if arr.shape != (N_WEIGHTS,):
        raise ValueError(f"weight vector must have {N_WEIGHTS} entries, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("weight vector has non-finite entries")
    return arr


def weights_to_dict(w: Sequence[float]) -> dict[str, float]:
    return {name: float(v) for name, v in zip(WEIGHT_NAMES, as_weights(w))}


def as_assignment(y: Sequence[int], graph: CandidateGraph | None = None) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValueError("assignment must be one-dimensional")
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise ValueError("assignment entries must be 0 or 1")
    if graph is not None and arr.size != graph.n_indicators:
        raise ValueError(f"assignment has length {arr.size}, graph needs {graph.n_indicators}")
    return arr.astype(np.uint8)


def build_feature_matrix(graph: CandidateGraph) -> sp.csr_matrix:
    """Sparse ``(5|V| + |E|) x 8`` matrix whose product with ``w`` gives per-indicator costs."""
    v, e = graph.n_nodes, graph.n_edges
    nodes = np.arange(v)
    ss = graph.state_scores
    rows = np.concatenate([
        nodes, nodes,          # node block: 1, candidate score
        v + nodes,             # track start: 1
        2 * v + nodes,         # parent: division constant
        2 * v + nodes,         # parent: parent score
        3 * v + nodes,         # daughter score
        4 * v + nodes,         # continue score
        5 * v + np.arange(e),  # edge cost
    ])
    cols = np.concatenate([
        np.full(v, 0), np.full(v, 1), np.full(v, 2), np.full(v, 3),
        np.full(v, 4), np.full(v, 5), np.full(v, 6), np.full(e, 7),
    ])
    vals = np.concatenate([
        np.ones(v), graph.scores, np.ones(v), np.ones(v),
        ss[:, 0], ss[:, 1], ss[:, 2], graph.edge_costs,
    ])
    return sp.csr_matrix((vals, (rows, cols)), shape=(graph.n_indicators, N_WEIGHTS))


def objective_value(S: sp.spmatrix | np.ndarray, w: Sequence[float], y: Sequence[int]) -> float:
    """``<S w, y>``."""
    w = as_weights(w)
    y = np.asarray(y, dtype=float)
    if S.shape[1] != w.size or S.shape[0] != y.size:
        raise ValueError(f"dimension mismatch: S {S.shape}, w {w.shape}, y {y.shape}")
    return float(y @ (S @ w))


# --------------------------------------------------------------------------
# Lineage forests


@dataclass(frozen=True)
class ForestNode:
    id: int
    frame: int
    position: tuple[float, float, float]
    state: str
    track_id: int
    polar: bool = False


class ForestError(ValueError):
    pass


@dataclass(frozen=True)
class LineageForest:
    """Selected nodes and links forming a forest that only branches forward in time."""

    nodes: tuple[ForestNode, ...]
    edges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(sorted(self.nodes, key=lambda n: (n.frame, n.id))))
        object.__setattr__(self, "edges", tuple(sorted((int(a), int(b)) for a, b in self.edges)))

    @cached_property
    def by_id(self) -> dict[int, ForestNode]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def parent(self) -> dict[int, int]:
        return {b: a for a, b in self.edges}

    @cached_property
    def children(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = defaultdict(list)
        for a, b in self.edges:
            out[a].append(b)
        return dict(out)

    @cached_property
    def frames(self) -> list[int]:
        return sorted({n.frame for n in self.nodes})

    def divisions(self) -> list[int]:
        return [a for a, kids in self.children.items() if len(kids) == 2]

    def validate(self) -> None:
        """Raise :class:`ForestError` if the forest invariants do not hold."""
        by_id = {}
        for n in self.nodes:
            if n.id in by_id:
                raise ForestError(f"duplicate node id {n.id}")
            if n.state not in STATES:
                raise ForestError(f"node {n.id} has unknown state {n.state!r}")
            by_id[n.id] = n
        indeg: dict[int, int] = defaultdict(int)
        outdeg: dict[int, int] = defaultdict(int)
        for a, b in self.edges:
            if a not in by_id or b not in by_id:
                raise ForestError(f"edge {a}->{b} references a missing node")
            if by_id[b].frame != by_id[a].frame + 1:
                raise ForestError(f"edge {a}->{b} does not go one frame forward")
            indeg[b] += 1
            outdeg[a] += 1
        for nid, d in indeg.items():
            if d > 1:
                raise ForestError(f"node {nid} has {d} predecessors")
        for nid, d in outdeg.items():
            if d > 2:
                raise ForestError(f"node {nid} has {d} successors")
            if d == 2 and by_id[nid].state != "parent":
                raise ForestError(f"node {nid} divides but is labelled {by_id[nid].state}")

    def without(self, drop_ids: Iterable[int]) -> "LineageForest":
        """Remove nodes and incident edges; states and track ids are recomputed."""
        drop = set(drop_ids)
        kept = [n for n in self.nodes if n.id not in drop]
        edges = [(a, b) for a, b in self.edges if a not in drop and b not in drop]
        return forest_from_links(
            {n.id: (n.frame, n.position) for n in kept},
            edges,
            polar={n.id for n in kept if n.polar},
        )

    def without_polar(self) -> "LineageForest":
        return self.without(n.id for n in self.nodes if n.polar)


def assign_track_ids(
    node_frames: Mapping[int, int], edges: Iterable[tuple[int, int]]
) -> dict[int, int]:
    """Track ids: a new id at every track start and at both daughters of a division.

    Ids are 1-based and handed out in (frame, id) order.
    """
    parent = {}
    kids: dict[int, int] = defaultdict(int)
    for a, b in edges:
        parent[b] = a
        kids[a] += 1
    track = {}
    next_id = 1
    for nid in sorted(node_frames, key=lambda i: (node_frames[i], i)):
        p = parent.get(nid)
        if p is None or kids[p] > 1:
            track[nid] = next_id
            next_id += 1
        else:
            track[nid] = track[p]
    return track


def topology_states(
    node_ids: Iterable[int], edges: Iterable[tuple[int, int]]
) -> dict[int, str]:
    """parent if two children, daughter if its parent has two children, else continue.

    A node that would be both (divides right after being born) is labelled parent.
    """
    edges = list(edges)
    kids: dict[int, int] = defaultdict(int)
    parent = {}
    for a, b in edges:
        kids[a] += 1
        parent[b] = a
    states = {}
    for nid in node_ids:
        if kids[nid] == 2:
            states[nid] = "parent"
        elif nid in parent and kids[parent[nid]] == 2:
            states[nid] = "daughter"
        else:
            states[nid] = "continue"
    return states


def forest_from_links(
    nodes: Mapping[int, tuple[int, Sequence[float]]],
    edges: Iterable[tuple[int, int]],
    polar: Iterable[int] = (),
    states: Mapping[int, str] | None = None,
) -> LineageForest:
    """Build a forest from ``id -> (frame, position)`` and links.

    States default to the topology rule of :func:`topology_states`.
    """
    edges = [(int(a), int(b)) for a, b in edges]
    polar = set(polar)
    if states is None:
        states = topology_states(nodes, edges)
    tracks = assign_track_ids({i: f for i, (f, _) in nodes.items()}, edges)
    fnodes = tuple(
        ForestNode(
            id=int(i),
            frame=int(f),
            position=tuple(float(x) for x in pos),
            state=states[i],
            track_id=tracks[i],
            polar=i in polar,
        )
        for i, (f, pos) in nodes.items()
    )
    return LineageForest(fnodes, tuple(edges))


def decode(
    graph: CandidateGraph, y: Sequence[int], polar: Iterable[int] = ()
) -> LineageForest:
    """Turn a (feasible) assignment into the selected lineage forest."""
    y = as_assignment(y, graph)
    v = graph.n_nodes
    node_sel = y[:v].astype(bool)
    parent, daughter = y[2 * v:3 * v], y[3 * v:4 * v]
    nodes = {}
    states = {}
    for i in np.flatnonzero(node_sel):
        d = graph.nodes[i]
        nodes[d.id] = (d.frame, d.position)
        states[d.id] = "parent" if parent[i] else ("daughter" if daughter[i] else "continue")
    edges = [
        (e.source, e.target)
        for e, sel in zip(graph.edges, y[graph.block("edge")])
        if sel
    ]
    return forest_from_links(nodes, edges, polar=set(polar) & set(nodes), states=states)


def encode(graph: CandidateGraph, forest: LineageForest) -> np.ndarray:
    """Indicator vector of a forest whose nodes and edges live in ``graph``.

    Track starts are set exactly where a selected node has no selected
    incoming edge.
    """
    v = graph.n_nodes
    y = np.zeros(graph.n_indicators, dtype=np.uint8)
    has_parent = set(forest.parent)
    for n in forest.nodes:
        try:
            i = graph.node_index[n.id]
        except KeyError:
            raise GraphError(f"forest node {n.id} is not in the graph") from None
        y[i] = 1
        y[(2 + STATES.index(n.state)) * v + i] = 1
        if n.id not in has_parent:
            y[v + i] = 1
    for a, b in forest.edges:
        try:
            j = graph.edge_index[(a, b)]
        except KeyError:
            raise GraphError(f"forest edge {a}->{b} is not in the graph") from None
        y[5 * v + j] = 1
    return y
