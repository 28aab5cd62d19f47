"""Learning the ILP weights with a structured SVM, plus the grid-search baseline.

The training signal is the best-effort assignment ``y'``: the feasible
selection closest to the ground truth that the candidate graph can express.
Weights minimise the regularised structured hinge loss

    L(w) = <Sw, y'> - min_y (<Sw, y> - Delta(y', y)) + lam * |w|^2

by subgradient descent; the inner minimum is the loss-augmented ILP.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .evaluation import ErrorReport, MATCH_RADIUS, evaluate, match_points
from .ilp import ConstraintSystem, SolveReport, solve, solve_linear
from .model import (
    CandidateGraph,
    LineageForest,
    as_assignment,
    as_weights,
    decode,
    encode,
    forest_from_links,
    objective_value,
)

log = logging.getLogger(__name__)

COST_BLOCKS = ("node", "track", "states", "edge")


class LearningDiverged(RuntimeError):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class HammingCosts:
    """Per-indicator costs of a false positive (``fp``) and a false negative (``fn``).

    Each may be a scalar or a mapping over the blocks ``node``, ``track``,
    ``states`` (parent/daughter/continue) and ``edge``; unnamed blocks cost 1.
    """

    fp: float | Mapping[str, float] = 1.0
    fn: float | Mapping[str, float] = 1.0

    def __post_init__(self) -> None:
        for side in (self.fp, self.fn):
            values = side.values() if isinstance(side, Mapping) else [side]
            if isinstance(side, Mapping) and set(side) - set(COST_BLOCKS):
                raise ValueError(f"unknown cost blocks {sorted(set(side) - set(COST_BLOCKS))}")
            if any(v < 0 for v in values):
                raise ValueError("Hamming costs must be >= 0")

    def _expand(self, side, graph: CandidateGraph) -> np.ndarray:
        per = dict.fromkeys(COST_BLOCKS, 1.0)
        if isinstance(side, Mapping):
            per.update(side)
        else:
            per = dict.fromkeys(COST_BLOCKS, float(side))
        v, e = graph.n_nodes, graph.n_edges
        return np.concatenate([
            np.full(v, per["node"]),
            np.full(v, per["track"]),
            np.full(3 * v, per["states"]),
            np.full(e, per["edge"]),
        ])

    def vectors(self, graph: CandidateGraph) -> tuple[np.ndarray, np.ndarray]:
        return self._expand(self.fp, graph), self._expand(self.fn, graph)

    def scaled(self, fp: float = 1.0, fn: float = 1.0) -> "HammingCosts":
        def scale(side, k):
            if isinstance(side, Mapping):
                return {b: c * k for b, c in side.items()} | {
                    b: k for b in COST_BLOCKS if b not in side
                }
            return side * k

        return HammingCosts(scale(self.fp, fp), scale(self.fn, fn))


@dataclass(frozen=True)
class LearnConfig:
    """Subgradient descent settings.

    The step at iteration k is ``step0 / (1 + k / step_decay)``. With
    ``step0=None`` it is ``max Hamming cost / n_indicators`` (the optimal
    weights scale with the costs while the subgradient does not), capped at
    ``1 / (4 lam)`` so the regulariser alone cannot make the iterates oscillate.
    Stops when the best loss has not improved by more than ``tol`` (relative)
    for ``patience`` iterations, or after ``max_iters``.
    """

    lam: float = 0.001
    max_iters: int = 500
    step0: float | None = None
    step_decay: float = 50.0
    tol: float = 1e-6
    patience: int = 100
    divergence_patience: int = 50
    init: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.max_iters < 0 or self.patience < 1 or self.divergence_patience < 1:
            raise ValueError("iteration counts must be non-negative (patience >= 1)")
        if self.step0 is not None and self.step0 <= 0:
            raise ValueError("step0 must be > 0")
        if self.init is not None:
            as_weights(self.init)


@dataclass
class BestEffort:
    y: np.ndarray
    matches: dict[int, int]  # gt node id -> detection id
    unmatched_gt: list[int]
    unreachable_edges: list[tuple[int, int]]  # gt edges

    @property
    def n_unreachable(self) -> int:
        return len(self.unreachable_edges)


def best_effort(
    graph: CandidateGraph,
    gt: LineageForest,
    match_radius: float = MATCH_RADIUS,
    constraints: ConstraintSystem | None = None,
) -> BestEffort:
    """Feasible assignment reproducing as much of ``gt`` as the candidate graph allows."""
    from .ilp import build_constraints

    cs = constraints if constraints is not None else build_constraints(graph)
    d2g = match_points(
        ((d.id, d.frame, d.position) for d in graph.nodes),
        ((n.id, n.frame, n.position) for n in gt.nodes),
        match_radius,
    )
    g2d = {g: d for d, g in d2g.items()}
    det = {d.id: d for d in graph.nodes}

    unreachable = []
    links = []
    for a, b in gt.edges:
        da, db = g2d.get(a), g2d.get(b)
        if da is None or db is None or (da, db) not in graph.edge_index:
            unreachable.append((a, b))
        else:
            links.append((a, b))

    nodes = {d: (det[d].frame, det[d].position) for d in d2g}
    states = {d: gt.by_id[g].state for d, g in d2g.items()}
    while True:
        forest = forest_from_links(nodes, [(g2d[a], g2d[b]) for a, b in links], states=states)
        y = encode(graph, forest)
        bad = cs.violated(y)
        if not len(bad):
            break
        edge_block = graph.block("edge")
        row = int(bad[0])
        cols = cs.A.indices[cs.A.indptr[row]:cs.A.indptr[row + 1]]
        chosen = [j - edge_block.start for j in cols if j >= edge_block.start and y[j]]
        if not chosen:
            raise RuntimeError(f"best-effort assignment infeasible without edges: {cs.describe(row)}")
        edge = graph.edges[chosen[0]]
        gt_edge = (d2g[edge.source], d2g[edge.target])
        log.info("best effort: dropping GT edge %s -> %s (%s)", *gt_edge, cs.describe(row))
        links.remove(gt_edge)
        unreachable.append(gt_edge)

    return BestEffort(
        y=y,
        matches=g2d,
        unmatched_gt=[n.id for n in gt.nodes if n.id not in g2d],
        unreachable_edges=sorted(unreachable),
    )


def hamming(yp: Sequence[int], y: Sequence[int], c_fp=1.0, c_fn=1.0) -> float:
    """Weighted disagreement: ``c_fn`` where ``yp`` is 1 and ``y`` 0, ``c_fp`` the other way."""
    yp = np.asarray(yp, dtype=float)
    y = np.asarray(y, dtype=float)
    if yp.shape != y.shape:
        raise ValueError(f"length mismatch: {yp.shape} vs {y.shape}")
    return float(np.sum(yp * (1 - y) * c_fn + (1 - yp) * y * c_fp))


def _augmented_costs(c: np.ndarray, yp: np.ndarray, c_fp: np.ndarray, c_fn: np.ndarray):
    """Linear coefficients and constant of ``<c, y> - Delta(yp, y)``."""
    adj = c + np.where(yp == 1, c_fn, -c_fp)
    const = -float(np.sum(c_fn[yp == 1]))
    return adj, const


def loss_augmented_solve(
    graph: CandidateGraph,
    S,
    w: Sequence[float],
    constraints: ConstraintSystem,
    yp: Sequence[int],
    costs: HammingCosts,
    *,
    lexicographic: bool = True,
) -> SolveReport:
    """``argmin_y <Sw, y> - Delta(yp, y)`` over feasible ``y``.

    The reported objective includes the constant part of ``-Delta``.
    """
    t0 = time.perf_counter()
    w = as_weights(w)
    yp = as_assignment(yp, graph)
    c = np.asarray(S @ w, dtype=float)
    c_fp, c_fn = costs.vectors(graph)
    adj, _ = _augmented_costs(c, yp, c_fp, c_fn)
    y = solve_linear(adj, constraints, lexicographic=lexicographic)
    delta = hamming(yp, y, c_fp, c_fn)
    return SolveReport(
        y=y,
        objective=objective_value(S, w, y) - delta,
        status="optimal",
        n_nodes=graph.n_nodes,
        n_edges=graph.n_edges,
        wall_time=time.perf_counter() - t0,
        extra={"delta": delta},
    )


def _loss(graph, S, constraints, yp, costs, w, lam, lexicographic=True):
    aug = loss_augmented_solve(graph, S, w, constraints, yp, costs, lexicographic=lexicographic)
    L = objective_value(S, w, yp) - aug.objective + lam * float(w @ w)
    yp_f = np.asarray(yp, dtype=float)
    grad = np.asarray(S.T @ yp_f - S.T @ aug.y.astype(float)).ravel() + 2 * lam * w
    return L, grad, aug


def ssvm_loss(
    graph: CandidateGraph,
    S,
    constraints: ConstraintSystem,
    yp: Sequence[int],
    costs: HammingCosts,
    w: Sequence[float],
    lam: float,
) -> tuple[float, np.ndarray]:
    """Structured hinge loss and one subgradient at ``w``."""
    L, grad, _ = _loss(graph, S, constraints, as_assignment(yp, graph), costs, as_weights(w), lam)
    return L, grad


def fit_weights(
    graph: CandidateGraph,
    S,
    constraints: ConstraintSystem,
    yp: Sequence[int],
    costs: HammingCosts,
    cfg: LearnConfig = LearnConfig(),
) -> tuple[np.ndarray, list[tuple[int, float, float]]]:
    """Subgradient descent on the structured hinge loss.

    Returns the iterate with the lowest loss and a trace of
    ``(iteration, loss, best loss so far)``.
    """
    yp = as_assignment(yp, graph)
    w = as_weights(cfg.init) if cfg.init is not None else np.zeros(S.shape[1])
    if cfg.step0 is not None:
        step0 = cfg.step0
    else:
        scale = max((float(v.max()) for v in costs.vectors(graph) if v.size), default=1.0)
        step0 = (scale if scale > 0 else 1.0) / max(1, graph.n_indicators)
        if cfg.lam > 0:
            step0 = min(step0, 0.25 / cfg.lam)
    trace: list[tuple[int, float, float]] = []
    best_w, best_L = w.copy(), np.inf
    since_best = 0
    rising = 0
    prev_L = np.inf
    for k in range(max(1, cfg.max_iters + 1)):
        # tie-breaking among loss-augmented optima does not change L, so skip it
        L, grad, _ = _loss(graph, S, constraints, yp, costs, w, cfg.lam, lexicographic=False)
        if L < best_L - cfg.tol * max(1.0, abs(best_L) if np.isfinite(best_L) else 1.0):
            since_best = 0
        else:
            since_best += 1
        if L < best_L:
            best_w, best_L = w.copy(), L
        trace.append((k, L, best_L))
        rising = rising + 1 if L > prev_L else 0
        prev_L = L
        if rising >= cfg.divergence_patience:
            raise LearningDiverged(f"loss rose for {rising} consecutive iterations", trace)
        if k >= cfg.max_iters or since_best >= cfg.patience or not np.any(grad):
            break
        w = w - step0 / (1.0 + k / cfg.step_decay) * grad
    log.info("fit_weights: %d iterations, best loss %.6g", len(trace), best_L)
    return best_w, trace


@dataclass
class GridRow:
    w: np.ndarray
    report: ErrorReport

    @property
    def error_sum(self) -> int:
        return self.report.sum


def grid_search(
    graph_val: CandidateGraph,
    S,
    constraints: ConstraintSystem,
    gt_val: LineageForest,
    grid: Sequence[Sequence[float]],
    *,
    radius: float = MATCH_RADIUS,
    division_tolerance: int = 1,
    exclude_polar: bool = False,
    workers: int = 1,
) -> tuple[np.ndarray, list[GridRow]]:
    """Solve and evaluate every grid point; pick the lowest error sum.

    Ties go to fewer division errors, then to the lexicographically
    smallest weight vector.
    """
    if not len(grid):
        raise ValueError("grid is empty")
    points = [as_weights(w) for w in grid]

    def run(w: np.ndarray) -> GridRow:
        rep = solve(graph_val, S, w, constraints)
        pred = decode(graph_val, rep.y)
        return GridRow(w, evaluate(
            pred, gt_val, radius=radius, division_tolerance=division_tolerance,
            exclude_polar=exclude_polar,
        ))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            table = list(pool.map(run, points))
    else:
        table = [run(w) for w in points]
    best = min(table, key=lambda r: (r.error_sum, r.report.div, tuple(r.w)))
    return best.w, table
