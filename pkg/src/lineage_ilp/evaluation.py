"""Compare a predicted lineage forest with ground truth.

Nodes are matched per frame by minimum total distance within a radius.
Link errors follow this taxonomy:

* FP edge: predicted link with an unmatched endpoint.
* IS (identity switch): predicted link between two matched nodes whose
  ground-truth counterparts are not linked. It replaces the ground-truth
  link into the same target, which is therefore not also counted as FN.
* FN edge: ground-truth link that is not reconstructed and not displaced by
  an identity switch.
* FP/FN division: a division on one side with no division on the other side
  within ``division_tolerance`` frames along the same lineage.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .model import LineageForest

MATCH_RADIUS = 15.0
# node split, false negative node, false positive node, edge delete, add, semantic change
AOGM_WEIGHTS = {"ns": 5.0, "fn": 10.0, "fp": 1.0, "ed": 1.0, "ea": 1.5, "ec": 1.0}


@dataclass(frozen=True)
class Correspondence:
    pred_to_gt: dict[int, int]
    gt_to_pred: dict[int, int]
    unmatched_gt: tuple[int, ...]
    unmatched_pred: tuple[int, ...]


@dataclass
class ErrorReport:
    fp_edges: int
    fn_edges: int
    identity_switches: int
    fp_divisions: int
    fn_divisions: int
    fp_nodes: int
    fn_nodes: int
    n_gt_edges: int
    n_gt_nodes: int
    det: float | None = None
    tra: float | None = None
    unreachable_gt_edges: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def div(self) -> int:
        return self.fp_divisions + self.fn_divisions

    @property
    def sum(self) -> int:
        return self.fp_edges + self.fn_edges + self.identity_switches + self.div

    def counts(self) -> dict[str, int]:
        return {
            "fp_edges": self.fp_edges,
            "fn_edges": self.fn_edges,
            "identity_switches": self.identity_switches,
            "fp_divisions": self.fp_divisions,
            "fn_divisions": self.fn_divisions,
            "div": self.div,
            "sum": self.sum,
        }

    def normalized(self) -> dict[str, float]:
        """Error counts per 1000 ground-truth edges."""
        scale = 1000.0 / self.n_gt_edges if self.n_gt_edges else float("nan")
        return {k: v * scale for k, v in self.counts().items()}

    def to_dict(self) -> dict:
        out = asdict(self)
        extra = out.pop("extra")
        out["div"] = self.div
        out["sum"] = self.sum
        out["per_1000_gt_edges"] = self.normalized()
        out.update(extra)
        return out

    def summary(self) -> str:
        labels = ("FP", "FN", "IS", "FPdiv", "FNdiv", "div", "sum")
        norm = self.normalized()
        lines = [f"{'':>6} {'count':>7} {'/1000 GT':>9}"]
        for label, (key, count) in zip(labels, self.counts().items()):
            lines.append(f"{label:>6} {count:>7} {norm[key]:>9.3f}")
        lines.append(
            f"GT nodes {self.n_gt_nodes}, GT edges {self.n_gt_edges}, "
            f"FP nodes {self.fp_nodes}, FN nodes {self.fn_nodes}"
        )
        if self.det is not None:
            lines.append(f"DET-style {self.det:.5f}  TRA-style {self.tra:.5f}")
        if self.unreachable_gt_edges is not None:
            lines.append(f"unreachable GT edges {self.unreachable_gt_edges}")
        return "\n".join(lines)


def match_points(
    pred: Iterable[tuple[int, int, Sequence[float]]],
    gt: Iterable[tuple[int, int, Sequence[float]]],
    radius: float = MATCH_RADIUS,
) -> dict[int, int]:
    """Match ``(id, frame, position)`` items frame by frame; returns ``pred id -> gt id``.

    Within each frame the matching has the largest possible size and, among
    those, the smallest total distance; pairs farther apart than ``radius``
    are never matched.
    """
    pred_by_frame: dict[int, list] = defaultdict(list)
    gt_by_frame: dict[int, list] = defaultdict(list)
    for item in pred:
        pred_by_frame[item[1]].append(item)
    for item in gt:
        gt_by_frame[item[1]].append(item)

    p2g: dict[int, int] = {}
    for frame, gts in gt_by_frame.items():
        preds = pred_by_frame.get(frame)
        if not preds:
            continue
        d = cdist([g[2] for g in gts], [p[2] for p in preds])
        ok = d <= radius
        if not ok.any():
            continue
        # any feasible pair must beat leaving a node unmatched
        big = radius * (min(d.shape) + 1) + 1.0
        rows, cols = linear_sum_assignment(np.where(ok, d, big))
        for r, c in zip(rows, cols):
            if ok[r, c]:
                p2g[preds[c][0]] = gts[r][0]
    return p2g


def match_nodes(pred: LineageForest, gt: LineageForest, radius: float = MATCH_RADIUS) -> Correspondence:
    """One-to-one per-frame node matching within ``radius`` (see :func:`match_points`)."""
    p2g = match_points(
        ((n.id, n.frame, n.position) for n in pred.nodes),
        ((n.id, n.frame, n.position) for n in gt.nodes),
        radius,
    )
    g2p = {g: p for p, g in p2g.items()}
    return Correspondence(
        pred_to_gt=p2g,
        gt_to_pred=g2p,
        unmatched_gt=tuple(n.id for n in gt.nodes if n.id not in g2p),
        unmatched_pred=tuple(n.id for n in pred.nodes if n.id not in p2g),
    )


def _lineage_window(forest: LineageForest, nid: int, tol: int) -> set[int]:
    """``nid`` plus ancestors and descendants at most ``tol`` links away."""
    out = {nid}
    cur = nid
    for _ in range(tol):
        cur = forest.parent.get(cur)
        if cur is None:
            break
        out.add(cur)
    frontier = [nid]
    for _ in range(tol):
        frontier = [k for f in frontier for k in forest.children.get(f, ())]
        out.update(frontier)
    return out


def _division_errors(
    source: LineageForest, other: LineageForest, match: Mapping[int, int], tol: int
) -> list[int]:
    """Divisions in ``source`` with no division in ``other`` near the matched lineage."""
    other_div = set(other.divisions())
    missed = []
    for nid in source.divisions():
        near = _lineage_window(source, nid, tol)
        if not any(match.get(k) in other_div for k in near):
            missed.append(nid)
    return missed


def _edge_classes(pred: LineageForest, gt: LineageForest, corr: Correspondence):
    gt_edges = set(gt.edges)
    p2g, g2p = corr.pred_to_gt, corr.gt_to_pred
    fp, is_, ok = [], [], []
    switched_into = set()
    for a, b in pred.edges:
        ga, gb = p2g.get(a), p2g.get(b)
        if ga is None or gb is None:
            fp.append((a, b))
        elif (ga, gb) in gt_edges:
            ok.append((a, b))
        else:
            is_.append((a, b))
            switched_into.add(gb)
    pred_edges = set(pred.edges)
    fn, missing = [], []
    for ga, gb in gt.edges:
        pa, pb = g2p.get(ga), g2p.get(gb)
        if pa is not None and pb is not None and (pa, pb) in pred_edges:
            continue
        missing.append((ga, gb))
        if gb not in switched_into:
            fn.append((ga, gb))
    return fp, is_, ok, fn, missing


def count_errors(
    pred: LineageForest,
    gt: LineageForest,
    correspondence: Correspondence,
    division_tolerance: int = 1,
) -> ErrorReport:
    fp, is_, _, fn, _ = _edge_classes(pred, gt, correspondence)
    fp_div = _division_errors(pred, gt, correspondence.pred_to_gt, division_tolerance)
    fn_div = _division_errors(gt, pred, correspondence.gt_to_pred, division_tolerance)
    return ErrorReport(
        fp_edges=len(fp),
        fn_edges=len(fn),
        identity_switches=len(is_),
        fp_divisions=len(fp_div),
        fn_divisions=len(fn_div),
        fp_nodes=len(correspondence.unmatched_pred),
        fn_nodes=len(correspondence.unmatched_gt),
        n_gt_edges=len(gt.edges),
        n_gt_nodes=len(gt.nodes),
    )


def det_tra(
    pred: LineageForest,
    gt: LineageForest,
    correspondence: Correspondence,
    weights: Mapping[str, float] = AOGM_WEIGHTS,
) -> tuple[float, float]:
    """Graph-edit scores in the style of the tracking-challenge DET and TRA measures.

    Points matched by radius stand in for mask overlap, so a predicted node
    never covers two ground-truth nodes and the split term is always zero.
    """
    if not gt.nodes:
        raise ValueError("ground truth is empty")
    w = weights
    ns = 0
    fn_nodes = len(correspondence.unmatched_gt)
    fp_nodes = len(correspondence.unmatched_pred)
    node_cost = w["ns"] * ns + w["fn"] * fn_nodes + w["fp"] * fp_nodes

    fp, is_, ok, _, missing = _edge_classes(pred, gt, correspondence)
    p2g = correspondence.pred_to_gt
    ed = len(fp) + len(is_)
    ea = len(missing)
    ec = sum(
        1
        for a, b in ok
        if (len(pred.children.get(a, ())) == 2) != (len(gt.children.get(p2g[a], ())) == 2)
    )
    det_zero = w["fn"] * len(gt.nodes)
    tra_zero = det_zero + w["ea"] * len(gt.edges)
    det = 1.0 - min(node_cost, det_zero) / det_zero
    tra_cost = node_cost + w["ed"] * ed + w["ea"] * ea + w["ec"] * ec
    tra = 1.0 - min(tra_cost, tra_zero) / tra_zero
    return det, tra


def tracklet_fraction(
    pred: LineageForest,
    gt: LineageForest,
    correspondence: Correspondence,
    max_window: int,
    division_tolerance: int = 1,
) -> list[tuple[int, int, float]]:
    """Fraction of error-free ground-truth tracklets for each length ``1..max_window``.

    A tracklet of length ``l`` is a chain of ``l`` consecutive ground-truth
    links. It is correct when all its links are reconstructed and none of
    its nodes is unmatched or involved in a division error. Returns
    ``(length, n_tracklets, fraction)``; fraction is NaN when no tracklet of
    that length exists.
    """
    if max_window < 1:
        raise ValueError("max_window must be >= 1")
    g2p = correspondence.gt_to_pred
    pred_edges = set(pred.edges)
    bad_nodes = set(correspondence.unmatched_gt)
    bad_nodes.update(_division_errors(gt, pred, g2p, division_tolerance))
    p2g = correspondence.pred_to_gt
    bad_nodes.update(p2g[p] for p in _division_errors(pred, gt, p2g, division_tolerance) if p in p2g)

    depth: dict[int, int] = {}
    run: dict[int, int] = {}
    for n in gt.nodes:  # frame order, so parents come first
        p = gt.parent.get(n.id)
        if p is None:
            depth[n.id] = 0
            run[n.id] = 0
            continue
        depth[n.id] = depth[p] + 1
        good_edge = (g2p.get(p), g2p.get(n.id)) in pred_edges
        if n.id in bad_nodes or p in bad_nodes or not good_edge:
            run[n.id] = 0
        else:
            run[n.id] = run[p] + 1
    depths = np.array(list(depth.values()), dtype=np.int64)
    runs = np.array([run[k] for k in depth], dtype=np.int64)
    curve = []
    for length in range(1, max_window + 1):
        total = int((depths >= length).sum())
        good = int((runs >= length).sum())
        curve.append((length, total, good / total if total else float("nan")))
    return curve


def evaluate(
    pred: LineageForest,
    gt: LineageForest,
    *,
    radius: float = MATCH_RADIUS,
    division_tolerance: int = 1,
    exclude_polar: bool = False,
) -> ErrorReport:
    """Match, count errors and attach the DET/TRA-style scores."""
    if exclude_polar:
        gt = gt.without_polar()
        pred = pred.without_polar()
    corr = match_nodes(pred, gt, radius)
    report = count_errors(pred, gt, corr, division_tolerance)
    if gt.nodes:
        report.det, report.tra = det_tra(pred, gt, corr)
    return report
