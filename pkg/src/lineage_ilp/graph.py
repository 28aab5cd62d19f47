"""Candidate graph construction from detections."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .model import CandidateGraph, Detection, Edge


@dataclass(frozen=True)
class GraphBuildConfig:
    max_edge_distance: float
    score_threshold: float = 0.2
    max_edge_candidates: int = 4
    polar_body_threshold: float | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("score_threshold must lie in [0, 1]")
        if not self.max_edge_distance > 0:
            raise ValueError("max_edge_distance must be > 0")
        if self.max_edge_candidates < 1:
            raise ValueError("max_edge_candidates must be >= 1")
        if self.polar_body_threshold is not None and not 0.0 <= self.polar_body_threshold <= 1.0:
            raise ValueError("polar_body_threshold must lie in [0, 1] or be None")


def filter_detections(dets: Iterable[Detection], cfg: GraphBuildConfig) -> list[Detection]:
    """Drop low-scoring candidates and, if enabled, likely polar bodies. Order is preserved."""
    out = []
    for d in dets:
        if d.score < cfg.score_threshold:
            continue
        if cfg.polar_body_threshold is not None and d.polar_score >= cfg.polar_body_threshold:
            continue
        out.append(d)
    return out


def build_graph(dets: Sequence[Detection], cfg: GraphBuildConfig) -> CandidateGraph:
    """Link each detection to its k nearest predecessors around its movement target.

    The movement target of ``v`` is ``v.position + v.movement``; an edge
    ``u -> v`` is proposed for the ``max_edge_candidates`` detections ``u`` of
    the previous frame closest to that target and within
    ``max_edge_distance``. The edge cost is that distance. Ties go to the
    lower node id.
    """
    by_frame: dict[int, list[Detection]] = defaultdict(list)
    for d in dets:
        by_frame[d.frame].append(d)
    for frame in by_frame:
        by_frame[frame].sort(key=lambda d: d.id)

    edges = []
    for frame in sorted(by_frame):
        prev = by_frame.get(frame - 1)
        if not prev:
            continue
        prev_pos = np.array([u.position for u in prev], dtype=float)
        prev_ids = np.array([u.id for u in prev], dtype=np.int64)
        for v in by_frame[frame]:
            target = np.asarray(v.position) + np.asarray(v.movement)
            dist = np.sqrt(((prev_pos - target) ** 2).sum(axis=1))
            # stable sort on distance keeps the id order among exact ties
            order = np.argsort(dist, kind="stable")[: cfg.max_edge_candidates]
            for k in order:
                if dist[k] <= cfg.max_edge_distance:
                    edges.append(Edge(int(prev_ids[k]), v.id, float(dist[k])))
    return CandidateGraph(tuple(dets), tuple(edges))
