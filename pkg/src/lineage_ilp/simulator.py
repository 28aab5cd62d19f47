"""Synthetic lineages and noisy detections standing in for learned predictors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Detection, LineageForest, forest_from_links

# rows/columns: parent, daughter, continue, polar body
IDENTITY_CONFUSION = (
    (1.0, 0.0, 0.0, 0.0),
    (0.0, 1.0, 0.0, 0.0),
    (0.0, 0.0, 1.0, 0.0),
    (0.0, 0.0, 0.0, 1.0),
)
_STATE_ROW = {"parent": 0, "daughter": 1, "continue": 2}


@dataclass(frozen=True)
class SimConfig:
    """Ground-truth dynamics and the detection noise model.

    ``min_cycle`` is the minimum number of frames between a cell's birth and
    its own division; it must be at least 1 so that no node is both a
    daughter and a parent.
    """

    seed: int = 0
    n_frames: int = 50
    n_initial: int = 4
    division_prob: float = 0.02
    min_cycle: int = 1
    box: tuple[float, float, float] = (100.0, 100.0, 100.0)
    motion_std: float = 1.0
    division_offset: float = 6.0
    n_polar: int = 0
    polar_lifetime: int = 50
    polar_motion_std: float = 0.1
    # extra localisation noise for polar bodies, which are small and faint
    polar_jitter_std: float = 0.0
    # detection noise
    dropout: float = 0.0
    clutter_rate: float = 0.0
    jitter_std: float = 0.0
    jitter_scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    movement_noise_std: float = 0.0
    clutter_movement_std: float = 5.0
    # score model
    cell_score_mean: float = 0.9
    cell_score_std: float = 0.0
    clutter_score_mean: float = 0.4
    clutter_score_std: float = 0.0
    state_confusion: tuple[tuple[float, ...], ...] = field(default=IDENTITY_CONFUSION)
    state_noise_std: float = 0.0

    def __post_init__(self) -> None:
        for name in ("division_prob", "dropout"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in (
            "motion_std", "polar_motion_std", "polar_jitter_std", "jitter_std", "movement_noise_std",
            "clutter_movement_std", "cell_score_std", "clutter_score_std", "state_noise_std",
            "clutter_rate", "division_offset",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_frames < 1 or self.n_initial < 0 or self.n_polar < 0 or self.polar_lifetime < 1:
            raise ValueError("n_frames and polar_lifetime must be >= 1, counts >= 0")
        if self.min_cycle < 1:
            raise ValueError("min_cycle must be >= 1")
        conf = np.asarray(self.state_confusion, dtype=float)
        if conf.shape != (4, 4) or np.any(conf < 0) or not np.allclose(conf.sum(axis=1), 1.0):
            raise ValueError("state_confusion must be 4x4 with non-negative rows summing to 1")
        if len(self.box) != 3 or min(self.box) <= 0:
            raise ValueError("box must be three positive extents")


def _reflect(pos: np.ndarray, box: np.ndarray) -> np.ndarray:
    pos = np.where(pos < 0, -pos, pos)
    pos = np.where(pos > box, 2 * box - pos, pos)
    return np.clip(pos, 0, box)


def simulate_gt(cfg: SimConfig) -> LineageForest:
    """Brownian cells with binary divisions plus near-static polar bodies."""
    rng = np.random.default_rng([cfg.seed, 0])
    box = np.asarray(cfg.box, dtype=float)
    nodes: dict[int, tuple[int, np.ndarray]] = {}
    edges: list[tuple[int, int]] = []
    polar: set[int] = set()
    next_id = 0

    def new_node(frame: int, pos: np.ndarray) -> int:
        nonlocal next_id
        nodes[next_id] = (frame, pos)
        next_id += 1
        return next_id - 1

    # each live cell: (node id, birth frame); initial cells may divide at once
    cells = [(new_node(0, rng.uniform(0, box)), -cfg.min_cycle) for _ in range(cfg.n_initial)]
    bodies = [new_node(0, rng.uniform(0, box)) for _ in range(cfg.n_polar)]
    polar.update(bodies)

    for t in range(cfg.n_frames - 1):
        nxt = []
        for nid, born in cells:
            pos = nodes[nid][1]
            if t - born >= cfg.min_cycle and rng.random() < cfg.division_prob:
                direction = rng.normal(size=3)
                direction /= np.linalg.norm(direction)
                for sign in (1.0, -1.0):
                    child = new_node(t + 1, _reflect(pos + sign * cfg.division_offset * direction, box))
                    edges.append((nid, child))
                    nxt.append((child, t + 1))
            else:
                child = new_node(t + 1, _reflect(pos + rng.normal(0, cfg.motion_std, 3), box))
                edges.append((nid, child))
                nxt.append((child, born))
        cells = nxt
        if t + 1 < cfg.polar_lifetime:
            moved = []
            for nid in bodies:
                pos = nodes[nid][1] + rng.normal(0, cfg.polar_motion_std, 3)
                child = new_node(t + 1, _reflect(pos, box))
                edges.append((nid, child))
                polar.add(child)
                moved.append(child)
            bodies = moved
    return forest_from_links(nodes, edges, polar=polar)


def render_detections(
    gt: LineageForest, cfg: SimConfig, *, return_truth: bool = False
) -> list[Detection] | tuple[list[Detection], dict[int, int | None]]:
    """Noisy candidate detections of ``gt`` plus clutter.

    With ``return_truth`` also returns ``detection id -> gt node id`` (None
    for clutter).
    """
    rng = np.random.default_rng([cfg.seed, 1])
    box = np.asarray(cfg.box, dtype=float)
    jitter = cfg.jitter_std * np.asarray(cfg.jitter_scale, dtype=float)
    conf = np.asarray(cfg.state_confusion, dtype=float)

    def clip(x):
        return np.clip(x, 0.0, 1.0)

    dets: list[Detection] = []
    truth: dict[int, int | None] = {}
    by_frame: dict[int, list] = {}
    shift: dict[int, np.ndarray] = {}
    for n in gt.nodes:
        by_frame.setdefault(n.frame, []).append(n)
    frames = range(max(by_frame) + 1) if by_frame else range(0)
    for t in frames:
        for n in by_frame.get(t, ()):
            if rng.random() < cfg.dropout:
                continue
            true_pos = np.asarray(n.position)
            pos = true_pos + rng.normal(0, 1, 3) * jitter
            if n.polar and cfg.polar_jitter_std > 0:
                # apparent displacement; the movement estimate follows it
                shift[n.id] = rng.normal(0, cfg.polar_jitter_std, 3)
                pos = pos + shift[n.id]
            parent = gt.parent.get(n.id)
            if parent is not None:
                target = np.asarray(gt.by_id[parent].position) + shift.get(parent, 0.0)
            else:
                target = true_pos + shift.get(n.id, 0.0)
            movement = target - pos + rng.normal(0, cfg.movement_noise_std, 3)
            row = conf[3] if n.polar else conf[_STATE_ROW[n.state]]
            states = clip(row + rng.normal(0, cfg.state_noise_std, 4))
            score = clip(rng.normal(cfg.cell_score_mean, cfg.cell_score_std))
            det = Detection(len(dets), t, tuple(pos), float(score), tuple(states), tuple(movement))
            truth[det.id] = n.id
            dets.append(det)
        for _ in range(rng.poisson(cfg.clutter_rate)):
            pos = rng.uniform(0, box)
            movement = rng.normal(0, cfg.clutter_movement_std, 3)
            score = clip(rng.normal(cfg.clutter_score_mean, cfg.clutter_score_std))
            states = rng.dirichlet(np.ones(4))
            det = Detection(len(dets), t, tuple(pos), float(score), tuple(states), tuple(movement))
            truth[det.id] = None
            dets.append(det)
    if return_truth:
        return dets, truth
    return dets
