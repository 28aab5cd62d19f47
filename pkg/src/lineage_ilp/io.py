"""Text file formats and run configuration.

All writers emit ``repr`` floats so that a write/parse cycle reproduces the
in-memory values bit for bit.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import fields
from pathlib import Path
from typing import Any, Iterable, Literal, Mapping, Sequence

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .graph import GraphBuildConfig
from .model import (
    STATES,
    WEIGHT_NAMES,
    CandidateGraph,
    Detection,
    Edge,
    GraphError,
    LineageForest,
    as_weights,
    forest_from_links,
    weights_to_dict,
)
from .simulator import SimConfig
from .ssvm import HammingCosts, LearnConfig

DETECTION_COLUMNS = (
    "id", "frame", "z", "y", "x", "score",
    "s_parent", "s_daughter", "s_continue", "s_polar", "mz", "my", "mx",
)
EDGE_COLUMNS = ("source", "target", "cost")
TRACK_NODE_COLUMNS = ("id", "label", "frame", "z", "y", "x", "state")
TRACKS_FILE = "tracks.txt"
TRACK_NODES_FILE = "nodes.csv"
GRAPH_NODES_FILE = "nodes.csv"
GRAPH_EDGES_FILE = "edges.csv"


class FormatError(ValueError):
    """A malformed input file; the message names the file, line and column."""

    def __init__(self, path, line: int | None, message: str, column: str | None = None):
        where = f"{path}"
        if line is not None:
            where += f":{line}"
        if column is not None:
            where += f" [{column}]"
        super().__init__(f"{where}: {message}")
        self.path, self.line, self.column = str(path), line, column


def _fmt(x: float) -> str:
    return repr(float(x))


def _int(text: str, path, line: int, column: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise FormatError(path, line, f"expected an integer, got {text!r}", column) from None


def _float(text: str, path, line: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise FormatError(path, line, f"expected a number, got {text!r}", column) from None
    if not math.isfinite(value):
        raise FormatError(path, line, f"non-finite value {text!r}", column)
    return value


def _read_rows(path: Path, columns: Sequence[str]) -> Iterable[tuple[int, dict[str, str]]]:
    """Yield ``(line number, row)`` after checking the header."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(path, 1, "missing header row")
        if tuple(h.strip() for h in header) != tuple(columns):
            raise FormatError(path, 1, f"header must be {','.join(columns)}, got {','.join(header)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(columns):
                raise FormatError(path, line, f"expected {len(columns)} fields, got {len(row)}")
            yield line, dict(zip(columns, (c.strip() for c in row)))


def _write_rows(path: Path, columns: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


# --------------------------------------------------------------------------
# detections


def write_detections(path, dets: Iterable[Detection]) -> None:
    rows = []
    for d in sorted(dets, key=lambda d: (d.frame, d.id)):
        rows.append([
            str(d.id), str(d.frame), *map(_fmt, d.position), _fmt(d.score),
            *map(_fmt, d.state_scores), *map(_fmt, d.movement),
        ])
    _write_rows(Path(path), DETECTION_COLUMNS, rows)


def read_detections(path) -> list[Detection]:
    path = Path(path)
    dets = []
    seen: dict[int, int] = {}
    for line, row in _read_rows(path, DETECTION_COLUMNS):
        nid = _int(row["id"], path, line, "id")
        if nid in seen:
            raise FormatError(path, line, f"duplicate id {nid} (first on line {seen[nid]})", "id")
        seen[nid] = line
        frame = _int(row["frame"], path, line, "frame")
        if frame < 0:
            raise FormatError(path, line, "frame must be >= 0", "frame")
        num = {c: _float(row[c], path, line, c) for c in DETECTION_COLUMNS[2:]}
        for c in ("score", "s_parent", "s_daughter", "s_continue", "s_polar"):
            if not 0.0 <= num[c] <= 1.0:
                raise FormatError(path, line, f"{num[c]!r} outside [0, 1]", c)
        dets.append(Detection(
            id=nid,
            frame=frame,
            position=(num["z"], num["y"], num["x"]),
            score=num["score"],
            state_scores=(num["s_parent"], num["s_daughter"], num["s_continue"], num["s_polar"]),
            movement=(num["mz"], num["my"], num["mx"]),
        ))
    return dets


# --------------------------------------------------------------------------
# candidate graphs


def write_graph(directory, graph: CandidateGraph) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_detections(directory / GRAPH_NODES_FILE, graph.nodes)
    _write_rows(
        directory / GRAPH_EDGES_FILE,
        EDGE_COLUMNS,
        ([str(e.source), str(e.target), _fmt(e.cost)] for e in graph.edges),
    )


def read_graph(directory) -> CandidateGraph:
    directory = Path(directory)
    nodes = read_detections(directory / GRAPH_NODES_FILE)
    path = directory / GRAPH_EDGES_FILE
    edges = []
    for line, row in _read_rows(path, EDGE_COLUMNS):
        edges.append(Edge(
            _int(row["source"], path, line, "source"),
            _int(row["target"], path, line, "target"),
            _float(row["cost"], path, line, "cost"),
        ))
    try:
        return CandidateGraph(tuple(nodes), tuple(edges))
    except GraphError as exc:
        raise FormatError(path, None, str(exc)) from None


# --------------------------------------------------------------------------
# track bundles: tracks.txt (label begin end parent polar) + nodes.csv


def _segments(forest: LineageForest) -> list[tuple[int, int, int, int, int]]:
    by_label: dict[int, list] = {}
    for n in forest.nodes:
        by_label.setdefault(n.track_id, []).append(n)
    rows = []
    for label in sorted(by_label):
        members = by_label[label]
        first = min(members, key=lambda n: n.frame)
        parent = forest.parent.get(first.id)
        parent_label = forest.by_id[parent].track_id if parent is not None else 0
        rows.append((
            label,
            first.frame,
            max(n.frame for n in members),
            parent_label,
            int(any(n.polar for n in members)),
        ))
    return rows


def write_tracks(directory, forest: LineageForest) -> None:
    """Write a forest as a track table plus a per-node position table."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / TRACKS_FILE, "w") as fh:
        for row in _segments(forest):
            fh.write(" ".join(map(str, row)) + "\n")
    _write_rows(
        directory / TRACK_NODES_FILE,
        TRACK_NODE_COLUMNS,
        (
            [str(n.id), str(n.track_id), str(n.frame), *map(_fmt, n.position), n.state]
            for n in forest.nodes
        ),
    )


def read_tracks(directory) -> LineageForest:
    """Parse and validate a track bundle.

    Edges are implied: consecutive frames within a label, and from the last
    node of a parent label to the first node of each child label.
    """
    directory = Path(directory)
    tpath = directory / TRACKS_FILE
    segments: dict[int, tuple[int, int, int, int, int]] = {}
    try:
        text = tpath.read_text()
    except FileNotFoundError:
        raise FormatError(tpath, None, "file not found") from None
    for line, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        parts = raw.split()
        if len(parts) != 5:
            raise FormatError(tpath, line, f"expected 5 fields (label begin end parent polar), got {len(parts)}")
        names = ("label", "begin", "end", "parent", "polar")
        label, begin, end, parent, polar = (_int(p, tpath, line, c) for p, c in zip(parts, names))
        if label <= 0:
            raise FormatError(tpath, line, "labels must be positive", "label")
        if label in segments:
            raise FormatError(tpath, line, f"duplicate label {label}", "label")
        if begin < 0 or begin > end:
            raise FormatError(tpath, line, f"need 0 <= begin <= end, got {begin} {end}")
        if polar not in (0, 1):
            raise FormatError(tpath, line, "polar flag must be 0 or 1", "polar")
        segments[label] = (line, begin, end, parent, polar)

    children: dict[int, list[int]] = {}
    for label, (line, begin, _, parent, _) in segments.items():
        if parent == 0:
            continue
        if parent not in segments:
            raise FormatError(tpath, line, f"track {label} names missing parent {parent}", "parent")
        p_end = segments[parent][2]
        if p_end != begin - 1:
            raise FormatError(
                tpath, line,
                f"track {label} begins at {begin} but its parent {parent} ends at {p_end}",
            )
        children.setdefault(parent, []).append(label)
    for parent, kids in children.items():
        if len(kids) > 2:
            raise FormatError(tpath, segments[parent][0], f"track {parent} has {len(kids)} children {sorted(kids)}")

    npath = directory / TRACK_NODES_FILE
    by_label: dict[int, dict[int, int]] = {label: {} for label in segments}
    nodes: dict[int, tuple[int, tuple[float, float, float]]] = {}
    states: dict[int, str] = {}
    for line, row in _read_rows(npath, TRACK_NODE_COLUMNS):
        nid = _int(row["id"], npath, line, "id")
        if nid in nodes:
            raise FormatError(npath, line, f"duplicate id {nid}", "id")
        label = _int(row["label"], npath, line, "label")
        frame = _int(row["frame"], npath, line, "frame")
        if label not in segments:
            raise FormatError(npath, line, f"unknown track label {label}", "label")
        _, begin, end, _, _ = segments[label]
        if not begin <= frame <= end:
            raise FormatError(npath, line, f"frame {frame} outside track {label} [{begin}, {end}]", "frame")
        if frame in by_label[label]:
            raise FormatError(npath, line, f"track {label} has two nodes in frame {frame}", "frame")
        state = row["state"]
        if state not in STATES:
            raise FormatError(npath, line, f"unknown state {state!r}", "state")
        by_label[label][frame] = nid
        nodes[nid] = (frame, tuple(_float(row[c], npath, line, c) for c in ("z", "y", "x")))
        states[nid] = state

    edges = []
    for label, (line, begin, end, parent, _) in segments.items():
        frames = by_label[label]
        if sorted(frames) != list(range(begin, end + 1)):
            raise FormatError(tpath, line, f"track {label} lacks nodes for some frames in [{begin}, {end}]")
        edges.extend((frames[f], frames[f + 1]) for f in range(begin, end))
        if parent:
            edges.append((by_label[parent][segments[parent][2]], frames[begin]))
    polar = {nid for label, fr in by_label.items() if segments[label][4] for nid in fr.values()}
    forest = forest_from_links(nodes, edges, polar=polar, states=states)
    try:
        forest.validate()
    except ValueError as exc:
        raise FormatError(directory, None, str(exc)) from None
    return forest


# --------------------------------------------------------------------------
# weights and grids


def write_weights(path, w: Sequence[float]) -> None:
    Path(path).write_text(json.dumps(weights_to_dict(w), indent=2) + "\n")


def _load_structured(path) -> Any:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise FormatError(path, None, "file not found") from None
    try:
        if path.suffix == ".json":
            return json.loads(text)
        return yaml.safe_load(text)
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.lineno, exc.msg) from None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise FormatError(path, mark.line + 1 if mark else None, str(exc)) from None


def read_weights(path) -> np.ndarray:
    data = _load_structured(path)
    try:
        return as_weights(data)
    except (TypeError, ValueError, KeyError) as exc:
        raise FormatError(path, None, str(exc)) from None


def expand_grid(spec: Mapping[str, Any]) -> list[np.ndarray]:
    """Grid points from ``{"points": [...]}`` or ``{"base": {...}, "axes": {name: [values]}}``.

    With axes, every combination is formed (last axis varies fastest) on top
    of ``base``, whose missing entries are 0.
    """
    if not isinstance(spec, Mapping) or set(spec) - {"points", "axes", "base"}:
        raise ValueError("grid must be a mapping with 'points' or 'base'/'axes'")
    points = [as_weights(p) for p in spec.get("points", [])]
    if "axes" in spec:
        axes = spec["axes"]
        unknown = set(axes) - set(WEIGHT_NAMES)
        if unknown:
            raise ValueError(f"unknown weight names {sorted(unknown)}")
        base = dict.fromkeys(WEIGHT_NAMES, 0.0)
        base.update(spec.get("base", {}))
        names = list(axes)
        for combo in itertools.product(*(axes[n] for n in names)):
            point = dict(base)
            point.update(zip(names, combo))
            points.append(as_weights(point))
    if not points:
        raise ValueError("grid is empty")
    return points


def read_grid(path) -> list[np.ndarray]:
    try:
        return expand_grid(_load_structured(path))
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(path, None, str(exc)) from None


# --------------------------------------------------------------------------
# run configuration


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SimSection(_Strict):
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
    polar_jitter_std: float = 0.0
    dropout: float = 0.0
    clutter_rate: float = 0.0
    jitter_std: float = 0.0
    jitter_scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    movement_noise_std: float = 0.0
    clutter_movement_std: float = 5.0
    cell_score_mean: float = 0.9
    cell_score_std: float = 0.0
    clutter_score_mean: float = 0.4
    clutter_score_std: float = 0.0
    state_confusion: tuple[tuple[float, float, float, float], ...] | None = None
    state_noise_std: float = 0.0

    def build(self, seed: int) -> SimConfig:
        kw = self.model_dump()
        if kw["state_confusion"] is None:
            del kw["state_confusion"]
        return SimConfig(seed=seed, **kw)


class GraphSection(_Strict):
    max_edge_distance: float = 20.0
    score_threshold: float = 0.2
    max_edge_candidates: int = 4
    polar_body_threshold: float | None = None

    def build(self) -> GraphBuildConfig:
        return GraphBuildConfig(**self.model_dump())


class SolverSection(_Strict):
    time_limit: float | None = None
    block_len: int | None = None
    overlap: int = 1


class LearnSection(_Strict):
    lam: float = 0.001
    max_iters: int = 500
    step0: float | None = None
    step_decay: float = 50.0
    tol: float = 1e-6
    patience: int = 100
    divergence_patience: int = 50
    init: dict[str, float] | None = None

    def build(self) -> LearnConfig:
        kw = self.model_dump()
        if kw["init"] is not None:
            kw["init"] = tuple(as_weights(kw["init"]))
        return LearnConfig(**kw)


class CostsSection(_Strict):
    fp: float | dict[str, float] = 1.0
    fn: float | dict[str, float] = 1.0

    def build(self) -> HammingCosts:
        return HammingCosts(self.fp, self.fn)


class EvalSection(_Strict):
    radius: float = 15.0
    division_tolerance: int = 1
    tracklet_max: int = 20


class RunConfig(_Strict):
    """Everything a CLI run needs; unknown keys are rejected."""

    seed: int = 0
    out: str | None = None
    sim: SimSection = Field(default_factory=SimSection)
    graph: GraphSection = Field(default_factory=GraphSection)
    solver: SolverSection = Field(default_factory=SolverSection)
    learn: LearnSection = Field(default_factory=LearnSection)
    costs: CostsSection = Field(default_factory=CostsSection)
    evaluation: EvalSection = Field(default_factory=EvalSection)
    weights: dict[str, float] | None = None
    grid: dict[str, Any] | None = None
    training: Literal["ssvm", "grid"] = "ssvm"


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Read a YAML/JSON run config (or defaults) and apply top-level overrides."""
    data = {} if path is None else (_load_structured(path) or {})
    if not isinstance(data, Mapping):
        raise FormatError(path, None, "config must be a mapping")
    data = {**data, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    try:
        cfg = RunConfig.model_validate(data)
        # surface domain validation errors at load time
        cfg.sim.build(cfg.seed)
        cfg.graph.build()
        cfg.learn.build()
        cfg.costs.build()
        if cfg.grid is not None:
            expand_grid(cfg.grid)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(p) for p in first["loc"])
        raise FormatError(path or "<config>", None, f"{first['msg']}", loc) from None
    except (TypeError, ValueError) as exc:
        raise FormatError(path or "<config>", None, str(exc)) from None
    return cfg


def dump_json(path, data: Any) -> None:
    """Deterministic JSON (sorted keys, repr floats)."""
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def sim_config_dict(cfg: SimConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}
