"""Command-line front end: simulate, build, solve, learn and evaluate."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .evaluation import evaluate, match_nodes, tracklet_fraction
from .graph import build_graph, filter_detections
from .ilp import SolverError, build_constraints, solve, solve_blockwise
from .model import WEIGHT_NAMES, CandidateGraph, LineageForest, as_weights, build_feature_matrix, decode, weights_to_dict
from .simulator import render_detections, simulate_gt
from .ssvm import best_effort, fit_weights, grid_search, hamming

log = logging.getLogger("lineage_ilp")


def _parse_blocks(text: str) -> tuple[int, int]:
    try:
        length, overlap = (int(p) for p in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("expected LEN:OVERLAP, e.g. 20:2") from None
    if not length > overlap >= 1:
        raise argparse.ArgumentTypeError("need LEN > OVERLAP >= 1")
    return length, overlap


def _parse_delta(text: str) -> dict[str, float]:
    out = {}
    for part in text.split(","):
        key, _, value = part.partition("=")
        key = key.strip()
        if key not in ("fp", "fn") or not value:
            raise argparse.ArgumentTypeError("expected fp=F,fn=N")
        try:
            out[key] = float(value)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad number {value!r}") from None
    return out


def _config(args) -> io.RunConfig:
    cfg = io.load_config(getattr(args, "config", None), {"seed": getattr(args, "seed", None)})
    updates = {}
    if getattr(args, "polar_filter", None) is not None:
        updates["graph"] = cfg.graph.model_copy(update={"polar_body_threshold": args.polar_filter})
    if getattr(args, "blocks", None) is not None:
        length, overlap = args.blocks
        updates["solver"] = cfg.solver.model_copy(update={"block_len": length, "overlap": overlap})
    if getattr(args, "delta", None) is not None:
        updates["costs"] = cfg.costs.model_copy(update=args.delta)
    return cfg.model_copy(update=updates) if updates else cfg


def _out_dir(args, cfg: io.RunConfig) -> Path:
    out = args.out or cfg.out
    if out is None:
        raise SystemExit("error: no output directory (use --out or set 'out' in the config)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _weights(args, cfg: io.RunConfig) -> np.ndarray:
    if getattr(args, "weights", None):
        return io.read_weights(args.weights)
    if cfg.weights is not None:
        return as_weights(cfg.weights)
    raise SystemExit("error: no weights (use --weights or set 'weights' in the config)")


def _solve(graph, w, cfg: io.RunConfig):
    S = build_feature_matrix(graph)
    cs = build_constraints(graph)
    if cfg.solver.block_len is not None:
        return solve_blockwise(
            graph, S, w, cs, cfg.solver.block_len, cfg.solver.overlap,
            compare_global=True, time_limit=cfg.solver.time_limit,
        )
    return solve(graph, S, w, cs, time_limit=cfg.solver.time_limit)


def _evaluation(pred: LineageForest, gt: LineageForest, cfg: io.RunConfig) -> dict:
    exclude = cfg.graph.polar_body_threshold is not None
    rep = evaluate(
        pred, gt, radius=cfg.evaluation.radius,
        division_tolerance=cfg.evaluation.division_tolerance, exclude_polar=exclude,
    )
    if exclude:
        pred, gt = pred.without_polar(), gt.without_polar()
    corr = match_nodes(pred, gt, cfg.evaluation.radius)
    curve = tracklet_fraction(
        pred, gt, corr, cfg.evaluation.tracklet_max, cfg.evaluation.division_tolerance,
    )
    out = rep.to_dict()
    out["tracklet_fraction"] = [
        {"length": k, "n_tracklets": n, "fraction": None if f != f else f} for k, n, f in curve
    ]
    return {"report": out, "summary": rep.summary()}


def _simulate(cfg: io.RunConfig, seed: int, out: Path) -> tuple[LineageForest, list]:
    sim = cfg.sim.build(seed)
    gt = simulate_gt(sim)
    dets = render_detections(gt, sim)
    out.mkdir(parents=True, exist_ok=True)
    io.write_tracks(out / "gt_tracks", gt)
    io.write_detections(out / "detections.csv", dets)
    io.dump_json(out / "sim_config.json", io.sim_config_dict(sim))
    return gt, dets


def _build(cfg: io.RunConfig, dets) -> CandidateGraph:
    gcfg = cfg.graph.build()
    return build_graph(filter_detections(dets, gcfg), gcfg)


def _fit(graph, gt, cfg: io.RunConfig) -> tuple[np.ndarray, dict, list]:
    S = build_feature_matrix(graph)
    cs = build_constraints(graph)
    be = best_effort(graph, gt, cfg.evaluation.radius, constraints=cs)
    costs = cfg.costs.build()
    w, trace = fit_weights(graph, S, cs, be.y, costs, cfg.learn.build())
    y_hat = solve(graph, S, w, cs).y
    fp, fn = costs.vectors(graph)
    info = {
        "initial_loss": trace[0][1],
        "best_loss": trace[-1][2],
        "iterations": len(trace) - 1,
        "unreachable_gt_edges": be.n_unreachable,
        "unmatched_gt_nodes": len(be.unmatched_gt),
        "training_delta": hamming(be.y, y_hat, fp, fn),
        "weights": weights_to_dict(w),
    }
    return w, info, trace


def _write_trace(path: Path, trace) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,loss,best_loss\n")
        for k, loss, best in trace:
            fh.write(f"{k},{loss!r},{best!r}\n")


def _grid(graph, gt, cfg: io.RunConfig, grid) -> tuple[np.ndarray, list]:
    S = build_feature_matrix(graph)
    cs = build_constraints(graph)
    return grid_search(
        graph, S, cs, gt, grid, radius=cfg.evaluation.radius,
        division_tolerance=cfg.evaluation.division_tolerance,
        exclude_polar=cfg.graph.polar_body_threshold is not None,
    )


def _write_grid_table(path: Path, table) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(WEIGHT_NAMES) + ",fp_edges,fn_edges,identity_switches,div,sum\n")
        for row in table:
            c = row.report.counts()
            fh.write(
                ",".join(repr(float(v)) for v in row.w)
                + f",{c['fp_edges']},{c['fn_edges']},{c['identity_switches']},{c['div']},{c['sum']}\n"
            )


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    gt, dets = _simulate(cfg, cfg.seed, out)
    print(f"{len(gt.nodes)} GT nodes, {len(gt.divisions())} divisions, {len(dets)} detections -> {out}")
    return 0


def cmd_build_graph(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    graph = _build(cfg, io.read_detections(args.detections))
    io.write_graph(out, graph)
    print(f"{graph.n_nodes} nodes, {graph.n_edges} edges -> {out}")
    return 0


def cmd_solve(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    graph = io.read_graph(args.graph)
    rep = _solve(graph, _weights(args, cfg), cfg)
    io.write_tracks(out / "tracks", decode(graph, rep.y))
    io.dump_json(out / "solve_report.json", rep.to_dict())
    print(f"objective {rep.objective!r}, {int(rep.y[:graph.n_nodes].sum())} nodes selected")
    return 0


def cmd_fit_weights(args) -> int:
    cfg = _config(args)
    if args.max_iters is not None:
        cfg = cfg.model_copy(update={"learn": cfg.learn.model_copy(update={"max_iters": args.max_iters})})
    out = _out_dir(args, cfg)
    graph = io.read_graph(args.graph)
    gt = io.read_tracks(args.gt)
    w, info, trace = _fit(graph, gt, cfg)
    io.write_weights(out / "weights.json", w)
    _write_trace(out / "trace.csv", trace)
    io.dump_json(out / "fit_report.json", info)
    print(f"best loss {info['best_loss']!r} after {info['iterations']} iterations")
    return 0


def cmd_grid_search(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    if args.grid:
        grid = io.read_grid(args.grid)
    elif cfg.grid is not None:
        grid = io.expand_grid(cfg.grid)
    else:
        raise SystemExit("error: no grid (use --grid or set 'grid' in the config)")
    best, table = _grid(io.read_graph(args.graph), io.read_tracks(args.gt), cfg, grid)
    io.write_weights(out / "weights.json", best)
    _write_grid_table(out / "grid_table.csv", table)
    print(f"{len(table)} grid points, best sum {min(r.error_sum for r in table)}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    result = _evaluation(io.read_tracks(args.pred), io.read_tracks(args.gt), cfg)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        io.dump_json(out / "report.json", result["report"])
        (out / "summary.txt").write_text(result["summary"] + "\n")
    print(result["summary"])
    return 0


def cmd_pipeline(args) -> int:
    """simulate train/test -> build -> learn on train -> solve test -> evaluate."""
    cfg = _config(args)
    out = _out_dir(args, cfg)
    gt_train, dets_train = _simulate(cfg, cfg.seed, out / "train")
    gt_test, dets_test = _simulate(cfg, cfg.seed + 1, out / "test")
    g_train, g_test = _build(cfg, dets_train), _build(cfg, dets_test)
    io.write_graph(out / "train" / "graph", g_train)
    io.write_graph(out / "test" / "graph", g_test)

    report: dict = {"seed": cfg.seed, "training": cfg.training}
    if cfg.training == "ssvm":
        w, info, trace = _fit(g_train, gt_train, cfg)
        _write_trace(out / "trace.csv", trace)
        report["fit"] = info
    else:
        if cfg.grid is None:
            raise SystemExit("error: training 'grid' needs a 'grid' section in the config")
        w, table = _grid(g_train, gt_train, cfg, io.expand_grid(cfg.grid))
        _write_grid_table(out / "grid_table.csv", table)
    io.write_weights(out / "weights.json", w)

    rep = _solve(g_test, w, cfg)
    pred = decode(g_test, rep.y)
    io.write_tracks(out / "test" / "pred_tracks", pred)
    result = _evaluation(pred, gt_test, cfg)
    report["solve"] = rep.to_dict()
    report["evaluation"] = result["report"]
    io.dump_json(out / "report.json", report)
    (out / "summary.txt").write_text(result["summary"] + "\n")
    print(result["summary"])
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lineage-ilp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", help="YAML or JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--polar-filter", type=float, metavar="THRESH",
                        help="drop detections (and GT polar bodies) with polar score >= THRESH")
        return sp

    sp = common(sub.add_parser("simulate", help="simulate GT lineages and detections"))
    sp.set_defaults(func=cmd_simulate)

    sp = common(sub.add_parser("build-graph", help="candidate graph from a detections table"))
    sp.add_argument("--detections", required=True)
    sp.set_defaults(func=cmd_build_graph)

    sp = common(sub.add_parser("solve", help="solve the ILP on a candidate graph"))
    sp.add_argument("--graph", required=True)
    sp.add_argument("--weights")
    sp.add_argument("--blocks", type=_parse_blocks, metavar="LEN:OVERLAP")
    sp.set_defaults(func=cmd_solve)

    sp = common(sub.add_parser("fit-weights", help="learn weights with the structured SVM"))
    sp.add_argument("--graph", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--delta", type=_parse_delta, metavar="fp=F,fn=N")
    sp.add_argument("--max-iters", type=int)
    sp.set_defaults(func=cmd_fit_weights)

    sp = common(sub.add_parser("grid-search", help="pick weights by grid search"))
    sp.add_argument("--graph", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--grid")
    sp.set_defaults(func=cmd_grid_search)

    sp = common(sub.add_parser("evaluate", help="compare predicted and GT tracks"))
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = common(sub.add_parser("pipeline", help="simulate, learn, solve and evaluate"))
    sp.add_argument("--blocks", type=_parse_blocks, metavar="LEN:OVERLAP")
    sp.add_argument("--delta", type=_parse_delta, metavar="fp=F,fn=N")
    sp.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (io.FormatError, SolverError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
