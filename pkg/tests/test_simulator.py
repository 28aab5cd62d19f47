import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lineage_ilp.graph import GraphBuildConfig, build_graph, filter_detections
from lineage_ilp.ilp import build_constraints, solve
from lineage_ilp.model import build_feature_matrix, decode, encode
from lineage_ilp.evaluation import evaluate
from lineage_ilp.simulator import SimConfig, render_detections, simulate_gt

from _helpers import HAND_WEIGHTS


def cells_per_frame(gt):
    counts = {}
    for n in gt.nodes:
        if not n.polar:
            counts[n.frame] = counts.get(n.frame, 0) + 1
    return [counts.get(t, 0) for t in range(max(counts) + 1)]


def test_no_divisions_keeps_count():
    gt = simulate_gt(SimConfig(seed=4, n_frames=30, n_initial=5, division_prob=0.0))
    assert cells_per_frame(gt) == [5] * 30
    assert {n.state for n in gt.nodes} == {"continue"}


def test_certain_division_with_unit_cycle():
    # a daughter needs one more frame before it may divide again
    gt = simulate_gt(SimConfig(seed=0, n_frames=5, n_initial=1, division_prob=1.0, min_cycle=1))
    assert cells_per_frame(gt) == [1, 2, 2, 4, 4]
    gt.validate()
    by_frame = {}
    for n in gt.nodes:
        by_frame.setdefault(n.frame, set()).add(n.state)
    assert by_frame[0] == {"parent"} and by_frame[1] == {"daughter"} and by_frame[2] == {"parent"}


def test_determinism():
    cfg = SimConfig(seed=11, n_frames=25, division_prob=0.1, n_polar=2, dropout=0.1,
                    clutter_rate=2.0, jitter_std=1.0, movement_noise_std=1.0,
                    cell_score_std=0.1, state_noise_std=0.1)
    a, b = simulate_gt(cfg), simulate_gt(cfg)
    assert a == b
    assert render_detections(a, cfg) == render_detections(b, cfg)
    assert simulate_gt(SimConfig(seed=12, n_frames=25, division_prob=0.1)) != a


def test_zero_noise_detections_are_exact():
    cfg = SimConfig(seed=5, n_frames=20, division_prob=0.1, min_cycle=3, n_polar=1)
    gt = simulate_gt(cfg)
    dets, truth = render_detections(gt, cfg, return_truth=True)
    assert len(dets) == len(gt.nodes)
    for d in dets:
        node = gt.by_id[truth[d.id]]
        assert d.position == node.position
        parent = gt.parent.get(node.id)
        if parent is not None:
            np.testing.assert_allclose(np.add(d.position, d.movement), gt.by_id[parent].position, atol=1e-12)
        if node.polar:
            assert d.polar_score == 1.0


def test_full_dropout_leaves_only_clutter():
    cfg = SimConfig(seed=1, n_frames=10, dropout=1.0, clutter_rate=3.0)
    gt = simulate_gt(cfg)
    dets, truth = render_detections(gt, cfg, return_truth=True)
    assert dets and all(v is None for v in truth.values())


def test_jitter_distance_expectation():
    sigma = 0.5
    cfg = SimConfig(seed=3, n_frames=25, n_initial=50, division_prob=0.0, jitter_std=sigma)
    gt = simulate_gt(cfg)
    dets, truth = render_detections(gt, cfg, return_truth=True)
    assert len(dets) == len(gt.nodes) >= 1000
    diff = np.array([np.subtract(d.position, gt.by_id[truth[d.id]].position) for d in dets])
    # per-axis folded normal and the 3-D chi distribution
    assert np.abs(diff).mean() == pytest.approx(sigma * np.sqrt(2 / np.pi), rel=0.1)
    assert np.linalg.norm(diff, axis=1).mean() == pytest.approx(sigma * np.sqrt(8 / np.pi), rel=0.1)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(division_prob=1.5)
    with pytest.raises(ValueError):
        SimConfig(jitter_std=-1)
    with pytest.raises(ValueError):
        SimConfig(min_cycle=0)
    with pytest.raises(ValueError):
        SimConfig(state_confusion=((0.5, 0.5, 0, 0),) * 3 + ((0.2, 0, 0, 0),))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.5), st.integers(1, 4))
def test_gt_always_feasible(seed, p, cycle):
    cfg = SimConfig(seed=seed, n_frames=12, n_initial=3, division_prob=p, min_cycle=cycle,
                    n_polar=1, polar_lifetime=8, box=(30, 30, 30))
    gt = simulate_gt(cfg)
    gt.validate()
    dets = render_detections(gt, cfg)
    gcfg = GraphBuildConfig(max_edge_distance=12.0)
    g = build_graph(filter_detections(dets, gcfg), gcfg)
    y = encode(g, gt)
    assert build_constraints(g).is_feasible(y)
    assert decode(g, y, polar=[n.id for n in gt.nodes if n.polar]) == gt


def test_zero_noise_end_to_end_small():
    cfg = SimConfig(seed=8, n_frames=30, n_initial=3, division_prob=0.05, min_cycle=5,
                    n_polar=1, box=(60, 60, 60))
    gt = simulate_gt(cfg)
    gcfg = GraphBuildConfig(max_edge_distance=20.0)
    g = build_graph(filter_detections(render_detections(gt, cfg), gcfg), gcfg)
    S, cs = build_feature_matrix(g), build_constraints(g)
    pred = decode(g, solve(g, S, HAND_WEIGHTS, cs).y)
    rep = evaluate(pred, gt)
    assert rep.sum == 0 and rep.det == rep.tra == 1.0


def test_polar_jitter_moves_detection_and_motion_together():
    cfg = SimConfig(seed=2, n_frames=6, n_initial=1, division_prob=0.0, n_polar=2,
                    polar_lifetime=6, polar_jitter_std=5.0)
    gt = simulate_gt(cfg)
    dets, truth = render_detections(gt, cfg, return_truth=True)
    by_gt = {truth[d.id]: d for d in dets}
    displaced = 0
    for n in gt.nodes:
        d = by_gt[n.id]
        parent = gt.parent.get(n.id)
        if not n.polar:
            assert np.allclose(d.position, n.position)
            continue
        displaced += not np.allclose(d.position, n.position)
        if parent is not None:
            seen = np.add(d.position, d.movement)
            assert np.allclose(seen, by_gt[parent].position)
    assert displaced == sum(n.polar for n in gt.nodes)
