import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lineage_ilp.evaluation import (
    count_errors,
    det_tra,
    evaluate,
    match_nodes,
    tracklet_fraction,
)
from lineage_ilp.model import LineageForest, forest_from_links
from lineage_ilp.simulator import SimConfig, simulate_gt


def forest(nodes, edges, polar=()):
    return forest_from_links({i: (f, p) for i, (f, p) in nodes.items()}, edges, polar=polar)


def shifted_division_fixture():
    """GT divides at frame 1; the prediction divides one frame earlier."""
    gt = forest(
        {0: (0, (0, 0, 0)), 1: (1, (0, 0, 0)), 2: (2, (5, 0, 0)), 3: (2, (-5, 0, 0))},
        [(0, 1), (1, 2), (1, 3)],
    )
    pred = forest(
        {10: (0, (0, 0, 0)), 11: (1, (1, 0, 0)), 12: (1, (-30, 0, 0)),
         13: (2, (5, 0, 0)), 14: (2, (-5, 0, 0))},
        [(10, 11), (10, 12), (11, 13), (12, 14)],
    )
    return pred, gt


def crossing_fixture():
    """Two parallel tracks; the prediction swaps their continuations at frame 2."""
    nodes = {}
    for t in range(4):
        nodes[t] = (t, (0.0, 0.0, 0.0))
        nodes[10 + t] = (t, (0.0, 0.0, 10.0))
    gt_edges = [(t, t + 1) for t in range(3)] + [(10 + t, 11 + t) for t in range(3)]
    pred_edges = [(0, 1), (1, 12), (12, 13), (10, 11), (11, 2), (2, 3)]
    return forest(nodes, pred_edges), forest(nodes, gt_edges)


def long_track(n, offset=0.0):
    nodes = {t: (t, (offset, 0.0, 0.0)) for t in range(n)}
    return forest(nodes, [(t, t + 1) for t in range(n - 1)])


def test_identical_forests_are_perfect():
    gt = simulate_gt(SimConfig(seed=2, n_frames=20, division_prob=0.1, min_cycle=3, n_polar=1))
    rep = evaluate(gt, gt)
    assert rep.sum == 0 and rep.fp_nodes == rep.fn_nodes == 0
    assert rep.det == rep.tra == 1.0
    curve = tracklet_fraction(gt, gt, match_nodes(gt, gt), 10)
    assert all(f == 1.0 for _, _, f in curve)


def test_match_radius_boundary():
    gt = forest({0: (0, (0, 0, 0))}, [])
    pred = forest({1: (0, (15.0 + 1e-9, 0, 0))}, [])
    assert match_nodes(pred, gt).unmatched_gt == (0,)
    pred = forest({1: (0, (15.0, 0, 0))}, [])
    assert match_nodes(pred, gt).gt_to_pred == {0: 1}


def test_matching_minimises_total_distance():
    # greedy nearest-first would pair g0-p0 (distance 1) and leave g1-p1 at 9
    gt = forest({0: (0, (0, 0, 0)), 1: (0, (10, 0, 0))}, [])
    pred = forest({5: (0, (1, 0, 0)), 6: (0, (-1, 0, 0))}, [])
    corr = match_nodes(pred, gt, radius=12)
    assert corr.gt_to_pred == {0: 6, 1: 5}


def test_matching_prefers_cardinality():
    gt = forest({0: (0, (0, 0, 0)), 1: (0, (8, 0, 0))}, [])
    pred = forest({5: (0, (4, 0, 0)), 6: (0, (-6, 0, 0))}, [])
    corr = match_nodes(pred, gt, radius=6)
    assert len(corr.gt_to_pred) == 2


def test_shifted_division_tolerance():
    pred, gt = shifted_division_fixture()
    corr = match_nodes(pred, gt)
    assert count_errors(pred, gt, corr, division_tolerance=1).div == 0
    strict = count_errors(pred, gt, corr, division_tolerance=0)
    assert strict.fp_divisions == strict.fn_divisions == 1


def test_crossing_counts_identity_switches():
    pred, gt = crossing_fixture()
    rep = count_errors(pred, gt, match_nodes(pred, gt))
    assert rep.identity_switches == 2
    assert rep.fp_edges == rep.fn_edges == 0
    assert rep.sum == 2


def test_counts_and_normalisation():
    gt = long_track(11)
    pred = forest({t: (t, (0.0, 0.0, 0.0)) for t in range(11)}, [(t, t + 1) for t in range(10) if t != 4])
    rep = evaluate(pred, gt)
    assert rep.fn_edges == 1 and rep.fp_edges == 0
    assert rep.normalized()["fn_edges"] == pytest.approx(100.0)
    assert rep.sum == rep.fp_edges + rep.fn_edges + rep.identity_switches + rep.fp_divisions + rep.fn_divisions


def test_unmatched_endpoint_is_false_positive():
    gt = long_track(2)
    pred = forest({0: (0, (0, 0, 0)), 1: (1, (50, 0, 0))}, [(0, 1)])
    rep = evaluate(pred, gt)
    assert rep.fp_edges == 1 and rep.fn_edges == 1


def test_det_tra_examples():
    gt = long_track(100)
    corr = match_nodes(gt, gt)
    assert det_tra(gt, gt, corr) == (1.0, 1.0)
    empty = LineageForest(())
    det, tra = det_tra(empty, gt, match_nodes(empty, gt))
    assert det == 0.0 and tra == 0.0
    nodes = {t: (t, (0.0, 0.0, 0.0)) for t in range(100) if t != 50}
    edges = [(t, t + 1) for t in range(99) if t not in (49, 50)]
    pred = forest(nodes, edges)
    det, _ = det_tra(pred, gt, match_nodes(pred, gt))
    assert det == pytest.approx(0.99)
    with pytest.raises(ValueError):
        det_tra(gt, empty, match_nodes(gt, empty))


def test_tracklet_curve_single_missing_edge():
    gt = long_track(21)
    pred = forest({t: (t, (0.0, 0.0, 0.0)) for t in range(21)}, [(t, t + 1) for t in range(20) if t != 10])
    curve = tracklet_fraction(pred, gt, match_nodes(pred, gt), 20)
    fractions = [f for _, _, f in curve]
    assert fractions[0] == pytest.approx(1 - 1 / 20)
    assert all(a >= b for a, b in zip(fractions, fractions[1:]))
    assert fractions[-1] == 0.0


def test_tracklet_curve_empty_prediction():
    gt = long_track(8)
    empty = LineageForest(())
    curve = tracklet_fraction(empty, gt, match_nodes(empty, gt), 5)
    assert all(f == 0.0 for _, _, f in curve)
    with pytest.raises(ValueError):
        tracklet_fraction(empty, gt, match_nodes(empty, gt), 0)
    # windows longer than any track
    assert math.isnan(tracklet_fraction(gt, gt, match_nodes(gt, gt), 9)[-1][2])


def test_polar_exclusion():
    gt = forest({0: (0, (0, 0, 0)), 1: (1, (0, 0, 0)), 2: (0, (40, 0, 0)), 3: (1, (40, 0, 0))},
                [(0, 1), (2, 3)], polar={2, 3})
    pred = long_track(2)
    assert evaluate(pred, gt).fn_edges == 1
    rep = evaluate(pred, gt, exclude_polar=True)
    assert rep.sum == 0 and rep.n_gt_nodes == 2


def _perturb(gt, rng):
    """Randomly drop links and jitter positions of a forest."""
    keep = [e for e in gt.edges if rng.random() > 0.2]
    nodes = {n.id: (n.frame, tuple(np.add(n.position, rng.normal(0, 4, 3)))) for n in gt.nodes
             if rng.random() > 0.05}
    keep = [(a, b) for a, b in keep if a in nodes and b in nodes]
    return forest_from_links(nodes, keep)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_properties(seed):
    rng = np.random.default_rng(seed)
    gt = simulate_gt(SimConfig(seed=seed % 1000, n_frames=12, n_initial=3,
                               division_prob=0.15, min_cycle=2, box=(40, 40, 40)))
    pred = _perturb(gt, rng)
    corr = match_nodes(pred, gt)
    rep = evaluate(pred, gt)
    assert min(rep.counts().values()) >= 0
    assert 0.0 <= rep.det <= 1.0 and 0.0 <= rep.tra <= 1.0
    fractions = [f for _, _, f in tracklet_fraction(pred, gt, corr, 8) if not math.isnan(f)]
    assert all(a >= b - 1e-12 for a, b in zip(fractions, fractions[1:]))
    # relabel prediction ids: nothing changes
    shift = 10_000
    relabeled = forest_from_links(
        {n.id + shift: (n.frame, n.position) for n in pred.nodes},
        [(a + shift, b + shift) for a, b in pred.edges],
    )
    assert evaluate(relabeled, gt).counts() == rep.counts()
    perfect = rep.fp_nodes == rep.fn_nodes == rep.fp_edges == rep.fn_edges == rep.identity_switches == 0
    assert (rep.det == 1.0 and rep.tra == 1.0) == perfect
