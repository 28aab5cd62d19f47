import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lineage_ilp.ilp import brute_force_argmin, solve
from lineage_ilp.model import CandidateGraph, Detection, Edge, encode, forest_from_links, objective_value
from lineage_ilp.graph import GraphBuildConfig
from lineage_ilp.ssvm import (
    HammingCosts,
    LearnConfig,
    LearningDiverged,
    best_effort,
    fit_weights,
    grid_search,
    hamming,
    loss_augmented_solve,
    ssvm_loss,
)

from _helpers import (
    HAND_WEIGHTS, dataset, division_motif, problem, random_small_graph, zero_noise_config,
)


def feasible_target(g, S, cs, rng):
    return solve(g, S, rng.normal(size=8) - np.r_[2.0, np.zeros(7)], cs).y


# ---------------------------------------------------------------- Hamming


def test_hamming_examples():
    y = np.array([1, 0, 1, 1, 0])
    assert hamming(y, y) == 0
    assert hamming(y, 1 - y) == 5
    assert hamming([1, 0, 0, 0], [0, 1, 1, 0]) == 3
    yp = np.array([1, 1, 0, 0, 0])
    y = np.array([0, 1, 1, 1, 0])  # one missing, two extra
    assert hamming(yp, y, c_fp=100.0) == 201
    with pytest.raises(ValueError):
        hamming([0, 1], [0, 1, 1])


@settings(max_examples=100)
@given(st.lists(st.tuples(st.booleans(), st.booleans(), st.booleans()), min_size=1, max_size=30))
def test_hamming_is_a_metric(triples):
    a, b, c = (np.array(col, dtype=int) for col in zip(*triples))
    assert hamming(a, b) == hamming(b, a)
    assert hamming(a, c) <= hamming(a, b) + hamming(b, c)
    assert (hamming(a, b) == 0) == np.array_equal(a, b)


def test_costs_per_block():
    g = division_motif()
    fp, fn = HammingCosts(fp={"edge": 10.0}, fn=2.0).vectors(g)
    assert list(fp) == [1.0] * 15 + [10.0, 10.0]
    assert list(fn) == [2.0] * 17
    with pytest.raises(ValueError):
        HammingCosts(fp=-1.0)
    with pytest.raises(ValueError):
        HammingCosts(fn={"nodes": 1.0})
    scaled = HammingCosts(fp={"edge": 10.0}).scaled(fp=10)
    assert scaled.vectors(g)[0][-1] == 100.0 and scaled.vectors(g)[0][0] == 10.0


# ---------------------------------------------------------------- best effort


def test_best_effort_noise_free_reproduces_gt():
    cfg = zero_noise_config()
    gt, g, S, cs = dataset(cfg, GraphBuildConfig(max_edge_distance=20.0))
    be = best_effort(g, gt, constraints=cs)
    assert be.n_unreachable == 0 and not be.unmatched_gt
    assert np.array_equal(be.y, encode(g, gt))
    assert cs.is_feasible(be.y)


def test_best_effort_far_node_unmatched():
    gt = forest_from_links({0: (0, (0, 0, 0)), 1: (1, (0, 0, 0))}, [(0, 1)])
    dets = (Detection(5, 0, (0, 0, 0), 1, (0, 0, 1, 0), (0, 0, 0)),
            Detection(6, 1, (20, 0, 0), 1, (0, 0, 1, 0), (-20, 0, 0)))
    g = CandidateGraph(dets, (Edge(5, 6, 0.0),))
    be = best_effort(g, gt, match_radius=15)
    assert be.unmatched_gt == [1]
    assert be.unreachable_edges == [(0, 1)]
    assert list(be.y[: g.n_nodes]) == [1, 0]


def test_best_effort_missing_daughter():
    gt = forest_from_links(
        {0: (0, (0, 0, 0)), 1: (1, (3, 0, 0)), 2: (1, (-3, 0, 0))}, [(0, 1), (0, 2)]
    )
    dets = (Detection(0, 0, (0, 0, 0), 1, (1, 0, 0, 0), (0, 0, 0)),
            Detection(1, 1, (3, 0, 0), 1, (0, 1, 0, 0), (-3, 0, 0)))
    g = CandidateGraph(dets, (Edge(0, 1, 0.0),))
    S, cs = problem(g)
    be = best_effort(g, gt, constraints=cs)
    assert be.unreachable_edges == [(0, 2)]
    v = g.n_nodes
    assert be.y[2 * v] == 1  # parent kept: one daughter link is allowed
    assert be.y[3 * v + 1] == 1
    assert be.y[5 * v] == 1
    assert cs.is_feasible(be.y)


def test_best_effort_repairs_infeasible_states():
    # GT says 0 continues into 1, but the candidate graph has a second GT
    # child of 0 matched as well -> out-degree 2 with a continue label
    gt = forest_from_links(
        {0: (0, (0, 0, 0)), 1: (1, (1, 0, 0)), 2: (1, (-1, 0, 0))}, [(0, 1), (0, 2)],
        states={0: "continue", 1: "continue", 2: "continue"},
    )
    dets = (Detection(0, 0, (0, 0, 0), 1, (0, 0, 1, 0), (0, 0, 0)),
            Detection(1, 1, (1, 0, 0), 1, (0, 0, 1, 0), (-1, 0, 0)),
            Detection(2, 1, (-1, 0, 0), 1, (0, 0, 1, 0), (1, 0, 0)))
    g = CandidateGraph(dets, (Edge(0, 1, 0.0), Edge(0, 2, 0.0)))
    S, cs = problem(g)
    be = best_effort(g, gt, constraints=cs)
    assert cs.is_feasible(be.y)
    assert be.n_unreachable == 1


# ---------------------------------------------------------------- loss-augmented inference


def test_zero_costs_equal_plain_solve():
    rng = np.random.default_rng(1)
    g = random_small_graph(rng, 40)
    S, cs = problem(g)
    w = rng.normal(size=8)
    yp = feasible_target(g, S, cs, rng)
    a = loss_augmented_solve(g, S, w, cs, yp, HammingCosts(0.0, 0.0))
    b = solve(g, S, w, cs)
    assert np.array_equal(a.y, b.y) and a.objective == pytest.approx(b.objective)


def test_zero_weights_maximise_disagreement():
    rng = np.random.default_rng(2)
    g = random_small_graph(rng)
    S, cs = problem(g)
    yp = feasible_target(g, S, cs, rng)
    rep = loss_augmented_solve(g, S, np.zeros(8), cs, yp, HammingCosts())
    # minimising -Delta is linear: +1 where yp is 1, -1 where it is 0
    y_far = brute_force_argmin(np.where(yp == 1, 1.0, -1.0), cs)
    best = hamming(yp, y_far)
    assert best > 0
    assert rep.extra["delta"] == best
    assert rep.objective == -best


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_loss_augmented_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    g = random_small_graph(rng)
    S, cs = problem(g)
    w = rng.normal(size=8)
    yp = feasible_target(g, S, cs, rng)
    costs = HammingCosts(float(rng.uniform(0, 3)), float(rng.uniform(0, 3)))
    rep = loss_augmented_solve(g, S, w, cs, yp, costs)
    fp, fn = costs.vectors(g)
    c = np.asarray(S @ w) + np.where(yp == 1, fn, -fp)
    y_bf = brute_force_argmin(c, cs)
    obj_bf = objective_value(S, w, y_bf) - hamming(yp, y_bf, fp, fn)
    assert np.array_equal(rep.y, y_bf)
    assert abs(rep.objective - obj_bf) <= 1e-9


# ---------------------------------------------------------------- loss and learning


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_loss_nonnegative_and_target_bound(seed):
    rng = np.random.default_rng(seed)
    g = random_small_graph(rng, 60)
    S, cs = problem(g)
    yp = feasible_target(g, S, cs, rng)
    w = rng.normal(0, 2, size=8)
    L, _ = ssvm_loss(g, S, cs, yp, HammingCosts(), w, 0.0)
    assert L >= -1e-9
    rep = loss_augmented_solve(g, S, w, cs, yp, HammingCosts())
    assert rep.objective <= objective_value(S, w, yp) + 1e-9


def test_loss_is_regulariser_when_target_is_optimal():
    g = division_motif()
    S, cs = problem(g)
    w = np.array([-10.0, 0, 10, 0.1, -10, -10, -10, 0])
    yp = solve(g, S, w, cs).y
    L, _ = ssvm_loss(g, S, cs, yp, HammingCosts(), w, 0.5)
    assert L == pytest.approx(0.5 * float(w @ w))


def test_max_iters_zero_returns_initial():
    g = division_motif()
    S, cs = problem(g)
    yp = solve(g, S, HAND_WEIGHTS, cs).y
    init = tuple(np.linspace(-1, 1, 8))
    w, trace = fit_weights(g, S, cs, yp, HammingCosts(), LearnConfig(max_iters=0, init=init))
    assert np.array_equal(w, init)
    L, _ = ssvm_loss(g, S, cs, yp, HammingCosts(), init, 0.001)
    assert trace == [(0, pytest.approx(L), pytest.approx(L))]


def test_trace_best_is_monotone_and_lambda_shrinks_weights():
    gt, g, S, cs = dataset(zero_noise_config(n_frames=8), GraphBuildConfig(max_edge_distance=20.0))
    yp = best_effort(g, gt, constraints=cs).y
    norms = []
    for lam in (1e-3, 1.0, 1e3):
        w, trace = fit_weights(g, S, cs, yp, HammingCosts(), LearnConfig(lam=lam, max_iters=60))
        best = [b for _, _, b in trace]
        assert all(x >= y for x, y in zip(best, best[1:]))
        norms.append(float(np.linalg.norm(w)))
    assert norms[0] >= norms[1] >= norms[2]


def test_divergence_is_reported():
    g = division_motif()
    S, cs = problem(g)
    yp = solve(g, S, HAND_WEIGHTS, cs).y
    # w <- w - 1.5 * 2 * w flips sign and doubles each iteration
    cfg = LearnConfig(lam=1.0, step0=1.5, step_decay=1e9, max_iters=200,
                      divergence_patience=5, init=tuple([1.0] * 8))
    with pytest.raises(LearningDiverged) as info:
        fit_weights(g, S, cs, yp, HammingCosts(), cfg)
    assert len(info.value.trace) >= 5


def test_learn_config_validation():
    with pytest.raises(ValueError):
        LearnConfig(lam=-1)
    with pytest.raises(ValueError):
        LearnConfig(step0=0)
    with pytest.raises(ValueError):
        LearnConfig(init=(1.0, 2.0))


# ---------------------------------------------------------------- grid search


def test_grid_single_point_and_ties():
    gt, g, S, cs = dataset(zero_noise_config(n_frames=8), GraphBuildConfig(max_edge_distance=20.0))
    best, table = grid_search(g, S, cs, gt, [HAND_WEIGHTS])
    assert np.array_equal(best, HAND_WEIGHTS) and len(table) == 1
    # both points give a perfect reconstruction; the lexicographically smaller wins
    other = np.array(HAND_WEIGHTS) * 2
    best, table = grid_search(g, S, cs, gt, [HAND_WEIGHTS, other], workers=2)
    assert [r.error_sum for r in table] == [0, 0]
    assert np.array_equal(best, min(map(tuple, [HAND_WEIGHTS, other])))
    with pytest.raises(ValueError):
        grid_search(g, S, cs, gt, [])
