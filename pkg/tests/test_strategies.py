"""Tests for the acquisition criteria and the strategy dispatcher."""
from __future__ import annotations

from dataclasses import replace
import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from activelearn import strategies
from activelearn.data import PoolView, SelectionError
from activelearn.nn_core import (
    GradientScope,
    MlpModel,
    ModelSnapshot,
    backward,
    forward,
    sgd_step,
    softmax_xent,
)
from activelearn.strategies import (
    STRATEGY_IDS,
    ConfigurationError,
    OursConfig,
    ScoredCandidate,
    StaleCacheError,
    StrategyParams,
    UnknownStrategyError,
    bald_from_probs,
    build_holdout_cache,
    gradient_embedding,
    greedy_k_center,
    kernel_value,
    predictive_entropy,
    score_bald,
    score_egl,
    score_entropy,
    score_err_reduction,
    score_mc_dropout,
    score_ours,
    score_ours_app,
    select,
    select_badge,
    select_coreset_greedy,
    select_random,
    subsample_pool,
    top_k,
)
from tests.utils.synthetic_datasets import random_inputs, random_snapshot


def _pool(features: np.ndarray, offset: int = 100) -> PoolView:
    features = np.asarray(features, dtype=np.float64)
    return PoolView(np.arange(offset, offset + features.shape[0]), features)


def _scores(candidates) -> np.ndarray:
    return np.array([cand.score for cand in candidates])


def _linear_snapshot(weight: np.ndarray, bias: np.ndarray) -> ModelSnapshot:
    weight = np.asarray(weight, dtype=np.float64)
    return MlpModel((weight.shape[0], weight.shape[1]), [weight], [np.asarray(bias, dtype=np.float64)]).snapshot()


def _brute_force_ours(snapshot, x, eta, iterations, holdout_x, holdout_y) -> float:
    """Clone the model and run explicit last-layer SGD on the pseudo-labelled sample."""
    model = snapshot.to_model()
    pseudo = int(np.argmax(forward(snapshot, x[None, :])[0][0]))
    for _ in range(iterations):
        _, cache = forward(model, x[None, :])
        grads = backward(model, cache, [pseudo], GradientScope.LAST_LAYER)
        model.set_parameters(sgd_step(model.parameters(), grads, eta))
    after = softmax_xent(forward(model, holdout_x)[0], holdout_y)[1].sum()
    before = softmax_xent(forward(snapshot, holdout_x)[0], holdout_y)[1].sum()
    return float(after - before)


@pytest.fixture()
def scoring_setup():
    """Random hidden-layer snapshot with a pool and a holdout set.

    Returns:
        Tuple of (snapshot, pool view, holdout features, holdout labels).
    """
    snapshot = random_snapshot((5, 8, 3), seed=3, scale=2.0)
    pool = _pool(random_inputs(30, 5, seed=4))
    holdout_x = random_inputs(12, 5, seed=5)
    holdout_y = np.random.default_rng(6).integers(0, 3, size=12)
    return snapshot, pool, holdout_x, holdout_y


def test_ours_zero_iterations_scores_exactly_zero(scoring_setup) -> None:
    snapshot, pool, holdout_x, holdout_y = scoring_setup
    cache = build_holdout_cache(snapshot, holdout_x, holdout_y)
    candidates = score_ours(snapshot, pool, cache, OursConfig(inner_iterations=0))
    assert all(cand.score == 0.0 for cand in candidates)


def test_ours_matches_explicit_fine_tuning(scoring_setup) -> None:
    snapshot, pool, holdout_x, holdout_y = scoring_setup
    cache = build_holdout_cache(snapshot, holdout_x, holdout_y)
    cfg = OursConfig(eta=0.05, inner_iterations=3)
    candidates = score_ours(snapshot, pool, cache, cfg)
    for position, cand in enumerate(candidates):
        expected = _brute_force_ours(snapshot, pool.features[position], 0.05, 3, holdout_x, holdout_y)
        assert cand.score == pytest.approx(expected, abs=1e-10)
        assert cand.pool_index == pool.indices[position]


def test_ours_chunked_workers_match_sequential(scoring_setup, monkeypatch) -> None:
    snapshot, pool, holdout_x, holdout_y = scoring_setup
    # Four candidates per chunk: 12 holdout samples x 3 classes x 4.
    monkeypatch.setattr(strategies, "_CHUNK_BUDGET", 12 * 3 * 4)
    cache = build_holdout_cache(snapshot, holdout_x, holdout_y)
    sequential = score_ours(snapshot, pool, cache, OursConfig(eta=0.01))
    threaded = score_ours(snapshot, pool, cache, OursConfig(eta=0.01, workers=4))
    assert [c.score for c in sequential] == [c.score for c in threaded]


def test_ours_pseudo_labels_are_snapshot_argmax(scoring_setup) -> None:
    snapshot, pool, holdout_x, holdout_y = scoring_setup
    cache = build_holdout_cache(snapshot, holdout_x, holdout_y)
    expected = np.argmax(forward(snapshot, pool.features)[0], axis=1)
    assert [cand.pseudo_label for cand in score_ours(snapshot, pool, cache)] == expected.tolist()


@pytest.mark.parametrize("holdout_label, positive", [(1, True), (0, False)])
def test_ours_sign_for_duplicated_holdout_sample(holdout_label: int, positive: bool) -> None:
    # Snapshot predicts class 0 at x with p0 ~ 0.73, i.e. not saturated.
    snapshot = _linear_snapshot([[1.0, 0.0], [0.0, 0.0]], [0.0, 0.0])
    x = np.array([1.0, 0.5])
    cache = build_holdout_cache(snapshot, x[None, :], [holdout_label])
    (cand,) = score_ours(snapshot, _pool(x[None, :]), cache, OursConfig(eta=0.1, inner_iterations=3))
    assert cand.pseudo_label == 0
    assert (cand.score > 0) is positive
    assert cand.score != 0.0


def test_empty_holdout_is_configuration_error() -> None:
    snapshot = random_snapshot((3, 4, 2), seed=0)
    with pytest.raises(ConfigurationError):
        build_holdout_cache(snapshot, np.empty((0, 3)), [])


def test_stale_holdout_cache_is_rejected(scoring_setup) -> None:
    snapshot, pool, holdout_x, holdout_y = scoring_setup
    cache = build_holdout_cache(snapshot, holdout_x, holdout_y)
    other = random_snapshot((5, 8, 3), seed=99)
    with pytest.raises(StaleCacheError):
        score_ours(other, pool, cache)
    with pytest.raises(StaleCacheError):
        score_ours_app(other, pool, cache)


def test_ours_app_anti_aligned_gradient_scores_squared_norm() -> None:
    # Zero parameters: uniform prediction, pseudo-label 0, holdout label 1 gives g_v = -g_p.
    snapshot = _linear_snapshot(np.zeros((2, 2)), np.zeros(2))
    x = np.array([[1.0, 2.0]])
    cache = build_holdout_cache(snapshot, x, [1])
    (cand,) = score_ours_app(snapshot, _pool(x), cache)
    # |grad l_v|^2 = (|x|^2 + 1) * |(0.5, -0.5)|^2
    assert cand.score == pytest.approx(3.0, abs=1e-12)


def test_ours_app_orthogonal_gradient_scores_zero() -> None:
    snapshot = _linear_snapshot([[0.3, -0.2], [0.1, 0.4]], [0.05, -0.05])
    cache = build_holdout_cache(snapshot, np.array([[-1.0, 0.0]]), [1])
    # phi_p . phi_v + 1 = 0 makes the gradients orthogonal.
    (cand,) = score_ours_app(snapshot, _pool(np.array([[1.0, 0.0]])), cache)
    assert cand.score == pytest.approx(0.0, abs=1e-12)


def test_ours_app_equals_negative_kernel_sum() -> None:
    snapshot = random_snapshot((6, 10, 4), seed=8, scale=1.5)
    pool = _pool(random_inputs(100, 6, seed=9))
    holdout_x = random_inputs(15, 6, seed=10)
    holdout_y = np.random.default_rng(11).integers(0, 4, size=15)
    cache = build_holdout_cache(snapshot, holdout_x, holdout_y)
    for position, cand in enumerate(score_ours_app(snapshot, pool, cache)):
        total = sum(
            kernel_value(snapshot, pool.features[position], cand.pseudo_label, holdout_x[j], int(holdout_y[j]))
            for j in range(len(holdout_y))
        )
        assert cand.score == pytest.approx(-total, abs=1e-9)


def test_first_order_criterion_approximates_fine_tuning() -> None:
    snapshot = random_snapshot((6, 12, 3), seed=21, scale=2.0)
    pool = _pool(random_inputs(500, 6, seed=22))
    holdout_x = random_inputs(40, 6, seed=23)
    holdout_y = np.random.default_rng(24).integers(0, 3, size=40)
    cache = build_holdout_cache(snapshot, holdout_x, holdout_y)
    approx = _scores(score_ours_app(snapshot, pool, cache))

    residuals = []
    for eta in (1e-3, 1e-4, 1e-5):
        exact = _scores(score_ours(snapshot, pool, cache, OursConfig(eta=eta, inner_iterations=1)))
        residuals.append(np.max(np.abs(exact / eta - approx)))
    assert residuals[0] > residuals[1] > residuals[2]
    # Residual is O(eta): each decade of eta removes a decade of error.
    assert residuals[1] / residuals[0] <= 0.15
    assert residuals[2] / residuals[1] <= 0.15

    exact = _scores(score_ours(snapshot, pool, cache, OursConfig(eta=1e-5, inner_iterations=1)))
    assert spearmanr(exact, approx).correlation >= 0.99


def test_kernel_self_product_and_symmetry() -> None:
    snapshot = random_snapshot((4, 6, 3), seed=2)
    xi, xj = random_inputs(2, 4, seed=3)
    assert kernel_value(snapshot, xi, 1, xi, 1) >= 0.0
    assert kernel_value(snapshot, xi, 0, xj, 2) == pytest.approx(kernel_value(snapshot, xj, 2, xi, 0), abs=1e-15)


def test_kernel_binary_closed_form() -> None:
    rng = np.random.default_rng(5)
    weight = rng.standard_normal((3, 2))
    bias = rng.standard_normal(2)
    snapshot = _linear_snapshot(weight, bias)
    xi, xj = rng.standard_normal((2, 3))
    for yi in (0, 1):
        for yj in (0, 1):
            zi = xi @ weight + bias
            zj = xj @ weight + bias
            sigma_i = 1.0 / (1.0 + math.exp(-(zi[1] - zi[0])))
            sigma_j = 1.0 / (1.0 + math.exp(-(zj[1] - zj[0])))
            # Two-logit softmax: residuals are +-(sigma - y) on the two classes.
            c = (sigma_i - yi) * (sigma_j - yj)
            expected = 2.0 * c * (xi @ xj + 1.0)
            assert kernel_value(snapshot, xi, yi, xj, yj) == pytest.approx(expected, abs=1e-12)


def test_kernel_sign_cases_for_binary_model() -> None:
    snapshot = _linear_snapshot([[0.4, -0.4], [0.2, 0.1]], [0.0, 0.0])
    x = np.array([1.0, 0.5])
    near = x + 1e-6
    assert abs(kernel_value(snapshot, np.array([1.0, 0.0]), 0, np.array([-1.0, 0.0]), 1)) < 1e-9
    assert kernel_value(snapshot, x, 0, near, 1) < 0
    assert kernel_value(snapshot, x, 1, near, 1) > 0


def test_select_random_contract() -> None:
    indices = np.arange(20, 30)
    assert sorted(select_random(indices, 10, seed=1).tolist()) == indices.tolist()
    assert np.array_equal(select_random(indices, 4, seed=7), select_random(indices, 4, seed=7))
    assert select_random(indices, 0, seed=7).size == 0
    with pytest.raises(SelectionError):
        select_random(indices, 11, seed=7)


def test_entropy_extremes() -> None:
    uniform = _linear_snapshot(np.zeros((2, 10)), np.zeros(10))
    (cand,) = score_entropy(uniform, _pool([[0.3, -0.2]]))
    assert cand.score == pytest.approx(math.log(10), abs=1e-12)

    bias = np.zeros(10)
    bias[4] = 1000.0
    certain = _linear_snapshot(np.zeros((2, 10)), bias)
    (cand,) = score_entropy(certain, _pool([[0.3, -0.2]]))
    assert cand.score == 0.0


def test_entropy_never_exceeds_uniform() -> None:
    snapshot = random_snapshot((4, 6, 5), seed=3, scale=3.0)
    scores = _scores(score_entropy(snapshot, _pool(random_inputs(200, 4, seed=1))))
    assert np.all(scores <= math.log(5) + 1e-12)
    assert np.all(scores >= 0.0)


def test_mc_dropout_without_dropout_equals_entropy() -> None:
    snapshot = random_snapshot((4, 6, 3), seed=1, dropout_rate=0.0)
    pool = _pool(random_inputs(25, 4, seed=2))
    entropy = _scores(score_entropy(snapshot, pool))
    assert np.array_equal(_scores(score_mc_dropout(snapshot, pool, passes=10, seed=3)), entropy)
    assert np.array_equal(_scores(score_mc_dropout(snapshot, pool, passes=1, seed=3)), entropy)


def test_mc_dropout_and_bald_are_seeded() -> None:
    snapshot = random_snapshot((4, 16, 3), seed=1, dropout_rate=0.3)
    pool = _pool(random_inputs(25, 4, seed=2))
    for scorer in (score_mc_dropout, score_bald):
        assert np.array_equal(_scores(scorer(snapshot, pool, 8, 5)), _scores(scorer(snapshot, pool, 8, 5)))


def test_bald_closed_forms() -> None:
    certain_disagreement = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    assert bald_from_probs(certain_disagreement)[0] == pytest.approx(math.log(2), abs=1e-12)

    probs = np.random.default_rng(0).dirichlet(np.ones(4), size=6)
    identical = np.stack([probs] * 5)
    assert np.all(np.abs(bald_from_probs(identical)) < 1e-12)


def test_bald_bounded_by_predictive_entropy() -> None:
    stacked = np.random.default_rng(1).dirichlet(np.ones(5) * 0.5, size=(10, 50))
    bald = bald_from_probs(stacked)
    assert np.all(bald >= -1e-12)
    assert np.all(bald <= predictive_entropy(stacked.mean(axis=0)) + 1e-12)


def test_bald_without_dropout_is_zero() -> None:
    snapshot = random_snapshot((4, 6, 3), seed=1, dropout_rate=0.0)
    scores = _scores(score_bald(snapshot, _pool(random_inputs(10, 4)), passes=5, seed=0))
    assert np.all(scores == 0.0)


def _brute_force_greedy(points: np.ndarray, centers: np.ndarray, k: int) -> list:
    chosen: list = []
    for _ in range(k):
        best, best_distance = -1, -1.0
        for i, point in enumerate(points):
            anchors = [*centers, *(points[j] for j in chosen)]
            if anchors:
                distance = min(math.dist(point, anchor) for anchor in anchors)
            else:
                distance = min(math.dist(point, other) for j, other in enumerate(points) if j != i)
            if distance > best_distance:
                best, best_distance = i, distance
        chosen.append(best)
    return chosen


@pytest.mark.parametrize("seed", range(5))
def test_greedy_k_center_matches_brute_force(seed: int) -> None:
    rng = np.random.default_rng(seed)
    points = rng.standard_normal((12, 3))
    centers = rng.standard_normal((2, 3))
    positions, radii = greedy_k_center(points, centers, 6)
    assert positions.tolist() == _brute_force_greedy(points, centers, 6)
    assert np.all(np.diff(radii) <= 0)


def test_greedy_k_center_without_centers_starts_at_most_isolated() -> None:
    points = np.random.default_rng(3).standard_normal((10, 2))
    positions, _ = greedy_k_center(points, np.empty((0, 2)), 4)
    assert positions.tolist() == _brute_force_greedy(points, np.empty((0, 2)), 4)


def test_coreset_skips_points_already_covered() -> None:
    snapshot = _linear_snapshot(np.eye(2), np.zeros(2))
    train = np.array([[0.0, 0.0], [5.0, 5.0]])
    pool = _pool(np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0], [3.0, -2.0]]))
    selected = select_coreset_greedy(snapshot, pool, train, 2)
    assert selected.tolist() == [103, 101]
    # Covered points come last, each exactly once.
    assert select_coreset_greedy(snapshot, pool, train, 4).tolist() == [103, 101, 100, 102]


def test_badge_embedding_dimension() -> None:
    snapshot = random_snapshot((4, 7, 3), seed=0)
    assert gradient_embedding(snapshot, random_inputs(5, 4)).shape == (5, 21)


def test_badge_never_starts_with_zero_norm_sample() -> None:
    weight = np.array([[50.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    snapshot = _linear_snapshot(weight, np.zeros(3))
    features = np.array([[20.0, 0.0], [0.0, 1.0], [0.0, 2.0], [0.0, -1.5]])
    embedding = gradient_embedding(snapshot, features)
    assert not embedding[0].any()
    for seed in range(25):
        assert select_badge(snapshot, _pool(features), 1, seed).tolist() != [100]


def test_badge_is_seeded_and_distinct() -> None:
    snapshot = random_snapshot((4, 7, 3), seed=0, scale=2.0)
    pool = _pool(random_inputs(40, 4, seed=1))
    first = select_badge(snapshot, pool, 8, seed=3)
    assert np.array_equal(first, select_badge(snapshot, pool, 8, seed=3))
    assert np.unique(first).size == 8


def test_badge_falls_back_to_random_when_all_embeddings_vanish() -> None:
    snapshot = _linear_snapshot(np.zeros((2, 3)), np.array([900.0, 0.0, 0.0]))
    pool = _pool(random_inputs(6, 2))
    selected = select_badge(snapshot, pool, 3, seed=1)
    assert np.unique(selected).size == 3
    assert set(selected.tolist()) <= set(pool.indices.tolist())


def test_err_reduction_zero_iterations_and_determinism() -> None:
    snapshot = random_snapshot((4, 6, 3), seed=2, scale=2.0)
    pool = _pool(random_inputs(30, 4, seed=3))
    zero = score_err_reduction(snapshot, pool, 1, 10, OursConfig(inner_iterations=0))
    assert all(cand.score == 0.0 for cand in zero)
    first = _scores(score_err_reduction(snapshot, pool, 1, 10, OursConfig(eta=0.1)))
    assert np.array_equal(first, _scores(score_err_reduction(snapshot, pool, 1, 10, OursConfig(eta=0.1))))
    assert np.any(first != 0.0)


def test_err_reduction_saturated_candidate_scores_zero() -> None:
    weight = np.array([[60.0, 0.0, 0.0], [0.0, 0.3, -0.3]])
    snapshot = _linear_snapshot(weight, np.zeros(3))
    pool = _pool(np.array([[20.0, 0.0], [0.0, 1.0], [0.1, -1.0]]))
    scores = _scores(score_err_reduction(snapshot, pool, 0, 3, OursConfig(eta=0.5)))
    assert abs(scores[0]) < 1e-12


def test_egl_vanishes_for_certain_predictions() -> None:
    snapshot = _linear_snapshot(np.array([[60.0, 0.0], [0.0, 0.0]]), np.zeros(2))
    scores = _scores(score_egl(snapshot, _pool(np.array([[20.0, 0.0], [0.0, 1.0]]))))
    assert scores[0] == pytest.approx(0.0, abs=1e-12)
    assert scores[1] > 0.0


@pytest.mark.parametrize("eta", [1e-5, 1e-3, 10.0])
def test_top_k_is_invariant_to_positive_score_scaling(scoring_setup, eta: float) -> None:
    snapshot, pool, holdout_x, holdout_y = scoring_setup
    candidates = score_ours_app(snapshot, pool, build_holdout_cache(snapshot, holdout_x, holdout_y))
    scaled = [replace(cand, score=eta * cand.score) for cand in candidates]
    for k in (1, 5, 12):
        assert top_k(scaled, k).tolist() == top_k(candidates, k).tolist()


def test_top_k_orders_by_score_then_index() -> None:
    candidates = [ScoredCandidate(10, 3.0, 0), ScoredCandidate(11, 1.0, 0), ScoredCandidate(12, 2.0, 0)]
    assert top_k(candidates, 2).tolist() == [10, 12]
    assert top_k(candidates, 3).tolist() == [10, 12, 11]
    ties = [ScoredCandidate(index, 0.5, 0) for index in (7, 3, 9, 1)]
    assert top_k(ties, 2).tolist() == [1, 3]
    with pytest.raises(SelectionError):
        top_k(candidates, 4)


def test_subsample_pool_is_seeded_subset() -> None:
    pool = _pool(random_inputs(50, 3))
    sub = subsample_pool(pool, 10, seed=4)
    assert len(sub) == 10
    assert set(sub.indices.tolist()) <= set(pool.indices.tolist())
    assert np.array_equal(sub.indices, subsample_pool(pool, 10, seed=4).indices)
    assert subsample_pool(pool, None, seed=4) is pool


@pytest.mark.parametrize("strategy_id", STRATEGY_IDS)
def test_select_dispatches_every_strategy(strategy_id: str) -> None:
    snapshot = random_snapshot((4, 8, 3), seed=5, dropout_rate=0.2)
    pool = _pool(random_inputs(40, 4, seed=6))
    holdout_x = random_inputs(9, 4, seed=7)
    cache = build_holdout_cache(snapshot, holdout_x, [0, 1, 2] * 3)
    params = StrategyParams(mc_passes=4, err_subset_size=10)
    selection = select(
        strategy_id,
        snapshot,
        pool,
        5,
        seed=8,
        params=params,
        train_features=random_inputs(6, 4, seed=9),
        holdout=cache,
    )
    assert selection.indices.size == 5
    assert np.unique(selection.indices).size == 5
    assert set(selection.indices.tolist()) <= set(pool.indices.tolist())


def test_select_rejects_unknown_id_and_missing_holdout() -> None:
    snapshot = random_snapshot((4, 8, 3), seed=5)
    pool = _pool(random_inputs(10, 4))
    with pytest.raises(UnknownStrategyError) as excinfo:
        select("margin", snapshot, pool, 2, seed=0)
    assert "margin" in str(excinfo.value)
    assert "ours_app" in str(excinfo.value)
    with pytest.raises(ConfigurationError):
        select("ours", snapshot, pool, 2, seed=0)


def test_select_respects_pool_subsample() -> None:
    snapshot = random_snapshot((4, 8, 3), seed=5)
    pool = _pool(random_inputs(60, 4))
    params = StrategyParams(pool_subsample=12)
    allowed = set(subsample_pool(pool, 12, seed=3).indices.tolist())
    selection = select("entropy", snapshot, pool, 4, seed=3, params=params)
    assert set(selection.indices.tolist()) <= allowed
    assert len(selection.candidates) == 12
