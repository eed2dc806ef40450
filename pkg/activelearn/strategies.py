"""Acquisition criteria that score or select pool samples against a frozen model snapshot.

Every criterion here works on the last layer: pool and holdout samples are mapped
once to penultimate features phi(x), after which the output layer is a linear
softmax model over phi. Strategies only ever see a ``PoolView`` (indices and
features), so pool labels cannot leak into selection.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import entr, log_softmax, softmax
from sklearn.metrics import pairwise_distances

from .data import PoolView, SelectionError
from .nn_core import GradientScope, ModelSnapshot, mc_dropout_probs, one_hot, penultimate_features
from .utils.constants import (
    DEFAULT_ERR_SUBSET_SIZE,
    DEFAULT_ETA,
    DEFAULT_INNER_ITERATIONS,
    DEFAULT_MC_PASSES,
)

logger = logging.getLogger(__name__)

STRATEGY_IDS = (
    "random",
    "entropy",
    "mc_dropout",
    "bald",
    "coreset",
    "badge",
    "err_reduction",
    "egl",
    "ours",
    "ours_app",
)
HOLDOUT_STRATEGIES = frozenset({"ours", "ours_app"})

# Upper bound on floats held by one vectorised scoring chunk.
_CHUNK_BUDGET = 4_000_000


class StrategyError(ValueError):
    """Base error for acquisition criteria."""


class ConfigurationError(StrategyError):
    """Raised for invalid criterion settings or a missing/empty holdout set."""


class StaleCacheError(StrategyError):
    """Raised when a HoldoutCache was built against a different snapshot."""


class UnknownStrategyError(StrategyError):
    """Raised for a strategy id outside STRATEGY_IDS."""

    def __init__(self, strategy_id: str) -> None:
        super().__init__(f"unknown strategy '{strategy_id}'; valid ids: {', '.join(STRATEGY_IDS)}")
        self.strategy_id = strategy_id


@dataclass(frozen=True)
class ScoredCandidate:
    """A pool sample with its pseudo-label and acquisition score (higher is selected first)."""

    pool_index: int
    score: float
    pseudo_label: int
    eval_only_is_wrong: Optional[bool] = None


@dataclass(frozen=True)
class OursConfig:
    """Inner pseudo-label fine-tuning settings: SGD steps at rate ``eta`` on the last layer."""

    eta: float = DEFAULT_ETA
    inner_iterations: int = DEFAULT_INNER_ITERATIONS
    scope: GradientScope = GradientScope.LAST_LAYER
    workers: int = 1

    def __post_init__(self) -> None:
        if self.inner_iterations < 0:
            raise ConfigurationError("inner_iterations must be >= 0")
        if self.eta < 0:
            raise ConfigurationError("eta must be >= 0")
        if GradientScope(self.scope) is not GradientScope.LAST_LAYER:
            raise ConfigurationError("only last-layer scope is supported")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")


@dataclass(frozen=True, eq=False)
class HoldoutCache:
    """Holdout quantities at a snapshot.

    ``loss`` is the summed cross-entropy over the holdout set and
    ``grad_weight``/``grad_bias`` its last-layer gradient.
    """

    features: np.ndarray
    labels: np.ndarray
    logits: np.ndarray
    loss: float
    grad_weight: np.ndarray
    grad_bias: np.ndarray
    fingerprint: str

    def __len__(self) -> int:
        return int(self.labels.size)


@dataclass(frozen=True)
class StrategyParams:
    """Knobs shared by every criterion; unused ones are ignored by a given strategy."""

    eta: float = DEFAULT_ETA
    inner_iterations: int = DEFAULT_INNER_ITERATIONS
    mc_passes: int = DEFAULT_MC_PASSES
    err_subset_size: int = DEFAULT_ERR_SUBSET_SIZE
    pool_subsample: Optional[int] = None
    workers: int = 1

    def __post_init__(self) -> None:
        if self.mc_passes < 1:
            raise ConfigurationError("mc_passes must be >= 1")
        if self.err_subset_size < 1:
            raise ConfigurationError("err_subset_size must be >= 1")
        if self.pool_subsample is not None and self.pool_subsample < 1:
            raise ConfigurationError("pool_subsample must be >= 1 when set")

    def ours_config(self) -> OursConfig:
        return OursConfig(eta=self.eta, inner_iterations=self.inner_iterations, workers=self.workers)


@dataclass(frozen=True, eq=False)
class Selection:
    indices: np.ndarray
    candidates: Optional[Tuple[ScoredCandidate, ...]] = None

    def flag_mistakes(self, wrong: Sequence[bool]) -> "Selection":
        """Copy whose selected candidates carry ``eval_only_is_wrong``; ``wrong`` follows ``indices``."""
        flags = [bool(flag) for flag in wrong]
        if len(flags) != self.indices.size:
            raise ValueError(f"expected {self.indices.size} flags, got {len(flags)}")
        if self.candidates is None:
            return self
        by_index = dict(zip(self.indices.tolist(), flags))
        return Selection(
            self.indices,
            tuple(
                replace(cand, eval_only_is_wrong=by_index[cand.pool_index]) if cand.pool_index in by_index else cand
                for cand in self.candidates
            ),
        )

    def chosen_candidates(self) -> Tuple[ScoredCandidate, ...]:
        """Candidates of the selected indices in selection order; empty for non-scoring strategies."""
        if self.candidates is None:
            return ()
        by_index = {cand.pool_index: cand for cand in self.candidates}
        return tuple(by_index[index] for index in self.indices.tolist())


def validate_strategy_id(strategy_id: str) -> str:
    if strategy_id not in STRATEGY_IDS:
        raise UnknownStrategyError(strategy_id)
    return strategy_id


def needs_holdout(strategy_id: str) -> bool:
    return validate_strategy_id(strategy_id) in HOLDOUT_STRATEGIES


def build_holdout_cache(snapshot: ModelSnapshot, features: np.ndarray, labels: Sequence[int]) -> HoldoutCache:
    """Cache holdout penultimate features, logits, summed loss and last-layer gradient.

    Raises:
        ConfigurationError: If the holdout set is empty.
    """
    targets = np.asarray(labels, dtype=np.int64).reshape(-1)
    if targets.size == 0:
        raise ConfigurationError("holdout set is empty")
    phi = penultimate_features(snapshot, features)
    weight, bias = _last_layer(snapshot)
    logits = phi @ weight + bias
    residual = softmax(logits, axis=1) - one_hot(targets, snapshot.num_classes)
    loss = float(_summed_losses(logits[None, :, :], targets)[0])
    return HoldoutCache(
        features=phi,
        labels=targets,
        logits=logits,
        loss=loss,
        grad_weight=phi.T @ residual,
        grad_bias=residual.sum(axis=0),
        fingerprint=snapshot.fingerprint,
    )


def score_ours(
    snapshot: ModelSnapshot, pool: PoolView, holdout: HoldoutCache, cfg: OursConfig = OursConfig()
) -> List[ScoredCandidate]:
    """Holdout loss change after fine-tuning the last layer on each pool sample's pseudo-label.

    For every candidate the output layer is (virtually) cloned and updated by
    ``cfg.inner_iterations`` SGD steps at ``cfg.eta`` on the single pseudo-labelled
    sample; the score is ``l_v(updated) - l_v(snapshot)``. Each step changes the
    layer by the rank-1 term ``eta * phi g_t^T`` (and ``eta * g_t`` on the bias), so
    updated logits on a holdout feature ``u`` are
    ``base(u) - eta * (u . phi + 1) * sum_t g_t`` exactly, which lets candidates
    be processed in vectorised chunks without copying the layer.

    Raises:
        StaleCacheError: If ``holdout`` was built for another snapshot.
    """
    _check_cache(snapshot, holdout)
    phi, logits, probs, pseudo = _pool_state(snapshot, pool)
    if cfg.inner_iterations == 0 or cfg.eta == 0.0:
        return _candidates(pool, np.zeros(len(pool)), pseudo)

    direction = _inner_sgd_direction(phi, logits, pseudo, cfg)

    def score_chunk(rows: slice) -> np.ndarray:
        coupling = phi[rows] @ holdout.features.T + 1.0
        updated = holdout.logits[None, :, :] - cfg.eta * coupling[:, :, None] * direction[rows, None, :]
        return _summed_losses(updated, holdout.labels)

    chunk = max(1, _CHUNK_BUDGET // max(1, len(holdout) * snapshot.num_classes))
    losses = _map_chunks(score_chunk, len(pool), chunk, cfg.workers)
    return _candidates(pool, losses - holdout.loss, pseudo)


def score_ours_app(snapshot: ModelSnapshot, pool: PoolView, holdout: HoldoutCache) -> List[ScoredCandidate]:
    """First-order criterion ``-grad l_v . grad l(x, y_hat)`` on the last layer; no updates."""
    _check_cache(snapshot, holdout)
    phi, _, probs, pseudo = _pool_state(snapshot, pool)
    residual = probs - one_hot(pseudo, snapshot.num_classes)
    alignment = np.einsum("nc,nc->n", phi @ holdout.grad_weight, residual) + residual @ holdout.grad_bias
    return _candidates(pool, -alignment, pseudo)


def kernel_value(
    snapshot: ModelSnapshot, x_i: np.ndarray, y_i: int, x_j: np.ndarray, y_j: int
) -> float:
    """Dot product of the last-layer loss gradients of two (sample, label) pairs."""
    grad_i = _flat_last_layer_gradient(snapshot, x_i, y_i)
    grad_j = _flat_last_layer_gradient(snapshot, x_j, y_j)
    return float(grad_i @ grad_j)


def select_random(pool_indices: Sequence[int], k: int, seed: int) -> np.ndarray:
    indices = np.asarray(pool_indices, dtype=np.int64)
    _check_k(k, indices.size)
    return np.random.default_rng(seed).choice(indices, size=k, replace=False)


def score_entropy(snapshot: ModelSnapshot, pool: PoolView) -> List[ScoredCandidate]:
    _, _, probs, pseudo = _pool_state(snapshot, pool)
    return _candidates(pool, predictive_entropy(probs), pseudo)


def score_mc_dropout(snapshot: ModelSnapshot, pool: PoolView, passes: int, seed: int) -> List[ScoredCandidate]:
    """Entropy of the mean softmax over MC-dropout passes."""
    _, _, _, pseudo = _pool_state(snapshot, pool)
    stacked = _dropout_passes(snapshot, pool, passes, seed)
    return _candidates(pool, predictive_entropy(stacked.mean(axis=0)), pseudo)


def score_bald(snapshot: ModelSnapshot, pool: PoolView, passes: int, seed: int) -> List[ScoredCandidate]:
    """Mutual information between the prediction and the dropout posterior."""
    _, _, _, pseudo = _pool_state(snapshot, pool)
    stacked = _dropout_passes(snapshot, pool, passes, seed)
    return _candidates(pool, bald_from_probs(stacked), pseudo)


def predictive_entropy(probs: np.ndarray) -> np.ndarray:
    return entr(probs).sum(axis=-1)


def bald_from_probs(stacked: np.ndarray) -> np.ndarray:
    """``H[mean_t p_t] - mean_t H[p_t]`` for a passes x N x C tensor, clamped at 0."""
    mutual_information = predictive_entropy(stacked.mean(axis=0)) - predictive_entropy(stacked).mean(axis=0)
    return np.maximum(mutual_information, 0.0)


def select_coreset_greedy(
    snapshot: ModelSnapshot, pool: PoolView, train_features: np.ndarray, k: int
) -> np.ndarray:
    """Greedy k-center selection in penultimate feature space (Euclidean)."""
    _check_k(k, len(pool))
    pool_embedding = penultimate_features(snapshot, pool.features)
    if np.asarray(train_features).size:
        center_embedding = penultimate_features(snapshot, train_features)
    else:
        center_embedding = np.empty((0, pool_embedding.shape[1]))
    positions, radii = greedy_k_center(pool_embedding, center_embedding, k)
    if radii.size:
        logger.debug("coreset cover radius %.6f after %d picks", radii[-1], k)
    return pool.indices[positions]


def greedy_k_center(points: np.ndarray, centers: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Farthest-first traversal.

    Args:
        points: n x d candidates.
        centers: m x d already-covered points (may be empty).
        k: Number of picks.

    Returns:
        Tuple of (picked positions into ``points``, cover radius after each pick),
        where the cover radius is the largest distance from any point to its
        nearest center. With no centers the first pick is the most isolated point
        (largest distance to its nearest other point). Ties go to the lowest position.
    """
    _check_k(k, points.shape[0])
    if k == 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    if centers.shape[0]:
        nearest = _min_distances(points, centers)
        first = int(np.argmax(nearest))
    else:
        first = _most_isolated(points)
        nearest = np.full(points.shape[0], np.inf)
    picked = np.zeros(points.shape[0], dtype=bool)
    picks: List[int] = []
    radii: List[float] = []
    nxt = first
    while True:
        picks.append(nxt)
        picked[nxt] = True
        nearest = np.minimum(nearest, pairwise_distances(points, points[nxt : nxt + 1]).ravel())
        nearest[nxt] = 0.0
        radii.append(float(nearest.max()))
        if len(picks) == k:
            break
        # Picked points sit at distance 0 and must not be chosen again.
        nxt = int(np.argmax(np.where(picked, -1.0, nearest)))
    return np.asarray(picks, dtype=np.int64), np.asarray(radii)


def gradient_embedding(snapshot: ModelSnapshot, pool_features: np.ndarray) -> np.ndarray:
    """Explicit pseudo-label gradient embedding ``(p - onehot(y_hat)) (x) phi(x)``, shape n x (C * d)."""
    phi = penultimate_features(snapshot, pool_features)
    weight, bias = _last_layer(snapshot)
    probs = softmax(phi @ weight + bias, axis=1)
    residual = probs - one_hot(np.argmax(probs, axis=1), snapshot.num_classes)
    return (residual[:, :, None] * phi[:, None, :]).reshape(phi.shape[0], -1)


def select_badge(snapshot: ModelSnapshot, pool: PoolView, k: int, seed: int) -> np.ndarray:
    """k-means++ seeding over gradient embeddings.

    The first center is drawn with probability proportional to the squared
    embedding norm, later ones proportional to the squared distance to the
    nearest chosen center. Distances use the factorisation
    ``|g_i (x) phi_i - g_j (x) phi_j|^2 = |g_i|^2 |phi_i|^2 + |g_j|^2 |phi_j|^2 - 2 (g_i . g_j)(phi_i . phi_j)``.
    All-zero embeddings fall back to a seeded random draw.
    """
    _check_k(k, len(pool))
    rng = np.random.default_rng(seed)
    if k == 0:
        return np.empty(0, dtype=np.int64)
    phi, _, probs, pseudo = _pool_state(snapshot, pool)
    residual = probs - one_hot(pseudo, snapshot.num_classes)
    residual_sq = np.einsum("nc,nc->n", residual, residual)
    phi_sq = np.einsum("nd,nd->n", phi, phi)
    norms_sq = residual_sq * phi_sq
    total = norms_sq.sum()
    if total <= 0.0:
        logger.warning("all gradient embeddings are zero; falling back to random selection")
        return pool.indices[rng.choice(len(pool), size=k, replace=False)]

    def sq_distance_to(center: int) -> np.ndarray:
        cross = (residual @ residual[center]) * (phi @ phi[center])
        return np.maximum(norms_sq + norms_sq[center] - 2.0 * cross, 0.0)

    first = int(rng.choice(len(pool), p=norms_sq / total))
    chosen = [first]
    nearest = sq_distance_to(first)
    nearest[first] = 0.0
    while len(chosen) < k:
        weight_total = nearest.sum()
        if weight_total <= 0.0:
            rest = np.setdiff1d(np.arange(len(pool)), chosen)
            chosen.extend(int(i) for i in rng.choice(rest, size=k - len(chosen), replace=False))
            break
        nxt = int(rng.choice(len(pool), p=nearest / weight_total))
        chosen.append(nxt)
        nearest = np.minimum(nearest, sq_distance_to(nxt))
        nearest[chosen] = 0.0
    return pool.indices[np.asarray(chosen, dtype=np.int64)]


def score_err_reduction(
    snapshot: ModelSnapshot,
    pool: PoolView,
    pool_subset_seed: int,
    subset_size: int = DEFAULT_ERR_SUBSET_SIZE,
    cfg: OursConfig = OursConfig(),
) -> List[ScoredCandidate]:
    """Expected error reduction with pseudo-labels.

    Each candidate's last layer is fine-tuned on its pseudo-label exactly as in
    ``score_ours``; the expected error is the mean predictive entropy on a fixed
    seeded pool subset. Score = baseline error - updated error.
    """
    if subset_size < 1:
        raise ConfigurationError("subset_size must be >= 1")
    phi, logits, probs, pseudo = _pool_state(snapshot, pool)
    if cfg.inner_iterations == 0 or cfg.eta == 0.0 or len(pool) == 0:
        return _candidates(pool, np.zeros(len(pool)), pseudo)

    rng = np.random.default_rng(pool_subset_seed)
    subset = np.sort(rng.choice(len(pool), size=min(subset_size, len(pool)), replace=False))
    subset_phi = phi[subset]
    subset_logits = logits[subset]
    baseline = float(_mean_entropy(subset_logits[None, :, :])[0])
    direction = _inner_sgd_direction(phi, logits, pseudo, cfg)

    def score_chunk(rows: slice) -> np.ndarray:
        coupling = phi[rows] @ subset_phi.T + 1.0
        updated = subset_logits[None, :, :] - cfg.eta * coupling[:, :, None] * direction[rows, None, :]
        return baseline - _mean_entropy(updated)

    chunk = max(1, _CHUNK_BUDGET // max(1, subset.size * snapshot.num_classes))
    return _candidates(pool, _map_chunks(score_chunk, len(pool), chunk, cfg.workers), pseudo)


def score_egl(snapshot: ModelSnapshot, pool: PoolView) -> List[ScoredCandidate]:
    """Expected last-layer gradient length ``sum_c p_c |grad l(x, c)|`` over the predictive distribution."""
    phi, _, probs, pseudo = _pool_state(snapshot, pool)
    phi_term = np.einsum("nd,nd->n", phi, phi) + 1.0
    # |p - e_c|^2 = |p|^2 - 2 p_c + 1
    residual_sq = np.einsum("nc,nc->n", probs, probs)[:, None] - 2.0 * probs + 1.0
    lengths = np.sqrt(np.maximum(residual_sq, 0.0) * phi_term[:, None])
    return _candidates(pool, (probs * lengths).sum(axis=1), pseudo)


def top_k(candidates: Sequence[ScoredCandidate], k: int) -> np.ndarray:
    """Pool indices of the k best candidates: descending score, ties by ascending pool index."""
    _check_k(k, len(candidates))
    scores = np.fromiter((cand.score for cand in candidates), dtype=np.float64, count=len(candidates))
    indices = np.fromiter((cand.pool_index for cand in candidates), dtype=np.int64, count=len(candidates))
    order = np.lexsort((indices, -scores))
    return indices[order[:k]]


def subsample_pool(pool: PoolView, size: Optional[int], seed: int) -> PoolView:
    if size is None or size >= len(pool):
        return pool
    positions = np.sort(np.random.default_rng(seed).choice(len(pool), size=size, replace=False))
    return pool.take(positions)


def select(
    strategy_id: str,
    snapshot: ModelSnapshot,
    pool: PoolView,
    k: int,
    seed: int,
    params: StrategyParams = StrategyParams(),
    train_features: Optional[np.ndarray] = None,
    holdout: Optional[HoldoutCache] = None,
) -> Selection:
    """Dispatch a strategy by its stable id and return the chosen pool indices.

    Args:
        strategy_id: One of STRATEGY_IDS.
        snapshot: Frozen model used for scoring.
        pool: Unlabelled pool view.
        k: Number of samples to select.
        seed: Seed for every stochastic component of the strategy.
        params: Shared strategy knobs.
        train_features: Labelled training inputs; required by coreset.
        holdout: Holdout cache; required by ours / ours_app.

    Returns:
        Selection with indices and, for scoring strategies, all scored candidates.

    Raises:
        UnknownStrategyError: For an unknown id.
        ConfigurationError: When a required input is missing.
        SelectionError: When k exceeds the (possibly subsampled) pool.
    """
    validate_strategy_id(strategy_id)
    pool = subsample_pool(pool, params.pool_subsample, seed)
    _check_k(k, len(pool))

    if strategy_id == "random":
        return Selection(select_random(pool.indices, k, seed))
    if strategy_id == "coreset":
        if train_features is None:
            raise ConfigurationError("coreset needs the labelled training features")
        return Selection(select_coreset_greedy(snapshot, pool, train_features, k))
    if strategy_id == "badge":
        return Selection(select_badge(snapshot, pool, k, seed))
    if strategy_id in HOLDOUT_STRATEGIES and holdout is None:
        raise ConfigurationError(f"{strategy_id} needs a holdout cache")

    if strategy_id == "entropy":
        candidates = score_entropy(snapshot, pool)
    elif strategy_id == "mc_dropout":
        candidates = score_mc_dropout(snapshot, pool, params.mc_passes, seed)
    elif strategy_id == "bald":
        candidates = score_bald(snapshot, pool, params.mc_passes, seed)
    elif strategy_id == "err_reduction":
        candidates = score_err_reduction(snapshot, pool, seed, params.err_subset_size, params.ours_config())
    elif strategy_id == "egl":
        candidates = score_egl(snapshot, pool)
    elif strategy_id == "ours":
        candidates = score_ours(snapshot, pool, holdout, params.ours_config())
    else:
        candidates = score_ours_app(snapshot, pool, holdout)
    return Selection(top_k(candidates, k), tuple(candidates))


def _last_layer(snapshot: ModelSnapshot) -> Tuple[np.ndarray, np.ndarray]:
    return snapshot.weights[-1], snapshot.biases[-1]


def _check_cache(snapshot: ModelSnapshot, holdout: HoldoutCache) -> None:
    if holdout.fingerprint != snapshot.fingerprint:
        raise StaleCacheError("holdout cache was built for a different snapshot; rebuild it")
    if len(holdout) == 0:
        raise ConfigurationError("holdout set is empty")


def _check_k(k: int, available: int) -> None:
    if k < 0 or k > available:
        raise SelectionError(f"cannot select {k} samples from {available}")


def _pool_state(snapshot: ModelSnapshot, pool: PoolView) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Penultimate features, logits, eval softmax and pseudo-labels for the pool."""
    weight, bias = _last_layer(snapshot)
    if len(pool) == 0:
        empty = np.empty((0, weight.shape[0]))
        no_logits = np.empty((0, weight.shape[1]))
        return empty, no_logits, no_logits, np.empty(0, dtype=np.int64)
    phi = penultimate_features(snapshot, pool.features)
    logits = phi @ weight + bias
    probs = softmax(logits, axis=1)
    return phi, logits, probs, np.argmax(probs, axis=1)


def _inner_sgd_direction(
    phi: np.ndarray, logits: np.ndarray, pseudo: np.ndarray, cfg: OursConfig
) -> np.ndarray:
    """Sum of per-step logit residuals ``sum_t (p_t - onehot(y_hat))`` for single-sample SGD."""
    target = one_hot(pseudo, logits.shape[1])
    self_coupling = np.einsum("nd,nd->n", phi, phi)[:, None] + 1.0
    current = logits
    total = np.zeros_like(logits)
    for _ in range(cfg.inner_iterations):
        residual = softmax(current, axis=1) - target
        total = total + residual
        current = current - cfg.eta * self_coupling * residual
    return total


def _summed_losses(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Summed cross-entropy per leading slice of a (batch, V, C) logits tensor."""
    log_probs = log_softmax(logits, axis=2)
    picked = log_probs[:, np.arange(labels.size), labels]
    return -picked.sum(axis=1)


def _mean_entropy(logits: np.ndarray) -> np.ndarray:
    return entr(softmax(logits, axis=2)).sum(axis=2).mean(axis=1)


def _flat_last_layer_gradient(snapshot: ModelSnapshot, x: np.ndarray, y: int) -> np.ndarray:
    phi = penultimate_features(snapshot, np.atleast_2d(np.asarray(x, dtype=np.float64)))[0]
    weight, bias = _last_layer(snapshot)
    probs = softmax(phi @ weight + bias)
    residual = probs - one_hot(np.asarray([y], dtype=np.int64), snapshot.num_classes)[0]
    return np.concatenate([np.outer(phi, residual).ravel(), residual])


def _dropout_passes(snapshot: ModelSnapshot, pool: PoolView, passes: int, seed: int) -> np.ndarray:
    if passes < 1:
        raise ConfigurationError("passes must be >= 1")
    if len(pool) == 0:
        return np.empty((1, 0, snapshot.num_classes))
    # Without dropout every pass is identical.
    effective = 1 if snapshot.dropout_rate == 0.0 else passes
    return mc_dropout_probs(snapshot, pool.features, effective, seed)


def _map_chunks(fn: Callable[[slice], np.ndarray], total: int, chunk: int, workers: int) -> np.ndarray:
    """Apply ``fn`` over consecutive row slices and concatenate results in row order."""
    slices = [slice(start, min(start + chunk, total)) for start in range(0, total, chunk)]
    if not slices:
        return np.empty(0)
    if workers > 1 and len(slices) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(fn, slices))
    else:
        parts = [fn(rows) for rows in slices]
    return np.concatenate(parts)


def _candidates(pool: PoolView, scores: np.ndarray, pseudo: np.ndarray) -> List[ScoredCandidate]:
    if not np.all(np.isfinite(scores)):
        raise StrategyError("acquisition produced non-finite scores")
    return [
        ScoredCandidate(int(index), float(score), int(label))
        for index, score, label in zip(pool.indices, scores, pseudo)
    ]


def _most_isolated(points: np.ndarray) -> int:
    if points.shape[0] == 1:
        return 0
    best, best_distance = 0, -1.0
    for start in range(0, points.shape[0], 1024):
        block = pairwise_distances(points[start : start + 1024], points)
        rows = np.arange(block.shape[0])
        block[rows, start + rows] = np.inf
        nearest = block.min(axis=1)
        local = int(np.argmax(nearest))
        if nearest[local] > best_distance:
            best, best_distance = start + local, float(nearest[local])
    return best


def _min_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    nearest = np.empty(points.shape[0])
    for start in range(0, points.shape[0], 4096):
        nearest[start : start + 4096] = pairwise_distances(points[start : start + 4096], centers).min(axis=1)
    return nearest
