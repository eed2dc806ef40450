"""Feed-forward network primitives with analytic gradients used by the acquisition criteria."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
import hashlib
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .utils.constants import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPSILON,
    ADAM_LEARNING_RATE,
)

# Dense float64 array; rows are samples.
Matrix = np.ndarray
Params = Dict[str, np.ndarray]


class NNError(ValueError):
    """Base error for network construction and evaluation problems."""


class DimensionError(NNError):
    """Raised when array shapes do not compose."""


class LabelError(NNError):
    """Raised when a class index falls outside [0, C)."""


class CacheStateError(NNError):
    """Raised when a ForwardCache does not belong to the model or labels it is used with."""


class NonFiniteError(NNError):
    """Raised when an operation would emit NaN or Inf."""


class ForwardMode(str, Enum):
    EVAL = "eval"
    TRAIN = "train"


class GradientScope(str, Enum):
    ALL_LAYERS = "all-layers"
    LAST_LAYER = "last-layer"


def weight_key(layer: int) -> str:
    return f"W{layer}"


def bias_key(layer: int) -> str:
    return f"b{layer}"


@dataclass(eq=False)
class MlpModel:
    """Rectifier MLP ``f(x; theta)`` with a linear output layer producing C logits.

    ``weights[l]`` has shape ``layer_dims[l] x layer_dims[l + 1]``; hidden layers
    apply ReLU followed by inverted dropout in train mode.
    """

    layer_dims: Tuple[int, ...]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    dropout_rate: float = 0.0

    def __post_init__(self) -> None:
        self.layer_dims = tuple(int(dim) for dim in self.layer_dims)
        _validate_architecture(self.layer_dims, self.weights, self.biases, self.dropout_rate)

    @classmethod
    def initialize(cls, layer_dims: Sequence[int], seed: int, dropout_rate: float = 0.0) -> "MlpModel":
        """Build a model with weights drawn uniformly from +-1/sqrt(fan_in).

        Args:
            layer_dims: Input dimension, hidden widths, and class count.
            seed: Seed for the weight generator.
            dropout_rate: Dropout probability applied to hidden activations in train mode.

        Returns:
            Freshly initialised MlpModel.
        """
        dims = tuple(int(dim) for dim in layer_dims)
        if len(dims) < 2 or any(dim < 1 for dim in dims):
            raise DimensionError(f"layer_dims must hold at least input and output sizes >= 1, got {dims}")
        rng = np.random.default_rng(seed)
        weights: List[np.ndarray] = []
        biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(dims, weights, biases, dropout_rate=dropout_rate)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> Params:
        params: Params = {}
        for layer, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            params[weight_key(layer)] = weight
            params[bias_key(layer)] = bias
        return params

    def set_parameters(self, params: Params) -> None:
        """Replace parameters by key; keys absent from ``params`` keep their current arrays."""
        for layer in range(self.num_layers):
            w_key, b_key = weight_key(layer), bias_key(layer)
            if w_key in params:
                _require_shape(params[w_key], self.weights[layer].shape, w_key)
                self.weights[layer] = np.array(params[w_key], dtype=np.float64)
            if b_key in params:
                _require_shape(params[b_key], self.biases[layer].shape, b_key)
                self.biases[layer] = np.array(params[b_key], dtype=np.float64)

    def snapshot(self) -> "ModelSnapshot":
        return ModelSnapshot.capture(self)

    def load(self, snapshot: "ModelSnapshot") -> None:
        """Restore parameters from a snapshot taken from a model with the same architecture."""
        if snapshot.layer_dims != self.layer_dims:
            raise DimensionError(f"snapshot dims {snapshot.layer_dims} do not match model dims {self.layer_dims}")
        self.weights = [np.array(weight) for weight in snapshot.weights]
        self.biases = [np.array(bias) for bias in snapshot.biases]


@dataclass(frozen=True, eq=False)
class ModelSnapshot:
    """Frozen deep copy of model parameters (theta^s).

    Arrays are marked read-only, so any attempt to update a snapshot in place fails loudly.
    """

    layer_dims: Tuple[int, ...]
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    dropout_rate: float
    fingerprint: str

    @classmethod
    def capture(cls, model: MlpModel) -> "ModelSnapshot":
        weights = tuple(_frozen_copy(weight) for weight in model.weights)
        biases = tuple(_frozen_copy(bias) for bias in model.biases)
        digest = hashlib.sha1()
        for array in (*weights, *biases):
            digest.update(array.tobytes())
        return cls(model.layer_dims, weights, biases, model.dropout_rate, digest.hexdigest())

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> Params:
        params: Params = {}
        for layer, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            params[weight_key(layer)] = weight
            params[bias_key(layer)] = bias
        return params

    def to_model(self) -> MlpModel:
        return MlpModel(
            self.layer_dims,
            [np.array(weight) for weight in self.weights],
            [np.array(bias) for bias in self.biases],
            dropout_rate=self.dropout_rate,
        )


Network = Union[MlpModel, ModelSnapshot]


@dataclass(eq=False)
class ForwardCache:
    """Intermediate values of one forward pass.

    ``activations[0]`` is the input batch and ``activations[-1]`` the penultimate
    activation phi(x) fed to the output layer. ``masks[l]`` holds the scaled
    dropout mask applied to hidden layer ``l`` (None when no dropout was applied).
    """

    layer_dims: Tuple[int, ...]
    pre_activations: List[np.ndarray]
    activations: List[np.ndarray]
    masks: List[Optional[np.ndarray]]
    logits: np.ndarray

    @property
    def penultimate(self) -> np.ndarray:
        return self.activations[-1]

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]


@dataclass
class OptimizerState:
    """Adam moments mirroring parameter shapes, plus the step counter."""

    learning_rate: float = ADAM_LEARNING_RATE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON
    step: int = 0
    first_moment: Params = field(default_factory=dict)
    second_moment: Params = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Params, learning_rate: float = ADAM_LEARNING_RATE, **hyper: float) -> "OptimizerState":
        state = cls(learning_rate=learning_rate, **hyper)
        state.first_moment = {key: np.zeros_like(value, dtype=np.float64) for key, value in params.items()}
        state.second_moment = {key: np.zeros_like(value, dtype=np.float64) for key, value in params.items()}
        return state

    def reset(self) -> None:
        """Zero both moments and the step counter; parameters are untouched."""
        self.step = 0
        for key in self.first_moment:
            self.first_moment[key] = np.zeros_like(self.first_moment[key])
            self.second_moment[key] = np.zeros_like(self.second_moment[key])


def forward(
    model: Network,
    inputs: Matrix,
    mode: ForwardMode = ForwardMode.EVAL,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Matrix, ForwardCache]:
    """Run the network on a batch.

    Args:
        model: MlpModel or ModelSnapshot providing the parameters.
        inputs: N x D batch with D == layer_dims[0].
        mode: EVAL is deterministic; TRAIN applies inverted dropout on hidden layers.
        rng: Generator drawing dropout masks; required in TRAIN mode when dropout_rate > 0.

    Returns:
        Tuple of (N x C logits, ForwardCache).

    Raises:
        DimensionError: If the input width does not match the model.
        CacheStateError: If TRAIN mode needs dropout masks but no generator was supplied.
    """
    batch = _as_matrix(inputs, "inputs")
    if batch.shape[1] != model.layer_dims[0]:
        raise DimensionError(f"inputs have {batch.shape[1]} columns, model expects {model.layer_dims[0]}")
    mode = ForwardMode(mode)
    use_dropout = mode is ForwardMode.TRAIN and model.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise CacheStateError("train-mode forward with dropout requires a random generator")

    pre_activations: List[np.ndarray] = []
    activations: List[np.ndarray] = [batch]
    masks: List[Optional[np.ndarray]] = []
    hidden = batch
    last = model.num_layers - 1
    for layer in range(last):
        pre = hidden @ model.weights[layer] + model.biases[layer]
        hidden = np.maximum(pre, 0.0)
        mask: Optional[np.ndarray] = None
        if use_dropout:
            keep = 1.0 - model.dropout_rate
            mask = (rng.random(pre.shape) < keep) / keep
            hidden = hidden * mask
        pre_activations.append(pre)
        activations.append(hidden)
        masks.append(mask)

    logits = hidden @ model.weights[last] + model.biases[last]
    pre_activations.append(logits)
    _require_finite(logits, "logits")
    cache = ForwardCache(model.layer_dims, pre_activations, activations, masks, logits)
    return logits, cache


def softmax_probs(logits: Matrix) -> Matrix:
    return softmax(_as_matrix(logits, "logits"), axis=1)


def softmax_xent(logits: Matrix, labels: Sequence[int]) -> Tuple[float, np.ndarray, Matrix]:
    """Cross-entropy of softmax outputs against class indices.

    Args:
        logits: N x C scores.
        labels: N class indices.

    Returns:
        Tuple of (mean loss, per-sample losses, N x C probabilities).

    Raises:
        LabelError: If a label is outside [0, C) or the label count differs from N.
    """
    scores = _as_matrix(logits, "logits")
    targets = _check_labels(labels, scores.shape[0], scores.shape[1])
    log_probs = log_softmax(scores, axis=1)
    per_sample = -log_probs[np.arange(scores.shape[0]), targets]
    probs = softmax(scores, axis=1)
    mean_loss = float(per_sample.mean()) if per_sample.size else 0.0
    return mean_loss, per_sample, probs


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    encoded = np.zeros((labels.shape[0], num_classes), dtype=np.float64)
    encoded[np.arange(labels.shape[0]), labels] = 1.0
    return encoded


def backward(
    model: Network,
    cache: ForwardCache,
    labels: Sequence[int],
    scope: GradientScope = GradientScope.ALL_LAYERS,
) -> Params:
    """Gradients of the mean cross-entropy loss w.r.t. the selected parameters.

    The logit gradient is ``(p - onehot(y)) / N``; last-layer scope returns only
    ``W{L-1}`` (phi^T delta) and ``b{L-1}``.

    Raises:
        CacheStateError: If the cache was produced by a different architecture or batch.
    """
    if cache.layer_dims != model.layer_dims:
        raise CacheStateError(f"cache built for dims {cache.layer_dims}, model has {model.layer_dims}")
    targets = _check_labels(labels, cache.batch_size, model.num_classes)
    batch_size = cache.batch_size
    scope = GradientScope(scope)

    delta = (softmax(cache.logits, axis=1) - one_hot(targets, model.num_classes)) / batch_size
    grads: Params = {}
    last = model.num_layers - 1
    first = last if scope is GradientScope.LAST_LAYER else 0
    for layer in range(last, first - 1, -1):
        grads[weight_key(layer)] = cache.activations[layer].T @ delta
        grads[bias_key(layer)] = delta.sum(axis=0)
        if layer == first:
            break
        delta = delta @ model.weights[layer].T
        delta = delta * (cache.pre_activations[layer - 1] > 0.0)
        mask = cache.masks[layer - 1]
        if mask is not None:
            delta = delta * mask
    return grads


def sgd_step(params: Params, grads: Params, eta: float) -> Params:
    """Return ``params - eta * grads`` for every key in ``grads``; other keys pass through."""
    if eta < 0:
        raise NNError(f"eta must be >= 0, got {eta}")
    updated = dict(params)
    for key, grad in grads.items():
        if key not in params:
            raise DimensionError(f"gradient for unknown parameter '{key}'")
        _require_shape(grad, params[key].shape, key)
        updated[key] = params[key] - eta * grad
    return updated


def adam_step(params: Params, grads: Params, state: OptimizerState) -> Tuple[Params, OptimizerState]:
    """Bias-corrected Adam update; moments in ``state`` are advanced in place.

    Args:
        params: Current parameters keyed like ``MlpModel.parameters()``.
        grads: Gradients for a subset (or all) of the keys.
        state: Optimizer state whose moments mirror ``params``.

    Returns:
        Tuple of (new parameter dict, the advanced state).

    Raises:
        DimensionError: If a gradient or moment shape differs from its parameter.
    """
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    updated = dict(params)
    for key, grad in grads.items():
        if key not in params:
            raise DimensionError(f"gradient for unknown parameter '{key}'")
        _require_shape(grad, params[key].shape, key)
        if key not in state.first_moment:
            state.first_moment[key] = np.zeros_like(params[key], dtype=np.float64)
            state.second_moment[key] = np.zeros_like(params[key], dtype=np.float64)
        _require_shape(state.first_moment[key], params[key].shape, f"moment of {key}")
        state.first_moment[key] = state.beta1 * state.first_moment[key] + (1.0 - state.beta1) * grad
        state.second_moment[key] = state.beta2 * state.second_moment[key] + (1.0 - state.beta2) * (grad * grad)
        m_hat = state.first_moment[key] / correction1
        v_hat = state.second_moment[key] / correction2
        updated[key] = params[key] - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return updated, state


def penultimate_features(model: Network, inputs: Matrix) -> Matrix:
    """Eval-mode phi(x): the activation fed into the final linear layer."""
    _, cache = forward(model, inputs, ForwardMode.EVAL)
    return cache.penultimate


def binary_logistic_grad(z: float, y: float, phi: np.ndarray) -> np.ndarray:
    # d/dtheta of BCE(sigmoid(theta . phi), y) = (sigmoid(z) - y) * phi
    return (expit(z) - y) * np.asarray(phi, dtype=np.float64)


def mc_dropout_probs(model: Network, inputs: Matrix, passes: int, seed: int) -> np.ndarray:
    """Stack of softmax outputs from independent dropout passes.

    Pass ``t`` draws its mask from a generator seeded with ``(seed, t)``, so the
    tensor is reproducible whatever order the passes are evaluated in.

    Returns:
        Array of shape passes x N x C.
    """
    if passes < 1:
        raise NNError(f"passes must be >= 1, got {passes}")
    stacked = []
    for pass_index in range(passes):
        rng = np.random.default_rng([seed, pass_index])
        logits, _ = forward(model, inputs, ForwardMode.TRAIN, rng=rng)
        stacked.append(softmax(logits, axis=1))
    return np.stack(stacked)


def _validate_architecture(
    dims: Tuple[int, ...], weights: Sequence[np.ndarray], biases: Sequence[np.ndarray], dropout_rate: float
) -> None:
    if len(weights) != len(dims) - 1 or len(biases) != len(dims) - 1:
        raise DimensionError(f"{len(dims)} layer dims need {len(dims) - 1} weight/bias pairs")
    for layer, (weight, bias) in enumerate(zip(weights, biases)):
        _require_shape(weight, (dims[layer], dims[layer + 1]), weight_key(layer))
        _require_shape(bias, (dims[layer + 1],), bias_key(layer))
    if not 0.0 <= dropout_rate < 1.0:
        raise NNError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")


def _frozen_copy(array: np.ndarray) -> np.ndarray:
    copy = np.array(array, dtype=np.float64, copy=True)
    copy.setflags(write=False)
    return copy


def _as_matrix(values: Matrix, name: str) -> np.ndarray:
    matrix = np.asarray(values, dtype=np.float64)
    if matrix.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {matrix.shape}")
    return matrix


def _require_shape(array: np.ndarray, shape: Tuple[int, ...], name: str) -> None:
    if np.shape(array) != tuple(shape):
        raise DimensionError(f"{name} has shape {np.shape(array)}, expected {tuple(shape)}")


def _require_finite(array: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{name} contains non-finite values")


def _check_labels(labels: Sequence[int], count: int, num_classes: int) -> np.ndarray:
    targets = np.asarray(labels, dtype=np.int64).reshape(-1)
    if targets.shape[0] != count:
        raise LabelError(f"got {targets.shape[0]} labels for {count} samples")
    if targets.size and (targets.min() < 0 or targets.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes})")
    return targets
