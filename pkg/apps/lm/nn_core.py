"""
Dense numpy layers with analytic gradients, recurrent cells, parameter storage,
optimizers and the binary checkpoint format.

Batched arrays put the batch on the first axis: x is (B, in), W is (out, in).
"""
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from django.db import models

from .exceptions import (
    CheckpointError,
    ConfigValidationError,
    NumericalError,
    OptimizerStateError,
    ShapeError,
    TargetError,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NGF1"
CHECKPOINT_VERSION = 1
TARGET_SUM_TOLERANCE = 1e-9
FORGET_BIAS = 1.0


def float_dtype(width: int) -> np.dtype:
    if width == 64:
        return np.dtype(np.float64)
    if width == 32:
        return np.dtype(np.float32)
    raise ConfigValidationError(f"Unsupported float width {width}", {"float": ["must be 32 or 64"]})


def check_finite(array: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"Non-finite value in {where}")
    return array


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ShapeError(message)


# Layers


def affine_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """y = W x + b for a single vector or a batch of row vectors."""
    _require(W.ndim == 2 and b.shape == (W.shape[0],), f"affine: W {W.shape} and b {b.shape}")
    _require(x.shape[-1] == W.shape[1], f"affine: input width {x.shape[-1]} != {W.shape[1]}")
    return check_finite(x @ W.T + b, "affine output")


def affine_backward(
    W: np.ndarray, x: np.ndarray, dy: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dW, db, dx)."""
    if x.ndim == 1:
        return np.outer(dy, x), dy.copy(), W.T @ dy
    return dy.T @ x, dy.sum(axis=0), dy @ W


def tanh_forward(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient through tanh given its output y."""
    return dy * (1.0 - y * y)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class DropoutMode(models.TextChoices):
    TRAIN = "train", "Train"
    EVAL = "eval", "Eval"


@dataclass
class DropoutSpec:
    """Keep probability, mode and the seeded stream drawing the masks."""

    keep_prob: float = 1.0
    mode: str = DropoutMode.EVAL
    rng: Optional[np.random.Generator] = None

    def __post_init__(self):
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigValidationError(
                f"Keep probability {self.keep_prob} outside (0, 1]",
                {"keep_prob": ["must be in (0, 1]"]},
            )
        if self.rng is None:
            self.rng = np.random.default_rng(0)

    @property
    def active(self) -> bool:
        return self.mode == DropoutMode.TRAIN and self.keep_prob < 1.0

    def evaluation(self) -> "DropoutSpec":
        return DropoutSpec(self.keep_prob, DropoutMode.EVAL, self.rng)


def dropout_forward(x: np.ndarray, spec: DropoutSpec) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Inverted dropout. Returns the output and the scaled mask (None when identity)."""
    if not spec.active:
        return x, None
    mask = (spec.rng.random(x.shape) < spec.keep_prob).astype(x.dtype) / spec.keep_prob
    return x * mask, mask


def dropout_backward(mask: Optional[np.ndarray], dy: np.ndarray) -> np.ndarray:
    return dy if mask is None else dy * mask


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_xent(
    logits: np.ndarray, target: np.ndarray, weight=1.0
) -> Tuple[float, np.ndarray]:
    """
    Weighted cross-entropy between a target pmf and softmax(logits).

    Args:
        logits: (V,) or (B, V)
        target: pmf of the same shape; each row must sum to 1
        weight: positive scalar or (B,) row weights

    Returns:
        (loss summed over rows, gradient with respect to the logits)

    Raises:
        TargetError: If a target row is not normalized
    """
    _require(logits.shape == target.shape, f"softmax_xent: logits {logits.shape} vs target {target.shape}")
    sums = target.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > TARGET_SUM_TOLERANCE) or np.any(target < 0):
        raise TargetError("Target distribution does not sum to one")

    log_probs = log_softmax(logits)
    weights = np.asarray(weight, dtype=logits.dtype)
    if logits.ndim == 2 and weights.ndim == 1:
        weights = weights[:, None]
    if np.any(weights <= 0):
        raise TargetError("Loss weights must be positive")

    # 0 * log p is taken as 0 for words outside the target support.
    row_losses = -(target * log_probs).sum(axis=-1, keepdims=logits.ndim == 2)
    loss = float((weights * row_losses).sum())
    grad = weights * (np.exp(log_probs) - target)
    return check_finite(np.asarray(loss), "softmax_xent loss").item(), grad


def sparse_softmax_xent(
    logits: np.ndarray, targets: np.ndarray, weights: Optional[np.ndarray] = None
) -> Tuple[float, np.ndarray]:
    """softmax_xent for one-hot targets given as ids; logits are (B, V)."""
    batch = logits.shape[0]
    _require(targets.shape == (batch,), f"targets {targets.shape} do not match batch {batch}")
    weights = np.ones(batch, dtype=logits.dtype) if weights is None else weights.astype(logits.dtype)
    log_probs = log_softmax(logits)
    rows = np.arange(batch)
    loss = float(-(weights * log_probs[rows, targets]).sum())
    grad = np.exp(log_probs)
    grad[rows, targets] -= 1.0
    grad *= weights[:, None]
    return check_finite(np.asarray(loss), "softmax_xent loss").item(), grad


# Recurrent cells


def rnn_step_forward(
    R: np.ndarray, R_bias: np.ndarray, state: np.ndarray, x: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, tuple]:
    """
    [state', output] = tanh(R [state, x] + R_bias), R of shape (2s, s + d).
    """
    s = state.shape[-1]
    _require(R.shape == (2 * s, s + x.shape[-1]), f"rnn_step: R {R.shape} for s={s}, d={x.shape[-1]}")
    joined = np.concatenate([state, x], axis=-1)
    y = tanh_forward(affine_forward(R, R_bias, joined))
    return y[..., :s], y[..., s:], (joined, y)


def rnn_step_backward(
    R: np.ndarray, cache: tuple, d_state: np.ndarray, d_output: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dR, dR_bias, d_previous_state, dx)."""
    joined, y = cache
    s = d_state.shape[-1]
    dz = tanh_backward(y, np.concatenate([d_state, d_output], axis=-1))
    dR, db, d_joined = affine_backward(R, joined, dz)
    return dR, db, d_joined[..., :s], d_joined[..., s:]


def lstm_step_forward(
    W: np.ndarray, b: np.ndarray, cell: np.ndarray, hidden: np.ndarray, x: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, tuple]:
    """
    LSTM cell without peepholes; W is (4s, s + in) with gate blocks i, f, o, g.
    """
    s = hidden.shape[-1]
    _require(W.shape == (4 * s, s + x.shape[-1]), f"lstm_step: W {W.shape} for s={s}, in={x.shape[-1]}")
    _require(cell.shape == hidden.shape, f"lstm_step: cell {cell.shape} vs hidden {hidden.shape}")
    joined = np.concatenate([hidden, x], axis=-1)
    z = affine_forward(W, b, joined)
    i = sigmoid(z[..., :s])
    f = sigmoid(z[..., s : 2 * s])
    o = sigmoid(z[..., 2 * s : 3 * s])
    g = np.tanh(z[..., 3 * s :])
    new_cell = f * cell + i * g
    squashed = np.tanh(new_cell)
    new_hidden = o * squashed
    return new_cell, new_hidden, (joined, cell, i, f, o, g, squashed)


def lstm_step_backward(
    W: np.ndarray, cache: tuple, d_hidden: np.ndarray, d_cell: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dW, db, d_previous_cell, d_previous_hidden, dx)."""
    joined, cell, i, f, o, g, squashed = cache
    s = d_hidden.shape[-1]
    d_o = d_hidden * squashed
    d_new_cell = d_cell + d_hidden * o * (1.0 - squashed * squashed)
    dz = np.concatenate(
        [
            d_new_cell * g * i * (1.0 - i),
            d_new_cell * cell * f * (1.0 - f),
            d_o * o * (1.0 - o),
            d_new_cell * i * (1.0 - g * g),
        ],
        axis=-1,
    )
    dW, db, d_joined = affine_backward(W, joined, dz)
    return dW, db, d_new_cell * f, d_joined[..., :s], d_joined[..., s:]


LayerState = Tuple[np.ndarray, np.ndarray]


def zero_states(layers: int, batch: int, dim_state: int, dtype=np.float64) -> List[LayerState]:
    return [
        (np.zeros((batch, dim_state), dtype=dtype), np.zeros((batch, dim_state), dtype=dtype))
        for _ in range(layers)
    ]


def lstm_stack_forward(
    store: "ParameterStore",
    prefix: str,
    layers: int,
    inputs: Sequence[np.ndarray],
    states: Sequence[LayerState],
    dropout: "DropoutSpec",
    resets: Optional[Sequence[np.ndarray]] = None,
) -> Tuple[List[np.ndarray], List[LayerState], list]:
    """
    Unroll a multilayer LSTM over a sequence of (B, in) inputs.

    Layer l+1 consumes dropout(hidden of layer l). resets[t] is a (B,) boolean
    mask of rows whose (cell, hidden) state is zeroed before step t.

    Returns:
        (top-layer hidden per step, final (cell, hidden) per layer, cache)
    """
    _require(len(states) == layers, f"{len(states)} initial states for {layers} layers")
    states = list(states)
    outputs: List[np.ndarray] = []
    cache = []
    for t, x in enumerate(inputs):
        keep = None
        if resets is not None and np.any(resets[t]):
            keep = (~np.asarray(resets[t], dtype=bool)).astype(x.dtype)[:, None]
            states = [(cell * keep, hidden * keep) for cell, hidden in states]
        layer_input = x
        step = []
        for layer in range(layers):
            cell, hidden = states[layer]
            cell, hidden, cell_cache = lstm_step_forward(
                store[f"{prefix}W{layer}"], store[f"{prefix}b{layer}"], cell, hidden, layer_input
            )
            states[layer] = (cell, hidden)
            mask = None
            if layer < layers - 1:
                layer_input, mask = dropout_forward(hidden, dropout)
            step.append((cell_cache, mask))
        outputs.append(hidden)
        cache.append((keep, step))
    return outputs, states, cache


def lstm_stack_backward(
    store: "ParameterStore",
    prefix: str,
    layers: int,
    cache: list,
    d_outputs: Sequence[Optional[np.ndarray]],
) -> Tuple[List[np.ndarray], List[LayerState]]:
    """
    Backpropagate through an unrolled stack, accumulating weight gradients in store.

    Returns:
        (gradient per input step, gradient with respect to the initial states)
    """
    first_cache = cache[0][1][0][0]
    batch, dim_state = first_cache[1].shape
    dtype = first_cache[1].dtype
    d_states = zero_states(layers, batch, dim_state, dtype)
    d_inputs: List[np.ndarray] = [None] * len(cache)

    for t in range(len(cache) - 1, -1, -1):
        keep, step = cache[t]
        d_above = d_outputs[t] if d_outputs[t] is not None else np.zeros((batch, dim_state), dtype=dtype)
        for layer in range(layers - 1, -1, -1):
            cell_cache, _ = step[layer]
            d_cell, d_hidden = d_states[layer]
            name_w, name_b = f"{prefix}W{layer}", f"{prefix}b{layer}"
            dW, db, d_cell, d_hidden, dx = lstm_step_backward(
                store[name_w], cell_cache, d_hidden + d_above, d_cell
            )
            store.accumulate(name_w, dW)
            store.accumulate(name_b, db)
            d_states[layer] = (d_cell, d_hidden)
            if layer > 0:
                d_above = dropout_backward(step[layer - 1][1], dx)
            else:
                d_inputs[t] = dx
        if keep is not None:
            d_states = [(d_cell * keep, d_hidden * keep) for d_cell, d_hidden in d_states]
    return d_inputs, d_states


def init_lstm_stack(
    store: "ParameterStore",
    prefix: str,
    layers: int,
    dim_input: int,
    dim_state: int,
    stddev: float,
    rng: np.random.Generator,
) -> None:
    """Truncated-normal weights, zero biases except the forget gate."""
    for layer in range(layers):
        width = dim_state + (dim_input if layer == 0 else dim_state)
        store.add(f"{prefix}W{layer}", truncated_normal(rng, (4 * dim_state, width), stddev))
        bias = np.zeros(4 * dim_state)
        bias[dim_state : 2 * dim_state] = FORGET_BIAS
        store.add(f"{prefix}b{layer}", bias)


# Parameters


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray
    state: Optional[np.ndarray] = None
    sparse: bool = False
    touched: set = field(default_factory=set)


class ParameterStore:
    """
    Named parameters with gradient accumulators and optimizer state.

    Sparse parameters (the embedding E, d x V) track which columns received
    gradient so that zeroing and optimizer updates touch only those columns.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: Dict[str, Parameter] = {}
        self.has_gradients = False

    def add(self, name: str, value: np.ndarray, sparse: bool = False) -> np.ndarray:
        if name in self._params:
            raise ShapeError(f"Parameter {name} already exists")
        value = np.array(value, dtype=self.dtype)
        if sparse and value.ndim != 2:
            raise ShapeError(f"Sparse parameter {name} must be a matrix")
        self._params[name] = Parameter(name, value, np.zeros_like(value), sparse=sparse)
        return value

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name].value

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    @property
    def names(self) -> List[str]:
        return list(self._params)

    @property
    def size(self) -> int:
        return sum(param.value.size for param in self)

    def parameter(self, name: str) -> Parameter:
        return self._params[name]

    def grad(self, name: str) -> np.ndarray:
        return self._params[name].grad

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        param = self._params[name]
        _require(grad.shape == param.value.shape, f"gradient {grad.shape} for {name} {param.value.shape}")
        param.grad += grad
        if param.sparse:
            param.touched.update(range(param.value.shape[1]))
        self.has_gradients = True

    def accumulate_columns(self, name: str, ids: np.ndarray, grads: np.ndarray) -> None:
        """Scatter-add row gradients grads (N, d) into columns ids of a d x V parameter."""
        param = self._params[name]
        ids = np.asarray(ids).reshape(-1)
        _require(grads.shape == (ids.size, param.value.shape[0]), f"column gradients {grads.shape} for {name}")
        np.add.at(param.grad.T, ids, grads)
        if param.sparse:
            param.touched.update(int(index) for index in ids)
        self.has_gradients = True

    def zero_grad(self) -> None:
        for param in self:
            if param.sparse:
                if param.touched:
                    param.grad[:, sorted(param.touched)] = 0.0
                param.touched = set()
            else:
                param.grad.fill(0.0)
        self.has_gradients = False

    def gradients(self) -> List[np.ndarray]:
        return [param.grad for param in self]

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {param.name: param.value.copy() for param in self}

    def restore(self, values: Dict[str, np.ndarray]) -> None:
        for name, value in values.items():
            self._params[name].value[...] = value

    def check_finite(self) -> None:
        for param in self:
            check_finite(param.value, f"parameter {param.name}")


def truncated_normal(
    rng: np.random.Generator, shape: Sequence[int], stddev: float, dtype=np.float64
) -> np.ndarray:
    """Zero-mean normal samples, resampled until all lie within two standard deviations."""
    values = rng.normal(0.0, stddev, size=shape)
    outside = np.abs(values) > 2.0 * stddev
    while outside.any():
        values[outside] = rng.normal(0.0, stddev, size=int(outside.sum()))
        outside = np.abs(values) > 2.0 * stddev
    return values.astype(dtype)


def global_norm(gradients: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(grad, dtype=np.float64))) for grad in gradients))


def clip_global_norm(
    gradients: Sequence[np.ndarray], max_norm: float
) -> Tuple[List[np.ndarray], float]:
    """
    Scale all gradients by max_norm / g when their global L2 norm g exceeds max_norm.

    Returns the (possibly scaled) gradients and the pre-clip norm; below the
    threshold the input arrays are returned untouched.
    """
    if max_norm <= 0:
        raise ConfigValidationError("clip norm must be positive", {"clip_norm": ["must be positive"]})
    norm = global_norm(gradients)
    if norm <= max_norm:
        return list(gradients), norm
    scale = max_norm / norm
    return [grad * scale for grad in gradients], norm


def clip_store_gradients(store: ParameterStore, max_norm: float) -> float:
    """In-place variant of clip_global_norm over every gradient of a store."""
    clipped, norm = clip_global_norm(store.gradients(), max_norm)
    if norm > max_norm:
        for param, grad in zip(store, clipped):
            param.grad[...] = grad
    return norm


# Optimizers


class OptimizerKind(models.TextChoices):
    ADAGRAD = "adagrad", "Adagrad"
    SGD_SCHEDULED = "sgd", "Scheduled SGD"


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = OptimizerKind.ADAGRAD
    learning_rate: float = 0.1
    initial_accumulator: float = 0.1
    constant_epochs: int = 4
    decay_epochs: int = 9
    clip_norm: float = 5.0

    def __post_init__(self):
        errors = {}
        if self.kind not in OptimizerKind.values:
            errors["optimizer"] = [f"unknown optimizer '{self.kind}'"]
        if self.learning_rate < 0:
            errors["lr"] = ["must be non-negative"]
        if self.initial_accumulator < 0:
            errors["initial_accumulator"] = ["must be non-negative"]
        if self.constant_epochs < 0 or self.decay_epochs < 1:
            errors["decay_epochs"] = ["schedule needs constant_epochs >= 0 and decay_epochs >= 1"]
        if self.clip_norm <= 0:
            errors["clip_norm"] = ["must be positive"]
        if errors:
            raise ConfigValidationError("Invalid optimizer configuration", errors)


class Optimizer:
    def __init__(self, config: OptimizerConfig):
        self.config = config

    def learning_rate(self, epoch: int) -> float:
        return self.config.learning_rate

    def step(self, store: ParameterStore, epoch: int = 1) -> None:
        """Apply one update from the accumulated (already clipped) gradients."""
        if not store.has_gradients:
            raise OptimizerStateError("Optimizer step requested before gradients were computed")
        lr = self.learning_rate(epoch)
        for param in store:
            if param.sparse:
                if not param.touched:
                    continue
                columns = sorted(param.touched)
                self._update(param, lr, (slice(None), columns))
            else:
                self._update(param, lr, ...)

    def _update(self, param: Parameter, lr: float, index) -> None:
        raise NotImplementedError


class Adagrad(Optimizer):
    """accumulator += g^2; value -= lr * g / sqrt(accumulator)."""

    def _update(self, param: Parameter, lr: float, index) -> None:
        if param.state is None:
            param.state = np.full_like(param.value, self.config.initial_accumulator)
        grad = param.grad[index]
        accumulator = param.state[index] + grad * grad
        param.state[index] = accumulator
        # Entries whose accumulator is still zero have seen no gradient.
        delta = np.zeros_like(grad)
        np.divide(grad, np.sqrt(accumulator), out=delta, where=accumulator > 0)
        param.value[index] = param.value[index] - lr * delta


class ScheduledSGD(Optimizer):
    """Plain SGD with a constant rate for some epochs, then linear decay to zero."""

    def learning_rate(self, epoch: int) -> float:
        config = self.config
        past = max(0, epoch - config.constant_epochs)
        return config.learning_rate * max(0.0, 1.0 - past / config.decay_epochs)

    def _update(self, param: Parameter, lr: float, index) -> None:
        param.value[index] = param.value[index] - lr * param.grad[index]


def build_optimizer(config: OptimizerConfig) -> Optimizer:
    if OptimizerKind(config.kind) == OptimizerKind.ADAGRAD:
        return Adagrad(config)
    return ScheduledSGD(config)


# Gradient checking


def numerical_gradient(loss_fn: Callable[[], float], array: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of loss_fn with respect to every entry of array (in place)."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    for position in range(flat.size):
        original = flat[position]
        flat[position] = original + eps
        upper = loss_fn()
        flat[position] = original - eps
        lower = loss_fn()
        flat[position] = original
        grad.reshape(-1)[position] = (upper - lower) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a| + |n|, floor) over all entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


# Checkpoints


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(store: ParameterStore, path, metadata: Optional[Dict] = None) -> None:
    """
    Write parameter values in the NGF1 layout plus a JSON metadata sidecar.

    Layout: magic, version byte, float-width byte; per parameter a uint16 name
    length, the UTF-8 name, a uint8 rank, uint64 dims and little-endian values;
    a trailing uint64 holding the byte length of everything before it.
    """
    width = store.dtype.itemsize * 8
    little = np.dtype(f"<f{store.dtype.itemsize}")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<BB", CHECKPOINT_VERSION, width)]
    for param in store:
        name = param.name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<B", param.value.ndim))
        chunks.append(struct.pack(f"<{param.value.ndim}Q", *param.value.shape))
        chunks.append(np.ascontiguousarray(param.value, dtype=little).tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as handle:
        handle.write(body)
        handle.write(struct.pack("<Q", len(body)))

    sidecar = dict(metadata or {})
    sidecar["float_width"] = width
    sidecar["sparse_parameters"] = [param.name for param in store if param.sparse]
    with open(sidecar_path(path), "w", encoding="utf-8") as handle:
        json.dump(sidecar, handle, indent=2, sort_keys=True)
    logger.info(f"Saved checkpoint with {len(store)} parameters ({store.size} values) to {path}")


def load_checkpoint(path) -> Tuple[ParameterStore, Dict]:
    """
    Raises:
        CheckpointError: On a bad header, truncated data or trailer mismatch
    """
    data = Path(path).read_bytes()
    if len(data) < 14 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not an NGF1 checkpoint")
    (declared,) = struct.unpack("<Q", data[-8:])
    if declared != len(data) - 8:
        raise CheckpointError(f"{path}: length trailer {declared} does not match {len(data) - 8}")
    version, width = struct.unpack("<BB", data[4:6])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if width not in (32, 64):
        raise CheckpointError(f"{path}: unsupported float width {width}")

    dtype = float_dtype(width)
    little = np.dtype(f"<f{dtype.itemsize}")
    values: Dict[str, np.ndarray] = {}
    offset = 6
    end = len(data) - 8
    try:
        while offset < end:
            (name_length,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + name_length].decode("utf-8")
            offset += name_length
            (rank,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}Q", data, offset)
            offset += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            nbytes = count * little.itemsize
            if offset + nbytes > end:
                raise CheckpointError(f"{path}: parameter {name} is truncated")
            values[name] = np.frombuffer(data, dtype=little, count=count, offset=offset).reshape(shape)
            offset += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated parameter header") from exc

    metadata: Dict = {}
    sidecar = sidecar_path(path)
    if sidecar.exists():
        metadata = json.loads(sidecar.read_text(encoding="utf-8"))
    sparse = set(metadata.get("sparse_parameters", []))

    store = ParameterStore(dtype)
    for name, value in values.items():
        store.add(name, value.astype(dtype), sparse=name in sparse)
    logger.info(f"Loaded checkpoint {path}: {len(store)} parameters, {width}-bit")
    return store, metadata
