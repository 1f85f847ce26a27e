"""
Highway-network binary classifier with hand-written backpropagation.

The network is a linear input projection to `hidden_width`, `n_blocks`
highway blocks `t * relu(x W_H + b_H) + (1 - t) * x` with
`t = sigmoid(x W_T + b_T)`, and a sigmoid head. All parameters live in
one flat float64 vector described by a Layout; that vector is what
clients train, the server averages and the ledger measures.
"""
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from fedsilo.errors import (
    ConfigError,
    ContractViolationError,
    IncompatibleModelError,
    LossUndefinedError,
    ShapeError,
)
from fedsilo.metrics import confusion, prf
from fedsilo.schemas import HighwayNetConfig

logger = logging.getLogger(__name__)

MAGIC = b"FSHWYNET"
FORMAT_VERSION = 1
FLAG_GATED = 0x1
HEADER = struct.Struct("<8sHHIIIQ32s")
HEADER_SIZE = HEADER.size  # 64
LEAKY_SLOPE = 0.01
PROB_CLIP = 1e-15


@dataclass(frozen=True)
class TensorSpec:
    """One named tensor inside the flat parameter vector."""
    name: str
    shape: Tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class Layout:
    """Architecture dimensions and the ordered tensor table."""
    input_dim: int
    hidden_width: int
    n_blocks: int
    gated: bool
    tensors: Tuple[TensorSpec, ...]

    @property
    def size(self) -> int:
        return self.tensors[-1].stop if self.tensors else 0

    def spec(self, name: str) -> TensorSpec:
        for tensor in self.tensors:
            if tensor.name == name:
                return tensor
        raise KeyError(name)

    def digest(self) -> bytes:
        """SHA-256 over the tensor table (names, shapes, offsets)"""
        text = ";".join(
            f"{t.name}:{'x'.join(map(str, t.shape))}@{t.offset}" for t in self.tensors)
        return hashlib.sha256(text.encode("ascii")).digest()


def build_layout(config: HighwayNetConfig) -> Layout:
    """Tensor table for a resolved config."""
    if config.input_dim is None:
        raise ConfigError("model input_dim is unresolved; call resolve() with the data width")
    d, w = config.input_dim, config.hidden_width
    shapes: List[Tuple[str, Tuple[int, ...]]] = [("input.W", (d, w)), ("input.b", (w,))]
    for k in range(config.n_blocks):
        shapes += [
            (f"block{k}.H.W", (w, w)), (f"block{k}.H.b", (w,)),
            (f"block{k}.T.W", (w, w)), (f"block{k}.T.b", (w,)),
        ]
    shapes += [("head.W", (w, 1)), ("head.b", (1,))]

    tensors, offset = [], 0
    for name, shape in shapes:
        spec = TensorSpec(name, shape, offset)
        tensors.append(spec)
        offset = spec.stop
    return Layout(d, w, config.n_blocks, config.gated, tuple(tensors))


@dataclass(frozen=True)
class ModelParams:
    """Flat parameter vector plus its layout. Values are read-only."""
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).ravel()
        if values.shape[0] != self.layout.size:
            raise ShapeError(
                f"{values.shape[0]} values for a layout of size {self.layout.size}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def tensor(self, name: str) -> np.ndarray:
        spec = self.layout.spec(name)
        return self.values[spec.offset:spec.stop].reshape(spec.shape)

    def with_values(self, values: np.ndarray) -> "ModelParams":
        return ModelParams(values, self.layout)


@dataclass(frozen=True)
class AdamState:
    """Adam moments and step count."""
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


@dataclass
class TrainStats:
    """Outcome of one train_local call."""
    losses: List[float] = field(default_factory=list)
    best_f1: Optional[float] = None
    best_epoch: Optional[int] = None
    stopped_early: bool = False
    warnings: List[str] = field(default_factory=list)
    epochs_run: int = 0


@dataclass(frozen=True)
class ForwardCache:
    """Activations of one forward pass, enough for exact backprop."""
    params: ModelParams
    batch: np.ndarray
    block_inputs: Tuple[np.ndarray, ...]
    pre_h: Tuple[np.ndarray, ...]
    h: Tuple[np.ndarray, ...]
    t: Tuple[np.ndarray, ...]
    final_hidden: np.ndarray
    probs: np.ndarray


def init_model(config: HighwayNetConfig) -> ModelParams:
    """
    Glorot-uniform weights, zero biases except gate biases.

    Gate biases start at `gate_bias_init`. Deterministic in `init_seed`.
    """
    layout = build_layout(config)
    rng = np.random.default_rng(config.init_seed)
    values = np.zeros(layout.size)
    for spec in layout.tensors:
        if len(spec.shape) == 2:
            fan_in, fan_out = spec.shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            values[spec.offset:spec.stop] = rng.uniform(-limit, limit, size=spec.size)
        elif spec.name.endswith(".T.b"):
            values[spec.offset:spec.stop] = config.gate_bias_init
    return ModelParams(values, layout)


def _propagate(params: ModelParams, batch, keep_cache: bool):
    x = np.asarray(batch, dtype=np.float64)
    layout = params.layout
    if x.ndim != 2 or x.shape[1] != layout.input_dim:
        raise ShapeError(
            f"batch of shape {x.shape} does not match input_dim={layout.input_dim}")

    inputs, pre_h, hs, ts = [], [], [], []
    hidden = x @ params.tensor("input.W") + params.tensor("input.b")
    for k in range(layout.n_blocks):
        a_h = hidden @ params.tensor(f"block{k}.H.W") + params.tensor(f"block{k}.H.b")
        if layout.gated:
            h = np.maximum(a_h, 0.0)
            t = expit(hidden @ params.tensor(f"block{k}.T.W") + params.tensor(f"block{k}.T.b"))
            out = t * h + (1.0 - t) * hidden
        else:
            h = np.where(a_h > 0, a_h, LEAKY_SLOPE * a_h)
            t = None
            out = h
        if keep_cache:
            inputs.append(hidden)
            pre_h.append(a_h)
            hs.append(h)
            ts.append(t)
        hidden = out

    logits = (hidden @ params.tensor("head.W")).ravel() + params.tensor("head.b")[0]
    probs = expit(logits)
    if not keep_cache:
        return probs, None
    cache = ForwardCache(params, x, tuple(inputs), tuple(pre_h), tuple(hs), tuple(ts), hidden, probs)
    return probs, cache


def forward(params: ModelParams, batch) -> Tuple[np.ndarray, ForwardCache]:
    """Probabilities for each row and the activation cache."""
    return _propagate(params, batch, keep_cache=True)


def predict_proba(params: ModelParams, batch) -> np.ndarray:
    """Probabilities only; no activations are retained."""
    return _propagate(params, batch, keep_cache=False)[0]


def weighted_bce_loss(probs, labels, pos_weight: float) -> float:
    """Mean of -[w * y * log p + (1 - y) * log(1 - p)]."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ShapeError(f"{p.shape[0]} probabilities for {y.shape[0]} labels")
    if p.size == 0:
        raise LossUndefinedError("loss is undefined on an empty batch")
    if pos_weight <= 0:
        raise ConfigError(f"pos_weight must be positive, got {pos_weight}")
    p = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    return float(np.mean(-(pos_weight * y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def backward(cache: ForwardCache, labels, pos_weight: float) -> np.ndarray:
    """Gradient of weighted_bce_loss for the cached batch, in layout order."""
    if not isinstance(cache, ForwardCache):
        raise ContractViolationError("backward needs the cache returned by forward")
    y = np.asarray(labels, dtype=np.float64).ravel()
    n = cache.batch.shape[0]
    if y.shape[0] != n:
        raise ContractViolationError(f"{y.shape[0]} labels for a cached batch of {n} rows")
    if n == 0:
        raise LossUndefinedError("gradient is undefined on an empty batch")

    params = cache.params
    layout = params.layout
    grads = np.zeros(layout.size)

    def put(name, value):
        spec = layout.spec(name)
        grads[spec.offset:spec.stop] = np.ravel(value)

    p = cache.probs
    dz = (pos_weight * y * (p - 1.0) + (1.0 - y) * p) / n
    put("head.W", cache.final_hidden.T @ dz[:, None])
    put("head.b", dz.sum())
    dx = dz[:, None] @ params.tensor("head.W").T

    for k in reversed(range(layout.n_blocks)):
        x, a_h, h, t = cache.block_inputs[k], cache.pre_h[k], cache.h[k], cache.t[k]
        w_h = params.tensor(f"block{k}.H.W")
        if layout.gated:
            da_h = dx * t * (a_h > 0)
            da_t = dx * (h - x) * t * (1.0 - t)
            w_t = params.tensor(f"block{k}.T.W")
            put(f"block{k}.T.W", x.T @ da_t)
            put(f"block{k}.T.b", da_t.sum(axis=0))
            dx = dx * (1.0 - t) + da_h @ w_h.T + da_t @ w_t.T
        else:
            da_h = dx * np.where(a_h > 0, 1.0, LEAKY_SLOPE)
            dx = da_h @ w_h.T
        put(f"block{k}.H.W", x.T @ da_h)
        put(f"block{k}.H.b", da_h.sum(axis=0))

    put("input.W", cache.batch.T @ dx)
    put("input.b", dx.sum(axis=0))
    return grads


def adam_step(
        params: ModelParams,
        grads: np.ndarray,
        state: AdamState,
        config: HighwayNetConfig) -> Tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != params.values.shape or state.first_moment.shape != g.shape:
        raise ShapeError(
            f"gradient of shape {g.shape} for {params.values.shape[0]} parameters")
    step = state.step_count + 1
    m = config.beta1 * state.first_moment + (1.0 - config.beta1) * g
    v = config.beta2 * state.second_moment + (1.0 - config.beta2) * g * g
    m_hat = m / (1.0 - config.beta1 ** step)
    v_hat = v / (1.0 - config.beta2 ** step)
    values = params.values - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return params.with_values(values), AdamState(m, v, step)


def _validation_f1(params: ModelParams, validation, threshold: float) -> Optional[float]:
    probs = predict_proba(params, validation.design_matrix)
    return prf(confusion(probs, validation.labels, threshold))[2]


def train_local(
        params: ModelParams,
        train,
        validation,
        config: HighwayNetConfig,
        epochs: int,
        batch_size: int,
        pos_weight: float,
        seed: int,
        on_epoch_end: Optional[Callable[[int, ModelParams], None]] = None,
        threshold: float = 0.5) -> Tuple[ModelParams, TrainStats]:
    """
    Mini-batch Adam over `train` with early stopping on validation F1.

    Args:
        params: starting parameters (not modified)
        train: EncodedDataset to fit
        validation: EncodedDataset monitored for early stopping, or None
        config: supplies Adam hyperparameters and patience
        epochs: maximum passes over `train`
        batch_size: rows per Adam step
        pos_weight: positive-class loss weight
        seed: shuffling seed
        on_epoch_end: called with (epoch, params) after every epoch
        threshold: decision threshold for validation F1

    Returns:
        tuple: final parameters (best-F1 parameters when patience ran out) and stats
    """
    stats = TrainStats()
    if epochs == 0:
        return params, stats
    if train.n_rows == 0:
        raise ContractViolationError("train_local needs a non-empty training subset")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")

    monitor = validation is not None and validation.n_rows > 0
    if not monitor:
        stats.warnings.append("empty validation set; early stopping disabled")
        logger.debug("Early stopping disabled: no validation rows")
    elif validation.n_pos in (0, validation.n_rows):
        monitor = False
        stats.warnings.append("single-class validation set; early stopping disabled")
        logger.info("Early stopping disabled: validation rows hold one class only")

    rng = np.random.default_rng(seed)
    state = AdamState.zeros(params.layout.size)
    current = params
    x_all, y_all = train.design_matrix, train.labels
    best_score, best_params, wait = -np.inf, params, 0

    for epoch in range(1, epochs + 1):
        order = rng.permutation(train.n_rows)
        for start in range(0, train.n_rows, batch_size):
            idx = order[start:start + batch_size]
            _, cache = forward(current, x_all[idx])
            grads = backward(cache, y_all[idx], pos_weight)
            current, state = adam_step(current, grads, state, config)

        stats.losses.append(weighted_bce_loss(predict_proba(current, x_all), y_all, pos_weight))
        stats.epochs_run = epoch
        if on_epoch_end is not None:
            on_epoch_end(epoch, current)

        if not monitor:
            continue
        f1 = _validation_f1(current, validation, threshold)
        score = -1.0 if f1 is None else f1
        if score > best_score:
            best_score, best_params, wait = score, current, 0
            stats.best_f1, stats.best_epoch = f1, epoch
        else:
            wait += 1
            if wait >= config.early_stop_patience:
                stats.stopped_early = True
                logger.debug(
                    "Early stop at epoch %s; restoring epoch %s (F1 %s)",
                    epoch, stats.best_epoch, stats.best_f1)
                return best_params, stats

    return current, stats


def param_byte_size(params: ModelParams) -> int:
    """Serialized size: fixed header plus 8 bytes per value."""
    return HEADER_SIZE + 8 * int(params.values.shape[0])


def serialize_params(params: ModelParams) -> bytes:
    layout = params.layout
    header = HEADER.pack(
        MAGIC, FORMAT_VERSION, FLAG_GATED if layout.gated else 0,
        layout.input_dim, layout.hidden_width, layout.n_blocks,
        params.values.shape[0], layout.digest())
    return header + params.values.astype("<f8").tobytes()


def deserialize_params(data: bytes, expected: Optional[HighwayNetConfig] = None) -> ModelParams:
    """
    Rebuild parameters from serialize_params output.

    Raises:
        IncompatibleModelError: bad header, truncated payload, or an
            architecture that differs from `expected`
    """
    if len(data) < HEADER_SIZE:
        raise IncompatibleModelError("model file is shorter than its header")
    magic, version, flags, d, w, blocks, n_values, digest = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise IncompatibleModelError("not a serialized highway model (bad magic)")
    if version != FORMAT_VERSION:
        raise IncompatibleModelError(f"unsupported model format version {version}")

    gated = bool(flags & FLAG_GATED)
    if expected is not None:
        want = (expected.input_dim, expected.hidden_width, expected.n_blocks, expected.gated)
        have = (d, w, blocks, gated)
        if want != have:
            raise IncompatibleModelError(
                f"model has (input_dim, hidden_width, n_blocks, gated)={have}, "
                f"configuration expects {want}")

    layout = Layout(d, w, blocks, gated, ()) if d == 0 else build_layout(
        HighwayNetConfig(input_dim=d, hidden_width=w, n_blocks=blocks, gated=gated))
    if layout.digest() != digest or layout.size != n_values:
        raise IncompatibleModelError("tensor table does not match the header dimensions")
    if len(data) != HEADER_SIZE + 8 * n_values:
        raise IncompatibleModelError(
            f"expected {HEADER_SIZE + 8 * n_values} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype="<f8", offset=HEADER_SIZE, count=n_values)
    return ModelParams(values.astype(np.float64), layout)


def save_params(params: ModelParams, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_bytes(serialize_params(params))
    return path


def load_params(path: Union[str, Path], expected: Optional[HighwayNetConfig] = None) -> ModelParams:
    path = Path(path)
    if not path.is_file():
        raise IncompatibleModelError(f"model file not found: {path}")
    return deserialize_params(path.read_bytes(), expected)
