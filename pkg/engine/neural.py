"""
Minimal trainable model family for sub-model training.

- Layers: Conv, Dense, ReLU, AvgPool, Flatten, Scaler
- Hand-written forward/backward on float64 numpy arrays
- SGD with classical momentum and coupled weight decay
- Finite-difference gradient check used by `run_experiments.py gradcheck`

Params are ordered dicts keyed "<layer>.weight" / "<layer>.bias".
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from engine.tensor_core import DTYPE, check_finite

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]
Gradients = Dict[str, np.ndarray]

# smallest ratio is 1/16, so every partitionable width of a shipped arch is a multiple of 16
MAX_DENOMINATOR = 16


class ModelError(ValueError):
    """Architecture, shape or label error in the training engine."""


# ---------- Layer specs ----------
@dataclass(frozen=True)
class Conv:
    name: str
    out_channels: int
    in_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    bias: bool = True
    partition_out: bool = True
    partition_in: bool = True


@dataclass(frozen=True)
class Dense:
    """Fully connected layer. `in_group` is the number of input features per
    upstream channel (H*W after a Flatten), so a channel pick maps to a
    contiguous run of features."""
    name: str
    out_features: int
    in_features: int
    bias: bool = True
    partition_out: bool = True
    partition_in: bool = True
    in_group: int = 1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class AvgPool:
    window: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Scaler:
    """Multiplies activations by 1/ratio to compensate for reduced width."""
    ratio: float = 1.0


Layer = Union[Conv, Dense, ReLU, AvgPool, Flatten, Scaler]
ParamLayer = Union[Conv, Dense]


@dataclass(frozen=True)
class ModelArch:
    layers: Tuple[Layer, ...]
    input_shape: Tuple[int, int, int]  # (channels, height, width)
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        self.validate()

    def param_layers(self) -> List[ParamLayer]:
        return [layer for layer in self.layers if isinstance(layer, (Conv, Dense))]

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        for layer in self.param_layers():
            if isinstance(layer, Conv):
                shapes[f"{layer.name}.weight"] = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
                out = layer.out_channels
            else:
                shapes[f"{layer.name}.weight"] = (layer.out_features, layer.in_features)
                out = layer.out_features
            if layer.bias:
                shapes[f"{layer.name}.bias"] = (out,)
        return shapes

    def validate(self) -> None:
        """Walk the layer chain checking that adjacent dims agree."""
        c, h, w = self.input_shape
        flat: Optional[int] = None
        names = set()
        param_layers = self.param_layers()
        if not param_layers or not isinstance(param_layers[-1], Dense):
            raise ModelError("arch must end with an output Dense layer")
        for layer in self.layers:
            if isinstance(layer, (Conv, Dense)):
                if layer.name in names:
                    raise ModelError(f"duplicate layer name {layer.name!r}")
                names.add(layer.name)
            if isinstance(layer, Conv):
                if flat is not None:
                    raise ModelError(f"{layer.name}: conv after flatten")
                if layer.in_channels != c:
                    raise ModelError(f"{layer.name}: in_channels {layer.in_channels} != incoming {c}")
                h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
                w = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
                if h < 1 or w < 1:
                    raise ModelError(f"{layer.name}: kernel larger than input")
                c = layer.out_channels
            elif isinstance(layer, AvgPool):
                if flat is not None or h % layer.window or w % layer.window:
                    raise ModelError(f"AvgPool({layer.window}) does not divide {h}x{w}")
                h, w = h // layer.window, w // layer.window
            elif isinstance(layer, Flatten):
                flat = c * h * w
            elif isinstance(layer, Dense):
                if flat is None:
                    raise ModelError(f"{layer.name}: dense layer needs a Flatten before it")
                if layer.in_features != flat:
                    raise ModelError(f"{layer.name}: in_features {layer.in_features} != incoming {flat}")
                if layer.in_features % layer.in_group:
                    raise ModelError(f"{layer.name}: in_group {layer.in_group} does not divide {layer.in_features}")
                flat = layer.out_features
        last = param_layers[-1]
        if last.out_features != self.num_classes or last.partition_out:
            raise ModelError("output Dense must have out_features == num_classes and an unpartitioned out dim")


def default_arch(input_shape: Tuple[int, int, int] = (1, 28, 28), num_classes: int = 10,
                 widths: Tuple[int, int] = (16, 32)) -> ModelArch:
    """Conv-ReLU-AvgPool x2, then Flatten and the output Dense; 28x28 gray by default."""
    c, h, w = input_shape
    w1, w2 = widths
    for width in widths:
        if width % MAX_DENOMINATOR:
            raise ModelError(f"hidden width {width} is not a multiple of {MAX_DENOMINATOR}")
    hw = (h // 4) * (w // 4)
    return ModelArch(
        layers=(
            Conv("conv1", w1, c, 3, padding=1, partition_in=False),
            ReLU(), Scaler(), AvgPool(2),
            Conv("conv2", w2, w1, 3, padding=1),
            ReLU(), Scaler(), AvgPool(2),
            Flatten(),
            Dense("fc", num_classes, w2 * hw, partition_out=False, in_group=hw),
        ),
        input_shape=input_shape,
        num_classes=num_classes,
    )


def dense_arch(input_dim: int, hidden: Sequence[int] = (32, 32), num_classes: int = 10,
               input_shape: Optional[Tuple[int, int, int]] = None) -> ModelArch:
    """MLP over flattened inputs; input_shape defaults to (1, 1, input_dim)."""
    layers: List[Layer] = [Flatten()]
    prev, first = input_dim, True
    for i, width in enumerate(hidden, start=1):
        layers += [Dense(f"fc{i}", width, prev, partition_in=not first), ReLU(), Scaler()]
        prev, first = width, False
    layers.append(Dense("out", num_classes, prev, partition_out=False, partition_in=not first))
    return ModelArch(tuple(layers), tuple(input_shape or (1, 1, input_dim)), num_classes)


def _denominator(ratio: Any) -> int:
    if hasattr(ratio, "denominator"):
        return int(ratio.denominator)
    denom = round(1.0 / float(ratio))
    if denom < 1 or abs(1.0 / denom - float(ratio)) > 1e-12:
        raise ModelError(f"ratio {ratio} is not a reciprocal integer")
    return denom


def _scaled(width: int, denom: int, what: str) -> int:
    if width % denom:
        raise ModelError(f"{what} of {width} is not divisible by {denom}")
    return width // denom


def shrink_arch(arch: ModelArch, ratio: Any) -> ModelArch:
    """Sub-model architecture: every partitionable width times `ratio`,
    scalers set to `ratio`, unpartitioned dims untouched."""
    denom = _denominator(ratio)
    if denom == 1:
        return arch
    layers: List[Layer] = []
    for layer in arch.layers:
        if isinstance(layer, Conv):
            layers.append(replace(
                layer,
                out_channels=_scaled(layer.out_channels, denom, f"{layer.name} out") if layer.partition_out else layer.out_channels,
                in_channels=_scaled(layer.in_channels, denom, f"{layer.name} in") if layer.partition_in else layer.in_channels,
            ))
        elif isinstance(layer, Dense):
            in_features = layer.in_features
            if layer.partition_in:
                channels = _scaled(layer.in_features // layer.in_group, denom, f"{layer.name} in")
                in_features = channels * layer.in_group
            layers.append(replace(
                layer,
                out_features=_scaled(layer.out_features, denom, f"{layer.name} out") if layer.partition_out else layer.out_features,
                in_features=in_features,
            ))
        elif isinstance(layer, Scaler):
            layers.append(Scaler(1.0 / denom))
        else:
            layers.append(layer)
    return ModelArch(tuple(layers), arch.input_shape, arch.num_classes)


def init_params(arch: ModelArch, rng: np.random.Generator) -> Params:
    """Fan-in scaled uniform weights, zero biases."""
    params: Params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=DTYPE)
        else:
            fan_in = math.prod(shape[1:])
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(DTYPE)
    return params


def copy_params(params: Params) -> Params:
    return {k: np.array(v, dtype=DTYPE) for k, v in params.items()}


# ---------- Layer kernels ----------
def _conv_forward(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], stride: int, padding: int):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    k = w.shape[2]
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out), windows


def _conv_backward(dout: np.ndarray, windows: np.ndarray, w: np.ndarray, x_shape: Tuple[int, ...],
                   stride: int, padding: int):
    """Returns (dx, dw, db) for one conv layer."""
    dw = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    dwin = np.tensordot(dout, w, axes=([1], [0]))  # B, Ho, Wo, C, k, k
    batch, channels, height, width = x_shape
    k = w.shape[2]
    ho, wo = dout.shape[2], dout.shape[3]
    dxp = np.zeros((batch, channels, height + 2 * padding, width + 2 * padding), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding:padding + height, padding:padding + width]
    return np.ascontiguousarray(dx), dw, db


def _pool_forward(x: np.ndarray, p: int) -> np.ndarray:
    b, c, h, w = x.shape
    return x.reshape(b, c, h // p, p, w // p, p).mean(axis=(3, 5))


def _pool_backward(dout: np.ndarray, p: int) -> np.ndarray:
    b, c, h, w = dout.shape
    spread = np.broadcast_to(dout[:, :, :, None, :, None] / (p * p), (b, c, h, p, w, p))
    return spread.reshape(b, c, h * p, w * p)


# ---------- Forward / backward ----------
class ForwardCache(NamedTuple):
    logits: np.ndarray
    steps: List[Tuple[Layer, Dict[str, Any]]]
    params: Params


def forward(params: Params, arch: ModelArch, batch: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """Run `batch` ([B, C, H, W]) through the net; returns (logits, cache)."""
    if batch.ndim != 4 or tuple(batch.shape[1:]) != arch.input_shape:
        raise ModelError(f"batch shape {list(batch.shape)} does not match arch input {list(arch.input_shape)}")
    x = np.asarray(batch, dtype=DTYPE)
    steps: List[Tuple[Layer, Dict[str, Any]]] = []
    for layer in arch.layers:
        if isinstance(layer, Conv):
            w = params[f"{layer.name}.weight"]
            b = params.get(f"{layer.name}.bias")
            out, windows = _conv_forward(x, w, b, layer.stride, layer.padding)
            steps.append((layer, {"windows": windows, "x_shape": x.shape}))
        elif isinstance(layer, Dense):
            w = params[f"{layer.name}.weight"]
            b = params.get(f"{layer.name}.bias")
            out = x @ w.T
            if b is not None:
                out = out + b
            steps.append((layer, {"x": x}))
        elif isinstance(layer, ReLU):
            out = np.maximum(x, 0.0)
            steps.append((layer, {"mask": x > 0}))
        elif isinstance(layer, AvgPool):
            out = _pool_forward(x, layer.window)
            steps.append((layer, {}))
        elif isinstance(layer, Flatten):
            out = x.reshape(x.shape[0], -1)
            steps.append((layer, {"x_shape": x.shape}))
        elif isinstance(layer, Scaler):
            out = x / layer.ratio
            steps.append((layer, {}))
        else:
            raise ModelError(f"unknown layer {layer!r}")
        x = out
    return x, ForwardCache(x, steps, params)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ModelError(f"expected {n} labels, got shape {list(labels.shape)}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ModelError(f"labels must be in [0, {classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - lse[:, None]
    loss = float(-log_probs[np.arange(n), labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def backward(cache: ForwardCache, labels: np.ndarray) -> Tuple[float, Gradients]:
    loss, grad = softmax_cross_entropy(cache.logits, labels)
    params = cache.params
    grads: Gradients = {}
    for layer, saved in reversed(cache.steps):
        if isinstance(layer, Conv):
            w = params[f"{layer.name}.weight"]
            grad, dw, db = _conv_backward(grad, saved["windows"], w, saved["x_shape"], layer.stride, layer.padding)
            grads[f"{layer.name}.weight"] = dw
            if layer.bias:
                grads[f"{layer.name}.bias"] = db
        elif isinstance(layer, Dense):
            w = params[f"{layer.name}.weight"]
            grads[f"{layer.name}.weight"] = grad.T @ saved["x"]
            if layer.bias:
                grads[f"{layer.name}.bias"] = grad.sum(axis=0)
            grad = grad @ w
        elif isinstance(layer, ReLU):
            grad = grad * saved["mask"]
        elif isinstance(layer, AvgPool):
            grad = _pool_backward(grad, layer.window)
        elif isinstance(layer, Flatten):
            grad = grad.reshape(saved["x_shape"])
        elif isinstance(layer, Scaler):
            grad = grad / layer.ratio
    return loss, {name: grads[name] for name in params}


# ---------- Optimisation ----------
@dataclass(frozen=True)
class TrainConfig:
    """Local optimiser settings."""
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 64
    local_epochs: int = 5

    def __post_init__(self):
        if not self.lr > 0:
            raise ModelError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ModelError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ModelError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1 or self.local_epochs < 0:
            raise ModelError("batch_size must be >= 1 and local_epochs >= 0")


def sgd_step(params: Params, grads: Gradients, momentum_state: Dict[str, np.ndarray],
             cfg: TrainConfig) -> Tuple[Params, Dict[str, np.ndarray]]:
    """v' = m*v + g + wd*p ; p' = p - lr*v'."""
    new_params: Params = {}
    new_state: Dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ModelError(f"{name}: gradient shape {list(g.shape)} != param shape {list(p.shape)}")
        v = momentum_state.get(name)
        v_new = g + cfg.weight_decay * p if v is None else cfg.momentum * v + g + cfg.weight_decay * p
        new_state[name] = v_new
        new_params[name] = p - cfg.lr * v_new
    return new_params, new_state


class LocalTrainResult(NamedTuple):
    params: Params
    loss: float  # mean mini-batch loss over all local steps, nan when no step ran
    steps: int


def local_train(params: Params, arch: ModelArch, shard, cfg: TrainConfig,
                rng: np.random.Generator) -> LocalTrainResult:
    """`cfg.local_epochs` passes of shuffled mini-batch SGD over `shard`."""
    count = len(shard.labels)
    if count == 0:
        raise ModelError("cannot train on an empty shard")
    current = copy_params(params)
    state: Dict[str, np.ndarray] = {}
    losses: List[float] = []
    for _ in range(cfg.local_epochs):
        order = rng.permutation(count)
        for start in range(0, count, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, cache = forward(current, arch, shard.images[idx])
            loss, grads = backward(cache, shard.labels[idx])
            current, state = sgd_step(current, grads, state, cfg)
            losses.append(loss)
    for name, p in current.items():
        check_finite(p, f"{name} after local training")
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return LocalTrainResult(current, mean_loss, len(losses))


def predict(params: Params, arch: ModelArch, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    preds = []
    for start in range(0, len(images), batch_size):
        logits, _ = forward(params, arch, images[start:start + batch_size])
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)


def evaluate(params: Params, arch: ModelArch, testset, batch_size: int = 256) -> float:
    """Fraction of argmax-correct predictions on `testset`."""
    if len(testset.labels) == 0:
        raise ModelError("cannot evaluate on an empty test set")
    preds = predict(params, arch, testset.images, batch_size)
    return float(np.mean(preds == np.asarray(testset.labels)))


# ---------- Gradient check ----------
def gradient_check(params: Params, arch: ModelArch, x: np.ndarray, labels: np.ndarray,
                   rng: np.random.Generator, h: float = 1e-5, max_checks: int = 24) -> Dict[str, float]:
    """Relative error per tensor between analytic gradients and central differences
    on up to `max_checks` entries; error is ||a - n|| / (||a|| + ||n||)."""
    _, cache = forward(params, arch, x)
    _, grads = backward(cache, labels)

    def loss_at(p: Params) -> float:
        logits, _ = forward(p, arch, x)
        return softmax_cross_entropy(logits, labels)[0]

    errors: Dict[str, float] = {}
    for name, tensor in params.items():
        size = tensor.size
        picks = rng.choice(size, size=min(size, max_checks), replace=False)
        analytic, numeric = [], []
        for flat in picks:
            pos = np.unravel_index(flat, tensor.shape)
            plus, minus = copy_params(params), copy_params(params)
            plus[name][pos] += h
            minus[name][pos] -= h
            numeric.append((loss_at(plus) - loss_at(minus)) / (2 * h))
            analytic.append(grads[name][pos])
        a, n = np.asarray(analytic), np.asarray(numeric)
        denom = np.linalg.norm(a) + np.linalg.norm(n)
        errors[name] = float(np.linalg.norm(a - n) / denom) if denom > 1e-12 else 0.0
    return errors


def random_tiny_arch(rng: np.random.Generator) -> ModelArch:
    """Small conv+dense arch exercising every layer type with random sizes."""
    in_ch = int(rng.integers(1, 3))
    side = int(rng.choice([4, 8]))
    c1 = int(rng.choice([2, 4]))
    c2 = int(rng.choice([2, 4]))
    stride = int(rng.integers(1, 3))
    conv2_out = (side // 2 + 2 * 1 - 3) // stride + 1
    if conv2_out % 2:
        stride = 1
        conv2_out = side // 2
    hw = (conv2_out // 2) ** 2
    hidden = int(rng.choice([3, 5]))
    layers = (
        Conv("conv1", c1, in_ch, 3, padding=1, partition_in=False),
        ReLU(), Scaler(0.5), AvgPool(2),
        Conv("conv2", c2, c1, 3, stride=stride, padding=1),
        ReLU(), AvgPool(2),
        Flatten(),
        Dense("fc1", hidden, c2 * hw, in_group=hw),
        ReLU(), Scaler(0.25),
        Dense("fc2", 3, hidden, partition_out=False),
    )
    return ModelArch(layers, (in_ch, side, side), 3)
