"""Minimal feedforward network engine.

Layers operate on batches in channel-first layout: images are ``(B, C, H, W)``
and flat activations ``(B, D)``. All arithmetic is carried out in float64 so
that reductions accumulate in double precision whatever the storage dtype of
the weights.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import ClassVar, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

Shape = tuple[int, ...]


class ShapeError(ValueError):
    """Input or parameter shape incompatible with a layer stack."""


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


# ---------------------------------------------------------------------------
# convolution helpers


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """(B, C, H, W) -> (B*Ho*Wo, C*kh*kw) patch matrix."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return cols, ho, wo


def _col2im(cols: np.ndarray, x_shape: Shape, kh: int, kw: int, stride: int, pad: int,
            ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col` (overlapping windows are summed)."""
    b, c, h, w = x_shape
    cols = cols.reshape(b, ho, wo, c, kh, kw)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return out


# ---------------------------------------------------------------------------
# layer specs


@dataclass(frozen=True)
class Layer:
    kind: ClassVar[str] = ""

    def output_shape(self, in_shape: Shape) -> Shape:
        return in_shape

    def param_shapes(self) -> list[tuple[str, Shape]]:
        return []

    def forward(self, x: np.ndarray, params: Sequence[np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def backward(self, x, y, grad, params) -> tuple[np.ndarray, list[np.ndarray]]:
        """Return (grad wrt input, grads wrt params) given the upstream grad."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        d = {"type": self.kind}
        d.update({k: v for k, v in self.__dict__.items()})
        return d


@dataclass(frozen=True)
class Dense(Layer):
    in_features: int
    out_features: int
    kind: ClassVar[str] = "dense"

    def output_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ShapeError(f"dense expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def param_shapes(self):
        return [("weight", (self.out_features, self.in_features)), ("bias", (self.out_features,))]

    def forward(self, x, params):
        w, b = params
        return x @ w.T + b

    def backward(self, x, y, grad, params):
        w, _ = params
        return grad @ w, [grad.T @ x, grad.sum(axis=0)]


@dataclass(frozen=True)
class Conv2d(Layer):
    in_ch: int
    out_ch: int
    kh: int
    kw: int
    stride: int = 1
    pad: int = 0
    kind: ClassVar[str] = "conv2d"

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ShapeError(f"conv2d expects ({self.in_ch}, H, W), got {in_shape}")
        _, h, w = in_shape
        ho = (h + 2 * self.pad - self.kh) // self.stride + 1
        wo = (w + 2 * self.pad - self.kw) // self.stride + 1
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"conv2d kernel larger than padded input {in_shape}")
        return (self.out_ch, ho, wo)

    def param_shapes(self):
        return [("weight", (self.out_ch, self.in_ch, self.kh, self.kw)), ("bias", (self.out_ch,))]

    def conv(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Bias-free convolution with an arbitrary kernel of this layer's geometry."""
        cols, ho, wo = _im2col(x, self.kh, self.kw, self.stride, self.pad)
        out = cols @ w.reshape(w.shape[0], -1).T
        return out.reshape(x.shape[0], ho, wo, -1).transpose(0, 3, 1, 2)

    def conv_transpose(self, g: np.ndarray, w: np.ndarray, x_shape: Shape) -> np.ndarray:
        """Adjoint of :meth:`conv` with respect to its input."""
        b, _, ho, wo = g.shape
        g2 = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, -1)
        cols = g2 @ w.reshape(w.shape[0], -1)
        return _col2im(cols, x_shape, self.kh, self.kw, self.stride, self.pad, ho, wo)

    def forward(self, x, params):
        w, b = params
        return self.conv(x, w) + b[None, :, None, None]

    def backward(self, x, y, grad, params):
        w, _ = params
        cols, ho, wo = _im2col(x, self.kh, self.kw, self.stride, self.pad)
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        dw = (g2.T @ cols).reshape(w.shape)
        dx = _col2im(g2 @ w.reshape(self.out_ch, -1), x.shape, self.kh, self.kw,
                     self.stride, self.pad, ho, wo)
        return dx, [dw, grad.sum(axis=(0, 2, 3))]


@dataclass(frozen=True)
class ReLU(Layer):
    kind: ClassVar[str] = "relu"

    def forward(self, x, params):
        return np.maximum(x, 0.0)

    def backward(self, x, y, grad, params):
        return grad * (x > 0), []


@dataclass(frozen=True)
class MaxPool2(Layer):
    """2x2 max pooling with stride 2; trailing odd rows/columns are dropped."""

    kind: ClassVar[str] = "maxpool"

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] < 2 or in_shape[2] < 2:
            raise ShapeError(f"maxpool expects (C, H>=2, W>=2), got {in_shape}")
        c, h, w = in_shape
        return (c, h // 2, w // 2)

    @staticmethod
    def winners(x: np.ndarray) -> np.ndarray:
        """One-hot mask over the input marking each window's argmax.

        Ties go to the lowest flat index inside the window.
        """
        b, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        blocks = x[:, :, :2 * ho, :2 * wo].reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
        arg = blocks.reshape(b, c, ho, wo, 4).argmax(axis=-1)
        onehot = np.zeros((b, c, ho, wo, 4))
        np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
        mask = np.zeros_like(x, dtype=float)
        mask[:, :, :2 * ho, :2 * wo] = (
            onehot.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * ho, 2 * wo))
        return mask

    @staticmethod
    def route(mask: np.ndarray, g: np.ndarray) -> np.ndarray:
        up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        out = np.zeros_like(mask)
        out[:, :, :up.shape[2], :up.shape[3]] = up
        return out * mask

    def forward(self, x, params):
        b, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        return x[:, :, :2 * ho, :2 * wo].reshape(b, c, ho, 2, wo, 2).max(axis=(3, 5))

    def backward(self, x, y, grad, params):
        return self.route(self.winners(x), grad), []


@dataclass(frozen=True)
class GlobalAvgPool(Layer):
    kind: ClassVar[str] = "global_avgpool"

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"global_avgpool expects (C, H, W), got {in_shape}")
        return (in_shape[0],)

    def forward(self, x, params):
        return x.mean(axis=(2, 3))

    def backward(self, x, y, grad, params):
        hw = x.shape[2] * x.shape[3]
        return np.broadcast_to(grad[:, :, None, None] / hw, x.shape).copy(), []


@dataclass(frozen=True)
class Flatten(Layer):
    kind: ClassVar[str] = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, params):
        return x.reshape(x.shape[0], -1)

    def backward(self, x, y, grad, params):
        return grad.reshape(x.shape), []


@dataclass(frozen=True)
class Softmax(Layer):
    kind: ClassVar[str] = "softmax"

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"softmax expects a flat vector, got {in_shape}")
        return in_shape

    def forward(self, x, params):
        return softmax(x)

    def backward(self, x, y, grad, params):
        return y * (grad - (grad * y).sum(axis=1, keepdims=True)), []


LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv2d, ReLU, MaxPool2, GlobalAvgPool, Flatten, Softmax)}


def layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    kind = d.pop("type")
    if kind not in LAYER_TYPES:
        raise ValueError(f"unknown layer type {kind!r}")
    return LAYER_TYPES[kind](**d)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# stack + weights


@dataclass(frozen=True)
class LayerStack:
    """Ordered layers; ``layers[:encoder_cut]`` is the encoder, the rest the head."""

    input_shape: Shape
    layers: tuple[Layer, ...]
    encoder_cut: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        object.__setattr__(self, "shapes", tuple(shapes))
        n_soft = sum(isinstance(l, Softmax) for l in self.layers)
        if n_soft != 1 or not isinstance(self.layers[-1], Softmax):
            raise ShapeError("stack needs exactly one softmax head, as the final layer")
        if not 0 <= self.encoder_cut < len(self.layers):
            raise ShapeError(f"encoder_cut {self.encoder_cut} out of range")
        if self.encoder_cut > 0 and len(shapes[self.encoder_cut]) != 1:
            raise ShapeError(f"encoder output {shapes[self.encoder_cut]} is not a flat vector")

    @property
    def embedding_dim(self) -> int:
        return int(np.prod(self.shapes[self.encoder_cut]))

    @property
    def n_classes(self) -> int:
        return self.shapes[-1][0]

    def param_slots(self) -> list[tuple[int, str, Shape]]:
        return [(i, name, shape) for i, layer in enumerate(self.layers)
                for name, shape in layer.param_shapes()]

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, _, s in self.param_slots())

    def first_param_layer(self) -> int | None:
        for i, layer in enumerate(self.layers):
            if layer.param_shapes():
                return i
        return None

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "encoder_cut": self.encoder_cut,
                "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerStack":
        return cls(tuple(d["input_shape"]), tuple(layer_from_dict(l) for l in d["layers"]),
                   int(d["encoder_cut"]))


@dataclass(frozen=True)
class WeightStore:
    """Parameter tensors in declaration order (weight, bias per layer)."""

    tensors: tuple[np.ndarray, ...]
    dtype: str = "float32"

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")
        ts = []
        for t in self.tensors:
            a = np.array(t, dtype=self.dtype)
            if not np.all(np.isfinite(a)):
                raise ValueError("weights contain non-finite values")
            a.setflags(write=False)
            ts.append(a)
        object.__setattr__(self, "tensors", tuple(ts))

    def check(self, stack: LayerStack) -> None:
        slots = stack.param_slots()
        if len(slots) != len(self.tensors):
            raise ShapeError(f"expected {len(slots)} tensors, got {len(self.tensors)}")
        for (i, name, shape), t in zip(slots, self.tensors):
            if t.shape != shape:
                raise ShapeError(f"layer {i} {name}: expected {shape}, got {t.shape}")

    def by_layer(self, stack: LayerStack) -> list[list[np.ndarray]]:
        self.check(stack)
        out: list[list[np.ndarray]] = [[] for _ in stack.layers]
        for (i, _, _), t in zip(stack.param_slots(), self.tensors):
            out[i].append(t.astype(np.float64))
        return out

    def astype(self, dtype: str) -> "WeightStore":
        return WeightStore(self.tensors, dtype)

    def digest(self) -> str:
        h = hashlib.sha256()
        for t in self.tensors:
            h.update(np.ascontiguousarray(t, dtype="<f4").tobytes())
        return h.hexdigest()


def init_weights(stack: LayerStack, seed: int, dtype: str = "float64") -> WeightStore:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = []
    for _, name, shape in stack.param_slots():
        if name == "weight":
            fan_in = int(np.prod(shape[1:]))
            tensors.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
        else:
            tensors.append(np.zeros(shape))
    return WeightStore(tuple(tensors), dtype)


# ---------------------------------------------------------------------------
# forward / embed


@dataclass(frozen=True)
class ActivationTrace:
    """Input plus every layer output from one forward pass (batched)."""

    activations: tuple[np.ndarray, ...]
    single: bool = False

    def __len__(self):
        return len(self.activations)

    def __getitem__(self, i):
        a = self.activations[i]
        return a[0] if self.single else a

    @property
    def probs(self) -> np.ndarray:
        return self[-1]


def _as_batch(stack: LayerStack, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == stack.input_shape:
        return x[None], True
    if x.shape[1:] == stack.input_shape:
        return x, False
    raise ShapeError(f"input shape {x.shape} does not match stack input {stack.input_shape}")


def forward(stack: LayerStack, weights: WeightStore, x, upto: int | None = None) -> ActivationTrace:
    """Run the stack on one sample or a batch; ``upto`` stops after that many layers."""
    xb, single = _as_batch(stack, x)
    params = weights.by_layer(stack)
    acts = [xb]
    n = len(stack.layers) if upto is None else upto
    for layer, p in zip(stack.layers[:n], params[:n]):
        acts.append(layer.forward(acts[-1], p))
    return ActivationTrace(tuple(acts), single)


def embed(stack: LayerStack, weights: WeightStore, x) -> np.ndarray:
    """Encoder output, flattened to ``(D,)`` or ``(B, D)``."""
    trace = forward(stack, weights, x, upto=stack.encoder_cut)
    z = trace.activations[stack.encoder_cut]
    z = z.reshape(z.shape[0], -1)
    return z[0] if trace.single else z


def predict_proba(stack: LayerStack, weights: WeightStore, x, batch_size: int = 512) -> np.ndarray:
    xb, single = _as_batch(stack, x)
    out = [forward(stack, weights, xb[i:i + batch_size]).activations[-1]
           for i in range(0, len(xb), batch_size)]
    probs = np.concatenate(out) if out else np.zeros((0, stack.n_classes))
    return probs[0] if single else probs


def embed_batched(stack: LayerStack, weights: WeightStore, x, batch_size: int = 512) -> np.ndarray:
    xb, _ = _as_batch(stack, x)
    if len(xb) == 0:
        return np.zeros((0, stack.embedding_dim))
    return np.concatenate([embed(stack, weights, xb[i:i + batch_size])
                           for i in range(0, len(xb), batch_size)])


# ---------------------------------------------------------------------------
# training


def loss_and_grads(stack: LayerStack, weights: WeightStore, x, y) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy on a batch and its gradient for every parameter tensor."""
    xb, _ = _as_batch(stack, x)
    y = np.asarray(y, dtype=np.int64)
    params = weights.by_layer(stack)
    trace = forward(stack, weights, xb).activations
    probs = trace[-1]
    n = len(xb)
    loss = float(-np.log(np.clip(probs[np.arange(n), y], 1e-300, None)).mean())
    # softmax + cross-entropy fused at the logits
    g = probs.copy()
    g[np.arange(n), y] -= 1.0
    g /= n
    grads: list[list[np.ndarray]] = [[] for _ in stack.layers]
    for i in range(len(stack.layers) - 2, -1, -1):
        g, gp = stack.layers[i].backward(trace[i], trace[i + 1], g, params[i])
        grads[i] = gp
    return loss, [t for gp in grads for t in gp]


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)


def train_sgd(stack: LayerStack, seed: int, x, y, epochs: int, lr: float, batch_size: int = 32,
              momentum: float = 0.9, init: WeightStore | None = None, dtype: str = "float32",
              history: TrainLog | None = None) -> WeightStore:
    """Mini-batch SGD with momentum on cross-entropy.

    Labels are 0-based class indices. Shuffling draws from ``seed`` (the
    initial weights use the same seed unless ``init`` is given).
    """
    xb, _ = _as_batch(stack, x)
    y = np.asarray(y, dtype=np.int64)
    if len(y) != len(xb):
        raise ShapeError("x and y lengths differ")
    if y.size and (y.min() < 0 or y.max() >= stack.n_classes):
        raise ValueError(f"labels must lie in [0, {stack.n_classes})")
    ws = init if init is not None else init_weights(stack, seed)
    ts = [t.astype(np.float64) for t in ws.tensors]
    vel = [np.zeros_like(t) for t in ts]
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    for epoch in range(epochs):
        order = rng.permutation(len(xb))
        total = 0.0
        for start in range(0, len(xb), batch_size):
            idx = order[start:start + batch_size]
            loss, grads = loss_and_grads(stack, WeightStore(tuple(ts), "float64"), xb[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            total += loss * len(idx)
            for t, v, g in zip(ts, vel, grads):
                v *= momentum
                v -= lr * g
                t += v
            # storage precision bounds what counts as finite
            if not all(np.all(np.abs(t) <= np.finfo(dtype).max) for t in ts):
                raise TrainingDiverged(epoch, float("nan"))
        mean = total / max(len(xb), 1)
        log.debug("epoch %d loss %.6f", epoch, mean)
        if history is not None:
            history.epoch_loss.append(mean)
    return WeightStore(tuple(ts), dtype)


# ---------------------------------------------------------------------------
# model file pair


@dataclass(frozen=True)
class Model:
    """A layer stack, its weights, and the input normalisation it was trained with."""

    stack: LayerStack
    weights: WeightStore
    mean: tuple[float, ...] = (0.0,)
    std: tuple[float, ...] = (1.0,)

    def normalize(self, images: np.ndarray) -> np.ndarray:
        m = np.asarray(self.mean, dtype=np.float64)[:, None, None]
        s = np.asarray(self.std, dtype=np.float64)[:, None, None]
        return (np.asarray(images, dtype=np.float64) - m) / s

    def predict_proba(self, x) -> np.ndarray:
        return predict_proba(self.stack, self.weights, x)

    def embed(self, x) -> np.ndarray:
        return embed_batched(self.stack, self.weights, x)

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.stack.to_dict(), sort_keys=True).encode())
        h.update(self.weights.digest().encode())
        h.update(repr((self.mean, self.std)).encode())
        return h.hexdigest()[:16]


def save_model(model: Model, model_path: str | Path, weights_path: str | Path | None = None) -> None:
    """Write ``model.json`` and the raw little-endian f32 ``weights.bin``."""
    model_path = Path(model_path)
    weights_path = Path(weights_path) if weights_path else model_path.with_name("weights.bin")
    manifest, offset, blobs = [], 0, []
    for (i, name, shape), t in zip(model.stack.param_slots(), model.weights.tensors):
        raw = np.ascontiguousarray(t, dtype="<f4").tobytes()
        manifest.append({"layer": i, "name": name, "shape": list(shape),
                         "offset": offset, "nbytes": len(raw)})
        offset += len(raw)
        blobs.append(raw)
    doc = {"format": "kmex-model", "version": 1, **model.stack.to_dict(),
           "input_norm": {"mean": list(model.mean), "std": list(model.std)},
           "weights_file": weights_path.name, "tensors": manifest}
    model_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    weights_path.write_bytes(b"".join(blobs))


def load_model(model_path: str | Path, weights_path: str | Path | None = None,
               dtype: str = "float32") -> Model:
    model_path = Path(model_path)
    doc = json.loads(model_path.read_text())
    if doc.get("format") != "kmex-model":
        raise ValueError(f"{model_path}: not a kmex model file")
    stack = LayerStack.from_dict(doc)
    weights_path = Path(weights_path) if weights_path else model_path.with_name(doc["weights_file"])
    raw = weights_path.read_bytes()
    expected = sum(t["nbytes"] for t in doc["tensors"])
    if len(raw) != expected:
        raise ValueError(f"{weights_path}: expected {expected} bytes, found {len(raw)}")
    tensors = [np.frombuffer(raw, dtype="<f4", count=int(np.prod(t["shape"])), offset=t["offset"])
               .reshape(t["shape"]) for t in doc["tensors"]]
    weights = WeightStore(tuple(tensors), dtype)
    weights.check(stack)
    norm = doc.get("input_norm", {})
    return Model(stack, weights, tuple(norm.get("mean", (0.0,))), tuple(norm.get("std", (1.0,))))


def toy_cnn(n_classes: int = 3, size: int = 16, channels: int = 1,
            width: tuple[int, int] = (32, 64)) -> LayerStack:
    """Two conv blocks, global average pooling, one dense head (~19k params by default).

    The map feeding the global pool is ``size/4`` square, which is what
    patch-level conversion clusters over.
    """
    c1, c2 = width
    layers = (
        Conv2d(channels, c1, 3, 3, 1, 1), ReLU(), MaxPool2(),
        Conv2d(c1, c2, 3, 3, 1, 1), ReLU(), MaxPool2(),
        GlobalAvgPool(),
        Dense(c2, n_classes), Softmax(),
    )
    return LayerStack((channels, size, size), layers, encoder_cut=7)
