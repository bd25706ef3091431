"""Layer-wise relevance propagation and prototype-seeded relevance maps.

Composite ``epsilon_plus_flat``: epsilon rule on dense layers, positive
contributions (alpha=1, beta=0) on convolutions, and the flat rule on the
first parameterised layer. ``epsilon_plus`` is the same without the flat
first layer. Denominators leave biases out so that relevance is conserved
layer by layer up to the stabiliser.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kmex import nn
from kmex.prototypes import PrototypeSet, classify
from kmex.similarity import Similarity

EPSILON = 1e-6
COMPOSITES = ("epsilon_plus_flat", "epsilon_plus")
DEGENERATE = "degenerate-denominator"
UNIFORM_SEED = "uniform-seed"


@dataclass(frozen=True)
class RelevanceMap:
    """Raw relevance over the model input, with diagnostic flags."""

    values: np.ndarray
    seed_total: float
    flags: frozenset[str] = frozenset()

    @property
    def total(self) -> float:
        return float(self.values.sum())

    @property
    def drift(self) -> float:
        """Relative gap between the seeded and the recovered relevance."""
        if self.seed_total == 0:
            return abs(self.total)
        return abs(self.total - self.seed_total) / abs(self.seed_total)


def _safe_div(r, z, eps):
    """r / (z + eps*sign(z)); zero where z == 0 (reported through the mask)."""
    zero = z == 0
    denom = np.where(zero, 1.0, z + eps * np.sign(z))
    return np.where(zero, 0.0, r / denom), zero & (r != 0)


def _dense_eps(x, w, r, eps):
    s, bad = _safe_div(r, x @ w.T, eps)
    out = x * (s @ w)
    if bad.any():
        out += (r * bad).sum(axis=1, keepdims=True) / x.shape[1]
    return out, bad.any()


def _dense_flat(x, r):
    return np.broadcast_to(r.sum(axis=1, keepdims=True) / x.shape[1], x.shape).copy()


def _conv_flat(layer: nn.Conv2d, x, r):
    ones_w = np.ones((1, layer.in_ch, layer.kh, layer.kw))
    count = layer.conv(np.ones_like(x), ones_w)
    return layer.conv_transpose(r / count, np.ones((layer.out_ch, layer.in_ch, layer.kh, layer.kw)),
                                x.shape)


def _conv_plus(layer: nn.Conv2d, x, w, r, eps):
    xp, xn = np.maximum(x, 0), np.minimum(x, 0)
    wp, wn = np.maximum(w, 0), np.minimum(w, 0)
    z = layer.conv(xp, wp) + layer.conv(xn, wn)
    zero = z <= 0
    s = np.where(zero, 0.0, r / np.where(zero, 1.0, z + eps))
    out = xp * layer.conv_transpose(s, wp, x.shape) + xn * layer.conv_transpose(s, wn, x.shape)
    bad = zero & (r != 0)
    if bad.any():
        out += _conv_flat(layer, x, r * bad)
    return out, bad.any()


def _gap(x, r, eps):
    sums = x.sum(axis=(2, 3))
    s, bad = _safe_div(r, sums, eps)
    out = x * s[:, :, None, None]
    if bad.any():
        hw = x.shape[2] * x.shape[3]
        out += (r * bad)[:, :, None, None] / hw
    return out, bad.any()


def propagate(stack: nn.LayerStack, weights: nn.WeightStore, acts, relevance: np.ndarray,
              start: int, composite: str = "epsilon_plus_flat",
              epsilon: float = EPSILON) -> tuple[np.ndarray, set[str]]:
    """Push batched relevance at ``acts[start]`` down to the input.

    ``acts`` are the batched activations of a forward pass.
    """
    if composite not in COMPOSITES:
        raise ValueError(f"unknown composite {composite!r}")
    params = weights.by_layer(stack)
    first = stack.first_param_layer() if composite == "epsilon_plus_flat" else None
    r = np.asarray(relevance, dtype=np.float64).reshape(acts[start].shape)
    flags: set[str] = set()
    for i in range(start - 1, -1, -1):
        layer, x, y = stack.layers[i], acts[i], acts[i + 1]
        bad = False
        if isinstance(layer, nn.Dense):
            if i == first:
                r = _dense_flat(x, r)
            else:
                r, bad = _dense_eps(x, params[i][0], r, epsilon)
        elif isinstance(layer, nn.Conv2d):
            if i == first:
                r = _conv_flat(layer, x, r)
            else:
                r, bad = _conv_plus(layer, x, params[i][0], r, epsilon)
        elif isinstance(layer, nn.ReLU):
            r = r * (y > 0)
        elif isinstance(layer, nn.MaxPool2):
            r = nn.MaxPool2.route(nn.MaxPool2.winners(x), r)
        elif isinstance(layer, nn.GlobalAvgPool):
            r, bad = _gap(x, r, epsilon)
        elif isinstance(layer, nn.Flatten):
            r = r.reshape(x.shape)
        elif isinstance(layer, nn.Softmax):
            pass  # relevance on probabilities is taken as relevance on logits
        else:  # pragma: no cover
            raise TypeError(f"no relevance rule for {type(layer).__name__}")
        if bad:
            flags.add(DEGENERATE)
    return r, flags


def lrp_backward(stack: nn.LayerStack, weights: nn.WeightStore, trace: nn.ActivationTrace,
                 seed, start: int | None = None, composite: str = "epsilon_plus_flat",
                 epsilon: float = EPSILON) -> RelevanceMap:
    """Relevance map for one sample, seeded at ``trace[start]`` (default: the logits)."""
    if not trace.single:
        raise ValueError("lrp_backward expects a single-sample trace; use propagate for batches")
    if start is None:
        start = len(stack.layers) - 1
    seed = np.asarray(seed, dtype=np.float64)
    if seed.size != np.prod(stack.shapes[start]):
        raise nn.ShapeError(f"seed has {seed.size} entries, layer output has shape {stack.shapes[start]}")
    r, flags = propagate(stack, weights, trace.activations, seed[None], start, composite, epsilon)
    return RelevanceMap(r[0], float(seed.sum()), frozenset(flags))


# ---------------------------------------------------------------------------
# seeding at the embedding


def gradient_input_seed(z: np.ndarray, grad: np.ndarray, value: float) -> tuple[np.ndarray, bool]:
    """Split ``value`` over dimensions in proportion to grad*input.

    Returns the seed and whether the uniform fallback was used (zero total
    contribution).
    """
    gz = grad * z
    total = gz.sum()
    if abs(total) < 1e-12:
        return np.full_like(z, value / z.size), True
    return gz / (total + np.sign(total) * 1e-9) * value, False


def class_probability_grad(protos: PrototypeSet, z: np.ndarray) -> tuple[int, float, np.ndarray]:
    """Predicted class, its probability under class_scores, and d p / d z."""
    sims = protos.similarities(z)[0]
    best = protos.class_best(sims[None])[0]
    probs = nn.softmax(best)
    c = classify(protos, z)
    grads = np.zeros((protos.n_classes, protos.dim))
    for k in range(protos.n_classes):
        m = np.flatnonzero(protos.classes == k)
        if m.size:
            row = m[np.argmax(sims[m])]
            grads[k] = protos.similarity.grad(z, protos.vectors[row])
    coef = probs[c] * ((np.arange(protos.n_classes) == c) - probs)
    coef = np.where(np.isfinite(best), coef, 0.0)
    return c, float(probs[c]), coef @ grads


def _embedding_map(stack, weights, x, seed_fn, composite, epsilon) -> RelevanceMap:
    trace = nn.forward(stack, weights, x, upto=stack.encoder_cut)
    if not trace.single:
        raise ValueError("expected a single image")
    z = trace.activations[stack.encoder_cut].reshape(-1)
    seed, value, uniform = seed_fn(z)
    r, flags = propagate(stack, weights, trace.activations, seed[None], stack.encoder_cut,
                         composite, epsilon)
    if uniform:
        flags.add(UNIFORM_SEED)
    return RelevanceMap(r[0], value, frozenset(flags))


def prp_map(stack: nn.LayerStack, weights: nn.WeightStore, x, prototype,
            similarity: Similarity | str = "neg_l2", composite: str = "epsilon_plus_flat",
            epsilon: float = EPSILON) -> RelevanceMap:
    """Relevance of the input for its similarity to one prototype."""
    if isinstance(similarity, str):
        similarity = Similarity(similarity)
    p = np.asarray(prototype, dtype=np.float64).reshape(-1)
    if p.size != stack.embedding_dim:
        raise nn.ShapeError(f"prototype has dimension {p.size}, embedding is {stack.embedding_dim}")

    def seed_fn(z):
        value = similarity(z, p)
        seed, uniform = gradient_input_seed(z, similarity.grad(z, p), value)
        return seed, value, uniform

    return _embedding_map(stack, weights, x, seed_fn, composite, epsilon)


def nearest_prp_map(stack, weights, protos: PrototypeSet, x, **kw) -> RelevanceMap:
    """PRP map with respect to the most similar prototype."""
    z = nn.embed(stack, weights, x)
    row = int(protos.nearest(z)[0])
    return prp_map(stack, weights, x, protos.vectors[row], protos.similarity, **kw)


def class_probability_map(stack: nn.LayerStack, weights: nn.WeightStore, protos: PrototypeSet, x,
                          composite: str = "epsilon_plus_flat", epsilon: float = EPSILON) -> RelevanceMap:
    """Relevance for the predicted-class probability of the prototype classifier."""

    def seed_fn(z):
        _, value, grad = class_probability_grad(protos, z)
        seed, uniform = gradient_input_seed(z, grad, value)
        return seed, value, uniform

    return _embedding_map(stack, weights, x, seed_fn, composite, epsilon)


def lrp_map(stack: nn.LayerStack, weights: nn.WeightStore, x, target: int | None = None,
            composite: str = "epsilon_plus_flat", epsilon: float = EPSILON) -> RelevanceMap:
    """Black-box relevance: seed the predicted (or given) class probability at its logit."""
    trace = nn.forward(stack, weights, x)
    probs = trace.probs
    c = int(np.argmax(probs)) if target is None else int(target)
    seed = np.zeros_like(probs)
    seed[c] = probs[c]
    return lrp_backward(stack, weights, trace, seed, composite=composite, epsilon=epsilon)
