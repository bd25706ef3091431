"""Quantitative evaluation of prototype-based self-explainable models."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from kmex.data import AttributeTable
from kmex.prototypes import PrototypeSet, argmax_by_rank
from kmex.relevance import RelevanceMap

log = logging.getLogger(__name__)

KL_SMOOTHING = 1e-12
RELEVANCE = "relevance"
RANDOM = "random"


# ---------------------------------------------------------------------------
# transparency / diversity


def activated(protos: PrototypeSet, embeddings) -> np.ndarray:
    """Boolean mask of prototypes that are the global argmax for some embedding."""
    z = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if len(z) == 0:
        raise ValueError("ghosting needs at least one embedding")
    rows = np.concatenate([argmax_by_rank(protos.similarities(z[i:i + 4096]), protos._rank)
                           for i in range(0, len(z), 4096)])
    hit = np.zeros(len(protos), dtype=bool)
    hit[rows] = True
    return hit


def ghosting_score(protos: PrototypeSet, embeddings) -> float:
    """Fraction of prototypes never the most similar one to any training embedding."""
    return 1.0 - activated(protos, embeddings).sum() / len(protos)


def entropy(p: np.ndarray, axis: int = -1) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=axis)


def diversity_score(protos: PrototypeSet) -> float:
    """Mean normalised entropy of softmaxed prototype-to-prototype similarities.

    Every prototype is compared with all of them, itself and ghosted ones
    included. 0 means well separated, 1 total collapse.
    """
    n = len(protos)
    if n < 2:
        raise ValueError("diversity is undefined for fewer than two prototypes")
    sims = protos.similarity.pairwise(protos.vectors, protos.vectors)
    sims = sims - sims.max(axis=1, keepdims=True)
    p = np.exp(sims)
    p /= p.sum(axis=1, keepdims=True)
    return float(entropy(p, axis=1).mean() / np.log(n))


# ---------------------------------------------------------------------------
# explanation faithfulness


@dataclass(frozen=True)
class NormalizedRelevance:
    values: np.ndarray  # (H, W), non-negative, sums to 1
    degenerate: bool = False


def normalize_relevance(relevance: RelevanceMap | np.ndarray) -> NormalizedRelevance:
    """Channel-wise max of |relevance| divided by its spatial sum.

    Accepts ``(C, H, W)`` or ``(H, W)``. An all-zero map yields the uniform
    distribution with ``degenerate`` set.
    """
    r = relevance.values if isinstance(relevance, RelevanceMap) else np.asarray(relevance, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise ValueError("relevance map contains non-finite values")
    if r.ndim == 2:
        r = r[None]
    m = np.abs(r).max(axis=0)
    total = m.sum()
    if total <= 0:
        return NormalizedRelevance(np.full(m.shape, 1.0 / m.size), True)
    return NormalizedRelevance(m / total)


def _as_dist(x) -> np.ndarray:
    return x.values if isinstance(x, NormalizedRelevance) else np.asarray(x, dtype=np.float64)


def explanation_divergence(sem, bbox, smoothing: float = KL_SMOOTHING) -> float:
    """KL(sem || bbox) in nats after adding ``smoothing`` and renormalising both."""
    p, q = _as_dist(sem), _as_dist(bbox)
    if p.shape != q.shape:
        raise ValueError(f"map shapes differ: {p.shape} vs {q.shape}")
    p = (p + smoothing) / (p + smoothing).sum()
    q = (q + smoothing) / (q + smoothing).sum()
    return float(max(0.0, (p * np.log(p / q)).sum()))


# ---------------------------------------------------------------------------
# relevance ordering


@dataclass(frozen=True)
class ROCurve:
    fractions: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    mode: str = RELEVANCE
    per_image: np.ndarray | None = None  # (n_images, steps + 1)

    def __post_init__(self):
        f = np.asarray(self.fractions)
        if f[0] != 0 or f[-1] != 1 or np.any(np.diff(f) <= 0):
            raise ValueError("fractions must increase strictly from 0 to 1")


def pixel_order(relevance: np.ndarray) -> np.ndarray:
    """Flat pixel indices by ascending relevance, ties by flat index."""
    return np.argsort(np.ravel(relevance), kind="stable")


def masking_counts(n_pixels: int, steps: int) -> tuple[np.ndarray, np.ndarray]:
    fractions = np.arange(steps + 1) / steps
    return fractions, np.floor(fractions * n_pixels + 1e-9).astype(int)


def _check_probs(p: np.ndarray) -> None:
    if p.ndim != 2 or np.any(p < -1e-9) or np.any(p > 1 + 1e-9) or \
            not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("model output is not a probability vector")


def ro_single(predict: Callable[[np.ndarray], np.ndarray], image: np.ndarray, relevance,
              steps: int, rng_noise: np.random.Generator, rng_order: np.random.Generator | None,
              mode: str, bounds: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Predicted-class probability as pixels are progressively replaced by noise."""
    image = np.asarray(image, dtype=np.float64)
    c, h, w = image.shape
    n_pix = h * w
    noise = rng_noise.standard_normal(image.shape)
    if bounds is not None:
        noise = np.clip(noise, bounds[0][:, None, None], bounds[1][:, None, None])
    if mode == RELEVANCE:
        rel = np.asarray(relevance, dtype=np.float64)
        if rel.shape not in ((h, w), (c, h, w)):
            raise ValueError(f"relevance shape {rel.shape} does not match image {image.shape}")
        if rel.ndim == 3:
            rel = rel.sum(axis=0)
        order = pixel_order(rel)
    elif mode == RANDOM:
        order = rng_order.permutation(n_pix)
    else:
        raise ValueError(f"unknown RO mode {mode!r}")
    fractions, counts = masking_counts(n_pix, steps)
    # rank[p] = step from which pixel p is replaced
    pos = np.empty(n_pix, dtype=int)
    pos[order] = np.arange(n_pix)
    masked = pos[None, :] < counts[:, None]  # (steps+1, n_pix)
    batch = np.where(masked.reshape(-1, 1, h, w), noise[None], image[None])
    probs = np.asarray(predict(batch))
    _check_probs(probs)
    cls = int(np.argmax(probs[0]))
    return probs[:, cls]


def ro_curve(predict, images, relevances=None, steps: int = 50, seed: int = 0, mode: str = RELEVANCE,
             bounds=None) -> ROCurve:
    """Mean/std relevance-order (or random-order) curve over a batch of images.

    Image ``i`` draws its noise and random order from the ``i``-th child of
    ``SeedSequence(seed)``, so both modes see identical noise.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
        relevances = None if relevances is None else [relevances]
    if mode == RELEVANCE and relevances is None:
        raise ValueError("relevance-ordered curves need relevance maps")
    curves = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(len(images))):
        s_noise, s_order = child.spawn(2)
        curves.append(ro_single(predict, images[i], None if relevances is None else relevances[i],
                                steps, np.random.default_rng(s_noise), np.random.default_rng(s_order),
                                mode, bounds))
    curves = np.stack(curves)
    fractions = np.arange(steps + 1) / steps
    return ROCurve(fractions, curves.mean(axis=0), curves.std(axis=0), mode, curves)


def auroc(curve: ROCurve | np.ndarray, fractions: np.ndarray | None = None) -> float:
    """Trapezoidal area under a curve on [0, 1]."""
    if isinstance(curve, ROCurve):
        y, x = curve.mean, curve.fractions
    else:
        y = np.asarray(curve, dtype=np.float64)
        x = np.linspace(0, 1, len(y)) if fractions is None else np.asarray(fractions)
    return float(np.sum((y[1:] + y[:-1]) * np.diff(x)) / 2.0 / (x[-1] - x[0]))


def per_image_auroc(curve: ROCurve) -> np.ndarray:
    return np.array([auroc(c, curve.fractions) for c in curve.per_image])


# ---------------------------------------------------------------------------
# accuracy / attributes


@dataclass(frozen=True)
class AccuracyFaithfulness:
    base: float  # percent
    sem: float  # percent
    delta: float  # base - sem, in points


def accuracy_faithfulness(base_pred, sem_pred, labels) -> AccuracyFaithfulness:
    labels = np.asarray(labels)
    base = 100.0 * float(np.mean(np.asarray(base_pred) == labels))
    sem = 100.0 * float(np.mean(np.asarray(sem_pred) == labels))
    return AccuracyFaithfulness(base, sem, base - sem)


def captured_attributes(protos: PrototypeSet, table: AttributeTable) -> int:
    """Attributes present in at least one prototype's representative image."""
    reps = table.values[protos.representative]
    return int(reps.any(axis=0).sum())


def correlation_matrix(values: np.ndarray) -> tuple[np.ndarray, bool]:
    """Pearson correlations; zero-variance columns correlate 0 with everything.

    The flag reports whether any column was constant.
    """
    v = np.asarray(values, dtype=np.float64)
    c = v - v.mean(axis=0)
    sd = np.sqrt((c * c).sum(axis=0))
    const = sd <= 1e-12
    safe = np.where(const, 1.0, sd)
    r = (c.T @ c) / np.outer(safe, safe)
    r[const, :] = 0.0
    r[:, const] = 0.0
    np.fill_diagonal(r, 1.0)
    return np.clip(r, -1.0, 1.0), bool(const.any())


def attribute_correlation_mae(protos: PrototypeSet, table: AttributeTable) -> float:
    """MAE between off-diagonal attribute correlations of the training set and of
    the representative images."""
    full, _ = correlation_matrix(table.values)
    reps, degenerate = correlation_matrix(table.values[protos.representative])
    if degenerate:
        log.debug("constant attribute columns among representatives; correlation set to 0")
    off = ~np.eye(full.shape[0], dtype=bool)
    return float(np.abs(full - reps)[off].mean())


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricReport:
    acc_base: float
    acc_sem: float
    acc_delta: float
    d_tsp: float
    d_dvs: float | None
    d_fdl_mean: float
    d_fdl_std: float
    auroc_mean: float
    auroc_std: float
    d_fdl: list[float] = field(default_factory=list)
    auroc_random_mean: float | None = None
    auroc_base_mean: float | None = None
    auroc_base_random_mean: float | None = None
    captured_attributes: int | None = None
    attribute_mae: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.d_tsp <= 1.0:
            raise ValueError("d_tsp outside [0, 1]")
        if self.d_dvs is not None and not -1e-12 <= self.d_dvs <= 1.0 + 1e-12:
            raise ValueError("d_dvs outside [0, 1]")
        if self.d_fdl_mean < 0:
            raise ValueError("d_fdl must be non-negative")
        if not 0.0 <= self.auroc_mean <= 1.0:
            raise ValueError("auroc outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


RADAR_AXES = ("Transp.", "Faith.Acc.", "Faith.Expl.", "Rob.Expl.", "Div.")


def radar_summary(report: MetricReport) -> dict[str, float]:
    """Five axis scores where larger is better (outer circle = 1)."""
    d_dvs = 1.0 if report.d_dvs is None else report.d_dvs
    return {
        "Transp.": 1.0 - report.d_tsp,
        "Faith.Acc.": max(0.0, 1.0 - report.acc_delta / 5.0),
        "Faith.Expl.": 1.0 - min(report.d_fdl_mean, 2.0) / 2.0,
        "Rob.Expl.": report.auroc_mean,
        "Div.": 1.0 - d_dvs,
    }
