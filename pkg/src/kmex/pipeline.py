"""End-to-end evaluation of a KMEx model against its black-box base."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from kmex import metrics, nn, relevance
from kmex.data import AttributeTable, Dataset
from kmex.prototypes import PrototypeSet, class_scores, classify

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImageMaps:
    bbox: relevance.RelevanceMap  # LRP of the base model's predicted-class probability
    sem: relevance.RelevanceMap  # LRP of the KMEx predicted-class probability
    prp: relevance.RelevanceMap  # PRP w.r.t. the most similar prototype


def image_maps(model: nn.Model, protos: PrototypeSet, x: np.ndarray) -> ImageMaps:
    """All relevance maps for one normalised image."""
    s, w = model.stack, model.weights
    return ImageMaps(
        relevance.lrp_map(s, w, x),
        relevance.class_probability_map(s, w, protos, x),
        relevance.nearest_prp_map(s, w, protos, x),
    )


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def sem_predict(model: nn.Model, protos: PrototypeSet):
    def predict(x):
        return class_scores(protos, model.embed(x))
    return predict


def base_predict(model: nn.Model):
    return model.predict_proba


def normalized_bounds(model: nn.Model, channels: int) -> tuple[np.ndarray, np.ndarray]:
    mean = np.resize(np.asarray(model.mean, dtype=np.float64), channels)
    std = np.resize(np.asarray(model.std, dtype=np.float64), channels)
    return (0.0 - mean) / std, (1.0 - mean) / std


def divergences(model: nn.Model, protos: PrototypeSet, images: np.ndarray, threads: int = 1,
                against: nn.Model | None = None) -> np.ndarray:
    """Per-image D_fdl between the KMEx map and a black-box map.

    ``against`` selects the black-box (default: ``model`` itself).
    """
    bbox_model = model if against is None else against
    x = model.normalize(images)
    xb = bbox_model.normalize(images)

    def one(i):
        sem = relevance.class_probability_map(model.stack, model.weights, protos, x[i])
        bbox = relevance.lrp_map(bbox_model.stack, bbox_model.weights, xb[i])
        return metrics.explanation_divergence(metrics.normalize_relevance(sem),
                                              metrics.normalize_relevance(bbox))

    return np.array(_map(one, range(len(images)), threads))


@dataclass
class Evaluation:
    report: metrics.MetricReport
    curves: dict[str, metrics.ROCurve]


def evaluate(model: nn.Model, protos: PrototypeSet, train: Dataset, test: Dataset, *,
             eval_images: int = 100, ro_steps: int = 50, seed: int = 0,
             attrs: AttributeTable | None = None, threads: int = 1) -> Evaluation:
    """Compute every metric for ``protos`` as the KMEx of ``model``."""
    z_train = model.embed(model.normalize(train.images))
    d_tsp = metrics.ghosting_score(protos, z_train)
    d_dvs = metrics.diversity_score(protos) if len(protos) >= 2 else None

    x_test = model.normalize(test.images)
    base_pred = model.predict_proba(x_test).argmax(axis=1)
    sem_pred = classify(protos, model.embed(x_test))
    acc = metrics.accuracy_faithfulness(base_pred, sem_pred, test.labels)

    n_eval = min(eval_images, len(test))
    x = x_test[:n_eval]
    maps = _map(lambda i: image_maps(model, protos, x[i]), range(n_eval), threads)
    d_fdl = np.array([metrics.explanation_divergence(metrics.normalize_relevance(m.sem),
                                                     metrics.normalize_relevance(m.bbox))
                      for m in maps])
    flagged = sorted({f for m in maps for r in (m.bbox, m.sem, m.prp) for f in r.flags})
    drift = max((r.drift for m in maps for r in (m.bbox, m.sem, m.prp)), default=0.0)

    bounds = normalized_bounds(model, x.shape[1])
    prp_order = [metrics.normalize_relevance(m.prp).values for m in maps]
    lrp_order = [metrics.normalize_relevance(m.bbox).values for m in maps]
    sem_fn, base_fn = sem_predict(model, protos), base_predict(model)
    curves = {
        "kmex-relevance": metrics.ro_curve(sem_fn, x, prp_order, ro_steps, seed, metrics.RELEVANCE, bounds),
        "kmex-random": metrics.ro_curve(sem_fn, x, None, ro_steps, seed, metrics.RANDOM, bounds),
        "base-relevance": metrics.ro_curve(base_fn, x, lrp_order, ro_steps, seed, metrics.RELEVANCE, bounds),
        "base-random": metrics.ro_curve(base_fn, x, None, ro_steps, seed, metrics.RANDOM, bounds),
    }
    au = metrics.per_image_auroc(curves["kmex-relevance"])

    report = metrics.MetricReport(
        acc_base=acc.base, acc_sem=acc.sem, acc_delta=acc.delta,
        d_tsp=d_tsp, d_dvs=d_dvs,
        d_fdl_mean=float(d_fdl.mean()) if n_eval else 0.0,
        d_fdl_std=float(d_fdl.std()) if n_eval else 0.0,
        auroc_mean=float(au.mean()) if n_eval else 0.0,
        auroc_std=float(au.std()) if n_eval else 0.0,
        d_fdl=[float(v) for v in d_fdl],
        auroc_random_mean=metrics.auroc(curves["kmex-random"]),
        auroc_base_mean=metrics.auroc(curves["base-relevance"]),
        auroc_base_random_mean=metrics.auroc(curves["base-random"]),
        extra={"relevance_flags": flagged, "max_relevance_drift": float(drift),
               "n_prototypes": len(protos), "eval_images": n_eval},
    )
    if attrs is not None:
        if len(attrs) != len(train):
            raise ValueError(f"attribute table has {len(attrs)} rows, training set {len(train)}")
        report.captured_attributes = metrics.captured_attributes(protos, attrs)
        report.attribute_mae = metrics.attribute_correlation_mae(protos, attrs)
    return Evaluation(report, curves)
