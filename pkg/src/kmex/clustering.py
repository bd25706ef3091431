"""k-means (k-means++ seeding, Lloyd iterations, restarts) and bisecting k-means."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    sse: float
    n_iter: int
    coincident: bool = False  # fewer distinct points than clusters


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] + (c * c).sum(1)[None, :] - 2.0 * x @ c.T
    return np.maximum(d, 0.0)


def _assign(x, c):
    d = _sq_dists(x, c)
    labels = d.argmin(axis=1)
    return labels, d[np.arange(len(x)), labels]


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    idx = [int(rng.integers(len(x)))]
    closest = _sq_dists(x, x[idx])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            nxt = int(rng.integers(len(x)))
        else:
            nxt = int(rng.choice(len(x), p=closest / total))
        idx.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[nxt:nxt + 1])[:, 0])
    return x[idx].copy()


def _repair_empty(x, labels, c, d2):
    """Give each empty cluster the point farthest from its own centroid."""
    k = len(c)
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        # only steal from clusters that keep at least one member
        donors = counts[labels] > 1
        if not donors.any():
            break
        cand = np.where(donors, d2, -1.0)
        i = int(cand.argmax())
        counts[labels[i]] -= 1
        labels[i] = j
        counts[j] = 1
        d2[i] = 0.0
        c[j] = x[i]
    return labels


def _lloyd(x: np.ndarray, c: np.ndarray, max_iters: int) -> tuple[np.ndarray, np.ndarray, int]:
    labels = None
    it = 0
    for it in range(1, max_iters + 1):
        new, d2 = _assign(x, c)
        new = _repair_empty(x, new, c, d2)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        c = np.stack([x[labels == j].mean(axis=0) for j in range(len(c))])
    return c, labels, it


def kmeans_fit(points, n_clusters: int, seed: int, max_iters: int = 100,
               restarts: int = 5) -> KMeansResult:
    """Best-SSE Lloyd fixed point over ``restarts`` k-means++ initialisations.

    Restart ``r`` draws from the ``r``-th child of ``SeedSequence(seed)``.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if n_clusters < 1 or n_clusters > n:
        raise ValueError(f"cannot form {n_clusters} clusters from {n} points")
    coincident = len(np.unique(x, axis=0)) < n_clusters
    if coincident:
        log.warning("fewer than %d distinct points; centroids may coincide", n_clusters)
    best = None
    for child in np.random.SeedSequence(seed).spawn(max(1, restarts)):
        rng = np.random.default_rng(child)
        c, labels, it = _lloyd(x, kmeans_plusplus(x, n_clusters, rng), max_iters)
        sse = float(((x - c[labels]) ** 2).sum())
        if best is None or sse < best.sse:
            best = KMeansResult(c, labels, sse, it, coincident)
    return best


def bisecting_kmeans_fit(points, n_clusters: int, seed: int, max_iters: int = 100,
                         restarts: int = 5) -> KMeansResult:
    """Split the highest-SSE cluster with 2-means until ``n_clusters`` exist."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if n_clusters < 1 or n_clusters > n:
        raise ValueError(f"cannot form {n_clusters} clusters from {n} points")
    labels = np.zeros(n, dtype=np.int64)
    seeds = np.random.SeedSequence(seed).generate_state(max(n_clusters - 1, 1))
    total_iter = 0
    for step in range(n_clusters - 1):
        k = labels.max() + 1
        sse = np.array([((x[labels == j] - x[labels == j].mean(0)) ** 2).sum()
                        if (labels == j).sum() > 1 else -1.0 for j in range(k)])
        j = int(sse.argmax())
        members = np.flatnonzero(labels == j)
        split = kmeans_fit(x[members], 2, int(seeds[step]), max_iters, restarts)
        total_iter += split.n_iter
        labels[members[split.labels == 1]] = k
    centroids = np.stack([x[labels == j].mean(0) for j in range(n_clusters)])
    sse = float(((x - centroids[labels]) ** 2).sum())
    return KMeansResult(centroids, labels, sse, total_iter,
                        len(np.unique(x, axis=0)) < n_clusters)
