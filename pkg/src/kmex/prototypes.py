"""KMEx conversion: per-class k-means prototypes and the nearest-prototype classifier."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from kmex import nn
from kmex.clustering import bisecting_kmeans_fit, kmeans_fit
from kmex.data import Dataset, FormatError, load_embeddings, save_embeddings
from kmex.similarity import Similarity, sq_dists

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PrototypeSet:
    """Prototype vectors with their ``(class, index)`` identities.

    Rows may be stored in any order; all decisions are made on identities.
    ``patch`` holds the spatial position of a representative patch for
    patch-level sets and is ``None`` otherwise.
    """

    vectors: np.ndarray
    classes: np.ndarray
    index: np.ndarray
    importance: np.ndarray
    representative: np.ndarray
    similarity: Similarity = Similarity()
    n_classes: int | None = None
    source: str = ""
    patch: np.ndarray | None = None

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.ndim != 2 or not np.all(np.isfinite(vec)):
            raise ValueError("prototype vectors must be a finite 2-D array")
        object.__setattr__(self, "vectors", vec)
        for name in ("classes", "index", "representative"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        object.__setattr__(self, "importance", np.asarray(self.importance, dtype=np.float64))
        if self.n_classes is None:
            object.__setattr__(self, "n_classes", int(self.classes.max()) + 1)
        ids = list(zip(self.classes.tolist(), self.index.tolist()))
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate (class, index) prototype identities")
        for k in range(self.n_classes):
            m = self.classes == k
            if m.any() and abs(self.importance[m].sum() - 1.0) > 1e-6:
                raise ValueError(f"importances of class {k} do not sum to 1")
        # lexicographic rank of each row's (class, index) identity
        order = np.lexsort((self.index, self.classes))
        rank = np.empty(len(order), dtype=np.int64)
        rank[order] = np.arange(len(order))
        object.__setattr__(self, "_rank", rank)

    def __len__(self):
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def per_class(self) -> list[int]:
        return np.bincount(self.classes, minlength=self.n_classes).tolist()

    def permuted(self, perm) -> "PrototypeSet":
        perm = np.asarray(perm)
        return PrototypeSet(self.vectors[perm], self.classes[perm], self.index[perm],
                            self.importance[perm], self.representative[perm], self.similarity,
                            self.n_classes, self.source, None if self.patch is None else self.patch[perm])

    def with_vectors(self, vectors) -> "PrototypeSet":
        return PrototypeSet(vectors, self.classes, self.index, self.importance, self.representative,
                            self.similarity, self.n_classes, self.source, self.patch)

    def with_similarity(self, similarity: Similarity) -> "PrototypeSet":
        return PrototypeSet(self.vectors, self.classes, self.index, self.importance,
                            self.representative, similarity, self.n_classes, self.source, self.patch)

    def similarities(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.dim:
            raise ValueError(f"embedding dimension {z.shape[1]} != prototype dimension {self.dim}")
        if not np.all(np.isfinite(z)):
            raise ValueError("embeddings contain non-finite values")
        return self.similarity.pairwise(z, self.vectors)

    def nearest(self, z) -> np.ndarray:
        """Row of the most similar prototype; ties to the lowest (class, index)."""
        return argmax_by_rank(self.similarities(z), self._rank)

    def class_best(self, sims: np.ndarray) -> np.ndarray:
        """Per-class maximum similarity, ``(n, K)``; classes without prototypes get -inf."""
        out = np.full((len(sims), self.n_classes), -np.inf)
        for k in range(self.n_classes):
            m = self.classes == k
            if m.any():
                out[:, k] = sims[:, m].max(axis=1)
        return out


def argmax_by_rank(sims: np.ndarray, rank: np.ndarray) -> np.ndarray:
    best = sims.max(axis=1, keepdims=True)
    key = np.where(sims == best, rank[None, :], np.iinfo(np.int64).max)
    return key.argmin(axis=1)


def classify(protos: PrototypeSet, z) -> np.ndarray | int:
    """Class of the globally most similar prototype for one or many embeddings."""
    single = np.asarray(z).ndim == 1
    labels = protos.classes[protos.nearest(z)]
    return int(labels[0]) if single else labels


def class_scores(protos: PrototypeSet, z) -> np.ndarray:
    """Softmax over per-class best similarities (temperature 1)."""
    single = np.asarray(z).ndim == 1
    best = protos.class_best(protos.similarities(z))
    probs = nn.softmax(best, axis=1)
    return probs[0] if single else probs


# ---------------------------------------------------------------------------
# fitting


def _per_class_l(n_per_class, n_classes: int) -> list[int]:
    if np.isscalar(n_per_class):
        return [int(n_per_class)] * n_classes
    ls = [int(v) for v in n_per_class]
    if len(ls) != n_classes:
        raise ValueError(f"need {n_classes} per-class prototype counts, got {len(ls)}")
    return ls


def _fit_class(job):
    k, x, n_clusters, seed, restarts, subsample, method = job
    ss_sub, ss_fit = np.random.SeedSequence(seed).spawn(2)
    fit_x = x
    if subsample is not None and len(x) > subsample:
        pick = np.sort(np.random.default_rng(ss_sub).choice(len(x), subsample, replace=False))
        fit_x = x[pick]
    fit = kmeans_fit if method == "kmeans" else bisecting_kmeans_fit
    res = fit(fit_x, n_clusters, int(ss_fit.generate_state(1)[0]), restarts=restarts)
    if res.coincident:
        log.warning("class %d: fewer distinct embeddings than prototypes", k)
    return res.centroids


def fit_prototypes(embeddings, labels, n_per_class: int | Sequence[int] = 5, *,
                   similarity: Similarity | str = "neg_l2", seed: int = 0, restarts: int = 5,
                   subsample: int | None = None, method: str = "kmeans", n_classes: int | None = None,
                   threads: int = 1, source: str = "") -> PrototypeSet:
    """Cluster each class's embeddings into its prototypes.

    Class ``k`` draws from the ``k``-th child of ``SeedSequence(seed)``, so
    results do not depend on ``threads``. Importance is the fraction of the
    class's embeddings nearest to each centroid; the representative is the
    class sample whose embedding is nearest to the centroid.
    """
    if isinstance(similarity, str):
        similarity = Similarity(similarity)
    if method not in ("kmeans", "bisecting"):
        raise ValueError(f"unknown clustering method {method!r}")
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k_total = int(labels.max()) + 1 if n_classes is None else n_classes
    ls = _per_class_l(n_per_class, k_total)
    members = [np.flatnonzero(labels == k) for k in range(k_total)]
    for k, (idx, l) in enumerate(zip(members, ls)):
        if l < 1:
            raise ValueError(f"class {k}: needs at least one prototype")
        if len(idx) < l:
            raise ValueError(f"class {k} has {len(idx)} samples, fewer than its {l} prototypes")
        if subsample is not None and subsample < l:
            raise ValueError(f"subsample limit {subsample} is below class {k}'s {l} prototypes")
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(k_total)]
    jobs = [(k, z[members[k]], ls[k], seeds[k], restarts, subsample, method) for k in range(k_total)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            centroids = list(pool.map(_fit_class, jobs))
    else:
        centroids = [_fit_class(j) for j in jobs]

    vecs, classes, index, importance, reps = [], [], [], [], []
    for k, c in enumerate(centroids):
        # stored as f32 on disk; round now so in-memory and reloaded sets agree
        c = c.astype(np.float32).astype(np.float64)
        xk = z[members[k]]
        d2 = sq_dists(xk, c)
        assign = d2.argmin(axis=1)
        counts = np.bincount(assign, minlength=len(c))
        vecs.append(c)
        classes += [k] * len(c)
        index += list(range(len(c)))
        importance += (counts / counts.sum()).tolist()
        reps += members[k][d2.argmin(axis=0)].tolist()
    return PrototypeSet(np.concatenate(vecs), classes, index, importance, reps, similarity,
                        k_total, source)


def convert(model: nn.Model, dataset: Dataset, n_per_class: int | Sequence[int] = 5, *,
            similarity: Similarity | str = "neg_l2", seed: int = 0, restarts: int = 5,
            subsample: int | None = None, method: str = "kmeans", threads: int = 1) -> PrototypeSet:
    """Turn a trained model into its KMEx: prototypes from the training embeddings."""
    dataset.check_nondegenerate()
    z = model.embed(model.normalize(dataset.images))
    return fit_prototypes(z, dataset.labels, n_per_class, similarity=similarity, seed=seed,
                          restarts=restarts, subsample=subsample, method=method,
                          n_classes=dataset.n_classes, threads=threads, source=model.digest())


# ---------------------------------------------------------------------------
# patch level


def _pool_position(stack: nn.LayerStack) -> int:
    for i, layer in enumerate(stack.layers):
        if isinstance(layer, nn.GlobalAvgPool):
            if len(stack.shapes[i]) != 3:
                break
            return i
    raise ValueError("model has no global average pool over a spatial feature map")


def patch_features(model: nn.Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Per-position feature vectors of the map feeding the global pool: ``(N, P, C)``."""
    stack = model.stack
    pos = _pool_position(stack)
    x = model.normalize(images)
    out = []
    for i in range(0, len(x), batch_size):
        fmap = nn.forward(stack, model.weights, x[i:i + batch_size], upto=pos).activations[pos]
        b, c, h, w = fmap.shape
        out.append(fmap.transpose(0, 2, 3, 1).reshape(b, h * w, c))
    c, h, w = stack.shapes[pos]
    return np.concatenate(out) if out else np.zeros((0, h * w, c))


def patch_convert(model: nn.Model, dataset: Dataset, n_per_class: int | Sequence[int] = 5, *,
                  similarity: Similarity | str = "neg_l2", seed: int = 0, restarts: int = 5,
                  subsample: int | None = 5000, threads: int = 1) -> PrototypeSet:
    """Prototypes clustered over patch features; every patch inherits its image label."""
    dataset.check_nondegenerate()
    feats = patch_features(model, dataset.images)
    n, p, c = feats.shape
    flat = feats.reshape(n * p, c)
    labels = np.repeat(dataset.labels, p)
    ps = fit_prototypes(flat, labels, n_per_class, similarity=similarity, seed=seed,
                        restarts=restarts, subsample=subsample, n_classes=dataset.n_classes,
                        threads=threads, source=model.digest())
    return PrototypeSet(ps.vectors, ps.classes, ps.index, ps.importance, ps.representative // p,
                        ps.similarity, ps.n_classes, ps.source, ps.representative % p)


def vote(patch_classes: np.ndarray, patch_sims: np.ndarray, n_classes: int) -> int:
    """Majority class; ties go to the larger summed similarity, then the lower class."""
    counts = np.bincount(patch_classes, minlength=n_classes)
    tied = np.flatnonzero(counts == counts.max())
    if len(tied) == 1:
        return int(tied[0])
    summed = np.array([patch_sims[patch_classes == k].sum() for k in tied])
    return int(tied[np.flatnonzero(summed == summed.max())[0]])


def patch_classify(protos: PrototypeSet, model: nn.Model, images: np.ndarray) -> np.ndarray:
    """Majority vote of the nearest-prototype class of every patch of each image."""
    feats = patch_features(model, images)
    n, p, c = feats.shape
    sims = protos.similarities(feats.reshape(n * p, c))
    rows = argmax_by_rank(sims, protos._rank)
    cls = protos.classes[rows].reshape(n, p)
    best = sims[np.arange(len(rows)), rows].reshape(n, p)
    return np.array([vote(cls[i], best[i], protos.n_classes) for i in range(n)], dtype=np.int64)


# ---------------------------------------------------------------------------
# files


def save_prototypes(protos: PrototypeSet, path: str | Path) -> Path:
    """Write ``protos.kmx`` (vectors in canonical order) and its ``.json`` sidecar."""
    path = Path(path)
    order = np.lexsort((protos.index, protos.classes))
    save_embeddings(path, protos.vectors[order])
    meta = {
        "format": "kmex-prototypes",
        "version": 1,
        "n_classes": protos.n_classes,
        "similarity": {"variant": protos.similarity.variant, "epsilon": protos.similarity.epsilon},
        "source": protos.source,
        "prototypes": [
            {"class": int(protos.classes[i]), "index": int(protos.index[i]),
             "importance": float(protos.importance[i]),
             "representative": int(protos.representative[i]),
             **({} if protos.patch is None else {"patch": int(protos.patch[i])})}
            for i in order
        ],
    }
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return sidecar


def load_prototypes(path: str | Path) -> PrototypeSet:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise FileNotFoundError(f"missing prototype sidecar: {sidecar}")
    meta = json.loads(sidecar.read_text())
    if meta.get("format") != "kmex-prototypes":
        raise FormatError(f"{sidecar}: not a prototype sidecar")
    emb = load_embeddings(path)
    rows = meta["prototypes"]
    if len(rows) != emb.shape[0]:
        raise FormatError(f"{path}: {emb.shape[0]} vectors but {len(rows)} sidecar entries")
    sim = Similarity(meta["similarity"]["variant"], meta["similarity"]["epsilon"])
    patch = np.array([r["patch"] for r in rows]) if rows and "patch" in rows[0] else None
    return PrototypeSet(emb.rows, [r["class"] for r in rows], [r["index"] for r in rows],
                        [r["importance"] for r in rows], [r["representative"] for r in rows],
                        sim, meta["n_classes"], meta.get("source", ""), patch)
