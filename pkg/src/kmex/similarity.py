"""Similarity measures between embedding vectors (larger = more similar)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VARIANTS = ("neg_l2", "neg_l1", "neg_sq_l2", "log_l2", "protopnet_log", "dot", "cosine", "neg_ned")
DISTANCE_BASED = frozenset(VARIANTS) - {"dot", "cosine"}
_TINY = 1e-12


def sq_dists(a: np.ndarray, b: np.ndarray, chunk: int = 1 << 22) -> np.ndarray:
    """Exact pairwise squared l2 distances, computed in row chunks."""
    out = np.empty((len(a), len(b)))
    step = max(1, chunk // max(1, len(b) * a.shape[1]))
    for i in range(0, len(a), step):
        diff = a[i:i + step, None, :] - b[None, :, :]
        out[i:i + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _ned_normalize(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = v - v.mean(axis=-1, keepdims=True)
    n = np.linalg.norm(c, axis=-1, keepdims=True)
    return np.where(n > _TINY, c / np.maximum(n, _TINY), 0.0), n


@dataclass(frozen=True)
class Similarity:
    variant: str = "neg_l2"
    epsilon: float = 1e-4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown similarity {self.variant!r}; choose from {VARIANTS}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def distance_based(self) -> bool:
        return self.variant in DISTANCE_BASED

    def pairwise(self, a, b) -> np.ndarray:
        """``(n, D) x (m, D) -> (n, m)`` similarity matrix."""
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        b = np.atleast_2d(np.asarray(b, dtype=np.float64))
        v = self.variant
        if v == "dot":
            return a @ b.T
        if v == "cosine":
            na = np.linalg.norm(a, axis=1)[:, None]
            nb = np.linalg.norm(b, axis=1)[None, :]
            denom = na * nb
            return np.where(denom > _TINY, (a @ b.T) / np.maximum(denom, _TINY), 0.0)
        if v == "neg_l1":
            out = np.empty((len(a), len(b)))
            step = max(1, (1 << 22) // max(1, len(b) * a.shape[1]))
            for i in range(0, len(a), step):
                out[i:i + step] = -np.abs(a[i:i + step, None, :] - b[None, :, :]).sum(-1)
            return out
        if v == "neg_ned":
            a, _ = _ned_normalize(a)
            b, _ = _ned_normalize(b)
        sq = sq_dists(a, b)
        if v == "neg_sq_l2":
            return -sq
        d = np.sqrt(sq)
        if v in ("neg_l2", "neg_ned"):
            return -d
        if v == "log_l2":
            return np.log(d + 1.0) - np.log(d + self.epsilon)
        return np.log((sq + 1.0) / (sq + self.epsilon))  # protopnet_log

    def __call__(self, a, b) -> float:
        return float(self.pairwise(np.ravel(a)[None], np.ravel(b)[None])[0, 0])

    def self_similarity(self, v) -> float:
        """Analytic s(v, v)."""
        v = np.ravel(np.asarray(v, dtype=np.float64))
        if self.variant == "dot":
            return float(v @ v)
        if self.variant == "cosine":
            return 1.0 if np.linalg.norm(v) > _TINY else 0.0
        if self.variant in ("log_l2", "protopnet_log"):
            return float(-np.log(self.epsilon))
        return 0.0

    def grad(self, z, p) -> np.ndarray:
        """Gradient of s(z, p) with respect to z (subgradient 0 at kinks)."""
        z = np.asarray(z, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        v = self.variant
        if v == "dot":
            return p.copy()
        if v == "cosine":
            nz, np_ = np.linalg.norm(z), np.linalg.norm(p)
            if nz < _TINY or np_ < _TINY:
                return np.zeros_like(z)
            return p / (nz * np_) - (z @ p) * z / (nz ** 3 * np_)
        if v == "neg_l1":
            return -np.sign(z - p)
        if v == "neg_ned":
            u, nc = _ned_normalize(z)
            w, _ = _ned_normalize(p)
            d = np.linalg.norm(u - w)
            if d < _TINY or nc < _TINY:
                return np.zeros_like(z)
            gu = -(u - w) / d
            # through u = c/|c| then c = z - mean(z)
            gc = (gu - u * (u @ gu)) / nc
            return gc - gc.mean()
        diff = z - p
        sq = float(diff @ diff)
        if v == "neg_sq_l2":
            return -2.0 * diff
        d = np.sqrt(sq)
        if v == "neg_l2":
            return -diff / d if d > _TINY else np.zeros_like(z)
        if v == "log_l2":
            if d < _TINY:
                return np.zeros_like(z)
            dd = 1.0 / (d + 1.0) - 1.0 / (d + self.epsilon)
            return dd * diff / d
        # protopnet_log: d/dsq [log(sq+1) - log(sq+eps)] * 2 diff
        return (1.0 / (sq + 1.0) - 1.0 / (sq + self.epsilon)) * 2.0 * diff
