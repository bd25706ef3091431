"""Datasets, synthetic generators and the toolkit's binary file formats.

Images are stored channel-first, ``(N, C, H, W)`` float32 in ``[0, 1]``.
Labels are 0-based class indices.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"KMEX"
VERSION = 1
NOISE_SIGMA = 0.1


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {images.shape}")
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def check_nondegenerate(self) -> None:
        empty = np.flatnonzero(self.class_counts() == 0)
        if empty.size:
            raise ValueError(f"classes without samples: {empty.tolist()}")

    def with_stats(self) -> "Dataset":
        """Attach per-channel mean/std computed on this (training) split."""
        mean = tuple(float(m) for m in self.images.mean(axis=(0, 2, 3), dtype=np.float64))
        std = tuple(max(float(s), 1e-6) for s in self.images.std(axis=(0, 2, 3), dtype=np.float64))
        return Dataset(self.images, self.labels, self.n_classes, mean, std)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.n_classes, self.mean, self.std)


@dataclass(frozen=True)
class EmbeddingMatrix:
    rows: np.ndarray
    source: str = ""
    index: np.ndarray | None = None

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValueError(f"embedding matrix must be 2-D, got {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("embedding matrix contains non-finite entries")
        object.__setattr__(self, "rows", rows)
        index = np.arange(len(rows)) if self.index is None else np.asarray(self.index, dtype=np.int64)
        if len(index) != len(rows):
            raise ValueError("index length differs from row count")
        object.__setattr__(self, "index", index)

    @property
    def shape(self):
        return self.rows.shape


@dataclass(frozen=True)
class AttributeTable:
    values: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[1] != len(self.names):
            raise ValueError(f"attribute matrix {v.shape} does not match {len(self.names)} names")
        if not np.isin(v, (0, 1)).all():
            raise ValueError("attribute values must be 0 or 1")
        object.__setattr__(self, "values", v.astype(np.int8))

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class AttributeSpec:
    """One binary visual factor.

    ``frequency`` is the marginal rate; ``class_frequencies`` optionally
    overrides it per class (the marginal is then their sample-weighted mean).
    """

    name: str
    frequency: float
    class_frequencies: tuple[float, ...] | None = None

    def rates(self, n_classes: int) -> np.ndarray:
        if self.class_frequencies is None:
            r = np.full(n_classes, self.frequency)
        else:
            if len(self.class_frequencies) != n_classes:
                raise ValueError(f"{self.name}: need {n_classes} class frequencies")
            r = np.asarray(self.class_frequencies, dtype=float)
        if not np.all((r > 0) & (r < 1)):
            raise ValueError(f"{self.name}: frequencies must lie in the open interval (0, 1)")
        return r


# ---------------------------------------------------------------------------
# synthetic images


def _low_freq_pattern(rng: np.random.Generator, size: int, n_waves: int = 4) -> np.ndarray:
    """Zero-mean, unit-l2 sum of random plane waves with 1-3 cycles per image."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    p = np.zeros((size, size))
    for _ in range(n_waves):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(1.0, 3.0)
        phase = rng.uniform(0, 2 * np.pi)
        p += rng.normal() * np.cos(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    p -= p.mean()
    return p / np.linalg.norm(p)


def _class_templates(rng: np.random.Generator, n_classes: int, size: int, channels: int,
                     separation: float) -> np.ndarray:
    base = np.stack([0.5 + 2.0 * _low_freq_pattern(rng, size) for _ in range(channels)])
    # offsets have l2 norm separation * sigma / sqrt(2) over the whole image, so two
    # nearly orthogonal classes sit about separation noise-sigmas apart
    scale = separation * NOISE_SIGMA / np.sqrt(2.0) / np.sqrt(channels)
    offsets = np.stack([np.stack([_low_freq_pattern(rng, size) for _ in range(channels)])
                        for _ in range(n_classes)])
    return base[None] + scale * offsets


def _counts(per_class: int | Sequence[int], n_classes: int) -> np.ndarray:
    if np.isscalar(per_class):
        counts = np.full(n_classes, int(per_class))
    else:
        counts = np.asarray(per_class, dtype=int)
        if len(counts) != n_classes:
            raise ValueError(f"need {n_classes} per-class counts")
    if np.any(counts < 1):
        raise ValueError("every class needs at least one sample")
    return counts


def gen_blob_images(seed: int, n_classes: int, per_class: int | Sequence[int], size: int = 16,
                    separation: float = 5.0, channels: int = 1) -> Dataset:
    """Class-conditional images: smooth class template plus N(0, 0.1^2) pixel noise.

    ``separation`` is the approximate distance between class means in units
    of the pixel-noise sigma; 0 makes every class template identical.
    Samples are ordered by class.
    """
    if separation < 0:
        raise ValueError("separation must be non-negative")
    counts = _counts(per_class, n_classes)
    ss = np.random.SeedSequence(seed)
    t_seq, n_seq = ss.spawn(2)
    templates = _class_templates(np.random.default_rng(t_seq), n_classes, size, channels, separation)
    rng = np.random.default_rng(n_seq)
    images, labels = [], []
    for k, n in enumerate(counts):
        noise = rng.normal(0.0, NOISE_SIGMA, size=(n, channels, size, size))
        images.append(np.clip(templates[k][None] + noise, 0.0, 1.0))
        labels.append(np.full(n, k))
    return Dataset(np.concatenate(images).astype(np.float32), np.concatenate(labels), n_classes)


def _split_counts(n: int, k: int) -> np.ndarray:
    return np.array([n // k + (1 if i < n % k else 0) for i in range(k)])


def split_indices(labels: np.ndarray, n_classes: int, n_train: int, n_test: int,
                  seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Class-balanced train/test row indices of a class-ordered dataset, each shuffled."""
    labels = np.asarray(labels)
    tr_c, te_c = _split_counts(n_train, n_classes), _split_counts(n_test, n_classes)
    tr_idx, te_idx = [], []
    for k in range(n_classes):
        idx = np.flatnonzero(labels == k)
        if len(idx) < tr_c[k] + te_c[k]:
            raise ValueError(f"class {k} has {len(idx)} samples, needs {tr_c[k] + te_c[k]}")
        tr_idx.append(idx[:tr_c[k]])
        te_idx.append(idx[tr_c[k]:tr_c[k] + te_c[k]])
    rng = np.random.default_rng(seed)
    return np.concatenate(tr_idx)[rng.permutation(n_train)], np.concatenate(te_idx)[rng.permutation(n_test)]


def train_test_split(full: Dataset, n_train: int, n_test: int, seed: int) -> tuple[Dataset, Dataset]:
    """Split by :func:`split_indices`; the test split reuses the training statistics."""
    tr, te = split_indices(full.labels, full.n_classes, n_train, n_test, seed)
    train = full.subset(tr).with_stats()
    test = Dataset(full.images[te], full.labels[te], full.n_classes, train.mean, train.std)
    return train, test


def toy_splits(seed: int, n_classes: int = 3, n_train: int = 2000, n_test: int = 500,
               size: int = 16, separation: float = 10.0) -> tuple[Dataset, Dataset]:
    """Seeded train/test blob-image splits sharing the same class templates."""
    counts = _split_counts(n_train, n_classes) + _split_counts(n_test, n_classes)
    full = gen_blob_images(seed, n_classes, counts, size=size, separation=separation)
    return train_test_split(full, n_train, n_test, seed)


# visual factors composited onto attributed images, in library order
def _factor_masks(size: int) -> list[tuple[str, np.ndarray]]:
    m = max(2, size // 5)
    yy, xx = np.mgrid[0:size, 0:size]
    masks = []
    for name, (r, c) in (("corner_tl", (0, 0)), ("corner_tr", (0, size - m)),
                         ("corner_bl", (size - m, 0)), ("corner_br", (size - m, size - m))):
        a = np.zeros((size, size))
        a[r:r + m, c:c + m] = 1.0
        masks.append((name, a))
    masks.append(("stripes_h", ((yy // 2) % 2 == 0).astype(float) * 0.6))
    masks.append(("stripes_v", ((xx // 2) % 2 == 0).astype(float) * 0.6))
    centre = np.zeros((size, size))
    lo = size // 2 - m // 2
    centre[lo:lo + m, lo:lo + m] = 1.0
    masks.append(("centre_dot", centre))
    masks.append(("background", np.full((size, size), 0.4)))
    frame = np.zeros((size, size))
    frame[0, :] = frame[-1, :] = frame[:, 0] = frame[:, -1] = 1.0
    masks.append(("frame", frame))
    masks.append(("stripes_d", (((xx + yy) // 2) % 2 == 0).astype(float) * 0.6))
    return masks


FACTOR_NAMES = tuple(n for n, _ in _factor_masks(16))
FACTOR_AMPLITUDE = 0.35


def default_attribute_spec(n_classes: int = 2) -> list[AttributeSpec]:
    """Eight factors; some tied to the class, one rare (5%)."""
    hi, lo = 0.8, 0.2
    tied = lambda a, b: tuple(a if k % 2 == 0 else b for k in range(n_classes))  # noqa: E731
    return [
        AttributeSpec("corner_tl", 0.5, tied(hi, lo)),
        AttributeSpec("corner_tr", 0.5, tied(hi, lo)),
        AttributeSpec("corner_bl", 0.5, tied(lo, hi)),
        AttributeSpec("corner_br", 0.3),
        AttributeSpec("stripes_h", 0.5, tied(0.7, 0.3)),
        AttributeSpec("stripes_v", 0.4),
        AttributeSpec("centre_dot", 0.05),
        AttributeSpec("background", 0.5, tied(lo, hi)),
    ]


def gen_attributed_toy(seed: int, n_classes: int, per_class: int | Sequence[int],
                       spec: Sequence[AttributeSpec], size: int = 16,
                       separation: float = 5.0) -> tuple[Dataset, AttributeTable]:
    """Blob images with independently drawn binary factors painted on top.

    Each spec entry names a factor from :data:`FACTOR_NAMES`; factors are
    Bernoulli draws (per-class rates when given), independent of each other
    conditional on the class.
    """
    if len(spec) < 4:
        raise ValueError("attribute spec needs at least 4 factors")
    library = dict(_factor_masks(size))
    for a in spec:
        if a.name not in library:
            raise ValueError(f"unknown factor {a.name!r}; choose from {FACTOR_NAMES}")
    rates = np.stack([a.rates(n_classes) for a in spec], axis=1)  # (K, A)
    base = gen_blob_images(seed, n_classes, per_class, size=size, separation=separation)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])
    attrs = (rng.random((len(base), len(spec))) < rates[base.labels]).astype(np.int8)
    masks = np.stack([library[a.name] for a in spec])  # (A, H, W)
    painted = base.images + FACTOR_AMPLITUDE * np.einsum("na,ahw->nhw", attrs, masks)[:, None]
    images = np.clip(painted, 0.0, 1.0).astype(np.float32)
    ds = Dataset(images, base.labels, n_classes)
    return ds, AttributeTable(attrs, tuple(a.name for a in spec))


# ---------------------------------------------------------------------------
# IDX


_IDX_TYPES = {0x08: np.dtype("u1"), 0x09: np.dtype("i1"), 0x0B: np.dtype(">i2"),
              0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}


def read_idx(path: str | Path, limit: int | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at offset 0 ({len(raw)} bytes)")
    zero, code, ndim = raw[0:2], raw[2], raw[3]
    if zero != b"\x00\x00" or code not in _IDX_TYPES or ndim == 0:
        raise FormatError(f"{path}: bad IDX magic {raw[:4].hex()} at offset 0")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{path}: truncated dimension block at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dt = _IDX_TYPES[code]
    expected = head + int(np.prod(dims)) * dt.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)} "
                          f"(payload starts at offset {head})")
    n = dims[0] if limit is None else min(limit, dims[0])
    count = n * int(np.prod(dims[1:]))
    return np.frombuffer(raw, dtype=dt, count=count, offset=head).reshape((n,) + dims[1:])


def write_idx(path: str | Path, array: np.ndarray) -> None:
    a = np.asarray(array)
    codes = {np.dtype("u1"): 0x08, np.dtype("f4"): 0x0D, np.dtype("f8"): 0x0E}
    if a.dtype not in codes:
        raise ValueError(f"unsupported IDX dtype {a.dtype}")
    code = codes[a.dtype]
    header = bytes([0, 0, code, a.ndim]) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.astype(_IDX_TYPES[code]).tobytes())


def load_idx(images_path: str | Path, labels_path: str | Path, limit: int | None = None,
             n_classes: int | None = None) -> Dataset:
    """MNIST-style IDX pair -> Dataset; integer pixels are scaled to [0, 1]."""
    imgs = read_idx(images_path, limit)
    labels = read_idx(labels_path, limit).astype(np.int64)
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: labels must be 1-D, got {labels.shape}")
    if len(imgs) != len(labels):
        raise FormatError(f"{images_path}: {len(imgs)} images vs {len(labels)} labels")
    if imgs.dtype.kind in "ui":
        info = np.iinfo(imgs.dtype)
        imgs = (imgs.astype(np.float32) - max(info.min, 0)) / float(info.max - max(info.min, 0))
    imgs = imgs.astype(np.float32)
    if imgs.ndim == 3:
        imgs = imgs[:, None]
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    return Dataset(imgs, labels, k)


# ---------------------------------------------------------------------------
# .kmx embeddings / labels


def _check_header(raw: bytes, path, n_fields: int) -> tuple[int, ...]:
    size = 4 + 8 * n_fields
    if len(raw) < size:
        raise FormatError(f"{path}: file shorter than the {size}-byte header")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    fields = struct.unpack(f"<{n_fields}Q", raw[4:size])
    if fields[0] != VERSION:
        raise FormatError(f"{path}: unsupported version {fields[0]}")
    return fields[1:]


def save_embeddings(path: str | Path, emb: EmbeddingMatrix | np.ndarray) -> None:
    rows = emb.rows if isinstance(emb, EmbeddingMatrix) else np.asarray(emb)
    if rows.ndim != 2:
        raise ValueError("embeddings must be 2-D")
    n, d = rows.shape
    header = MAGIC + struct.pack("<3Q", VERSION, n, d)
    Path(path).write_bytes(header + np.ascontiguousarray(rows, dtype="<f4").tobytes())


def load_embeddings(path: str | Path, source: str = "") -> EmbeddingMatrix:
    raw = Path(path).read_bytes()
    n, d = _check_header(raw, path, 3)
    expected = 28 + 4 * n * d
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {n}x{d}, found {len(raw)}")
    rows = np.frombuffer(raw, dtype="<f4", offset=28).reshape(n, d)
    return EmbeddingMatrix(rows.astype(np.float64), source)


def save_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.size and labels.min() < 0:
        raise ValueError("labels must be non-negative")
    header = MAGIC + struct.pack("<2Q", VERSION, len(labels))
    Path(path).write_bytes(header + labels.astype("<u4").tobytes())


def load_labels(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (n,) = _check_header(raw, path, 2)
    expected = 20 + 4 * n
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {n} labels, found {len(raw)}")
    return np.frombuffer(raw, dtype="<u4", offset=20).astype(np.int64)


def save_embeddings_csv(path: str | Path, emb: EmbeddingMatrix | np.ndarray) -> None:
    rows = emb.rows if isinstance(emb, EmbeddingMatrix) else np.asarray(emb)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for r in rows.astype(np.float32):
            w.writerow([f"{v:.9g}" for v in r])


def load_embeddings_csv(path: str | Path) -> EmbeddingMatrix:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in r] for r in csv.reader(fh) if r]
    return EmbeddingMatrix(np.array(rows, dtype=np.float64).reshape(len(rows), -1))


def save_attributes(path: str | Path, table: AttributeTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(table.names)
        w.writerows(table.values.tolist())


def load_attributes(path: str | Path) -> AttributeTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        names = next(reader, None)
        if not names:
            raise FormatError(f"{path}: missing header row")
        rows = [[int(v) for v in r] for r in reader if r]
    return AttributeTable(np.array(rows, dtype=np.int8).reshape(len(rows), len(names)), tuple(names))


# ---------------------------------------------------------------------------
# dataset directories (as written by the toy trainer)


@dataclass
class SplitPaths:
    root: Path
    images: dict[str, Path] = field(init=False)
    labels: dict[str, Path] = field(init=False)

    def __post_init__(self):
        self.root = Path(self.root)
        self.images = {s: self.root / f"{s}-images.idx" for s in ("train", "test")}
        self.labels = {s: self.root / f"{s}-labels.idx" for s in ("train", "test")}


def save_dataset_dir(root: str | Path, train: Dataset, test: Dataset) -> None:
    paths = SplitPaths(root)
    paths.root.mkdir(parents=True, exist_ok=True)
    for split, ds in (("train", train), ("test", test)):
        write_idx(paths.images[split], ds.images.astype(np.float32))
        write_idx(paths.labels[split], ds.labels.astype(np.uint8))


def load_dataset_dir(root: str | Path, n_classes: int | None = None,
                     limit: int | None = None) -> tuple[Dataset, Dataset]:
    paths = SplitPaths(root)
    for p in list(paths.images.values()) + list(paths.labels.values()):
        if not p.exists():
            raise FileNotFoundError(f"missing dataset file: {p}")
    train = load_idx(paths.images["train"], paths.labels["train"], limit, n_classes)
    k = train.n_classes if n_classes is None else n_classes
    test = load_idx(paths.images["test"], paths.labels["test"], limit, k)
    train = Dataset(train.images, train.labels, k).with_stats()
    return train, Dataset(test.images, test.labels, k, train.mean, train.std)
