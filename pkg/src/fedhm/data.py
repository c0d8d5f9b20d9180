"""Datasets and federated partitioning."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np


class FormatError(ValueError):
    """A data file could not be parsed."""


@dataclass
class Dataset:
    features: np.ndarray  # (N, C, H, W) or (N, d)
    labels: np.ndarray  # (N,) int64
    classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) == 0:
            raise ValueError("dataset is empty")
        if len(self.features) != len(self.labels):
            raise ValueError(f"{len(self.features)} samples but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ValueError(f"labels outside [0, {self.classes})")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain NaN or Inf")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.features.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.classes, self.split)

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.features.astype(dtype), self.labels, self.classes, self.split)


# ---------------------------------------------------------------------------
# synthetic data


def _grating(shape, angle, freq, phase):
    C, H, W = shape
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    g = np.cos(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) / max(H, W) + phase)
    return np.stack([np.cos(phase * (c + 1)) * g for c in range(C)])


def class_prototypes(classes: int, shape: tuple, seed: int) -> np.ndarray:
    """Class means: oriented gratings for image shapes, random unit-scale vectors otherwise."""
    rng = np.random.default_rng(seed)
    if len(shape) == 3:
        protos = []
        for c in range(classes):
            angle = np.pi * c / classes
            freq = 1.5 + (c % 3)
            protos.append(_grating(shape, angle, freq, rng.uniform(0, 2 * np.pi)))
        return np.stack(protos)
    return rng.standard_normal((classes, *shape)) * 2.0


def synth_blobs(classes: int, per_class: int, shape, noise: float, seed: int, split: str = "train") -> Dataset:
    """Class-conditional Gaussian clusters around fixed prototypes.

    ``shape`` is ``(d,)`` for vectors or ``(C, H, W)`` for textured images.
    Prototypes depend only on ``seed``; pass ``split="test"`` to draw fresh
    noise around the same prototypes.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if classes < 2:
        raise ValueError("classes must be >= 2")
    shape = tuple(int(s) for s in shape)
    protos = class_prototypes(classes, shape, seed)
    # keep class means at least 4 sigma apart
    dmin = min(np.linalg.norm(protos[a] - protos[b]) for a in range(classes) for b in range(a + 1, classes))
    if noise > 0 and dmin < 4 * noise:
        protos = protos * (4 * noise / dmin)
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    labels = np.repeat(np.arange(classes), per_class)
    feats = protos[labels] + noise * rng.standard_normal((len(labels), *shape))
    order = rng.permutation(len(labels))
    return Dataset(feats[order], labels[order], classes, split)


def normalize(train: Dataset, *others: Dataset) -> list[Dataset]:
    """Zero-mean/unit-variance per channel (per feature for vectors) using train statistics."""
    axes = (0, 2, 3) if train.features.ndim == 4 else (0,)
    mean = train.features.mean(axis=axes, keepdims=True)
    std = train.features.std(axis=axes, keepdims=True)
    std[std == 0] = 1.0
    return [Dataset((d.features - mean) / std, d.labels, d.classes, d.split) for d in (train, *others)]


# ---------------------------------------------------------------------------
# file loaders


def _read_idx(path, expected_magic):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8:
        raise FormatError(f"{path}: file too short for an IDX header (offset 0)")
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path}: truncated dimension header at offset 4")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    need = math.prod(dims)
    if len(data) - header != need:
        raise FormatError(f"{path}: expected {need} payload bytes at offset {header}, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, classes: int | None = None, split: str = "train") -> Dataset:
    """MNIST-style IDX pair: images 0x00000803 (N, H, W) and labels 0x00000801 (N,)."""
    images = _read_idx(images_path, 0x00000803)
    labels = _read_idx(labels_path, 0x00000801).astype(np.int64)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    feats = images[:, None, :, :].astype(np.float64) / 255.0
    return Dataset(feats, labels, classes or int(labels.max()) + 1, split)


def load_csv(path, classes: int | None = None, shape: tuple | None = None, split: str = "train") -> Dataset:
    """Rows of ``label,f1,f2,...``; a non-numeric first row is treated as a header."""
    rows = []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if lineno == 1:
                    continue
                raise FormatError(f"{path}: non-numeric value on line {lineno}") from None
    if not rows:
        raise FormatError(f"{path}: no data rows")
    width = {len(r) for r in rows}
    if len(width) != 1:
        raise FormatError(f"{path}: ragged rows (widths {sorted(width)})")
    arr = np.asarray(rows)
    labels = arr[:, 0].astype(np.int64)
    feats = arr[:, 1:]
    if shape is not None:
        feats = feats.reshape(len(feats), *shape)
    return Dataset(feats, labels, classes or int(labels.max()) + 1, split)


# ---------------------------------------------------------------------------
# partitioning


@dataclass
class Partition:
    indices: list[np.ndarray]
    scheme: str
    seed: int
    alpha: float | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.indices)

    def sizes(self) -> list[int]:
        return [len(i) for i in self.indices]


def partition_iid(N: int, P: int, seed: int) -> Partition:
    if P < 1 or P > N:
        raise ValueError(f"cannot split {N} samples over {P} clients")
    perm = np.random.default_rng(seed).permutation(N)
    return Partition([np.sort(c) for c in np.array_split(perm, P)], "iid", seed)


def _dirichlet_draw(labels, P, alpha, rng):
    buckets = [[] for _ in range(P)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        share = rng.dirichlet(np.full(P, alpha))
        cuts = (np.cumsum(share)[:-1] * len(idx)).astype(np.int64)
        for p, chunk in enumerate(np.split(idx, cuts)):
            buckets[p].extend(chunk.tolist())
    return buckets


def partition_dirichlet(labels, P: int, alpha: float, seed: int, max_retries: int = 10) -> Partition:
    """Per-class Dirichlet split: each class's samples are dealt to clients by proportions ~ Dir(alpha).

    Draws leaving a client empty are retried; after ``max_retries`` the empty
    clients are filled by taking one sample at a time from the largest client.
    """
    labels = np.asarray(labels)
    N = len(labels)
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if P < 1 or P > N:
        raise ValueError(f"cannot split {N} samples over {P} clients")
    rng = np.random.default_rng(seed)
    attempts = 0
    while True:
        attempts += 1
        buckets = _dirichlet_draw(labels, P, alpha, rng)
        if all(buckets) or attempts > max_retries:
            break
    repaired = 0
    for p in range(P):
        if not buckets[p]:
            donor = max(range(P), key=lambda q: (len(buckets[q]), -q))
            buckets[p].append(buckets[donor].pop())
            repaired += 1
    return Partition(
        [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets],
        "dirichlet",
        seed,
        alpha,
        {"draw": "per-class", "attempts": attempts, "repaired": repaired},
    )


def class_counts(labels, partition: Partition, classes: int) -> np.ndarray:
    """(P, classes) matrix of per-client label counts."""
    labels = np.asarray(labels)
    return np.stack([np.bincount(labels[idx], minlength=classes) for idx in partition.indices])
