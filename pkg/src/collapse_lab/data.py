"""Toy datasets, long-tailed subsampling, coarse label maps and dataset files.

Binary layout (little-endian), version 1::

    b"CLAB" | u32 version | u32 M | u32 rank | u32 dims[rank]
    | f64 samples[M * prod(dims)] | u32 labels[M]
    | u32 has_fine | u32 fine_labels[M] (if has_fine)
    | u64 ids[M] | u32 name_len | utf-8 name | u32 num_classes
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .numerics import Rng

MAGIC = b"CLAB"
VERSION = 1


class DataFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int | None = None
    name: str = "dataset"
    ids: np.ndarray | None = None
    fine_labels: np.ndarray | None = None
    fine_classes: int | None = field(default=None, repr=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.labels.shape != (self.samples.shape[0],):
            raise ValueError("one label per sample required")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.uint64)
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        if self.fine_labels is not None:
            self.fine_labels = np.asarray(self.fine_labels, dtype=np.intp)
            if self.fine_classes is None:
                self.fine_classes = int(self.fine_labels.max()) + 1

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.samples.shape[1:])

    def subset(self, index, name: str | None = None) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.intp)
        return LabeledDataset(
            self.samples[index], self.labels[index], self.num_classes, name or self.name,
            self.ids[index], None if self.fine_labels is None else self.fine_labels[index],
            self.fine_classes,
        )

    def equals(self, other: "LabeledDataset") -> bool:
        same_fine = (self.fine_labels is None and other.fine_labels is None) or (
            self.fine_labels is not None and other.fine_labels is not None
            and np.array_equal(self.fine_labels, other.fine_labels))
        return (self.name == other.name and self.num_classes == other.num_classes
                and self.samples.shape == other.samples.shape
                and self.samples.tobytes() == other.samples.tobytes()
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.ids, other.ids) and same_fine)


class Splits(NamedTuple):
    train: LabeledDataset
    test: LabeledDataset


def _stratified_split(samples, labels, num_classes, rng: Rng, name: str, train_frac=0.8) -> Splits:
    ids = np.arange(len(labels), dtype=np.uint64)
    tr, te = [], []
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        cut = int(math.floor(train_frac * len(idx)))
        tr.append(np.sort(idx[:cut]))
        te.append(np.sort(idx[cut:]))
    tr, te = np.concatenate(tr), np.concatenate(te)
    full = LabeledDataset(samples, labels, num_classes, name, ids)
    return Splits(full.subset(tr, f"{name}-train"), full.subset(te, f"{name}-test"))


def class_means(num_classes: int, dim: int) -> np.ndarray:
    """Unit vectors at angles 2*pi*c/C in the first two coordinates."""
    ang = 2.0 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, dim))
    means[:, 0] = np.cos(ang)
    means[:, 1] = np.sin(ang)
    return means


def gaussian_toy(num_classes: int = 4, per_class_n: int = 2500, dim: int = 2,
                 spread: float = 0.5, seed: int = 0) -> Splits:
    """Isotropic Gaussian clusters around equally spaced unit means, split 80/20 per class."""
    if num_classes < 2 or dim < 2:
        raise ValueError("gaussian_toy needs C >= 2 and dim >= 2")
    rng = Rng(seed)
    means = class_means(num_classes, dim)
    samples = np.concatenate([means[c] + spread * rng.standard_normal((per_class_n, dim))
                              for c in range(num_classes)])
    labels = np.repeat(np.arange(num_classes), per_class_n)
    return _stratified_split(samples, labels, num_classes, rng, f"gaussian{num_classes}x{dim}")


def pattern_images(num_classes: int = 4, per_class_n: int = 50, size: int = 8,
                   channels: int = 3, noise: float = 0.5, seed: int = 0) -> Splits:
    """Small C x H x W images: a class-specific random template plus Gaussian noise."""
    rng = Rng(seed)
    templates = rng.standard_normal((num_classes, channels, size, size))
    samples = np.concatenate([templates[c] + noise * rng.standard_normal((per_class_n, channels, size, size))
                              for c in range(num_classes)])
    labels = np.repeat(np.arange(num_classes), per_class_n)
    return _stratified_split(samples, labels, num_classes, rng, f"patterns{num_classes}")


# ----------------------------------------------------------------------------
# long tail / coarse labels


@dataclass(frozen=True)
class ImbalanceSpec:
    imb_factor: float
    n_max: int | None = None

    def __post_init__(self):
        if not self.imb_factor >= 1:
            raise ValueError("imbalance factor must be >= 1")


def longtail_counts(num_classes: int, n_max: int, imb_factor: float) -> list[int]:
    """``floor(n_max * imb**(-c / (C - 1)))`` for head-to-tail class index ``c``."""
    if num_classes == 1:
        return [n_max]
    counts = []
    for c in range(num_classes):
        x = n_max * imb_factor ** (-c / (num_classes - 1))
        # guard exact integers against a one-ulp undershoot
        counts.append(int(math.floor(x * (1.0 + 1e-12))))
    if min(counts) < 1:
        raise ValueError(f"imbalance {imb_factor} leaves a class with no samples: {counts}")
    return counts


def longtail_subsample(ds: LabeledDataset, spec: ImbalanceSpec, seed: int = 0) -> LabeledDataset:
    """Keep the first ``n_c`` samples of each class under a seeded shuffle."""
    have = ds.class_counts
    n_max = spec.n_max if spec.n_max is not None else max(have)
    counts = longtail_counts(ds.num_classes, n_max, spec.imb_factor)
    rng = Rng(seed)
    keep = []
    for c, n in enumerate(counts):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) < n:
            raise ValueError(f"class {c} has {len(idx)} samples, needs {n}")
        keep.append(np.sort(idx[rng.permutation(len(idx))[:n]]))
    return ds.subset(np.concatenate(keep), f"{ds.name}-lt{spec.imb_factor:g}")


def apply_coarse(ds: LabeledDataset, mapping: Sequence[int]) -> LabeledDataset:
    """Relabel with ``mapping[fine]``; fine labels are kept in ``fine_labels``."""
    mapping = np.asarray(mapping, dtype=np.intp)
    if len(mapping) < ds.num_classes:
        raise ValueError(f"coarse map covers {len(mapping)} classes, dataset has {ds.num_classes}")
    n_coarse = int(mapping.max()) + 1
    if sorted(set(mapping.tolist())) != list(range(n_coarse)):
        raise ValueError("coarse map must be onto 0..K-1")
    return LabeledDataset(ds.samples, mapping[ds.labels], n_coarse, f"{ds.name}-coarse", ds.ids,
                          ds.labels.copy(), ds.num_classes)


def fine_view(ds: LabeledDataset) -> LabeledDataset:
    if ds.fine_labels is None:
        return ds
    return LabeledDataset(ds.samples, ds.fine_labels, ds.fine_classes, ds.name, ds.ids)


def threshold_coarse_map(num_classes: int, cut: int) -> list[int]:
    """Two superclasses: fine classes below ``cut`` -> 0, the rest -> 1."""
    return [0 if c < cut else 1 for c in range(num_classes)]


# ----------------------------------------------------------------------------
# files


def save(ds: LabeledDataset, path) -> None:
    shape = ds.sample_shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", VERSION, len(ds), len(shape)))
        f.write(struct.pack(f"<{len(shape)}I", *shape))
        f.write(ds.samples.astype("<f8").tobytes())
        f.write(ds.labels.astype("<u4").tobytes())
        if ds.fine_labels is None:
            f.write(struct.pack("<I", 0))
        else:
            f.write(struct.pack("<I", 1))
            f.write(ds.fine_labels.astype("<u4").tobytes())
        f.write(ds.ids.astype("<u8").tobytes())
        name = ds.name.encode()
        f.write(struct.pack("<I", len(name)))
        f.write(name)
        f.write(struct.pack("<I", ds.num_classes))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.off = blob, 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise DataFormatError("truncated dataset file")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(size * count), dtype=dtype)


def load(path) -> LabeledDataset:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != MAGIC:
        raise DataFormatError("not a dataset file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise DataFormatError(f"unsupported dataset version {version}")
    m, rank = r.u32(2)
    shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
    per = int(np.prod(shape)) if shape else 1
    samples = r.array("<f8", m * per).astype(np.float64).reshape((m,) + shape)
    labels = r.array("<u4", m).astype(np.intp)
    fine = r.array("<u4", m).astype(np.intp) if r.u32() else None
    ids = r.array("<u8", m).astype(np.uint64)
    name = r.take(r.u32()).decode()
    num_classes = r.u32()
    if r.off != len(r.blob):
        raise DataFormatError("trailing bytes in dataset file")
    return LabeledDataset(samples, labels, num_classes, name, ids, fine)


def load_csv(path, name: str | None = None) -> LabeledDataset:
    """Rows of ``f0..f{d-1},label`` with a header line."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataFormatError("empty CSV")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 1
    if d < 1 or header[-1] != "label" or header[:-1] != [f"f{i}" for i in range(d)]:
        raise DataFormatError("CSV header must be f0,...,f{d-1},label")
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d + 1:
            raise DataFormatError(f"line {lineno}: expected {d + 1} fields, got {len(row)}")
        try:
            feats.append([float(v) for v in row[:-1]])
            lab = float(row[-1])
        except ValueError as e:
            raise DataFormatError(f"line {lineno}: {e}") from e
        if lab != int(lab) or lab < 0:
            raise DataFormatError(f"line {lineno}: label must be a non-negative integer")
        labels.append(int(lab))
    if not labels:
        raise DataFormatError("CSV has no data rows")
    return LabeledDataset(np.array(feats), np.array(labels), name=name or "csv")


def save_csv(ds: LabeledDataset, path) -> None:
    flat = ds.samples.reshape(len(ds), -1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"f{i}" for i in range(flat.shape[1])] + ["label"])
        for row, lab in zip(flat, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


def load_cifar_binary(path, classes: Sequence[int] | None = None, name: str = "cifar") -> LabeledDataset:
    """CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes, scaled to [0, 1]."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % 3073:
        raise DataFormatError("CIFAR binary size is not a multiple of 3073")
    rec = raw.reshape(-1, 3073)
    labels = rec[:, 0].astype(np.intp)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    if classes is not None:
        classes = list(classes)
        keep = np.isin(labels, classes)
        remap = {c: i for i, c in enumerate(classes)}
        images, labels = images[keep], np.array([remap[c] for c in labels[keep]], dtype=np.intp)
        return LabeledDataset(images, labels, len(classes), name)
    return LabeledDataset(images, labels, 10, name)
