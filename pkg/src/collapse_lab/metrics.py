"""Intra-class alignment, inter-class and neighborhood uniformity, split accuracies.

Numerical conventions (they make results bit-reproducible under any sample
order): a Euclidean distance accumulates squared coordinate differences in
coordinate order starting from 0.0, and every sum over samples, pairs or
classes is exactly rounded via :func:`math.fsum`.

Alignment sums over *all ordered pairs* of a class including self-pairs, so
the normaliser is exactly ``|F_i|**2``. It is computed on raw features;
both uniformities use the per-class mean direction on the unit sphere.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class FeatureTable:
    features: np.ndarray
    labels: np.ndarray
    classes: tuple[int, ...] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise MetricError("features must be M x d with one label per row")
        if self.classes is None:
            self.classes = tuple(int(c) for c in np.unique(self.labels))
        else:
            self.classes = tuple(int(c) for c in self.classes)
            if not np.isin(self.labels, self.classes).all():
                raise MetricError("label outside the class set")

    def by_class(self) -> list[np.ndarray]:
        groups = [self.features[self.labels == c] for c in self.classes]
        for c, g in zip(self.classes, groups):
            if len(g) == 0:
                raise MetricError(f"class {c} has no features")
        return groups


def _row_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances between every row of ``a`` and every row of ``b``."""
    diff = a[:, None, :] - b[None, :, :]
    sq = diff * diff
    acc = np.zeros(sq.shape[:2])
    for k in range(sq.shape[2]):
        acc = acc + sq[:, :, k]
    return np.sqrt(acc)


def _pair_distance_terms(f: np.ndarray, chunk: int = 512):
    for start in range(0, len(f), chunk):
        yield from _row_dists(f[start:start + chunk], f).ravel()


def alignment(ft: FeatureTable) -> float:
    terms = []
    for f in ft.by_class():
        terms.append(math.fsum(_pair_distance_terms(f)) / (len(f) * len(f)))
    return math.fsum(terms) / len(terms)


def sphere_centroids(ft: FeatureTable) -> np.ndarray:
    """Unit-norm direction of each class's feature sum (rows follow ``ft.classes``)."""
    out = []
    for c, f in zip(ft.classes, ft.by_class()):
        s = np.array([math.fsum(f[:, k]) for k in range(f.shape[1])])
        norm = 0.0
        for v in s:
            norm += v * v
        norm = math.sqrt(norm)
        if norm == 0.0:
            raise MetricError(f"class {c}: feature sum has zero norm, centroid direction undefined")
        out.append(s / norm)
    return np.array(out)


def _check_centroids(centroids) -> np.ndarray:
    v = np.asarray(centroids, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 2:
        raise MetricError("need at least 2 centroids")
    return v


def uniformity(centroids) -> float:
    v = _check_centroids(centroids)
    c = v.shape[0]
    d = _row_dists(v, v)
    off = ~np.eye(c, dtype=bool)
    return math.fsum(d[off]) / (c * (c - 1))


def neighborhood_uniformity(centroids, k: int = 1) -> float:
    """Mean over classes of the summed distance to the ``k`` nearest other centroids."""
    v = _check_centroids(centroids)
    c = v.shape[0]
    if not 1 <= k <= c - 1:
        raise MetricError(f"k must be in [1, {c - 1}], got {k}")
    d = _row_dists(v, v)
    rows = []
    for i in range(c):
        others = np.sort(np.delete(d[i], i))
        rows.append(math.fsum(others[:k]))
    return math.fsum(rows) / c


# ----------------------------------------------------------------------------
# split accuracy


def class_splits(train_counts, thresholds: tuple[float, float]) -> dict[str, list[int]]:
    t_many, t_few = thresholds
    if not t_many > t_few:
        raise MetricError("thresholds must satisfy t_many > t_few")
    splits = {"many": [], "median": [], "few": []}
    for c, n in enumerate(train_counts):
        if n > t_many:
            splits["many"].append(c)
        elif n < t_few:
            splits["few"].append(c)
        else:
            splits["median"].append(c)
    return splits


def split_accuracy(preds, labels, train_counts, thresholds=(100, 20)) -> dict[str, float | None]:
    """Accuracy overall and per Many/Median/Few split; a split with no test samples is ``None``."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    correct = preds == labels
    out: dict[str, float | None] = {"all": float(correct.mean()) if len(labels) else None}
    for name, members in class_splits(train_counts, thresholds).items():
        mask = np.isin(labels, members)
        out[name] = float(correct[mask].mean()) if mask.any() else None
    return out


# ----------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    alignment: float | None = None
    uniformity: float | None = None
    neighborhood_uniformity: dict[int, float] = field(default_factory=dict)
    acc_all: float | None = None
    acc_many: float | None = None
    acc_median: float | None = None
    acc_few: float | None = None
    extra: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "alignment": self.alignment,
            "uniformity": self.uniformity,
            "neighborhood_uniformity_k1": self.neighborhood_uniformity.get(1),
        }
        for k, v in sorted(self.neighborhood_uniformity.items()):
            if k != 1:
                d[f"neighborhood_uniformity_k{k}"] = v
        d.update(acc_all=self.acc_all, acc_many=self.acc_many,
                 acc_median=self.acc_median, acc_few=self.acc_few)
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        nu = {}
        for key in [k for k in d if k.startswith("neighborhood_uniformity_k")]:
            v = d.pop(key)
            if v is not None:
                nu[int(key.rsplit("k", 1)[1])] = v
        known = {k: d.pop(k) for k in ("alignment", "uniformity", "acc_all", "acc_many",
                                        "acc_median", "acc_few") if k in d}
        return cls(neighborhood_uniformity=nu, extra=d, **known)


def feature_report(ft: FeatureTable, ks=(1,)) -> MetricsReport:
    """A, U and U_k of a feature table (no accuracies)."""
    cent = sphere_centroids(ft)
    rep = MetricsReport(alignment=alignment(ft), uniformity=uniformity(cent))
    for k in ks:
        if k <= len(ft.classes) - 1:
            rep.neighborhood_uniformity[k] = neighborhood_uniformity(cent, k)
    return rep

