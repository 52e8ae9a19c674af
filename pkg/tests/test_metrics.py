import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from collapse_lab import metrics as mt
from collapse_lab.metrics import FeatureTable, MetricError


def random_table(seed, max_m=200, max_d=8, max_c=10):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, max_c + 1))
    d = int(rng.integers(2, max_d + 1))
    m = int(rng.integers(c, max_m + 1))
    labels = np.concatenate([np.arange(c), rng.integers(0, c, m - c)])
    rng.shuffle(labels)
    feats = rng.standard_normal((m, d)) * rng.uniform(0.1, 5) + rng.standard_normal(d)
    return FeatureTable(feats, labels, tuple(range(c)))


# --- alignment ---------------------------------------------------------------------

def test_alignment_identical_features_zero():
    ft = FeatureTable(np.array([[1.0, 2.0]] * 3 + [[5.0, 5.0]] * 2), [0, 0, 0, 1, 1])
    assert mt.alignment(ft) == 0.0


def test_alignment_two_points():
    assert mt.alignment(FeatureTable([[0.0, 0.0], [2.0, 0.0]], [0, 0])) == pytest.approx(1.0, abs=1e-12)


def test_alignment_singletons():
    assert mt.alignment(FeatureTable([[0.0, 1.0], [3.0, 0.0]], [0, 1])) == 0.0


def test_alignment_empty_class():
    with pytest.raises(MetricError, match="no features"):
        mt.alignment(FeatureTable([[0.0, 1.0]], [0], (0, 1)))


def test_alignment_translation_invariant():
    ft = random_table(3)
    shifted = FeatureTable(ft.features + np.array([7.0] * ft.features.shape[1]), ft.labels, ft.classes)
    assert mt.alignment(shifted) == pytest.approx(mt.alignment(ft), rel=1e-12)


# --- centroids / uniformity ---------------------------------------------------------

def test_centroid_examples():
    np.testing.assert_allclose(mt.sphere_centroids(FeatureTable([[3.0, 4.0]], [0])), [[0.6, 0.8]])
    c = mt.sphere_centroids(FeatureTable([[1.0, 0.0], [0.0, 1.0]], [0, 0]))
    np.testing.assert_allclose(c, [[1 / math.sqrt(2)] * 2], rtol=1e-15)


def test_centroid_zero_norm_error():
    with pytest.raises(MetricError, match="zero norm"):
        mt.sphere_centroids(FeatureTable([[1.0, 0.0], [-1.0, 0.0]], [0, 0]))


def test_uniformity_hand_cases():
    assert mt.uniformity([[1.0, 0.0], [-1.0, 0.0]]) == 2.0
    assert mt.uniformity([[0.0, 1.0]] * 3) == 0.0
    tri = [[math.cos(a), math.sin(a)] for a in (0, 2 * math.pi / 3, 4 * math.pi / 3)]
    assert abs(mt.uniformity(tri) - math.sqrt(3)) <= 1e-12


def test_uniformity_needs_two():
    with pytest.raises(MetricError):
        mt.uniformity([[1.0, 0.0]])


def test_neighborhood_hand_cases():
    c = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]
    assert mt.neighborhood_uniformity(c, 1) == pytest.approx(math.sqrt(2), abs=1e-15)
    two = [[1.0, 0.0], [0.0, 1.0]]
    assert mt.neighborhood_uniformity(two, 1) == mt.uniformity(two)
    assert mt.neighborhood_uniformity(c, 2) == pytest.approx(2 * mt.uniformity(c), rel=1e-15)
    with pytest.raises(MetricError):
        mt.neighborhood_uniformity(c, 3)
    with pytest.raises(MetricError):
        mt.neighborhood_uniformity(c, 0)


def test_uniformity_not_translation_invariant():
    ft = FeatureTable([[1.0, 0.0], [0.0, 1.0]], [0, 1])
    shifted = FeatureTable(ft.features + 10.0, ft.labels)
    assert mt.uniformity(mt.sphere_centroids(shifted)) < mt.uniformity(mt.sphere_centroids(ft))


# --- oracle agreement and properties -------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_bitwise_against_loop_oracle(seed):
    ft = random_table(1000 + seed)
    f, y, cls = ft.features.tolist(), ft.labels.tolist(), ft.classes
    assert mt.alignment(ft) == oracles.alignment(f, y, cls)
    cent = mt.sphere_centroids(ft)
    ocent = oracles.centroids(f, y, cls)
    assert cent.tolist() == ocent
    assert mt.uniformity(cent) == oracles.uniformity(ocent)
    for k in range(1, min(len(cls), 4)):
        assert mt.neighborhood_uniformity(cent, k) == oracles.neighborhood_uniformity(ocent, k)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_permutation_invariance(seed):
    ft = random_table(seed, max_m=80)
    perm = np.random.default_rng(seed).permutation(len(ft.labels))
    pt = FeatureTable(ft.features[perm], ft.labels[perm], ft.classes)
    assert mt.alignment(pt) == mt.alignment(ft)
    assert mt.sphere_centroids(pt).tobytes() == mt.sphere_centroids(ft).tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_class_relabeling_equivariance(seed):
    ft = random_table(seed, max_m=80)
    c = len(ft.classes)
    relabel = np.random.default_rng(seed).permutation(c)
    rt = FeatureTable(ft.features, relabel[ft.labels], ft.classes)
    assert mt.alignment(rt) == mt.alignment(ft)
    u = mt.uniformity(mt.sphere_centroids(rt))
    assert u == pytest.approx(mt.uniformity(mt.sphere_centroids(ft)), rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_uniformity_bounds(seed):
    ft = random_table(seed, max_m=60)
    cent = mt.sphere_centroids(ft)
    u = mt.uniformity(cent)
    u1 = mt.neighborhood_uniformity(cent, 1)
    c = len(cent)
    assert 0 <= u <= 2 + 1e-12
    assert 0 <= u1 <= 2 + 1e-12
    assert u1 <= u * (c - 1) + 1e-12
    for k in range(1, c - 1):
        assert mt.neighborhood_uniformity(cent, k) <= mt.neighborhood_uniformity(cent, k + 1)


# --- split accuracy -------------------------------------------------------------------

def test_mini_cifar_split_membership():
    s = mt.class_splits([5000, 854, 146, 25], (1000, 200))
    assert s == {"many": [0], "median": [1], "few": [2, 3]}


def test_cifar_lt_thresholds():
    counts = [500, 101, 100, 50, 20, 19, 5]
    assert mt.class_splits(counts, (100, 20)) == {"many": [0, 1], "median": [2, 3, 4], "few": [5, 6]}


def test_split_accuracy_all_correct_and_absent_split():
    labels = np.array([0, 0, 1, 1])
    acc = mt.split_accuracy(labels, labels, [500, 500], (100, 20))
    assert acc == {"all": 1.0, "many": 1.0, "median": None, "few": None}


def test_split_accuracy_values():
    labels = np.array([0, 0, 1, 1, 2, 2])
    preds = np.array([0, 0, 1, 0, 0, 0])
    acc = mt.split_accuracy(preds, labels, [5000, 854, 25], (1000, 200))
    assert acc == {"all": 0.5, "many": 1.0, "median": 0.5, "few": 0.0}


def test_split_thresholds_validated():
    with pytest.raises(MetricError):
        mt.class_splits([1, 2], (10, 20))


# --- report -----------------------------------------------------------------------------

def test_report_json_keys_and_roundtrip():
    rep = mt.MetricsReport(1.5, 1.2, {1: 0.9, 2: 1.7}, 0.8, 0.9, None, 0.1, {"coarse_test_acc": 0.7})
    d = json.loads(rep.to_json())
    for key in ("alignment", "uniformity", "neighborhood_uniformity_k1", "acc_all", "acc_many",
                "acc_median", "acc_few"):
        assert key in d
    assert d["neighborhood_uniformity_k2"] == 1.7 and d["acc_median"] is None
    assert mt.MetricsReport.from_dict(d) == rep


def test_feature_report():
    ft = random_table(7)
    rep = mt.feature_report(ft, ks=(1, 2))
    assert rep.alignment == mt.alignment(ft)
    assert set(rep.neighborhood_uniformity) == {1, 2}
