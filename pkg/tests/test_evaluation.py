from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sparsevit import FeatureSet, knn_classify, knn_predict, metrics


def knn_oracle(train, query, k):
    dists = [(float(np.sum((row.astype(float) - query.astype(float)) ** 2)), i) for i, row in enumerate(train.features)]
    dists.sort()
    votes = Counter(int(train.labels[i]) for _, i in dists[:k])
    top = max(votes.values())
    return min(label for label, c in votes.items() if c == top)


def metrics_oracle(pred, true, num_classes):
    cm = np.zeros((num_classes, num_classes))
    for t, p in zip(true, pred):
        cm[t, p] += 1
    recalls, f1s, weights = [], [], []
    for c in range(num_classes):
        tp, support, predicted = cm[c, c], cm[c].sum(), cm[:, c].sum()
        if support:
            recalls.append(tp / support)
        prec = tp / predicted if predicted else 0.0
        rec = tp / support if support else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        weights.append(support)
    return {
        "accuracy": np.trace(cm) / len(true),
        "balanced_accuracy": float(np.mean(recalls)),
        "weighted_f1": float(np.dot(f1s, weights) / sum(weights)),
    }


def random_set(rng, m, d=8, classes=5):
    return FeatureSet(rng.standard_normal((m, d)).astype(np.float32), rng.integers(0, classes, m))


def test_exact_match_k1(rng):
    train = random_set(rng, 30)
    for i in range(30):
        assert knn_classify(train, train.features[i], k=1) == train.labels[i]


def test_majority_whole_set():
    train = FeatureSet(np.arange(4, dtype=np.float32)[:, None], [0, 0, 0, 1])
    assert knn_classify(train, np.array([3.0], np.float32), k=4) == 0


def test_vote_tie_smallest_label():
    train = FeatureSet(np.array([[1.0], [-1.0]], np.float32), [3, 1])
    assert knn_classify(train, np.array([0.0]), k=2) == 1


def test_distance_tie_lower_row():
    train = FeatureSet(np.array([[1.0], [-1.0], [5.0]], np.float32), [4, 2, 2])
    assert knn_classify(train, np.array([0.0]), k=1) == 4


def test_k_larger_than_train(rng):
    train = random_set(rng, 5)
    assert knn_classify(train, train.features[0], k=20) == knn_classify(train, train.features[0], k=5)


def test_random_50_matches_oracle(rng):
    train = random_set(rng, 50)
    queries = rng.standard_normal((40, 8)).astype(np.float32)
    assert [knn_classify(train, q) for q in queries] == [knn_oracle(train, q, 20) for q in queries]


def test_knn_errors(rng):
    with pytest.raises(ValueError):
        knn_classify(FeatureSet(np.zeros((0, 3)), []), np.zeros(3))
    train = random_set(rng, 5)
    with pytest.raises(ValueError):
        knn_classify(train, np.zeros(8), k=0)
    with pytest.raises(ValueError):
        knn_classify(train, np.zeros(3))


@given(st.integers(0, 2**31), st.floats(1e-3, 1e3), st.integers(1, 25))
def test_knn_scaling_invariant(seed, factor, k):
    # integer-valued features keep the scaled distances exactly ordered
    rng = np.random.default_rng(seed)
    feats = rng.integers(-5, 6, (30, 4)).astype(np.float32)
    labels = rng.integers(0, 4, 30)
    q = rng.integers(-5, 6, 4).astype(np.float32)
    base = knn_classify(FeatureSet(feats, labels), q, k)
    scaled = FeatureSet(feats * np.float32(2.0 ** round(np.log2(factor))), labels)
    assert knn_classify(scaled, q * np.float32(2.0 ** round(np.log2(factor))), k) == base


def test_metrics_perfect():
    assert metrics([0, 1, 2, 1], [0, 1, 2, 1]) == {"accuracy": 1.0, "balanced_accuracy": 1.0, "weighted_f1": 1.0}


def test_metrics_one_class_missed():
    m = metrics([0, 0, 0, 0], [0, 0, 1, 1])
    assert m["balanced_accuracy"] == 0.5 and m["accuracy"] == 0.5


def test_metrics_oracle_100(rng):
    true = rng.integers(0, 5, 100)
    pred = np.where(rng.random(100) < 0.6, true, rng.integers(0, 5, 100))
    got = metrics(pred, true, 6)
    want = metrics_oracle(pred, true, 6)
    for key in want:
        assert abs(got[key] - want[key]) < 1e-9


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
def test_metrics_bounded(pairs):
    pred, true = zip(*pairs)
    m = metrics(pred, true, 4)
    assert all(0.0 <= v <= 1.0 for v in m.values())


def test_metrics_errors():
    with pytest.raises(ValueError):
        metrics([0, 1], [0])
    with pytest.raises(ValueError):
        metrics([0, 3], [0, 1], num_classes=3)


def test_featureset_invariants():
    with pytest.raises(ValueError):
        FeatureSet(np.zeros((2, 3)), [0])
    with pytest.raises(ValueError):
        FeatureSet(np.array([[np.nan]]), [0])
    with pytest.raises(ValueError):
        FeatureSet(np.zeros((1, 2)), [-1])


@pytest.mark.parametrize("suffix", [".feats", ".csv"])
def test_feature_file_roundtrip(tmp_path, rng, suffix):
    fs = random_set(rng, 7, d=5)
    path = tmp_path / f"f{suffix}"
    fs.save(path)
    back = FeatureSet.load(path)
    assert back.features.tobytes() == fs.features.tobytes()
    np.testing.assert_array_equal(back.labels, fs.labels)


def test_binary_layout(rng):
    fs = FeatureSet(np.array([[1.5, -2.0]], np.float32), [3])
    blob = fs.to_bytes()
    assert blob == b"FEATS1" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + (
        (3).to_bytes(4, "little") + np.array([1.5, -2.0], "<f4").tobytes()
    )
    with pytest.raises(ValueError):
        FeatureSet.from_bytes(blob[:-1])
    with pytest.raises(ValueError):
        FeatureSet.from_bytes(b"NOPE" + blob[4:])


def test_knn_predict_vector(rng):
    train = random_set(rng, 20)
    np.testing.assert_array_equal(knn_predict(train, train.features, 1), train.labels)
