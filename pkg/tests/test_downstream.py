import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stainssl import downstream as DS
from stainssl import tensor as T
from stainssl.dino import DinoConfig, init_state
from stainssl.downstream import (
    Bag, FeatureFormatError, FeatureMatrix, MILConfig, ProbeConfig, abmil_forward, average_precision_at_k,
    bags_from_features, decode_features, encode_features, extract_features, init_abmil, init_simlp,
    leave_one_out, map_at_k_exact, mil_train, probe_train, read_bags, recall_at_k_exact, retrieve,
    simlp_forward, write_bags,
)
from stainssl.encoder import DinoHeadConfig, ViTConfig
from stainssl.rng import SplitMix

TINY = ViTConfig(image_size=16, patch_size=8, embed_dim=16, depth=1, heads=2)


def blobs(n, c=8, k=2, shift=3.0, seed=0):
    r = SplitMix(seed)
    y = np.arange(n) % k
    X = r.normal(n * c).reshape(n, c) * 0.5
    X[np.arange(n), y] += shift
    return X.astype(np.float32), y


# --- feature files ----------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 6), st.integers(1, 5), st.booleans(), st.integers(0, 10**6))
def test_feature_file_round_trip(n, c, labeled, seed):
    X = SplitMix(seed).normal(n * c).reshape(n, c).astype(np.float32)
    fm = FeatureMatrix([f"p{i}é" for i in range(n)], X, np.arange(n) if labeled else None)
    back = decode_features(encode_features(fm))
    assert back.ids == fm.ids and back.X.tobytes() == fm.X.tobytes()
    assert (back.labels is None) == (not labeled)
    if labeled:
        assert back.labels.tolist() == list(range(n))


def test_feature_file_layout_and_errors():
    fm = FeatureMatrix(["a", "bc"], np.ones((2, 3)), [0, 1])
    buf = encode_features(fm)
    assert buf[:4] == b"STNF" and len(buf) == 16 + 24 + (2 + 1) + (2 + 2) + 1 + 8
    with pytest.raises(FeatureFormatError) as e:
        decode_features(b"XXXX" + buf[4:])
    assert e.value.offset == 0
    with pytest.raises(FeatureFormatError) as e:
        decode_features(buf[:20])
    assert e.value.offset == 16
    with pytest.raises(FeatureFormatError, match="trailing"):
        decode_features(buf + b"!")
    with pytest.raises(ValueError):
        FeatureMatrix(["a"], [[np.nan]])


def test_extract_features_deterministic():
    state = init_state(TINY, DinoHeadConfig(hidden=8, bottleneck=4, out_dim=6), DinoConfig(), 0)
    px = (SplitMix(1).random(3 * 24 * 24 * 3) * 256).astype(np.uint8).reshape(3, 24, 24, 3)
    px[2] = px[0]
    a = extract_features(state, px, ["x", "y", "z"])
    b = extract_features(state, px, ["x", "y", "z"])
    assert a.X.shape == (3, 16) and a.X.tobytes() == b.X.tobytes()
    assert np.array_equal(a.X[0], a.X[2])
    with pytest.raises(T.DimensionError):
        extract_features(state, px[..., :2], ["x", "y", "z"])


# --- probes -----------------------------------------------------------------

@pytest.mark.parametrize("mode", ["linear", "mlp"])
def test_probe_separable_blobs(mode):
    X, y = blobs(4000)
    split = {"train": list(range(3000)), "val": list(range(3000, 4000))}
    res = probe_train(X, y, ProbeConfig(mode=mode), split)
    pred = res.probe.predict(X[3000:])
    assert DS._balanced_accuracy(y[3000:], pred, 2) >= 0.99
    assert res.best_score == max(res.history)


def test_probe_shuffled_labels_near_chance():
    X, y = blobs(2000, k=4)
    y = SplitMix(3).permutation(2000) % 4
    split = {"train": list(range(1500)), "val": list(range(1500, 2000))}
    res = probe_train(X, y, ProbeConfig(), split)
    assert abs(DS._balanced_accuracy(y[1500:], res.probe.predict(X[1500:]), 4) - 0.25) <= 0.1


def test_early_stop_on_plateau():
    X, y = blobs(200)
    split = {"train": list(range(150)), "val": list(range(150, 200))}
    res = probe_train(X, y, ProbeConfig(lr=0.0, wd=0.0), split)  # weights never move
    assert res.best_epoch == 1 and res.stopped_epoch == 6 and len(res.history) == 6


def test_early_stop_scripted_scores(monkeypatch):
    scores = iter([0.1, 0.2, 0.5, 0.5, 0.4, 0.5, 0.3, 0.5, 0.9, 0.9])
    monkeypatch.setattr(DS, "_balanced_accuracy", lambda *a: next(scores))
    X, y = blobs(64)
    res = probe_train(X, y, ProbeConfig(), {"train": list(range(32)), "val": list(range(32, 64))})
    assert res.best_epoch == 3 and res.stopped_epoch == 8 and len(res.history) == 8


class TrackedRows:
    """Array stand-in that records every row index read."""

    def __init__(self, X):
        self.X, self.seen = X, set()
        self.shape = X.shape

    def __getitem__(self, idx):
        self.seen.update(np.atleast_1d(np.arange(self.X.shape[0])[idx]).tolist())
        return self.X[idx]


def test_probe_never_reads_test_rows():
    X, y = blobs(90)
    tracked = TrackedRows(X)
    split = {"train": list(range(50)), "val": list(range(50, 70))}
    probe_train(tracked, y, ProbeConfig(epochs=3), split)
    assert tracked.seen and max(tracked.seen) < 70


def test_probe_errors():
    X, y = blobs(20)
    with pytest.raises(ValueError):
        probe_train(X, np.zeros(20, int), ProbeConfig(), {"train": list(range(10)), "val": [10]})
    with pytest.raises(ValueError):
        ProbeConfig(mode="svm")


# --- MIL --------------------------------------------------------------------

def majority_bags(n_bags, c=64, seed=0):
    """Class = which of two dense prototype instances forms the majority of the bag."""
    r = SplitMix(seed)
    protos = r.normal(2 * c).reshape(2, c).astype(np.float32)
    bags = []
    for b in range(n_bags):
        label = b % 2
        n = 5 + int(r.integers(7))
        major = int(np.ceil(0.7 * n))
        kinds = [label] * major + [1 - label] * (n - major)
        X = np.stack([protos[k] for k in kinds]) + r.normal(n * c).reshape(n, c).astype(np.float32) * 0.5
        bags.append(Bag(f"s{b:03d}", X, label))
    return bags


def test_mil_permutation_invariance_bit_exact():
    bag = majority_bags(1, c=6, seed=5)[0]
    perm = SplitMix(1).permutation(bag.X.shape[0])
    pa, ps = init_abmil(6, 2, 16, 0), init_simlp(6, 2, 0, 0)
    T.set_deterministic(True)
    try:
        la, att = abmil_forward(bag, pa)
        lb, att_b = abmil_forward(bag.X[perm], pa)
        assert la.data.tobytes() == lb.data.tobytes()
        assert np.array_equal(att[perm], att_b)
        assert abs(float(att.sum()) - 1) < 1e-6
        assert simlp_forward(bag, ps).data.tobytes() == simlp_forward(bag.X[perm], ps).data.tobytes()
    finally:
        T.set_deterministic(False)


def test_mil_small_cases():
    pa, ps = init_abmil(4, 3, 8, 1), init_simlp(4, 3, 0, 1)
    x = np.array([[1.0, 2.0, 3.0, 4.0]], np.float32)
    assert abmil_forward(x, pa)[1].tolist() == [1.0]
    np.testing.assert_allclose(simlp_forward(np.repeat(x, 5, 0), ps).data, simlp_forward(x, ps).data, atol=1e-6)
    bag = majority_bags(1, c=4)[0].X
    np.testing.assert_allclose(simlp_forward(np.concatenate([bag, bag]), ps).data, simlp_forward(bag, ps).data,
                               atol=1e-6)


@pytest.mark.parametrize("model", ["abmil", "simlp"])
def test_mil_majority_bags(model):
    bags = majority_bags(200)
    split = {"train": list(range(100)), "val": list(range(100, 150))}
    res = mil_train(bags, model, MILConfig(), split)
    test = bags[150:]
    pred = res.predict(test)
    assert DS._balanced_accuracy([b.label for b in test], pred, 2) >= 0.9
    assert res.train_loss[min(4, len(res.train_loss) - 1)] < res.train_loss[0]
    again = mil_train(bags, model, MILConfig(), split)
    assert again.history == res.history


def test_bags_round_trip(tmp_path):
    fm = FeatureMatrix(["a1", "a2", "b1"], np.arange(6, dtype=np.float32).reshape(3, 2), [1, 1, 0])
    bags = bags_from_features(fm, {"a1": "A", "a2": "A", "b1": "B"})
    assert [(b.slide_id, b.X.shape[0], b.label) for b in bags] == [("A", 2, 1), ("B", 1, 0)]
    back = read_bags(write_bags(tmp_path, bags))
    assert [(b.slide_id, b.label) for b in back] == [("A", 1), ("B", 0)]
    assert all(np.array_equal(a.X, b.X) for a, b in zip(bags, back))
    with pytest.raises(ValueError):
        bags_from_features(FeatureMatrix(["a", "b"], np.ones((2, 1)), [0, 1]), {"a": "S", "b": "S"})
    with pytest.raises(ValueError):
        mil_train(bags, "transmil", MILConfig(), {"train": [0, 1], "val": [0]})


# --- retrieval --------------------------------------------------------------

def brute_rank(q, G, ids, exclude=None):
    sims = []
    for i, g in enumerate(G):
        if ids[i] == exclude:
            continue
        s = float(np.dot(q, g) / (np.linalg.norm(q) * np.linalg.norm(g)))
        sims.append((-round(s, 12), ids[i]))
    return [i for _, i in sorted(sims)]


def brute_ap(rel, n_rel, k):
    return sum((Fraction(sum(rel[:i + 1]), i + 1) for i in range(min(k, len(rel))) if rel[i]), Fraction(0)) / n_rel


def test_retrieve_hand_cases():
    G = np.array([[1.0, 0], [0, 1.0], [2.0, 0], [0, 3.0]])
    assert retrieve(np.array([1.0, 0]), G, 4, ["d", "c", "b", "a"]) == [["b", "d", "a", "c"]]
    assert retrieve(np.array([0, 1.0]), G, 1, ["d", "c", "b", "a"]) == [["a"]]
    with pytest.raises(ValueError, match="row 1"):
        retrieve(np.array([1.0, 0]), np.array([[1.0, 0], [0, 0]]), 1, ["a", "b"])
    with pytest.raises(ValueError):
        retrieve(np.array([1.0, 0]), G, 0, list("abcd"))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 10), st.integers(1, 4), st.integers(0, 10**6))
def test_retrieval_matches_brute_force(n, c, seed):
    r = SplitMix(seed)
    X = np.round(r.normal(n * c).reshape(n, c), 1)
    X[np.all(X == 0, axis=1), 0] = 1.0
    ids = [f"i{j:02d}" for j in range(n)]
    got = leave_one_out(FeatureMatrix(ids, X), n)
    X32 = X.astype(np.float32).astype(np.float64)
    assert got == [brute_rank(X32[j], X32, ids, exclude=ids[j]) for j in range(n)]
    scale = 2.0 ** r.integers(7, n)[:, None]  # exact in float32, so ties survive
    assert leave_one_out(FeatureMatrix(ids, X * scale), n) == got


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10**6))
def test_retrieval_invariant_to_random_rescaling(n, seed):
    r = SplitMix(seed)
    X = r.normal(n * 4).reshape(n, 4)
    ids = [f"i{j:02d}" for j in range(n)]
    got = leave_one_out(FeatureMatrix(ids, X), n)
    assert leave_one_out(FeatureMatrix(ids, X * r.uniform(0.1, 10.0, n)[:, None]), n) == got


def test_ap_hand_example_and_min_variant():
    assert average_precision_at_k([True, False, True], 2, 3) == Fraction(5, 6)
    assert average_precision_at_k([True, False, True], 2, 3, "min") == Fraction(5, 6)
    assert average_precision_at_k([True, False], 2, 1, "min") == 1
    assert average_precision_at_k([True, False], 2, 2, "min") == Fraction(1, 2)  # not monotone
    assert average_precision_at_k([True, False], 2, 1) == average_precision_at_k([True, False], 2, 2)


def test_ap_matches_permutation_brute_force():
    labels = [0, 0, 1, 1, 0, 1]
    for perm in itertools.permutations(range(6)):
        rel = [labels[p] == 0 for p in perm]
        for k in (1, 3, 6):
            assert average_precision_at_k(rel, 3, k) == brute_ap(rel, 3, k)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 12), st.integers(2, 3), st.integers(0, 10**6))
def test_metrics_monotone_and_exact(n, k, seed):
    r = SplitMix(seed)
    X = r.normal(n * 3).reshape(n, 3) + 0.01
    labels = r.integers(k, n).tolist()
    ids = [f"i{j:02d}" for j in range(n)]
    label_of = dict(zip(ids, labels))
    ranks = leave_one_out(FeatureMatrix(ids, X), 20)
    prev_r, prev_m = Fraction(-1), Fraction(-1)
    for K in range(1, 21):
        rec = recall_at_k_exact(ranks, labels, label_of, K)
        m, skipped = map_at_k_exact(ranks, labels, label_of, K, ids)
        brute = [brute_ap([label_of[g] == labels[j] for g in ranks[j]], labels.count(labels[j]) - 1, K)
                 for j in range(n) if labels.count(labels[j]) > 1]
        assert skipped == n - len(brute)
        assert m == (sum(brute, Fraction(0)) / len(brute) if brute else 0)
        assert rec == Fraction(sum(any(label_of[g] == labels[j] for g in ranks[j][:K]) for j in range(n)), n)
        assert rec >= prev_r and m >= prev_m
        prev_r, prev_m = rec, m
