import logging
from collections import Counter

import numpy as np
import pytest

from _fixtures import random_train_bundle, tiny_bundle
from _oracles import brute_batches, brute_knn, brute_resample
from robust_adapt.errors import InvalidSpec, NoPositives
from robust_adapt.numerics import Rng
from robust_adapt.sampling import SamplingConfig, build_contrastive_batches, build_resampled_train, knn_other_class


def six_sample_fixture():
    x = [[1.0, 0.1], [0.9, 0.3], [0.8, 0.2], [0.1, 1.0], [0.2, 0.9], [0.95, 0.05]]
    y = [0, 0, 0, 1, 1, 1]
    b = tiny_bundle(x, y, [0] * 6, ["train"] * 6, [[1, 0], [0, 1]])
    # sample 0 is the anchor; 1 and 2 are its correct classmates; 5 looks like class 0
    pseudo = [1, 0, 0, 1, 1, 0]
    return b, pseudo


def test_six_sample_fixture():
    b, pseudo = six_sample_fixture()
    batches = build_contrastive_batches(b, pseudo, SamplingConfig(2, 1, 3))
    assert [bt.anchor for bt in batches] == [0, 5]
    first = batches[0]
    # every valid positive set of size 2 drawn from {1, 2}
    assert sorted(first.positives.tolist()) == [1, 2]
    assert set(first.negatives.tolist()) <= {3, 4, 5}


def test_nearest_negative_when_pool_has_one():
    b, pseudo = six_sample_fixture()
    batches = build_contrastive_batches(b, pseudo, SamplingConfig(2, 1, 1))
    x = b.samples.astype(np.float64).tolist()
    for bt in batches:
        assert bt.negatives.tolist() == brute_knn(x, b.class_labels.tolist(), bt.anchor, 1)
    assert batches[0].negatives.tolist() == [5]


def test_all_correct_gives_no_batches():
    b = random_train_bundle(0, 30)
    assert build_contrastive_batches(b, b.class_labels[:], SamplingConfig(2, 2, 4)) == []


@pytest.mark.parametrize("seed", range(20))
def test_batches_match_brute_force(seed):
    rs = np.random.default_rng(seed)
    n = int(rs.integers(50, 201))
    b = random_train_bundle(seed, n, classes=3)
    pseudo = np.where(rs.random(n) < 0.3, rs.integers(0, 3, n), b.class_labels)
    cfg = SamplingConfig(int(rs.integers(1, 20)), int(rs.integers(1, 8)), 0, seed=seed)
    cfg.num_neighbors = cfg.num_negatives + int(rs.integers(0, 30))
    got = build_contrastive_batches(b, pseudo, cfg)
    want = brute_batches(b, pseudo.tolist(), cfg)
    assert [(bt.anchor, bt.positives.tolist(), bt.negatives.tolist()) for bt in got] == want
    for bt in got:
        y = b.class_labels
        assert pseudo[bt.anchor] != y[bt.anchor]
        assert np.all(y[bt.positives] == y[bt.anchor]) and np.all(pseudo[bt.positives] == y[bt.positives])
        assert np.all(y[bt.negatives] != y[bt.anchor])
        assert len(set(bt.positives.tolist())) == bt.positives.size
        assert len(set(bt.negatives.tolist())) == bt.negatives.size


def test_batches_use_global_rows_and_only_train_candidates():
    rs = np.random.default_rng(1)
    x = rs.normal(size=(40, 4))
    y = np.arange(40) % 2
    splits = np.array(["train", "test"] * 20)
    b = tiny_bundle(x, y, np.zeros(40, dtype=int), splits, rs.normal(size=(2, 4)))
    train = np.flatnonzero(splits == "train")
    pseudo = b.class_labels[train].copy()
    pseudo[:3] = 1 - pseudo[:3]
    batches = build_contrastive_batches(b, pseudo, SamplingConfig(3, 2, 5))
    assert [bt.anchor for bt in batches] == train[:3].tolist()
    for bt in batches:
        assert set(bt.positives.tolist()) | set(bt.negatives.tolist()) <= set(train.tolist())


def test_distinct_pseudo_filter():
    b = random_train_bundle(3, 90)
    rs = np.random.default_rng(3)
    pseudo = np.where(rs.random(90) < 0.3, rs.integers(0, 3, 90), b.class_labels)
    cfg = SamplingConfig(4, 2, 6, distinct_pseudo=True)
    got = build_contrastive_batches(b, pseudo, cfg)
    want = brute_batches(b, pseudo.tolist(), cfg)
    assert [(bt.anchor, bt.positives.tolist(), bt.negatives.tolist()) for bt in got] == want
    for bt in got:
        assert np.all(pseudo[bt.positives] != pseudo[bt.anchor])


def test_no_positives_drop_or_raise(caplog):
    x = [[1, 0], [0.9, 0.1], [0, 1], [0.1, 0.9]]
    b = tiny_bundle(x, [0, 0, 1, 1], [0] * 4, ["train"] * 4, [[1, 0], [0, 1]])
    pseudo = [1, 1, 1, 0]  # class 0 has no correct sample; class 1 anchor 3 has positive 2
    with caplog.at_level(logging.WARNING):
        batches = build_contrastive_batches(b, pseudo, SamplingConfig(1, 1, 1))
    assert [bt.anchor for bt in batches] == [3]
    assert "class 0" in caplog.text
    with pytest.raises(NoPositives):
        build_contrastive_batches(b, pseudo, SamplingConfig(1, 1, 1, strict=True))


def test_sampling_is_a_pure_function_of_seed():
    b = random_train_bundle(4, 120)
    rs = np.random.default_rng(4)
    pseudo = np.where(rs.random(120) < 0.3, rs.integers(0, 3, 120), b.class_labels)

    def key(cfg):
        return [(bt.anchor, bt.positives.tolist(), bt.negatives.tolist()) for bt in build_contrastive_batches(b, pseudo, cfg)]

    assert key(SamplingConfig(3, 3, 9, seed=1)) == key(SamplingConfig(3, 3, 9, seed=1))
    assert key(SamplingConfig(3, 3, 9, seed=1)) != key(SamplingConfig(3, 3, 9, seed=2))


def test_sampling_config_validation():
    for bad in (SamplingConfig(0, 1, 1), SamplingConfig(1, 0, 1), SamplingConfig(1, 3, 2)):
        with pytest.raises(InvalidSpec):
            bad.validate()


def test_knn_examples():
    x = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
    y = np.array([0, 1, 1])
    assert knn_other_class(x, y, 0, 1).tolist() == [1]
    assert knn_other_class(x, y, 0, 10).tolist() == [1, 2]
    with pytest.raises(ValueError):
        knn_other_class(x, y, 0, 0)
    # ties resolve to the lower index
    x2 = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [0.0, 2.0]])
    assert knn_other_class(x2, np.array([0, 1, 1, 1]), 0, 3).tolist() == [1, 2, 3]


@pytest.mark.parametrize("seed", range(20))
def test_knn_matches_brute_force(seed):
    rs = np.random.default_rng(seed)
    x = rs.normal(size=(50, 4))
    y = rs.integers(0, 3, 50)
    k = int(rs.integers(1, 60))
    for anchor in range(0, 50, 7):
        assert knn_other_class(x, y, anchor, k).tolist() == brute_knn(x.tolist(), y.tolist(), anchor, k)


def brute_resample_counts(y, correct):
    want = Counter()
    for c in set(y):
        pos = [i for i in range(len(y)) if y[i] == c and correct[i]]
        neg = [i for i in range(len(y)) if y[i] == c and not correct[i]]
        want[(c, True)] = len(pos)
        want[(c, False)] = len(pos) if pos and neg else len(neg)
    return want


def test_resample_examples():
    x = np.random.default_rng(0).normal(size=(4, 3))
    b = tiny_bundle(x, [0, 0, 0, 0], [0] * 4, ["train"] * 4, np.eye(3)[:1])
    out = build_resampled_train(b, [0, 0, 0, 1], Rng(0))
    assert out.size == 6 and Counter(out.tolist())[3] == 3
    full = random_train_bundle(2, 30)
    same = build_resampled_train(full, full.class_labels, Rng(0))
    assert sorted(same.tolist()) == list(range(30))


def test_resample_keeps_all_incorrect_when_class_has_no_correct(caplog):
    x = np.random.default_rng(0).normal(size=(5, 3))
    b = tiny_bundle(x, [0, 0, 1, 1, 1], [0] * 5, ["train"] * 5, np.eye(3)[:2])
    with caplog.at_level(logging.WARNING):
        out = build_resampled_train(b, [1, 1, 1, 0, 1], Rng(0))
    assert Counter(out.tolist()) == Counter({0: 1, 1: 1, 2: 1, 4: 1, 3: 2})
    assert "no pseudo-correct" in caplog.text


@pytest.mark.parametrize("seed", range(20))
def test_resample_counts_match_recount(seed):
    rs = np.random.default_rng(seed)
    n = int(rs.integers(50, 201))
    b = random_train_bundle(seed, n, classes=4)
    pseudo = np.where(rs.random(n) < rs.uniform(0.05, 0.6), rs.integers(0, 4, n), b.class_labels)
    out = build_resampled_train(b, pseudo, Rng(seed))
    y, correct = b.class_labels.tolist(), (pseudo == b.class_labels).tolist()
    got = Counter((y[i], correct[i]) for i in out.tolist())
    want = brute_resample_counts(y, correct)
    assert {k: v for k, v in got.items() if v} == {k: v for k, v in want.items() if v}
    # every correct sample appears exactly once
    for i in np.flatnonzero(pseudo == b.class_labels):
        assert Counter(out.tolist())[i] == 1
    assert out.tolist() == brute_resample(b, pseudo.tolist(), Rng(seed))
