import itertools
import math

import numpy as np
import pytest

from _fixtures import report_from
from robust_adapt.adapter import AdapterParams, adapter_embed, init_adapter
from robust_adapt.errors import EmptyGroup, InsufficientGroups, ShapeMismatch
from robust_adapt.metrics import (
    GroupReport,
    alignment_loss,
    bn_scale,
    cross_group_cosine,
    embedding_diagnostics,
    evaluate_groups,
    format_table,
    lipschitz_upper_bound,
)
from robust_adapt.numerics import Rng


def test_published_rows():
    r = report_from(36.6, 92.2)
    assert 100 * r.worst_group_accuracy == pytest.approx(36.6)
    assert 100 * r.average_accuracy == pytest.approx(92.2)
    assert round(100 * r.gap, 1) == 55.6
    r = report_from(74.0, 81.9)
    assert round(100 * r.gap, 1) == pytest.approx(7.9)


def test_weighted_average_example():
    pred = [0] * 81 + [1] * 9 + [0] * 3 + [1] * 7
    r = evaluate_groups(pred, [0] * 100, [0] * 90 + [1] * 10)
    assert r.average_accuracy == pytest.approx(0.84)
    assert r.worst_group_accuracy == pytest.approx(0.30)
    assert r.gap == pytest.approx(0.54)
    assert [(g.class_id, g.group_id, g.n, g.correct) for g in r.per_group] == [(0, 0, 90, 81), (0, 1, 10, 3)]


def test_perfect_predictions():
    r = evaluate_groups([0, 1, 1], [0, 1, 1], [0, 0, 1])
    assert r.worst_group_accuracy == r.average_accuracy == 1.0 and r.gap == 0.0


def test_evaluate_errors():
    with pytest.raises(EmptyGroup):
        evaluate_groups([0], [0], [0], cells=[(0, 0), (0, 1)])
    with pytest.raises(EmptyGroup):
        evaluate_groups([], [], [])
    with pytest.raises(ShapeMismatch):
        evaluate_groups([0, 1], [0], [0])


def test_report_dict_and_table():
    r = evaluate_groups([0, 1, 0, 0], [0, 1, 1, 0], [0, 0, 1, 1])
    d = r.to_dict()
    assert d["gap"] == pytest.approx(d["average_accuracy"] - d["worst_group_accuracy"], abs=1e-9)
    assert min(g["accuracy"] for g in d["per_group"]) == d["worst_group_accuracy"]
    table = format_table([("zero-shot", r)])
    assert table.splitlines()[0].split() == ["Method", "WG", "Avg", "Gap"]
    assert table.splitlines()[1].split() == ["zero-shot", "0.0", "75.0", "75.0"]


def brute_pairs(z, labels, groups, c, fn):
    vals = []
    for i, j in itertools.combinations(range(len(z)), 2):
        if labels[i] == labels[j] == c and groups[i] != groups[j]:
            a = np.asarray(z[i], float) / np.linalg.norm(z[i])
            b = np.asarray(z[j], float) / np.linalg.norm(z[j])
            vals.append(fn(a, b))
    return sum(vals) / len(vals)


def test_alignment_and_cosine_examples():
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert alignment_loss(z, [0, 0], [0, 1], 0) == pytest.approx(math.sqrt(2))
    assert cross_group_cosine(z, [0, 0], [0, 1], 0) == pytest.approx(0.0)
    same = np.array([[1.0, 2.0], [2.0, 4.0]])
    assert alignment_loss(same, [0, 0], [0, 1], 0) == pytest.approx(0.0, abs=1e-12)
    assert cross_group_cosine(same, [0, 0], [0, 1], 0) == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(10))
def test_pair_diagnostics_match_brute_force(seed):
    rs = np.random.default_rng(seed)
    z = rs.normal(size=(12, 3))
    labels = rs.integers(0, 2, 12)
    labels[:4] = [0, 0, 1, 1]
    groups = rs.integers(0, 3, 12)
    groups[:4] = [0, 1, 0, 2]
    for c in (0, 1):
        dist = brute_pairs(z, labels, groups, c, lambda a, b: float(np.linalg.norm(a - b)))
        cosv = brute_pairs(z, labels, groups, c, lambda a, b: float(a @ b))
        assert alignment_loss(z, labels, groups, c) == pytest.approx(dist, abs=1e-7)
        assert cross_group_cosine(z, labels, groups, c) == pytest.approx(cosv, abs=1e-7)


def test_diagnostics_invariances():
    rs = np.random.default_rng(3)
    z = rs.normal(size=(30, 4))
    labels = np.arange(30) % 2
    groups = (np.arange(30) // 2) % 3
    perm = rs.permutation(30)
    relabel = np.array([2, 0, 1])[groups]
    for fn in (alignment_loss, cross_group_cosine):
        base = fn(z, labels, groups, 1)
        assert fn(z[perm], labels[perm], groups[perm], 1) == pytest.approx(base, abs=1e-12)
        assert fn(z, labels, relabel, 1) == pytest.approx(base, abs=1e-12)


def test_single_group_class_is_not_applicable():
    z = np.eye(3)
    with pytest.raises(InsufficientGroups):
        alignment_loss(z, [0, 0, 1], [0, 0, 1], 0)
    align, cos = embedding_diagnostics(z, [0, 0, 1], [0, 1, 0], 2)
    assert align[1] is None and cos[1] is None and align[0] is not None


def plain_params(w1, w2, gamma=None, var=None, eps=0.0):
    h = w1.shape[1]
    d = w1.shape[0]
    return AdapterParams(
        w1=w1, b1=np.zeros(h), bn_gamma=np.ones(h) if gamma is None else gamma, bn_beta=np.zeros(h),
        bn_running_mean=np.zeros(h), bn_running_var=np.ones(h) if var is None else var,
        w2=w2, b2=np.zeros(d), bn_eps=eps,
    )


def test_lipschitz_examples():
    assert lipschitz_upper_bound(plain_params(np.eye(3), np.eye(3), eps=1e-12)) == pytest.approx(1.0, abs=1e-6)
    p = plain_params(2 * np.eye(3), 3 * np.eye(3), eps=1e-12)
    assert lipschitz_upper_bound(p) == pytest.approx(6.0, abs=1e-5)
    q = plain_params(np.eye(2), np.eye(2), gamma=np.array([0.5, -4.0]), var=np.array([4.0, 1.0]), eps=1e-12)
    assert bn_scale(q) == pytest.approx(4.0)
    q.use_batchnorm = False
    assert bn_scale(q) == 1.0


def test_lipschitz_bounds_sampled_slopes():
    rs = np.random.default_rng(0)
    p = init_adapter(8, 4, Rng(0))
    p.bn_gamma = rs.normal(1, 0.5, 4).astype(np.float32)
    p.bn_running_var = rs.uniform(0.1, 2, 4).astype(np.float32)
    bound = lipschitz_upper_bound(p)
    a = rs.normal(size=(500, 8))
    b = a + rs.normal(size=(500, 8)) * rs.uniform(1e-3, 1, (500, 1))
    slopes = np.linalg.norm(adapter_embed(p, a) - adapter_embed(p, b), axis=1) / np.linalg.norm(a - b, axis=1)
    assert slopes.max() <= bound


def test_group_report_gap_property_is_derived():
    r = GroupReport([], 0.75, 0.5)
    assert r.gap == 0.25
