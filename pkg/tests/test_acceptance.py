"""Acceptance criteria 1-11.

Each test prints one ``PASS``/``FAIL`` line with the measured quantities and
wall time, then asserts. Run directly (``python tests/test_acceptance.py``)
to get just the eleven lines.
"""

from __future__ import annotations

import functools
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from _fixtures import grad_fixture, head_for, preset_bundle, random_train_bundle, report_from, tuned  # noqa: E402
from _oracles import brute_batches, brute_dfr, brute_knn, brute_resample, brute_tip  # noqa: E402
from robust_adapt.adapter import adapter_embed, grad_check  # noqa: E402
from robust_adapt.baselines import dfr_balance, tip_predict_all, wise_ft  # noqa: E402
from robust_adapt.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint  # noqa: E402
from robust_adapt.dataio import generate_synthetic, load_bundle, preset, save_bundle, split_view  # noqa: E402
from robust_adapt.metrics import embedding_diagnostics, evaluate_groups, lipschitz_upper_bound  # noqa: E402
from robust_adapt.numerics import Rng  # noqa: E402
from robust_adapt.sampling import SamplingConfig, build_contrastive_batches, build_resampled_train, knn_other_class  # noqa: E402
from robust_adapt.trainer import TrainConfig, train, train_linear_probe  # noqa: E402
from robust_adapt.zeroshot import zeroshot_labels  # noqa: E402

SEEDS = (0, 1, 2)


# verdict lines, repeated by conftest in the terminal summary
RESULTS: list[str] = []


def check(number: int, limit_s: float, fn, capsys=None) -> None:
    start = time.perf_counter()
    ok, detail = fn()
    elapsed = time.perf_counter() - start
    in_time = elapsed <= limit_s
    verdict = "PASS" if ok and in_time else "FAIL"
    line = f"{verdict} criterion {number:>2}: {detail} [{elapsed:.1f}s, limit {limit_s:g}s]"
    RESULTS.append(line)
    if capsys is None:
        print(line, flush=True)
    else:
        with capsys.disabled():
            print("\n" + line, flush=True)
    assert ok, detail
    assert in_time, f"took {elapsed:.1f}s, limit {limit_s:g}s"


@functools.lru_cache(maxsize=None)
def tuned_run(name: str, method: str, seed: int, ablation: str = "full"):
    extra = {} if method == "linear_probe" else {"ablation": ablation}
    return tuned(preset_bundle(name), method, seed, **extra)


def zeroshot_test(name: str):
    b = preset_bundle(name)
    te = split_view(b, "test")
    pred = zeroshot_labels(head_for(b), b.samples[te])
    return evaluate_groups(pred, b.class_labels[te], b.group_labels[te])


def pct(v: float) -> str:
    return f"{100 * v:.1f}"


# ---------------------------------------------------------------- criteria


def c1_metric_arithmetic():
    rows = [(36.6, 92.2, 55.6), (74.0, 81.9, 7.9)]
    got = []
    ok = True
    for wg, avg, gap in rows:
        r = report_from(wg, avg)
        g = round(100 * r.gap, 1)
        got.append(f"{pct(r.worst_group_accuracy)}/{pct(r.average_accuracy)} -> gap {g}")
        ok &= abs(100 * r.worst_group_accuracy - wg) < 1e-9 and abs(100 * r.average_accuracy - avg) < 1e-9 and abs(g - gap) < 0.05
    return ok, "; ".join(got)


def c2_gradients():
    worst = 0.0
    for seed in range(30):
        p, head, x, labels = grad_fixture(seed)
        worst = max(
            worst,
            grad_check(p, "ce", dict(batch=x, labels=labels, head=head)),
            grad_check(p, "supcon", dict(anchor=x[0], positives=x[1:3], negatives=x[3:])),
        )
    return worst <= 1e-4, f"max relative error {worst:.2e} over 30 fixtures (CE + contrastive, train-mode BN)"


def c3_oracles():
    mismatches = []
    for seed in range(20):
        rs = np.random.default_rng(1000 + seed)
        n = int(rs.integers(50, 201))
        b = random_train_bundle(1000 + seed, n)
        y = b.class_labels
        pseudo = np.where(rs.random(n) < rs.uniform(0.1, 0.5), rs.integers(0, 3, n), y)
        cfg = SamplingConfig(int(rs.integers(1, 20)), int(rs.integers(1, 8)), 0, seed=seed)
        cfg.num_neighbors = cfg.num_negatives + int(rs.integers(0, 30))
        got = [(bt.anchor, bt.positives.tolist(), bt.negatives.tolist()) for bt in build_contrastive_batches(b, pseudo, cfg)]
        if got != brute_batches(b, pseudo.tolist(), cfg):
            mismatches.append(f"batches/{seed}")
        if build_resampled_train(b, pseudo, Rng(seed)).tolist() != brute_resample(b, pseudo.tolist(), Rng(seed)):
            mismatches.append(f"resample/{seed}")
        x = b.samples.astype(np.float64)
        k = int(rs.integers(1, n))
        for a in range(0, n, 11):
            if knn_other_class(x, y, a, k).tolist() != brute_knn(x.tolist(), y.tolist(), a, k):
                mismatches.append(f"knn/{seed}")
                break
        q = rs.normal(size=(25, b.dim))
        if tip_predict_all(b.samples, y, q).tolist() != [brute_tip(b.samples, y, v) for v in q]:
            mismatches.append(f"tip/{seed}")
        for mode in ("subsample", "upsample"):
            if dfr_balance(b, pseudo, mode, Rng(seed)).tolist() != brute_dfr(b, pseudo.tolist(), mode, Rng(seed)):
                mismatches.append(f"dfr-{mode}/{seed}")
    return not mismatches, f"5 algorithms x 20 seeds, mismatches: {mismatches or 'none'}"


def c4_wiseft_endpoints():
    b = preset_bundle("s1")
    head = head_for(b)
    cfg = TrainConfig(method="linear_probe", max_epochs=30, learning_rate=100.0)
    probe = train_linear_probe(b, head, cfg, normalize_inputs=True).model
    x = b.samples
    zero = int(np.sum(wise_ft(head, probe, 0.0).predict(x) != zeroshot_labels(head, x)))
    one = int(np.sum(wise_ft(head, probe, 1.0).predict(x) != probe.predict(x)))
    return zero == 0 and one == 0, f"alpha=0 vs zero-shot: {zero} differing rows; alpha=1 vs probe: {one} of {len(x)}"


def c5_zeroshot_gap():
    r = zeroshot_test("s1")
    return r.gap >= 0.30, f"S1 zero-shot WG {pct(r.worst_group_accuracy)}, Avg {pct(r.average_accuracy)}, gap {pct(r.gap)} pp (need >= 30)"


def c6_baselines_can_hurt():
    probe = tuned_run("s1", "linear_probe", 0).test.worst_group_accuracy
    ours = tuned_run("s1", "adapter_contrastive", 0).test.worst_group_accuracy
    erm = tuned_run("s2", "adapter_erm", 0).test
    ok = ours - probe >= 0.10 and erm.gap <= 0.05
    return ok, (
        f"S1 probe WG {pct(probe)} vs contrastive {pct(ours)} (margin {pct(ours - probe)} pp, need >= 10); "
        f"S2 ERM adapter WG {pct(erm.worst_group_accuracy)} vs Avg {pct(erm.average_accuracy)} (gap {pct(erm.gap)}, need <= 5)"
    )


def c7_consistent_improvement():
    need = {"s1": 0.20, "s2": 0.05, "s3": 0.05}
    ok, parts = True, []
    for name, margin in need.items():
        zs = zeroshot_test(name).worst_group_accuracy
        gains = [tuned_run(name, "adapter_contrastive", s).test.worst_group_accuracy - zs for s in SEEDS]
        ok &= min(gains) >= margin
        parts.append(f"{name.upper()} +{'/'.join(pct(g) for g in gains)} (need {pct(margin)})")
    return ok, "WG gain over zero-shot, pp: " + "; ".join(parts)


def c8_diagnostics():
    b = preset_bundle("s1")
    te = split_view(b, "test")
    y, g = b.class_labels[te], b.group_labels[te]
    align0, cos0 = embedding_diagnostics(b.samples[te], y, g, b.n_classes)
    ok, parts = True, []
    for s in SEEDS:
        r = tuned_run("s1", "adapter_contrastive", s).test
        for c in range(b.n_classes):
            a1, c1 = r.alignment_per_class[c], r.cross_group_cosine_per_class[c]
            ok &= c1 > cos0[c] and a1 < align0[c]
            parts.append(f"s{s}/c{c} cos {cos0[c]:.3f}->{c1:.3f} align {align0[c]:.3f}->{a1:.3f}")
    return ok, "; ".join(parts)


def c9_ablations():
    means = {
        ab: float(np.mean([tuned_run("s1", "adapter_contrastive", s, ab).test.worst_group_accuracy for s in SEEDS]))
        for ab in ("full", "no_contrastive", "no_ce")
    }
    ok = all(means["full"] >= v for v in means.values())
    return ok, "mean S1 WG over 3 seeds: " + ", ".join(f"{k} {pct(v)}" for k, v in means.items())


def c10_lipschitz():
    b = preset_bundle("s1")
    cfg = TrainConfig(max_epochs=3, hidden_dim=8, learning_rate=1e-3, seed=0)
    p = train(b, head_for(b), cfg).model
    bound = lipschitz_upper_bound(p)
    rs = np.random.default_rng(0)
    x = b.samples.astype(np.float64)
    i, j = rs.integers(0, len(x), 500), rs.integers(0, len(x), 500)
    keep = i != j
    a = np.vstack([x[i[keep]], x[:500]])
    c = np.vstack([x[j[keep]], x[:500] + rs.normal(size=(500, b.dim)) * rs.uniform(1e-4, 1e-1, (500, 1))])
    a, c = a[:1000], c[:1000]
    slopes = np.linalg.norm(adapter_embed(p, a) - adapter_embed(p, c), axis=1) / np.linalg.norm(a - c, axis=1)
    violations = int(np.sum(slopes > bound))
    return violations == 0, f"bound {bound:.3f}, max sampled slope {slopes.max():.3f} over {len(slopes)} pairs, violations {violations}"


def c11_determinism():
    problems = []
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        b1, b2 = generate_synthetic(preset("s1")), generate_synthetic(preset("s1"))
        save_bundle(b1, root / "a")
        save_bundle(b2, root / "b")
        for f in sorted(os.listdir(root / "a")):
            if (root / "a" / f).read_bytes() != (root / "b" / f).read_bytes():
                problems.append(f"bundle {f}")
        if not load_bundle(root / "a").equals(b1):
            problems.append("bundle round-trip")
        cfg = TrainConfig(max_epochs=2, hidden_dim=8, seed=3)
        head = head_for(b1)
        r1, r2 = train(b1, head, cfg), train(b2, head, cfg)
        if r1.to_json() != r2.to_json():
            problems.append("report")
        if checkpoint_bytes(r1.model) != checkpoint_bytes(r2.model):
            problems.append("checkpoint")
        save_checkpoint(r1.model, root / "m.bin")
        back = load_checkpoint(root / "m.bin")
        if checkpoint_bytes(back) != (root / "m.bin").read_bytes() or not np.array_equal(
            adapter_embed(back, b1.samples), adapter_embed(r1.model, b1.samples)
        ):
            problems.append("checkpoint round-trip")
    return not problems, f"bundles, reports, checkpoints byte-identical; round-trips exact; problems: {problems or 'none'}"


CRITERIA = [
    (1, 1, c1_metric_arithmetic),
    (2, 30, c2_gradients),
    (3, 30, c3_oracles),
    (4, 5, c4_wiseft_endpoints),
    (5, 5, c5_zeroshot_gap),
    (6, 180, c6_baselines_can_hurt),
    (7, 600, c7_consistent_improvement),
    (8, 600, c8_diagnostics),
    (9, 600, c9_ablations),
    (10, 10, c10_lipschitz),
    (11, 10, c11_determinism),
]


@pytest.mark.parametrize("number,limit,fn", CRITERIA, ids=[f"criterion_{n}" for n, _, _ in CRITERIA])
def test_criterion(number, limit, fn, capsys):
    check(number, limit, fn, capsys)


if __name__ == "__main__":
    failed = 0
    for number, limit, fn in CRITERIA:
        try:
            check(number, limit, fn)
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
