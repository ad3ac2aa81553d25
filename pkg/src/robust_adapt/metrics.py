"""Group robustness metrics, embedding diagnostics, and the adapter Lipschitz bound."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyGroup, InsufficientGroups, ShapeMismatch
from .numerics import Rng, normalize_rows, spectral_norm


@dataclass
class GroupAccuracy:
    class_id: int
    group_id: int
    n: int
    correct: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.n


@dataclass
class GroupReport:
    per_group: list[GroupAccuracy]
    average_accuracy: float
    worst_group_accuracy: float
    alignment_per_class: list[float | None] = field(default_factory=list)
    cross_group_cosine_per_class: list[float | None] = field(default_factory=list)

    @property
    def gap(self) -> float:
        return self.average_accuracy - self.worst_group_accuracy

    def to_dict(self) -> dict:
        return {
            "per_group": [
                {"class": g.class_id, "group": g.group_id, "n": g.n, "correct": g.correct, "accuracy": g.accuracy}
                for g in self.per_group
            ],
            "average_accuracy": self.average_accuracy,
            "worst_group_accuracy": self.worst_group_accuracy,
            "gap": self.gap,
            "alignment_per_class": self.alignment_per_class,
            "cross_group_cosine_per_class": self.cross_group_cosine_per_class,
        }


def evaluate_groups(predictions, labels, groups, cells=None) -> GroupReport:
    """Per-(class, group) accuracy, sample-weighted average, and worst group.

    ``cells`` lists the (class, group) pairs that must be evaluated; any of
    them without samples raises ``EmptyGroup``. By default the cells present
    in ``labels``/``groups`` are used.
    """
    pred = np.asarray(predictions)
    y = np.asarray(labels)
    g = np.asarray(groups)
    if not (pred.shape == y.shape == g.shape) or pred.ndim != 1:
        raise ShapeMismatch(f"predictions {pred.shape}, labels {y.shape}, groups {g.shape} must be aligned vectors")
    if pred.size == 0:
        raise EmptyGroup("no samples to evaluate")
    if cells is None:
        cells = sorted({(int(a), int(b)) for a, b in zip(y.tolist(), g.tolist())})
    correct = pred == y
    per_group = []
    for c, k in cells:
        mask = (y == c) & (g == k)
        n = int(mask.sum())
        if n == 0:
            raise EmptyGroup(f"(class {c}, group {k}) has no samples")
        per_group.append(GroupAccuracy(c, k, n, int(correct[mask].sum())))
    avg = float(correct.sum()) / pred.size
    worst = min(pg.accuracy for pg in per_group)
    return GroupReport(per_group, avg, worst)


def _class_group_rows(embeddings, labels, groups, class_id):
    z = normalize_rows(embeddings)
    y = np.asarray(labels)
    g = np.asarray(groups)
    in_class = np.flatnonzero(y == class_id)
    group_ids = sorted(set(g[in_class].tolist()))
    if len(group_ids) < 2:
        raise InsufficientGroups(f"class {class_id} has {len(group_ids)} group(s) with samples; need 2")
    return z, in_class, g, group_ids


def _cross_group_pairs(z, in_class, g, group_ids, fn):
    # fixed chunking over group pairs keeps the reduction order deterministic
    total = 0.0
    count = 0
    for a_i, a in enumerate(group_ids):
        rows_a = z[in_class[g[in_class] == a]]
        for b in group_ids[a_i + 1 :]:
            rows_b = z[in_class[g[in_class] == b]]
            vals = fn(rows_a, rows_b)
            total += float(vals.sum())
            count += vals.size
    return total / count


def _pair_distances(a, b):
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        diff = b - a[i]
        out[i] = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return out


def alignment_loss(embeddings, labels, groups, class_id: int) -> float:
    """Mean Euclidean distance between normalized same-class, different-group pairs."""
    z, in_class, g, group_ids = _class_group_rows(embeddings, labels, groups, class_id)
    return _cross_group_pairs(z, in_class, g, group_ids, _pair_distances)


def cross_group_cosine(embeddings, labels, groups, class_id: int) -> float:
    """Mean cosine similarity between same-class, different-group pairs."""
    z, in_class, g, group_ids = _class_group_rows(embeddings, labels, groups, class_id)
    return _cross_group_pairs(z, in_class, g, group_ids, lambda a, b: a @ b.T)


def embedding_diagnostics(embeddings, labels, groups, n_classes: int):
    """Per-class (alignment, cosine); ``None`` where a class has a single group."""
    align, cos = [], []
    for c in range(n_classes):
        try:
            align.append(alignment_loss(embeddings, labels, groups, c))
            cos.append(cross_group_cosine(embeddings, labels, groups, c))
        except InsufficientGroups:
            align.append(None)
            cos.append(None)
    return align, cos


def bn_scale(params) -> float:
    """Operator norm of the eval-mode batch-norm affine map."""
    if not params.use_batchnorm:
        return 1.0
    gamma = np.asarray(params.bn_gamma, dtype=np.float64)
    var = np.asarray(params.bn_running_var, dtype=np.float64)
    return float(np.max(np.abs(gamma) / np.sqrt(var + params.bn_eps)))


def lipschitz_upper_bound(params, iters: int = 200, seed: int = 0) -> float:
    """Norm-product upper bound on the eval-mode adapter's Lipschitz constant.

    ``||W2|| * max_h |gamma_h| / sqrt(var_h + eps) * ||W1||``; ReLU is
    1-Lipschitz. This is a loose upper bound, not an exact estimate.
    """
    rng = Rng(seed)
    w1 = spectral_norm(params.w1, iters, rng.spawn(1))
    w2 = spectral_norm(params.w2, iters, rng.spawn(2))
    return w2 * bn_scale(params) * w1


def format_table(rows: list[tuple[str, GroupReport]]) -> str:
    """Text table of WG / Avg / Gap in percentage points."""
    name_w = max([len("Method")] + [len(n) for n, _ in rows])
    lines = [f"{'Method':<{name_w}}  {'WG':>6}  {'Avg':>6}  {'Gap':>6}"]
    for name, r in rows:
        lines.append(
            f"{name:<{name_w}}  {100 * r.worst_group_accuracy:6.1f}  {100 * r.average_accuracy:6.1f}  {100 * r.gap:6.1f}"
        )
    return "\n".join(lines)
