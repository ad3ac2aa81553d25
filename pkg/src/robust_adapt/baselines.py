"""WiSE-FT weight ensembling, DFR on inferred groups, and nearest-sample lookup."""

from __future__ import annotations

import logging

import numpy as np

from .dataio import EmbeddingBundle, split_view
from .errors import AlphaOutOfRange, DegenerateGroups, EmptyCache, ShapeMismatch
from .linear import LinearHead
from .numerics import Rng, normalize_rows
from .trainer import TrainConfig, TrainReport, pseudo_labels, train_linear_probe
from .zeroshot import ZeroShotHead

__all__ = [
    "LinearHead",
    "zeroshot_as_linear",
    "wise_ft",
    "dfr_balance",
    "dfr_train",
    "tip_lookup",
    "tip_predict_all",
]

log = logging.getLogger(__name__)


def zeroshot_as_linear(head: ZeroShotHead) -> LinearHead:
    """The zero-shot classifier as a linear head on normalized inputs: ``W = V / tau``, no bias."""
    w = head.class_matrix.astype(np.float64) / head.temperature
    return LinearHead(w, np.zeros(head.n_classes), normalize_inputs=True)


def wise_ft(zs_head: ZeroShotHead, probe: LinearHead, alpha: float) -> LinearHead:
    """``alpha * probe + (1 - alpha) * zero-shot`` in weight space, evaluated on normalized inputs."""
    if not 0.0 <= alpha <= 1.0:
        raise AlphaOutOfRange(f"alpha must lie in [0, 1], got {alpha}")
    zs = zeroshot_as_linear(zs_head)
    if probe.weights.shape != zs.weights.shape:
        raise ShapeMismatch(f"probe weights {probe.weights.shape} vs zero-shot {zs.weights.shape}")
    if alpha == 0.0:
        return zs
    w = alpha * probe.weights.astype(np.float64) + (1.0 - alpha) * zs.weights
    return LinearHead(w, alpha * probe.bias.astype(np.float64), normalize_inputs=True)


def dfr_balance(bundle: EmbeddingBundle, pseudo, mode: str, rng: Rng, strict: bool = False) -> np.ndarray:
    """Train-row multiset balancing pseudo-correct and pseudo-incorrect samples within each class.

    ``subsample`` draws the larger side down to the smaller's size without
    replacement; ``upsample`` keeps every row and tops the smaller side up
    with draws with replacement. Classes are emitted in id order, correct
    side first.
    """
    if mode not in ("subsample", "upsample"):
        raise ValueError(f"mode must be 'subsample' or 'upsample', got {mode!r}")
    train = split_view(bundle, "train")
    pred = np.asarray(pseudo, dtype=np.int64)
    if pred.shape != train.shape:
        raise ShapeMismatch(f"{pred.size} pseudo-labels for {train.size} train samples")
    y = bundle.class_labels[train]
    parts = []
    for c in range(bundle.n_classes):
        sides = [np.flatnonzero((y == c) & (pred == y)), np.flatnonzero((y == c) & (pred != y))]
        sizes = [s.size for s in sides]
        if min(sizes) == 0:
            if mode == "subsample" and max(sizes) > 0:
                if strict:
                    raise DegenerateGroups(f"class {c}: an inferred group is empty ({sizes[0]} correct, {sizes[1]} incorrect)")
                log.warning("class %d: an inferred group is empty; keeping the %d nonempty-side samples", c, max(sizes))
            parts.extend(s for s in sides if s.size)
            continue
        if mode == "subsample":
            k = min(sizes)
            for s in sides:
                parts.append(s if s.size == k else np.sort(s[rng.choice(s.size, k)]))
        else:
            k = max(sizes)
            for s in sides:
                parts.append(s)
                if s.size < k:
                    parts.append(s[rng.choice(s.size, k - s.size, replace=True)])
    if not parts:
        return np.zeros(0, dtype=np.int64)
    return train[np.concatenate(parts)].astype(np.int64)


def dfr_train(bundle: EmbeddingBundle, head: ZeroShotHead, mode: str, probe_cfg: TrainConfig, rng: Rng, pseudo=None) -> TrainReport:
    """Linear probe on the pseudo-group-balanced train multiset."""
    if pseudo is None:
        pseudo = pseudo_labels(bundle, head, probe_cfg)
    idx = dfr_balance(bundle, pseudo, mode, rng)
    report = train_linear_probe(bundle, head, probe_cfg, train_indices=idx)
    report.method = f"dfr_{mode}"
    return report


def _check_cache(samples, labels):
    x = np.asarray(samples)
    y = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyCache("lookup cache is empty")
    if y.shape != (x.shape[0],):
        raise ShapeMismatch("cache labels must have one entry per cached sample")
    return x, y


def tip_predict_all(train_samples, train_labels, queries) -> np.ndarray:
    """Label of the most cosine-similar cached sample per query; ties to the lower cache index."""
    x, y = _check_cache(train_samples, train_labels)
    q = np.asarray(queries)
    if q.ndim != 2 or q.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"queries {q.shape} against cache dimension {x.shape[1]}")
    cache = normalize_rows(x)
    out = np.empty(q.shape[0], dtype=np.int64)
    for start in range(0, q.shape[0], 1024):
        sims = normalize_rows(q[start : start + 1024]) @ cache.T
        out[start : start + 1024] = y[np.argmax(sims, axis=1)]
    return out


def tip_lookup(train_samples, train_labels, query) -> int:
    q = np.asarray(query)
    if q.ndim != 1:
        raise ShapeMismatch("query must be a single vector")
    return int(tip_predict_all(train_samples, train_labels, q[None, :])[0])
