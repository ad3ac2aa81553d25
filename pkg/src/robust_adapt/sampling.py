"""Contrastive batch construction and pseudo-label-balanced resampling.

Everything here works on the pretrained embeddings of the train split and
returns global bundle row indices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dataio import EmbeddingBundle, split_view
from .errors import InvalidSpec, NoPositives, ShapeMismatch
from .numerics import Rng, derive_seed, normalize_rows

log = logging.getLogger(__name__)


@dataclass
class SamplingConfig:
    num_positives: int = 512
    num_negatives: int = 512
    num_neighbors: int = 1024
    seed: int = 0
    # positives must also carry a different pseudo-label than the anchor
    distinct_pseudo: bool = False
    strict: bool = False  # raise NoPositives instead of dropping anchors

    def validate(self) -> None:
        if self.num_positives < 1:
            raise InvalidSpec("num_positives must be >= 1")
        if not 1 <= self.num_negatives <= self.num_neighbors:
            raise InvalidSpec("need 1 <= num_negatives <= num_neighbors")


@dataclass(frozen=True)
class ContrastiveBatch:
    anchor: int
    positives: np.ndarray
    negatives: np.ndarray


def knn_other_class(samples, labels, anchor_idx: int, k: int, candidates=None) -> np.ndarray:
    """The ``k`` rows most cosine-similar to the anchor among rows of another class.

    ``candidates`` restricts the pool (e.g. to the train split); the result
    is in descending similarity, ties to the lower row index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(samples)
    y = np.asarray(labels)
    if y.shape != (x.shape[0],):
        raise ShapeMismatch("labels must have one entry per sample row")
    pool = np.arange(x.shape[0]) if candidates is None else np.asarray(candidates, dtype=np.int64)
    pool = pool[y[pool] != y[anchor_idx]]
    if pool.size == 0:
        return pool
    sims = normalize_rows(x[pool]) @ normalize_rows(x[anchor_idx][None, :])[0]
    order = np.lexsort((pool, -sims))
    return pool[order[:k]]


def _train_pseudo(bundle: EmbeddingBundle, pseudo_labels):
    train = split_view(bundle, "train")
    pred = np.asarray(pseudo_labels, dtype=np.int64)
    if pred.shape != train.shape:
        raise ShapeMismatch(f"{pred.size} pseudo-labels for {train.size} train samples")
    y = bundle.class_labels[train].astype(np.int64)
    return train, y, pred, pred == y


def build_contrastive_batches(bundle: EmbeddingBundle, pseudo_labels, cfg: SamplingConfig) -> list[ContrastiveBatch]:
    """One batch per pseudo-incorrect train sample, in train-split order.

    Positives are same-class pseudo-correct samples: ``num_positives`` drawn
    without replacement, or every candidate if there are fewer. Negatives are
    ``num_negatives`` drawn without replacement from the ``num_neighbors``
    nearest other-class train samples. Each anchor draws from its own stream
    derived from ``(cfg.seed, anchor index)``.
    """
    cfg.validate()
    train, y, pred, correct = _train_pseudo(bundle, pseudo_labels)
    anchors = np.flatnonzero(~correct)
    if anchors.size == 0:
        return []
    z = normalize_rows(bundle.samples[train])
    # similarities of every anchor to the train pool, computed once
    sims = z[anchors] @ z.T
    pos_by_class = {c: np.flatnonzero((y == c) & correct) for c in np.unique(y[anchors]).tolist()}
    batches = []
    dropped: dict[int, int] = {}
    for row, a in enumerate(anchors.tolist()):
        ya = int(y[a])
        cand = pos_by_class[ya]
        if cfg.distinct_pseudo:
            cand = cand[pred[cand] != pred[a]]
        if cand.size == 0:
            if cfg.strict:
                raise NoPositives(ya)
            dropped[ya] = dropped.get(ya, 0) + 1
            continue
        rng = Rng(derive_seed(cfg.seed, int(train[a])))
        if cand.size > cfg.num_positives:
            positives = cand[rng.choice(cand.size, cfg.num_positives)]
        else:
            positives = cand.copy()
        pool = np.flatnonzero(y != ya)
        s = sims[row, pool]
        nearest = pool[np.lexsort((pool, -s))[: cfg.num_neighbors]]
        m = min(cfg.num_negatives, nearest.size)
        negatives = nearest[rng.choice(nearest.size, m)] if m else nearest[:0]
        batches.append(ContrastiveBatch(int(train[a]), train[positives], train[negatives]))
    for c, n in sorted(dropped.items()):
        log.warning("class %d: dropped %d anchor(s) with no pseudo-correct positives", c, n)
    return batches


def build_resampled_train(bundle: EmbeddingBundle, pseudo_labels, rng: Rng) -> np.ndarray:
    """Per class, pseudo-correct indices followed by as many draws (with replacement) from the incorrect ones.

    A class with no incorrect samples contributes its correct samples; one
    with no correct samples contributes its incorrect samples unexpanded.
    """
    train, y, _, correct = _train_pseudo(bundle, pseudo_labels)
    parts = []
    for c in range(bundle.n_classes):
        pos = np.flatnonzero((y == c) & correct)
        neg = np.flatnonzero((y == c) & ~correct)
        if neg.size == 0:
            parts.append(pos)
        elif pos.size == 0:
            log.warning("class %d has no pseudo-correct samples; keeping %d incorrect as-is", c, neg.size)
            parts.append(neg)
        else:
            parts.append(pos)
            parts.append(neg[rng.choice(neg.size, pos.size, replace=True)])
    if not parts:
        return np.zeros(0, dtype=np.int64)
    return train[np.concatenate(parts)].astype(np.int64)
