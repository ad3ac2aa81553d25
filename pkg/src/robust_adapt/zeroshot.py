"""Nearest-class-embedding classification and pseudo-labels for sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateClustering, MissingGroupPrompts, ShapeMismatch
from .numerics import Rng, check_finite, normalize_rows, softmax

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.01


@dataclass(frozen=True)
class ZeroShotHead:
    class_matrix: np.ndarray  # (C, D), unit rows
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        m = np.asarray(self.class_matrix, dtype=np.float32)
        if m.ndim != 2:
            raise ShapeMismatch("class_matrix must be 2-D")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        m = np.ascontiguousarray(m)
        m.setflags(write=False)
        object.__setattr__(self, "class_matrix", m)

    @classmethod
    def from_embeddings(cls, class_embeds, temperature: float = DEFAULT_TEMPERATURE) -> "ZeroShotHead":
        return cls(normalize_rows(class_embeds).astype(np.float32), temperature)

    @property
    def n_classes(self) -> int:
        return self.class_matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.class_matrix.shape[1]


@dataclass(frozen=True)
class Prediction:
    probs: np.ndarray
    label: int


def _argmax_lowest(scores: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, which is the tie rule we want
    return np.argmax(scores, axis=-1)


def similarities(head: ZeroShotHead, samples) -> np.ndarray:
    """Cosine similarity of every sample row to every class embedding, float64."""
    x = np.asarray(samples)
    if x.ndim != 2 or x.shape[1] != head.dim:
        raise ShapeMismatch(f"samples of shape {x.shape} against head dimension {head.dim}")
    check_finite(x, "samples")
    return normalize_rows(x) @ head.class_matrix.astype(np.float64).T


def zeroshot_predict_all(head: ZeroShotHead, samples) -> list[Prediction]:
    x = np.asarray(samples)
    if x.size == 0:
        return []
    sims = similarities(head, x)
    probs = softmax(sims / head.temperature)
    labels = _argmax_lowest(sims)
    return [Prediction(p, int(l)) for p, l in zip(probs, labels)]


def zeroshot_labels(head: ZeroShotHead, samples) -> np.ndarray:
    x = np.asarray(samples)
    if x.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return _argmax_lowest(similarities(head, x)).astype(np.int64)


def zeroshot_predict(head: ZeroShotHead, u) -> Prediction:
    u = np.asarray(u)
    if u.ndim != 1 or u.shape[0] != head.dim:
        raise ShapeMismatch(f"sample of shape {u.shape} against head dimension {head.dim}")
    return zeroshot_predict_all(head, u[None, :])[0]


def group_prompt_predict(bundle, u, temperature: float = DEFAULT_TEMPERATURE) -> Prediction:
    """Classify against every (class, group) prompt; a class scores its best prompt."""
    if bundle.group_prompt_embeds is None:
        raise MissingGroupPrompts("bundle has no group prompt embeddings")
    return group_prompt_predict_all(bundle, np.asarray(u)[None, :], temperature)[0]


def group_prompt_predict_all(bundle, samples, temperature: float = DEFAULT_TEMPERATURE) -> list[Prediction]:
    if bundle.group_prompt_embeds is None:
        raise MissingGroupPrompts("bundle has no group prompt embeddings")
    x = np.asarray(samples)
    if x.size == 0:
        return []
    prompts = normalize_rows(bundle.group_prompt_embeds)
    if x.ndim != 2 or x.shape[1] != prompts.shape[1]:
        raise ShapeMismatch(f"samples of shape {x.shape} against prompt dimension {prompts.shape[1]}")
    sims = normalize_rows(x) @ prompts.T
    prompt_class = bundle.group_prompt_index[:, 0]
    C = bundle.n_classes
    class_scores = np.full((x.shape[0], C), -np.inf)
    for c in range(C):
        cols = np.flatnonzero(prompt_class == c)
        if cols.size:
            class_scores[:, c] = sims[:, cols].max(axis=1)
    # the argmax prompt's class is the argmax of per-class maxima
    labels = _argmax_lowest(class_scores)
    has_prompt = np.isfinite(class_scores)
    scaled = np.where(has_prompt, class_scores, 0.0) / temperature
    scaled -= np.max(np.where(has_prompt, scaled, -np.inf), axis=1, keepdims=True)
    e = np.where(has_prompt, np.exp(scaled), 0.0)
    probs = e / e.sum(axis=1, keepdims=True)
    return [Prediction(p, int(l)) for p, l in zip(probs, labels)]


def pseudolabel_zeroshot(head: ZeroShotHead, samples, labels) -> tuple[np.ndarray, np.ndarray]:
    """Zero-shot predictions and the boolean mask of correct ones."""
    pred = zeroshot_labels(head, samples)
    return pred, pred == np.asarray(labels)


# ---------------------------------------------------------------- k-means


def _sq_dists(x, centers):
    return np.maximum(
        np.einsum("ij,ij->i", x, x)[:, None] - 2.0 * x @ centers.T + np.einsum("ij,ij->i", centers, centers)[None, :],
        0.0,
    )


def kmeans_pp_init(x: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    n = x.shape[0]
    first = rng.integers(n)
    centers = [x[first]]
    d2 = _sq_dists(x, x[first][None, :])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise DegenerateClustering("k-means++ seeding found fewer distinct points than clusters")
        r = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
        idx = min(idx, n - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x[idx][None, :])[:, 0])
    return np.array(centers)


def lloyd(x: np.ndarray, centers: np.ndarray, iters: int):
    """Lloyd iterations; returns ``(assign, centers, sse_history)``.

    An empty cluster keeps its previous center.
    """
    history = []
    assign = None
    for _ in range(iters):
        d2 = _sq_dists(x, centers)
        new_assign = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(x)), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(centers.shape[0]):
            members = x[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    d2 = _sq_dists(x, centers)
    assign = np.argmin(d2, axis=1)
    history.append(float(d2[np.arange(len(x)), assign].sum()))
    return assign, centers, history


def kmeans(x, k: int, iters: int = 100, restarts: int = 5, rng: Rng | None = None):
    """Best of ``restarts`` k-means++ / Lloyd runs by within-cluster SSE."""
    x = normalize_rows(x)
    if x.shape[0] < k:
        raise DegenerateClustering(f"{x.shape[0]} points cannot form {k} clusters")
    rng = rng if rng is not None else Rng(0)
    best = None
    for r in range(restarts):
        sub = rng.spawn(r)
        centers = kmeans_pp_init(x, k, sub)
        assign, centers, history = lloyd(x, centers.copy(), iters)
        sse = history[-1]
        if best is None or sse < best[0]:
            best = (sse, assign)
    return best[1]


def pseudolabel_kmeans(head: ZeroShotHead, samples, labels, iters: int = 100, restarts: int = 5, rng: Rng | None = None):
    """Cluster with k = C, then name each cluster by its majority zero-shot label."""
    samples = np.asarray(samples)
    k = head.n_classes
    clusters = kmeans(samples, k, iters, restarts, rng)
    counts = np.bincount(clusters, minlength=k)
    if np.any(counts == 0):
        raise DegenerateClustering(f"empty cluster(s) {np.flatnonzero(counts == 0).tolist()}")
    zs = zeroshot_labels(head, samples)
    mapping = np.zeros(k, dtype=np.int64)
    for j in range(k):
        votes = np.bincount(zs[clusters == j], minlength=k)
        mapping[j] = int(np.argmax(votes))
    pred = mapping[clusters]
    return pred, pred == np.asarray(labels)
