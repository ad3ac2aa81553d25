"""Linear classification head shared by the probe, DFR, and WiSE-FT."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .numerics import Rng, check_finite, log_softmax, normalize_rows, softmax


@dataclass(eq=False)
class LinearHead:
    weights: np.ndarray  # (C, D)
    bias: np.ndarray  # (C,)
    normalize_inputs: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights)
        b = np.asarray(self.bias)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ShapeMismatch(f"weights {w.shape} and bias {b.shape} do not form a head")
        check_finite(w, "head weights")
        check_finite(b, "head bias")
        self.weights, self.bias = w, b

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def logits(self, samples) -> np.ndarray:
        x = np.asarray(samples, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeMismatch(f"samples {x.shape} against head dimension {self.dim}")
        if self.normalize_inputs:
            x = normalize_rows(x)
        return x @ self.weights.astype(np.float64).T + self.bias.astype(np.float64)

    def predict(self, samples) -> np.ndarray:
        x = np.asarray(samples)
        if x.shape[0] == 0:
            return np.zeros(0, dtype=np.int64)
        return np.argmax(self.logits(x), axis=1).astype(np.int64)


def init_linear(n_classes: int, dim: int, rng: Rng, dtype=np.float32) -> LinearHead:
    bound = 1.0 / np.sqrt(dim)
    w = (rng.uniforms(n_classes * dim) * 2.0 - 1.0) * bound
    b = (rng.uniforms(n_classes) * 2.0 - 1.0) * bound
    return LinearHead(w.reshape(n_classes, dim).astype(dtype), b.astype(dtype))


def linear_ce_loss(head: LinearHead, samples, labels):
    """Mean softmax cross-entropy and its gradients ``{"weights", "bias"}``."""
    y = np.asarray(labels, dtype=np.int64)
    x = np.asarray(samples, dtype=np.float64)
    if y.shape != (x.shape[0],):
        raise ShapeMismatch("labels must have one entry per sample")
    if head.normalize_inputs:
        x = normalize_rows(x)
    logits = x @ head.weights.astype(np.float64).T + head.bias.astype(np.float64)
    n = x.shape[0]
    loss = -float(log_softmax(logits)[np.arange(n), y].mean())
    d = softmax(logits)
    d[np.arange(n), y] -= 1.0
    d /= n
    return loss, {"weights": d.T @ x, "bias": d.sum(axis=0)}
