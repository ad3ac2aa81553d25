"""Two-layer bottleneck adapter with batch norm and hand-written backward passes.

Forward (row-vector convention, ``x`` is B x D)::

    z   = x @ w1 + b1                      (B x H)
    h   = gamma * (z - mean) / sqrt(var + eps) + beta
    out = relu(h) @ w2 + b2                (B x D)

Train mode normalizes with the batch mean and biased batch variance and
moves the running statistics by ``bn_momentum``; eval mode uses the running
statistics. In train mode ``b1`` cancels inside the centering, so it is
subtracted out before rounding and its gradient is exactly zero.

All arithmetic runs in float64 whatever the parameter dtype.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, fields

import numpy as np

from .errors import BatchTooSmall, EmptyPositives, ShapeMismatch
from .numerics import NORM_EPS, Rng, log_softmax, softmax

TRAINABLE = ("w1", "b1", "bn_gamma", "bn_beta", "w2", "b2")


@dataclass
class LossConfig:
    ce_temperature: float = 0.01
    contrastive_temperature: float = 0.1

    def __post_init__(self):
        if not (self.ce_temperature > 0 and self.contrastive_temperature > 0):
            raise ValueError("temperatures must be positive")


@dataclass(eq=False)
class AdapterParams:
    w1: np.ndarray  # (D, H)
    b1: np.ndarray  # (H,)
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    w2: np.ndarray  # (H, D)
    b2: np.ndarray  # (D,)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    use_batchnorm: bool = True

    @property
    def dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if isinstance(getattr(self, f.name), np.ndarray)}

    def copy(self) -> "AdapterParams":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "AdapterParams":
        p = self.copy()
        for name, arr in p.arrays().items():
            setattr(p, name, arr.astype(dtype))
        return p


def init_adapter(dim: int, hidden: int, rng: Rng, use_batchnorm: bool = True, dtype=np.float32) -> AdapterParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; unit BN scale."""
    b_in = 1.0 / np.sqrt(dim)
    b_hid = 1.0 / np.sqrt(hidden)

    def uni(n, bound):
        return (rng.uniforms(n) * 2.0 - 1.0) * bound

    w1 = uni(dim * hidden, b_in).reshape(dim, hidden)
    b1 = uni(hidden, b_in)
    w2 = uni(hidden * dim, b_hid).reshape(hidden, dim)
    b2 = uni(dim, b_hid)
    return AdapterParams(
        w1=w1.astype(dtype),
        b1=b1.astype(dtype),
        bn_gamma=np.ones(hidden, dtype=dtype),
        bn_beta=np.zeros(hidden, dtype=dtype),
        bn_running_mean=np.zeros(hidden, dtype=dtype),
        bn_running_var=np.ones(hidden, dtype=dtype),
        w2=w2.astype(dtype),
        b2=b2.astype(dtype),
        use_batchnorm=use_batchnorm,
    )


def _fixed_order_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` accumulated over the inner axis in index order.

    BLAS picks different kernels (and rounding) for different batch shapes;
    this keeps every output row independent of the rest of the batch.
    """
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[k]
    return out


def adapter_forward(p: AdapterParams, batch, mode: str = "eval", update_stats: bool = True):
    """Returns ``(out, cache)``; ``out`` is float64 (B x D).

    Eval mode is row-independent bit for bit: a row gives the same output
    alone or inside any batch.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.dim:
        raise ShapeMismatch(f"batch of shape {x.shape} for adapter dimension {p.dim}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    w1 = p.w1.astype(np.float64)
    b1 = p.b1.astype(np.float64)
    matmul = _fixed_order_matmul if mode == "eval" else np.matmul
    xw = matmul(x, w1)
    cache = {"x": x, "mode": mode}
    if p.use_batchnorm:
        gamma = p.bn_gamma.astype(np.float64)
        beta = p.bn_beta.astype(np.float64)
        if mode == "train":
            if x.shape[0] < 2:
                raise BatchTooSmall(f"train-mode batch norm needs at least 2 rows, got {x.shape[0]}")
            mu = xw.mean(axis=0)
            centered = xw - mu
            var = (centered * centered).mean(axis=0)
            if update_stats:
                m = p.bn_momentum
                dt = p.bn_running_mean.dtype
                p.bn_running_mean = ((1 - m) * p.bn_running_mean.astype(np.float64) + m * (mu + b1)).astype(dt)
                p.bn_running_var = ((1 - m) * p.bn_running_var.astype(np.float64) + m * var).astype(dt)
        else:
            centered = xw + b1 - p.bn_running_mean.astype(np.float64)
            var = p.bn_running_var.astype(np.float64)
        inv_std = 1.0 / np.sqrt(var + p.bn_eps)
        xhat = centered * inv_std
        h = gamma * xhat + beta
        cache.update(xhat=xhat, inv_std=inv_std)
    else:
        h = xw + b1
    a = np.maximum(h, 0.0)
    out = matmul(a, p.w2.astype(np.float64)) + p.b2.astype(np.float64)
    cache.update(h=h, a=a)
    return out, cache


def adapter_backward(p: AdapterParams, cache, d_out) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every trainable field, given dL/d(out)."""
    x, h, a = cache["x"], cache["h"], cache["a"]
    d_out = np.asarray(d_out, dtype=np.float64)
    grads = {
        "w2": a.T @ d_out,
        "b2": d_out.sum(axis=0),
    }
    dh = (d_out @ p.w2.astype(np.float64).T) * (h > 0)
    if p.use_batchnorm:
        xhat, inv_std = cache["xhat"], cache["inv_std"]
        grads["bn_gamma"] = (dh * xhat).sum(axis=0)
        grads["bn_beta"] = dh.sum(axis=0)
        dxhat = dh * p.bn_gamma.astype(np.float64)
        if cache["mode"] == "train":
            n = x.shape[0]
            dz = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            grads["b1"] = np.zeros(p.hidden)
        else:
            dz = dxhat * inv_std
            grads["b1"] = dz.sum(axis=0)
    else:
        dz = dh
        grads["bn_gamma"] = np.zeros(p.hidden)
        grads["bn_beta"] = np.zeros(p.hidden)
        grads["b1"] = dz.sum(axis=0)
    grads["w1"] = x.T @ dz
    return grads


def _normalize_with_grad(f):
    norms = np.sqrt(np.einsum("ij,ij->i", f, f))
    safe = np.maximum(norms, NORM_EPS)
    fhat = f / safe[:, None]

    def back(d_fhat):
        radial = np.einsum("ij,ij->i", fhat, d_fhat)
        # below eps the map is f / eps, a plain scaling
        proj = np.where((norms > NORM_EPS)[:, None], d_fhat - fhat * radial[:, None], d_fhat)
        return proj / safe[:, None]

    return fhat, back


def ce_logits(p: AdapterParams, batch, head, temperature: float, mode: str = "eval") -> np.ndarray:
    out, _ = adapter_forward(p, batch, mode, update_stats=False)
    fhat, _ = _normalize_with_grad(out)
    return fhat @ head.class_matrix.astype(np.float64).T / temperature


def ce_loss(p: AdapterParams, batch, labels, head, cfg: LossConfig, mode: str = "train", update_stats: bool = True):
    """Mean InfoNCE-form cross-entropy against frozen class embeddings.

    Returns ``(loss, grads)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    x = np.asarray(batch)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ShapeMismatch(f"batch {x.shape} and labels {labels.shape} are not aligned")
    if head.dim != p.dim:
        raise ShapeMismatch(f"head dimension {head.dim} differs from adapter dimension {p.dim}")
    out, cache = adapter_forward(p, x, mode, update_stats)
    fhat, back = _normalize_with_grad(out)
    V = head.class_matrix.astype(np.float64)
    tau = cfg.ce_temperature
    logits = fhat @ V.T / tau
    logp = log_softmax(logits)
    n = x.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    d_logits = softmax(logits)
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n
    d_out = back(d_logits @ V / tau)
    return loss, adapter_backward(p, cache, d_out)


def supcon_loss(p: AdapterParams, anchor, positives, negatives, cfg: LossConfig, mode: str = "train", update_stats: bool = True):
    """Supervised contrastive loss for one anchor; each positive competes only with the negatives.

    Anchor, positives and negatives pass through the adapter as one batch.
    Returns ``(loss, grads)``.
    """
    a = np.asarray(anchor, dtype=np.float64).reshape(1, -1)
    pos = np.asarray(positives, dtype=np.float64)
    neg = np.asarray(negatives, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[0] == 0:
        raise EmptyPositives("supcon_loss needs at least one positive")
    if neg.size == 0:
        neg = np.zeros((0, a.shape[1]))
    if not (a.shape[1] == pos.shape[1] == neg.shape[1] == p.dim):
        raise ShapeMismatch("anchor, positives and negatives must share the adapter dimension")
    P, M = pos.shape[0], neg.shape[0]
    out, cache = adapter_forward(p, np.vstack([a, pos, neg]), mode, update_stats)
    z, back = _normalize_with_grad(out)
    za, zp, zn = z[0], z[1 : 1 + P], z[1 + P :]
    tau = cfg.contrastive_temperature
    s_pos = zp @ za / tau  # (P,)
    s_neg = zn @ za / tau  # (M,)
    # each positive competes with the shared negatives only:
    # L_j = logaddexp(s_pos[j], lse(s_neg)), computed without the P x (M+1) matrix
    if M:
        top = s_neg.max()
        lse_neg = top + np.log(np.exp(s_neg - top).sum())
        denom = np.logaddexp(s_pos, lse_neg)
    else:
        lse_neg = -np.inf
        denom = s_pos
    loss = float((denom - s_pos).mean())
    q_pos = np.exp(s_pos - denom)
    d_spos = -(1.0 - q_pos) / P
    # sum_j exp(s_neg - L_j) = exp(s_neg - lse_neg) * sum_j exp(lse_neg - L_j)
    d_sneg = np.exp(s_neg - lse_neg) * np.exp(lse_neg - denom).sum() / P if M else s_neg
    dz = np.zeros_like(z)
    dz[0] = (d_spos @ zp + d_sneg @ zn) / tau
    dz[1 : 1 + P] = d_spos[:, None] * za[None, :] / tau
    dz[1 + P :] = d_sneg[:, None] * za[None, :] / tau
    return loss, adapter_backward(p, cache, back(dz))


def adapter_embed(p: AdapterParams, samples, chunk: int = 4096) -> np.ndarray:
    """Eval-mode adapter outputs, float64, row-independent."""
    x = np.asarray(samples)
    outs = [adapter_forward(p, x[i : i + chunk], "eval", update_stats=False)[0] for i in range(0, x.shape[0], chunk)]
    return np.vstack(outs) if outs else np.zeros((0, p.dim))


def grad_check(
    p: AdapterParams, loss_kind: str, fixture: dict, epsilon: float = 1e-3, cfg: LossConfig | None = None, order: int = 4
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``order=4`` uses the five-point stencil, whose O(h^4) truncation allows a
    step large enough that roundoff does not swamp tiny gradient entries;
    ``order=2`` is the plain two-point difference.

    ``fixture`` holds ``batch``/``labels``/``head`` for ``"ce"`` or
    ``anchor``/``positives``/``negatives`` for ``"supcon"``, plus an optional
    ``mode``. Everything is evaluated on a float64 copy of ``p``; running
    statistics are never updated.
    """
    cfg = cfg or LossConfig()
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    q = p.astype(np.float64)
    mode = fixture.get("mode", "train")
    if loss_kind == "ce":
        rows = np.asarray(fixture["batch"], dtype=np.float64)
    elif loss_kind == "supcon":
        rows = np.vstack(
            [np.reshape(fixture["anchor"], (1, -1)), fixture["positives"], np.reshape(fixture["negatives"], (-1, q.dim))]
        )
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")

    def evaluate(params):
        if loss_kind == "ce":
            return ce_loss(params, fixture["batch"], fixture["labels"], fixture["head"], cfg, mode, update_stats=False)
        return supcon_loss(params, fixture["anchor"], fixture["positives"], fixture["negatives"], cfg, mode, update_stats=False)

    def relu_pattern(params):
        return adapter_forward(params, rows, mode, update_stats=False)[1]["h"] > 0

    base_pattern = relu_pattern(q)
    steps = (1, -1) if order == 2 else (1, -1, 2, -2)
    _, analytic = evaluate(q)
    worst = 0.0
    for name in TRAINABLE:
        flat = getattr(q, name).reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = epsilon
            while True:
                vals = {}
                smooth = True
                for k in steps:
                    flat[i] = orig + k * h
                    vals[k] = evaluate(q)[0]
                    smooth = smooth and np.array_equal(relu_pattern(q), base_pattern)
                flat[i] = orig
                # a stencil straddling a ReLU kink measures the wrong slope
                if smooth or h < 1e-9:
                    break
                h /= 10.0
            if order == 2:
                gfd = (vals[1] - vals[-1]) / (2.0 * h)
            else:
                gfd = (8.0 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12.0 * h)
            err = abs(ga[i] - gfd) / max(1e-8, abs(ga[i]) + abs(gfd))
            worst = max(worst, err)
    return worst
