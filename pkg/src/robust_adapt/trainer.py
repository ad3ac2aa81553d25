"""SGD training for linear probes, ERM adapters, and contrastive adapters.

Every run is a pure function of the bundle bytes and the ``TrainConfig``:
all randomness flows from ``cfg.seed`` through named child streams.
"""

from __future__ import annotations

import copy
import functools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .adapter import AdapterParams, LossConfig, adapter_embed, ce_loss, init_adapter, supcon_loss
from .dataio import EmbeddingBundle, split_view
from .errors import Diverged, InvalidSpec, NoAnchors, NonFinite, RobustAdaptError
from .linear import LinearHead, init_linear, linear_ce_loss
from .metrics import GroupReport, embedding_diagnostics, evaluate_groups
from .numerics import Rng, derive_seed
from .sampling import SamplingConfig, build_contrastive_batches, build_resampled_train
from .zeroshot import ZeroShotHead, pseudolabel_kmeans, pseudolabel_zeroshot, zeroshot_labels

log = logging.getLogger(__name__)

METHODS = ("linear_probe", "adapter_erm", "adapter_contrastive")
ABLATIONS = ("full", "no_contrastive", "no_ce")
DIVERGENCE_LIMIT = 1e4

# child-stream keys off cfg.seed
_INIT, _PSEUDO, _SAMPLING, _RESAMPLE, _EPOCH, _CE_ORDER = range(1, 7)


@dataclass
class TrainConfig:
    method: str = "adapter_contrastive"
    max_epochs: int = 30
    learning_rate: float = 1e-3
    weight_decay: float = 5e-5
    momentum: float = 0.9
    batch_size: int = 128
    hidden_dim: int = 128
    ce_temperature: float = 0.01
    contrastive_temperature: float = 0.1
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    pseudo_source: str = "zeroshot"
    seed: int = 0
    use_batchnorm: bool = True
    ablation: str = "full"
    # contrastive batches per epoch; 0 means one full pass
    updates_per_epoch: int = 0
    kmeans_restarts: int = 5
    kmeans_iters: int = 100

    def validate(self) -> None:
        if self.method not in METHODS:
            raise InvalidSpec(f"method must be one of {METHODS}, got {self.method!r}")
        if self.ablation not in ABLATIONS:
            raise InvalidSpec(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.pseudo_source not in ("zeroshot", "kmeans"):
            raise InvalidSpec("pseudo_source must be 'zeroshot' or 'kmeans'")
        if self.max_epochs < 1:
            raise InvalidSpec("max_epochs must be >= 1")
        if not (self.learning_rate > 0 and self.ce_temperature > 0 and self.contrastive_temperature > 0):
            raise InvalidSpec("learning rate and temperatures must be positive")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise InvalidSpec("weight_decay must be >= 0 and momentum in [0, 1)")
        if self.batch_size < 2 or self.hidden_dim < 1 or self.updates_per_epoch < 0:
            raise InvalidSpec("batch_size >= 2, hidden_dim >= 1, updates_per_epoch >= 0 required")
        self.sampling.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown train config keys {sorted(unknown)}")
        if isinstance(d.get("sampling"), dict):
            d["sampling"] = SamplingConfig(**d["sampling"])
        return cls(**d)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.ce_temperature, self.contrastive_temperature)


# ---------------------------------------------------------------- optimizer


def sgd_step(params: dict, grads: dict, velocity: dict | None, lr: float, momentum: float, weight_decay: float, decay=None):
    """One SGD-with-momentum step; returns ``(new_params, new_velocity)``.

    ``v = momentum * v + g + weight_decay * w`` then ``w = w - lr * v``.
    Weight decay touches only the names in ``decay`` (all of ``grads`` when
    ``decay`` is None). Parameters keep their dtype; velocity is float64.
    """
    velocity = velocity or {}
    decay = set(grads) if decay is None else set(decay)
    new_p, new_v = dict(params), {}
    for name, g in grads.items():
        w = np.asarray(params[name])
        g = np.asarray(g, dtype=np.float64)
        if g.shape != w.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {w.shape}")
        w64 = w.astype(np.float64)
        if name in decay and weight_decay:
            g = g + weight_decay * w64
        v = momentum * velocity.get(name, 0.0) + g
        out = w64 - lr * v
        if not np.all(np.isfinite(out)):
            raise NonFinite(f"parameter {name} became non-finite after an SGD step")
        new_p[name] = out.astype(w.dtype)
        new_v[name] = v
    return new_p, new_v


class _Optimizer:
    def __init__(self, model, cfg: TrainConfig, decay):
        self.model, self.cfg, self.decay = model, cfg, decay
        self.velocity: dict = {}

    def step(self, grads: dict) -> None:
        params = {n: getattr(self.model, n) for n in grads}
        new_p, self.velocity = sgd_step(
            params, grads, self.velocity, self.cfg.learning_rate, self.cfg.momentum, self.cfg.weight_decay, self.decay
        )
        for n, w in new_p.items():
            setattr(self.model, n, w)


# biases and running statistics are never decayed
ADAPTER_DECAY = ("w1", "w2", "bn_gamma", "bn_beta")
ADAPTER_TRAINABLE_BN = ("w1", "b1", "bn_gamma", "bn_beta", "w2", "b2")
ADAPTER_TRAINABLE_PLAIN = ("w1", "b1", "w2", "b2")
LINEAR_DECAY = ("weights",)


def _quiet(fn):
    # overflow is caught by the explicit divergence checks; numpy's warnings only add noise
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return fn(*args, **kwargs)

    return wrapper


def _check_loss(loss: float, what: str) -> None:
    if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
        raise Diverged(f"{what} loss {loss!r} is non-finite or exceeds {DIVERGENCE_LIMIT:g}")


# ---------------------------------------------------------------- reports


@dataclass
class EpochRecord:
    epoch: int
    ce_loss: float | None
    contrastive_loss: float | None
    val: GroupReport

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "ce_loss": self.ce_loss, "contrastive_loss": self.contrastive_loss, "val": self.val.to_dict()}


@dataclass
class TrainReport:
    method: str
    config: dict
    epochs: list[EpochRecord]
    best_epoch: int
    test: GroupReport
    checkpoint: str | None = None
    notes: list[str] = field(default_factory=list)
    model: object = field(default=None, repr=False, compare=False)

    @property
    def best_val(self) -> GroupReport:
        return self.epochs[self.best_epoch].val

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "config": self.config,
            "epochs": [e.to_dict() for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_val_worst_group_accuracy": self.best_val.worst_group_accuracy,
            "test": self.test.to_dict(),
            "checkpoint": self.checkpoint,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------- evaluation


def predict(model, head: ZeroShotHead, samples) -> np.ndarray:
    """Class predictions for an adapter (classified by the frozen head) or a linear head."""
    if isinstance(model, AdapterParams):
        return zeroshot_labels(head, adapter_embed(model, samples))
    if isinstance(model, LinearHead):
        return model.predict(samples)
    raise TypeError(f"cannot predict with {type(model).__name__}")


def evaluate_split(model, head: ZeroShotHead, bundle: EmbeddingBundle, split: str, diagnostics: bool = False) -> GroupReport:
    idx = split_view(bundle, split)
    x = bundle.samples[idx]
    y = bundle.class_labels[idx]
    g = bundle.group_labels[idx]
    report = evaluate_groups(predict(model, head, x), y, g, cells=bundle.cells(split))
    if diagnostics:
        emb = adapter_embed(model, x) if isinstance(model, AdapterParams) else x
        report.alignment_per_class, report.cross_group_cosine_per_class = embedding_diagnostics(emb, y, g, bundle.n_classes)
    return report


def pseudo_labels(bundle: EmbeddingBundle, head: ZeroShotHead, cfg: TrainConfig) -> np.ndarray:
    train = split_view(bundle, "train")
    x, y = bundle.samples[train], bundle.class_labels[train]
    if cfg.pseudo_source == "kmeans":
        rng = Rng(derive_seed(cfg.seed, _PSEUDO))
        pred, _ = pseudolabel_kmeans(head, x, y, cfg.kmeans_iters, cfg.kmeans_restarts, rng)
    else:
        pred, _ = pseudolabel_zeroshot(head, x, y)
    return pred


# ---------------------------------------------------------------- training loops


def _minibatches(order: np.ndarray, size: int, min_size: int) -> list[np.ndarray]:
    chunks = [order[i : i + size] for i in range(0, len(order), size)]
    # a trailing chunk too small for batch statistics joins its predecessor
    if len(chunks) > 1 and len(chunks[-1]) < min_size:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


class _Tracker:
    """Evaluates validation WG each epoch and keeps the earliest best model."""

    def __init__(self, bundle, head):
        self.bundle, self.head = bundle, head
        self.epochs: list[EpochRecord] = []
        self.best_epoch = -1
        self.best_model = None

    def record(self, model, epoch, ce, con):
        val = evaluate_split(model, self.head, self.bundle, "val")
        self.epochs.append(EpochRecord(epoch, ce, con, val))
        if self.best_epoch < 0 or val.worst_group_accuracy > self.epochs[self.best_epoch].val.worst_group_accuracy:
            self.best_epoch = epoch
            self.best_model = copy.deepcopy(model)

    def finish(self, cfg, notes, labels=None) -> TrainReport:
        test = evaluate_split(self.best_model, self.head, self.bundle, "test", diagnostics=True)
        return TrainReport(
            method=labels or cfg.method,
            config=cfg.to_dict(),
            epochs=self.epochs,
            best_epoch=self.best_epoch,
            test=test,
            notes=notes,
            model=self.best_model,
        )


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def _require_train(bundle):
    train = split_view(bundle, "train")
    if train.size == 0:
        raise InvalidSpec("bundle has an empty train split")
    return train


@_quiet
def train_linear_probe(
    bundle: EmbeddingBundle, head: ZeroShotHead, cfg: TrainConfig, train_indices=None, notes=None, normalize_inputs: bool = False
) -> TrainReport:
    """Softmax regression on the bundle's embeddings; ``train_indices`` may be a multiset."""
    cfg.validate()
    idx = _require_train(bundle) if train_indices is None else np.asarray(train_indices, dtype=np.int64)
    if idx.size == 0:
        raise InvalidSpec("no training rows for the linear probe")
    model = init_linear(bundle.n_classes, bundle.dim, Rng(derive_seed(cfg.seed, _INIT)))
    model.normalize_inputs = normalize_inputs
    opt = _Optimizer(model, cfg, LINEAR_DECAY)
    tracker = _Tracker(bundle, head)
    x_all, y_all = bundle.samples, bundle.class_labels
    for epoch in range(cfg.max_epochs):
        order = idx[Rng(derive_seed(cfg.seed, _EPOCH, epoch)).permutation(idx.size)]
        losses = []
        for mb in _minibatches(order, cfg.batch_size, 1):
            loss, grads = linear_ce_loss(model, x_all[mb], y_all[mb])
            _check_loss(loss, "cross-entropy")
            opt.step(grads)
            losses.append(loss)
        tracker.record(model, epoch, _mean(losses), None)
    return tracker.finish(cfg, list(notes or []), "linear_probe")


def _new_adapter(bundle, cfg):
    model = init_adapter(bundle.dim, cfg.hidden_dim, Rng(derive_seed(cfg.seed, _INIT)), cfg.use_batchnorm)
    trainable = ADAPTER_TRAINABLE_BN if cfg.use_batchnorm else ADAPTER_TRAINABLE_PLAIN
    decay = tuple(n for n in ADAPTER_DECAY if n in trainable)
    return model, _Optimizer(model, cfg, decay), trainable


def _pick(grads, names):
    return {n: grads[n] for n in names}


@_quiet
def train_adapter_erm(bundle: EmbeddingBundle, head: ZeroShotHead, cfg: TrainConfig, notes=None) -> TrainReport:
    """Cross-entropy (frozen class embeddings) over shuffled minibatches of the train split."""
    cfg.validate()
    idx = _require_train(bundle)
    model, opt, trainable = _new_adapter(bundle, cfg)
    loss_cfg = cfg.loss_config()
    tracker = _Tracker(bundle, head)
    min_rows = 2 if cfg.use_batchnorm else 1
    for epoch in range(cfg.max_epochs):
        order = idx[Rng(derive_seed(cfg.seed, _EPOCH, epoch)).permutation(idx.size)]
        losses = []
        for mb in _minibatches(order, cfg.batch_size, min_rows):
            loss, grads = ce_loss(model, bundle.samples[mb], bundle.class_labels[mb], head, loss_cfg)
            _check_loss(loss, "cross-entropy")
            opt.step(_pick(grads, trainable))
            losses.append(loss)
        tracker.record(model, epoch, _mean(losses), None)
    return tracker.finish(cfg, list(notes or []), "adapter_erm")


def train_erm(bundle: EmbeddingBundle, head: ZeroShotHead, cfg: TrainConfig) -> TrainReport:
    if cfg.method == "linear_probe":
        return train_linear_probe(bundle, head, cfg)
    return train_adapter_erm(bundle, head, cfg)


class _CeStream:
    """Cyclic minibatches over a reshuffled multiset."""

    def __init__(self, indices, size, min_rows, seed):
        self.indices, self.size, self.min_rows, self.seed = indices, size, min_rows, seed
        self.cycle = 0
        self.queue: list[np.ndarray] = []

    def next(self) -> np.ndarray:
        if not self.queue:
            order = self.indices[Rng(derive_seed(self.seed, _CE_ORDER, self.cycle)).permutation(self.indices.size)]
            self.queue = _minibatches(order, self.size, self.min_rows)[::-1]
            self.cycle += 1
        return self.queue.pop()


def prepare_contrastive(bundle: EmbeddingBundle, head: ZeroShotHead, cfg: TrainConfig):
    """Pseudo-labels, contrastive batches, and the resampled CE set, built once per run."""
    pred = pseudo_labels(bundle, head, cfg)
    sampling = copy.copy(cfg.sampling)
    sampling.seed = derive_seed(cfg.seed, _SAMPLING, cfg.sampling.seed)
    batches = build_contrastive_batches(bundle, pred, sampling)
    resampled = build_resampled_train(bundle, pred, Rng(derive_seed(cfg.seed, _RESAMPLE)))
    return pred, batches, resampled


def contrastive_rows(bundle: EmbeddingBundle, batch):
    x = bundle.samples
    return x[batch.anchor], x[batch.positives], x[batch.negatives]


@_quiet
def train_contrastive_adapter(bundle: EmbeddingBundle, head: ZeroShotHead, cfg: TrainConfig) -> TrainReport:
    """Interleaved supervised-contrastive and cross-entropy updates.

    Each epoch walks the contrastive batches in a fresh shuffled order (or
    ``updates_per_epoch`` of them, cycling); every contrastive update is
    followed by one CE minibatch from the resampled training multiset.
    ``cfg.ablation`` drops one of the two updates while keeping the schedule.
    """
    cfg.validate()
    _require_train(bundle)
    _, batches, resampled = prepare_contrastive(bundle, head, cfg)
    if not batches:
        msg = "no pseudo-incorrect anchors; trained an ERM adapter instead"
        log.warning(msg)
        if cfg.ablation == "no_ce":
            raise NoAnchors("no pseudo-incorrect anchors and the CE update is ablated")
        return train_adapter_erm(bundle, head, cfg, notes=[msg])

    model, opt, trainable = _new_adapter(bundle, cfg)
    loss_cfg = cfg.loss_config()
    tracker = _Tracker(bundle, head)
    min_rows = 2 if cfg.use_batchnorm else 1
    stream = _CeStream(resampled, cfg.batch_size, min_rows, cfg.seed)
    n_updates = cfg.updates_per_epoch or len(batches)
    cursor, shuffles = 0, 0
    order = np.zeros(0, dtype=np.int64)
    for epoch in range(cfg.max_epochs):
        ce_losses, con_losses = [], []
        for _ in range(n_updates):
            if cursor >= order.size:
                order = Rng(derive_seed(cfg.seed, _EPOCH, shuffles)).permutation(len(batches))
                cursor, shuffles = 0, shuffles + 1
            b = batches[int(order[cursor])]
            cursor += 1
            if cfg.ablation != "no_contrastive":
                a, p, m = contrastive_rows(bundle, b)
                loss, grads = supcon_loss(model, a, p, m, loss_cfg)
                _check_loss(loss, "contrastive")
                opt.step(_pick(grads, trainable))
                con_losses.append(loss)
            if cfg.ablation != "no_ce":
                mb = stream.next()
                loss, grads = ce_loss(model, bundle.samples[mb], bundle.class_labels[mb], head, loss_cfg)
                _check_loss(loss, "cross-entropy")
                opt.step(_pick(grads, trainable))
                ce_losses.append(loss)
        if not cfg.updates_per_epoch:
            cursor = order.size  # a full pass always starts from a fresh shuffle
        tracker.record(model, epoch, _mean(ce_losses), _mean(con_losses))
    return tracker.finish(cfg, [], "adapter_contrastive")


def train(bundle: EmbeddingBundle, head: ZeroShotHead, cfg: TrainConfig) -> TrainReport:
    if cfg.method == "adapter_contrastive":
        return train_contrastive_adapter(bundle, head, cfg)
    return train_erm(bundle, head, cfg)


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepCell:
    lr_index: int
    wd_index: int
    learning_rate: float
    weight_decay: float
    status: str
    val_worst_group_accuracy: float | None = None
    test_worst_group_accuracy: float | None = None
    test_average_accuracy: float | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SweepResult:
    cells: list[SweepCell]
    best_index: int | None
    best_report: TrainReport | None

    def table(self) -> str:
        lines = [f"{'lr':>9}  {'wd':>9}  {'status':<8}  {'val WG':>7}  {'test WG':>7}  {'test Avg':>8}"]
        for c in self.cells:
            def pct(v):
                return f"{100 * v:7.1f}" if v is not None else f"{'-':>7}"

            lines.append(
                f"{c.learning_rate:9.2e}  {c.weight_decay:9.2e}  {c.status:<8}  {pct(c.val_worst_group_accuracy)}"
                f"  {pct(c.test_worst_group_accuracy)}  {pct(c.test_average_accuracy)}"
            )
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "cells": [c.to_dict() for c in self.cells],
            "best_index": self.best_index,
            "best": self.best_report.to_dict() if self.best_report else None,
        }


def _run_cell(args):
    bundle, head, cfg = args
    try:
        return train(bundle, head, cfg), None
    except (RobustAdaptError, FloatingPointError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def hyperparameter_sweep(bundle, head, base: TrainConfig, learning_rates, weight_decays, jobs: int = 1) -> SweepResult:
    """Grid over (lr, wd) with the base seed; best by validation WG, ties to lower indices.

    Failed cells are recorded and skipped.
    """
    learning_rates, weight_decays = list(learning_rates), list(weight_decays)
    if not learning_rates or not weight_decays:
        raise InvalidSpec("sweep grid must be nonempty")
    grid = []
    for i, lr in enumerate(learning_rates):
        for j, wd in enumerate(weight_decays):
            cfg = copy.deepcopy(base)
            cfg.learning_rate, cfg.weight_decay = float(lr), float(wd)
            grid.append((i, j, cfg))
    work = [(bundle, head, cfg) for _, _, cfg in grid]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, work))
    else:
        results = [_run_cell(w) for w in work]

    cells, reports = [], []
    for (i, j, cfg), (report, err) in zip(grid, results):
        if report is None:
            cells.append(SweepCell(i, j, cfg.learning_rate, cfg.weight_decay, "failed", error=err))
        else:
            cells.append(
                SweepCell(
                    i,
                    j,
                    cfg.learning_rate,
                    cfg.weight_decay,
                    "ok",
                    report.best_val.worst_group_accuracy,
                    report.test.worst_group_accuracy,
                    report.test.average_accuracy,
                )
            )
        reports.append(report)
    best = None
    for k, c in enumerate(cells):
        if c.status != "ok":
            continue
        if best is None or c.val_worst_group_accuracy > cells[best].val_worst_group_accuracy:
            best = k
    return SweepResult(cells, best, reports[best] if best is not None else None)
