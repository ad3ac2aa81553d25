"""Command-line entry point: ``robust-adapt <command> ...``.

Every JSON output carries the merged run configuration, the package
version, and the checksum of the bundle it was computed from. Failures
exit with status 2 and print one line ``error: <ErrorClass>: <message>``.
Seeds come from ``--seed``, then ``ROBUST_ADAPT_SEED``, then the config
file, then 0.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from . import __version__
from ._io import atomic_write_text
from .adapter import AdapterParams
from .baselines import dfr_train, tip_predict_all, wise_ft
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RUN_METHODS, TRAINABLE_METHODS, RunConfig, load_grid, load_run_config, load_shift_spec
from .dataio import PRESETS, EmbeddingBundle, generate_synthetic, load_bundle, preset, save_bundle, split_view
from .errors import ConfigError, IoError, RobustAdaptError
from .linear import LinearHead
from .metrics import GroupReport, evaluate_groups, format_table
from .numerics import Rng, derive_seed
from .sampling import SamplingConfig
from .trainer import TrainConfig, TrainReport, evaluate_split, hyperparameter_sweep, predict, train, train_linear_probe
from .zeroshot import ZeroShotHead, group_prompt_predict_all, zeroshot_labels

log = logging.getLogger("robust_adapt")

SEED_ENV = "ROBUST_ADAPT_SEED"
_DFR_KEY = 101

# CLI method name -> trainer method
_TRAINER_METHOD = {
    "linear-probe": "linear_probe",
    "adapter-erm": "adapter_erm",
    "adapter-contrastive": "adapter_contrastive",
    "dfr-sub": "linear_probe",
    "dfr-up": "linear_probe",
    "wiseft": "linear_probe",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# (flag, dest, section object name, type, help)
_TRAIN_FLAGS = [
    ("--epochs", "max_epochs", "train", int, "maximum training epochs"),
    ("--lr", "learning_rate", "train", float, "SGD learning rate"),
    ("--weight-decay", "weight_decay", "train", float, "L2 weight decay"),
    ("--momentum", "momentum", "train", float, "SGD momentum"),
    ("--batch-size", "batch_size", "train", int, "cross-entropy minibatch size"),
    ("--hidden-dim", "hidden_dim", "train", int, "adapter hidden width"),
    ("--ce-temperature", "ce_temperature", "train", float, "cross-entropy temperature"),
    ("--contrastive-temperature", "contrastive_temperature", "train", float, "contrastive temperature"),
    ("--pseudo-source", "pseudo_source", "train", str, "pseudo-labels: zeroshot or kmeans"),
    ("--ablation", "ablation", "train", str, "full, no_contrastive, or no_ce"),
    ("--updates-per-epoch", "updates_per_epoch", "train", int, "contrastive updates per epoch (0 = full pass)"),
    ("--num-positives", "num_positives", "sampling", int, "positives per anchor"),
    ("--num-negatives", "num_negatives", "sampling", int, "negatives per anchor"),
    ("--num-neighbors", "num_neighbors", "sampling", int, "nearest other-class pool size"),
]


def _add_common(p, train_flags: bool):
    p.add_argument("--bundle", required=True, help="bundle directory (required)")
    p.add_argument("--config", default=None, help="run config file, INI or .json (default: none)")
    p.add_argument("--seed", type=int, default=None, help=f"run seed (default: ${SEED_ENV}, else config, else 0)")
    p.add_argument("--table", action="store_true", help="print a WG/Avg/Gap table (default: off)")
    if train_flags:
        defaults_t, defaults_s = TrainConfig(), SamplingConfig()
        for flag, dest, section, typ, text in _TRAIN_FLAGS:
            default = getattr(defaults_t if section == "train" else defaults_s, dest)
            p.add_argument(flag, dest=dest, type=typ, default=None, help=f"{text} (default: config, else {default})")
        p.add_argument(
            "--no-batchnorm", dest="no_batchnorm", action="store_true", default=None, help="drop the adapter's batch norm (default: off)"
        )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robust-adapt", description="Group-robust classifiers over precomputed embeddings.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic bundle")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=sorted(PRESETS), help="frozen fixture (default: none)")
    src.add_argument("--spec", help="shift spec file with a [shift] section (default: none)")
    g.add_argument("--seed", type=int, default=None, help="override the generator seed (default: preset or spec value)")
    g.add_argument("--out", required=True, help="output bundle directory (required)")

    z = sub.add_parser("zeroshot", help="zero-shot evaluation")
    z.add_argument("--bundle", required=True, help="bundle directory (required)")
    z.add_argument("--group-prompts", action="store_true", help="classify with group prompts (default: off)")
    z.add_argument("--out", default=None, help="report.json path (default: print to stdout)")
    z.add_argument("--table", action="store_true", help="print a WG/Avg/Gap table (default: off)")

    t = sub.add_parser("train", help="train a model and write checkpoint.bin + report.json")
    _add_common(t, True)
    t.add_argument("--method", choices=TRAINABLE_METHODS, default=None, help="method (default: config, else adapter-contrastive)")
    t.add_argument("--alpha", type=float, default=None, help="WiSE-FT mixing weight (default: config, else 0.5)")
    t.add_argument("--out", required=True, help="output directory (required)")

    e = sub.add_parser("eval", help="evaluate a checkpoint or a training-free method")
    _add_common(e, True)
    e.add_argument("--checkpoint", default=None, help="checkpoint to evaluate, or the probe for wiseft (default: none)")
    e.add_argument(
        "--method", choices=("tip", "wiseft", "zeroshot", "group-prompt"), default=None, help="method without --checkpoint (default: none)"
    )
    e.add_argument("--alpha", type=float, default=None, help="WiSE-FT mixing weight (default: config, else 0.5)")
    e.add_argument("--out", required=True, help="report.json path (required)")

    s = sub.add_parser("sweep", help="learning-rate x weight-decay grid")
    _add_common(s, True)
    s.add_argument("--grid", required=True, help="grid file with a [grid] section (required)")
    s.add_argument(
        "--method", choices=("linear-probe", "adapter-erm", "adapter-contrastive"), default=None, help="method (default: config, else adapter-contrastive)"
    )
    s.add_argument("--jobs", type=int, default=1, help="worker processes (default: 1)")
    s.add_argument("--out", required=True, help="output directory (required)")
    return parser


# ---------------------------------------------------------------- helpers


def resolve_seed(flag, config_value: int) -> int:
    if flag is not None:
        return int(flag)
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}: not an integer: {env!r}") from None
    return int(config_value)


def merged_config(args, method_default=None) -> RunConfig:
    cfg = load_run_config(args.config)
    file_seed = cfg.train.seed
    for _, dest, section, _, _ in _TRAIN_FLAGS:
        value = getattr(args, dest, None)
        if value is not None:
            setattr(cfg.train if section == "train" else cfg.train.sampling, dest, value)
    if getattr(args, "no_batchnorm", None):
        cfg.train.use_batchnorm = False
    if getattr(args, "method", None):
        cfg.method = args.method
    elif method_default:
        cfg.method = method_default
    if getattr(args, "alpha", None) is not None:
        cfg.alpha = args.alpha
    cfg.train.seed = resolve_seed(args.seed, file_seed)
    if cfg.method in _TRAINER_METHOD:
        cfg.train.method = _TRAINER_METHOD[cfg.method]
    cfg.validate()
    return cfg


def _load(path) -> EmbeddingBundle:
    try:
        return load_bundle(path)
    except FileNotFoundError as exc:
        raise IoError(f"{path}: {exc.strerror}: {exc.filename}") from None


def _provenance(bundle: EmbeddingBundle, config: dict) -> dict:
    return {"version": __version__, "bundle_checksum": bundle.checksum(), "config": config}


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _report_for(bundle, split, pred) -> GroupReport:
    idx = split_view(bundle, split)
    return evaluate_groups(pred, bundle.class_labels[idx], bundle.group_labels[idx], cells=bundle.cells(split))


def _predict_fn_report(bundle, fn) -> tuple[dict, GroupReport, np.ndarray]:
    """Evaluate a row-wise predictor on val and test."""
    blocks = {}
    test_pred = None
    for split in ("val", "test"):
        idx = split_view(bundle, split)
        if idx.size == 0:
            continue
        pred = fn(bundle.samples[idx])
        blocks[split] = _report_for(bundle, split, pred)
        if split == "test":
            test_pred = pred
    if "test" not in blocks:
        raise ConfigError("bundle: the test split is empty")
    return blocks, blocks["test"], test_pred


def _eval_document(kind, method, bundle, config, blocks, test_pred, extra=None) -> dict:
    doc = {
        "kind": kind,
        "method": method,
        "provenance": _provenance(bundle, config),
        "reports": {k: v.to_dict() for k, v in blocks.items()},
        "predictions": {"test": [int(p) for p in test_pred]},
    }
    if extra:
        doc.update(extra)
    return doc


def _emit_table(args, rows):
    if getattr(args, "table", False):
        print(format_table(rows))


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    if args.preset:
        spec = preset(args.preset)
    else:
        spec = load_shift_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    bundle = generate_synthetic(spec)
    save_bundle(bundle, args.out)
    print(json.dumps({"out": args.out, "bundle_checksum": bundle.checksum(), "spec": spec.to_dict()}, sort_keys=True))
    return 0


def cmd_zeroshot(args) -> int:
    bundle = _load(args.bundle)
    head = ZeroShotHead.from_embeddings(bundle.class_embeds)
    if args.group_prompts:
        method = "group-prompt"

        def fn(x):
            return np.array([p.label for p in group_prompt_predict_all(bundle, x)], dtype=np.int64)

    else:
        method = "zeroshot"

        def fn(x):
            return zeroshot_labels(head, x)

    blocks, test, pred = _predict_fn_report(bundle, fn)
    config = {"method": method, "bundle": args.bundle, "temperature": head.temperature}
    doc = _eval_document("zeroshot", method, bundle, config, blocks, pred)
    if args.out:
        atomic_write_text(args.out, _dump(doc))
    else:
        sys.stdout.write(_dump(doc))
    _emit_table(args, [(method, test)])
    return 0


def _train_model(bundle, head, cfg: RunConfig) -> TrainReport:
    method = cfg.method
    if method in ("linear-probe", "adapter-erm", "adapter-contrastive"):
        return train(bundle, head, cfg.train)
    if method in ("dfr-sub", "dfr-up"):
        mode = "subsample" if method == "dfr-sub" else "upsample"
        return dfr_train(bundle, head, mode, cfg.train, Rng(derive_seed(cfg.train.seed, _DFR_KEY)))
    if method == "wiseft":
        report = train_linear_probe(bundle, head, cfg.train, normalize_inputs=True)
        ensemble = wise_ft(head, report.model, cfg.alpha)
        report.method = "wiseft"
        report.notes.append(f"probe selected at epoch {report.best_epoch}; test metrics use alpha={cfg.alpha!r}")
        report.test = evaluate_split(ensemble, head, bundle, "test")
        report.model = ensemble
        return report
    raise ConfigError(f"method: {method!r} does not train; use eval")


def cmd_train(args) -> int:
    cfg = merged_config(args)
    if cfg.method not in TRAINABLE_METHODS:
        raise ConfigError(f"method: {cfg.method!r} does not train; use eval")
    bundle = _load(args.bundle)
    head = ZeroShotHead.from_embeddings(bundle.class_embeds, cfg.train.ce_temperature)
    report = _train_model(bundle, head, cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.bin")
    save_checkpoint(report.model, ckpt)
    report.checkpoint = "checkpoint.bin"
    test_idx = split_view(bundle, "test")
    doc = report.to_dict()
    doc["provenance"] = _provenance(bundle, {**cfg.to_dict(), "bundle": args.bundle})
    doc["predictions"] = {"test": [int(p) for p in predict(report.model, head, bundle.samples[test_idx])]}
    atomic_write_text(os.path.join(args.out, "report.json"), _dump(doc))
    _emit_table(args, [(cfg.method, report.test)])
    return 0


def cmd_eval(args) -> int:
    if args.checkpoint is None and args.method is None:
        raise ConfigError("eval: give --checkpoint or --method")
    cfg = merged_config(args, method_default=args.method or "adapter-contrastive")
    bundle = _load(args.bundle)
    head = ZeroShotHead.from_embeddings(bundle.class_embeds, cfg.train.ce_temperature)
    config = {**cfg.to_dict(), "bundle": args.bundle, "checkpoint": args.checkpoint}
    method = args.method or "checkpoint"
    extra = {}
    if method == "tip":
        train_idx = split_view(bundle, "train")
        cache_x, cache_y = bundle.samples[train_idx], bundle.class_labels[train_idx]

        def fn(x):
            return tip_predict_all(cache_x, cache_y, x)

    elif method == "zeroshot":

        def fn(x):
            return zeroshot_labels(head, x)

    elif method == "group-prompt":

        def fn(x):
            return np.array([p.label for p in group_prompt_predict_all(bundle, x)], dtype=np.int64)

    else:
        if method == "wiseft":
            if args.checkpoint:
                probe = _load_model(args.checkpoint)
                if not isinstance(probe, LinearHead):
                    raise ConfigError("checkpoint: wiseft needs a linear-probe checkpoint")
            else:
                probe = train_linear_probe(bundle, head, _probe_config(cfg), normalize_inputs=True).model
            model = wise_ft(head, probe, cfg.alpha)
            extra["alpha"] = cfg.alpha
        else:
            model = _load_model(args.checkpoint)
            if isinstance(model, AdapterParams) and model.dim != bundle.dim:
                raise ConfigError(f"checkpoint: adapter dimension {model.dim} differs from bundle dimension {bundle.dim}")

        def fn(x):
            return predict(model, head, x)

    blocks, test, pred = _predict_fn_report(bundle, fn)
    doc = _eval_document("eval", method, bundle, config, blocks, pred, extra)
    atomic_write_text(args.out, _dump(doc))
    _emit_table(args, [(method, test)])
    return 0


def _probe_config(cfg: RunConfig) -> TrainConfig:
    t = TrainConfig(**{f.name: getattr(cfg.train, f.name) for f in fields(TrainConfig)})
    t.method = "linear_probe"
    return t


def _load_model(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise IoError(f"{path}: {exc.strerror}") from None


def cmd_sweep(args) -> int:
    cfg = merged_config(args)
    lrs, wds = load_grid(args.grid)
    bundle = _load(args.bundle)
    head = ZeroShotHead.from_embeddings(bundle.class_embeds, cfg.train.ce_temperature)
    result = hyperparameter_sweep(bundle, head, cfg.train, lrs, wds, jobs=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    doc = result.to_dict()
    doc["provenance"] = _provenance(bundle, {**cfg.to_dict(), "bundle": args.bundle, "grid": {"learning_rates": lrs, "weight_decays": wds}})
    if result.best_report is not None:
        best_dir = os.path.join(args.out, "best")
        os.makedirs(best_dir, exist_ok=True)
        save_checkpoint(result.best_report.model, os.path.join(best_dir, "checkpoint.bin"))
        result.best_report.checkpoint = "checkpoint.bin"
        best_doc = result.best_report.to_dict()
        best_doc["provenance"] = doc["provenance"]
        atomic_write_text(os.path.join(best_dir, "report.json"), _dump(best_doc))
        doc["best"] = best_doc
    atomic_write_text(os.path.join(args.out, "sweep.json"), _dump(doc))
    atomic_write_text(os.path.join(args.out, "sweep.txt"), result.table() + "\n")
    print(result.table())
    return 0 if result.best_report is not None else 1


COMMANDS = {"generate": cmd_generate, "zeroshot": cmd_zeroshot, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except RobustAdaptError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: IoError: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
