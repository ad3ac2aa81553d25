"""Run configuration files.

Grammar (INI-style, parsed with ``configparser``)::

    [run]        method, alpha, group_prompts
    [train]      any TrainConfig field except ``sampling``
    [sampling]   any SamplingConfig field
    [shift]      any ShiftSpec field (generate only)
    [grid]       learning_rates, weight_decays: comma-separated floats (sweep only)

A file whose name ends in ``.json`` is read as one object with the same
section names as keys. Unknown sections or keys are errors; values are
coerced to the type of the field's default.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field, fields

from .dataio import ShiftSpec
from .errors import ConfigError
from .trainer import TrainConfig

RUN_METHODS = (
    "linear-probe",
    "adapter-erm",
    "adapter-contrastive",
    "dfr-sub",
    "dfr-up",
    "wiseft",
    "tip",
    "zeroshot",
    "group-prompt",
)
TRAINABLE_METHODS = ("linear-probe", "adapter-erm", "adapter-contrastive", "dfr-sub", "dfr-up", "wiseft")


@dataclass
class RunConfig:
    method: str = "adapter-contrastive"
    alpha: float = 0.5
    group_prompts: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if self.method not in RUN_METHODS:
            raise ConfigError(f"method: must be one of {', '.join(RUN_METHODS)}; got {self.method!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha: must lie in [0, 1]; got {self.alpha}")
        try:
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(value, default, key):
    if isinstance(value, str):
        text = value.strip()
    else:
        text = value
    try:
        if isinstance(default, bool):
            if isinstance(text, bool):
                return text
            low = str(text).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            if isinstance(text, float) and not text.is_integer():
                raise ValueError(text)
            return int(text)
        if isinstance(default, float):
            return float(text)
        return str(text)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read {value!r} as {type(default).__name__}") from None


def apply_values(obj, values: dict, section: str, skip=()) -> None:
    names = {f.name: f for f in fields(obj) if f.name not in skip}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"{section}.{key}: unknown key")
        setattr(obj, key, _coerce(value, getattr(obj, key), f"{section}.{key}"))


def _read_sections(path) -> dict[str, dict]:
    path = str(path)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    if path.endswith(".json"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(data, dict) or not all(isinstance(v, dict) for v in data.values()):
            raise ConfigError(f"{path}: expected an object of section objects")
        return data
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return {s: dict(parser.items(s)) for s in parser.sections()}


def _check_sections(sections: dict, allowed, path) -> None:
    extra = set(sections) - set(allowed)
    if extra:
        raise ConfigError(f"{path}: unknown section(s) {sorted(extra)}")


def load_run_config(path=None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    sections = _read_sections(path)
    _check_sections(sections, ("run", "train", "sampling"), path)
    apply_values(cfg, sections.get("run", {}), "run", skip=("train",))
    apply_values(cfg.train, sections.get("train", {}), "train", skip=("sampling",))
    apply_values(cfg.train.sampling, sections.get("sampling", {}), "sampling")
    return cfg


def load_shift_spec(path, base: ShiftSpec | None = None) -> ShiftSpec:
    spec = base or ShiftSpec()
    sections = _read_sections(path)
    _check_sections(sections, ("shift",), path)
    apply_values(spec, sections.get("shift", {}), "shift")
    return spec


def _float_list(value, key):
    if isinstance(value, list):
        items = value
    else:
        items = [v for v in str(value).split(",") if v.strip()]
    try:
        out = [float(v) for v in items]
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected a comma-separated list of numbers, got {value!r}") from None
    if not out:
        raise ConfigError(f"{key}: must not be empty")
    return out


def load_grid(path) -> tuple[list[float], list[float]]:
    sections = _read_sections(path)
    _check_sections(sections, ("grid",), path)
    grid = sections.get("grid", {})
    extra = set(grid) - {"learning_rates", "weight_decays"}
    if extra:
        raise ConfigError(f"grid.{sorted(extra)[0]}: unknown key")
    lrs = _float_list(grid.get("learning_rates", "1e-3, 1e-4, 1e-5"), "grid.learning_rates")
    wds = _float_list(grid.get("weight_decays", "5e-5, 1e-5, 5e-4"), "grid.weight_decays")
    return lrs, wds

