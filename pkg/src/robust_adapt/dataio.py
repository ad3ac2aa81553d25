"""Embedding bundles: in-memory type, directory format, and synthetic group shifts.

Bundle directory layout (format_version 1)::

    manifest.txt          key = value lines
    embeddings.bin        little-endian float32, N x D, row-major, no header
    class_embeddings.bin  little-endian float32, C x D
    labels.csv            header ``index,class,group,split``; LF endings
    group_prompts.bin     optional, R x D float32
    group_prompts.csv     optional, header ``index,class,group``

Manifest keys: ``format_version``, ``dim``, ``n_samples``, ``n_classes``,
``class_names`` and ``group_names`` (comma separated), and
``n_group_prompts`` when group prompts are present.
"""

from __future__ import annotations

import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from ._io import atomic_write_bytes, sha256_hex
from .errors import FormatError, InvalidSpec, TooFewSamples, VersionMismatch
from .numerics import Rng, normalize_rows

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
SHIFT_KINDS = ("confounder", "subclass", "data_source")


@dataclass(eq=False)
class EmbeddingBundle:
    samples: np.ndarray  # (N, D) float32
    class_embeds: np.ndarray  # (C, D) float32
    class_labels: np.ndarray  # (N,) int64
    group_labels: np.ndarray  # (N,) int64
    splits: np.ndarray  # (N,) str
    class_names: list[str]
    group_names: list[str]
    group_prompt_embeds: np.ndarray | None = None  # (R, D) float32
    group_prompt_index: np.ndarray | None = None  # (R, 2) int64: (class, group)

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        self.class_embeds = np.ascontiguousarray(self.class_embeds, dtype=np.float32)
        self.class_labels = np.asarray(self.class_labels, dtype=np.int64)
        self.group_labels = np.asarray(self.group_labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype="<U5")
        self.class_names = list(self.class_names)
        self.group_names = list(self.group_names)
        if self.group_prompt_embeds is not None:
            self.group_prompt_embeds = np.ascontiguousarray(self.group_prompt_embeds, dtype=np.float32)
            self.group_prompt_index = np.asarray(self.group_prompt_index, dtype=np.int64).reshape(-1, 2)

    @property
    def dim(self) -> int:
        return int(self.samples.shape[1])

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def n_classes(self) -> int:
        return int(self.class_embeds.shape[0])

    @property
    def n_groups(self) -> int:
        return len(self.group_names)

    def validate(self) -> None:
        n, d = self.samples.shape
        if self.class_embeds.ndim != 2 or self.class_embeds.shape[1] != d:
            raise FormatError("class embeddings dimension differs from samples", field="class_embeds")
        if len(self.class_names) != self.n_classes:
            raise FormatError("class_names length differs from class count", field="class_names")
        for name, arr in (("class_labels", self.class_labels), ("group_labels", self.group_labels), ("splits", self.splits)):
            if arr.shape != (n,):
                raise FormatError(f"{name} has shape {arr.shape}, expected ({n},)", field=name)
        if n and (self.class_labels.min() < 0 or self.class_labels.max() >= self.n_classes):
            raise FormatError("class id out of range", field="class_labels")
        if n and (self.group_labels.min() < 0 or self.group_labels.max() >= self.n_groups):
            raise FormatError("group id out of range", field="group_labels")
        bad = set(self.splits.tolist()) - set(SPLITS)
        if bad:
            raise FormatError(f"unknown split names {sorted(bad)}", field="splits")
        if n and np.any(~np.any(self.samples != 0, axis=1)):
            raise FormatError("all-zero sample embedding", field="samples")
        if not np.all(np.isfinite(self.samples)) or not np.all(np.isfinite(self.class_embeds)):
            raise FormatError("non-finite embedding values", field="samples")
        train_cells = set(self.cells("train"))
        for split in ("val", "test"):
            missing = set(self.cells(split)) - train_cells
            if missing:
                raise FormatError(f"(class, group) cells {sorted(missing)} in {split} but not train", field="splits")
        if self.group_prompt_embeds is not None:
            r = self.group_prompt_embeds.shape[0]
            if self.group_prompt_embeds.shape[1] != d or self.group_prompt_index.shape != (r, 2):
                raise FormatError("group prompt shapes inconsistent", field="group_prompts")

    def cells(self, split: str | None = None) -> list[tuple[int, int]]:
        idx = np.arange(self.n_samples) if split is None else split_view(self, split)
        pairs = {(int(self.class_labels[i]), int(self.group_labels[i])) for i in idx}
        return sorted(pairs)

    def equals(self, other: "EmbeddingBundle") -> bool:
        """Bit-exact equality of every field."""
        return _serialize(self) == _serialize(other)

    def checksum(self) -> str:
        return sha256_hex(*_serialize(self).values())


def split_view(b: EmbeddingBundle, split: str) -> np.ndarray:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return np.flatnonzero(b.splits == split)


# ---------------------------------------------------------------- format


def _check_name(name: str, what: str) -> None:
    if not name or any(ch in name for ch in ",\n\r=") or name != name.strip():
        raise FormatError(f"invalid {what} name {name!r}", field=what)


def _serialize(b: EmbeddingBundle) -> dict[str, bytes]:
    for n in b.class_names:
        _check_name(n, "class_names")
    for n in b.group_names:
        _check_name(n, "group_names")
    manifest = [
        f"format_version = {FORMAT_VERSION}",
        f"dim = {b.dim}",
        f"n_samples = {b.n_samples}",
        f"n_classes = {b.n_classes}",
        f"class_names = {','.join(b.class_names)}",
        f"group_names = {','.join(b.group_names)}",
    ]
    files = {}
    labels = io.StringIO(newline="")
    labels.write("index,class,group,split\n")
    for i, (c, g, s) in enumerate(zip(b.class_labels.tolist(), b.group_labels.tolist(), b.splits.tolist())):
        labels.write(f"{i},{c},{g},{s}\n")
    if b.group_prompt_embeds is not None:
        manifest.append(f"n_group_prompts = {b.group_prompt_embeds.shape[0]}")
    files["manifest.txt"] = ("\n".join(manifest) + "\n").encode("utf-8")
    files["embeddings.bin"] = b.samples.astype("<f4").tobytes()
    files["class_embeddings.bin"] = b.class_embeds.astype("<f4").tobytes()
    files["labels.csv"] = labels.getvalue().encode("utf-8")
    if b.group_prompt_embeds is not None:
        gp = io.StringIO(newline="")
        gp.write("index,class,group\n")
        for i, (c, g) in enumerate(b.group_prompt_index.tolist()):
            gp.write(f"{i},{c},{g}\n")
        files["group_prompts.bin"] = b.group_prompt_embeds.astype("<f4").tobytes()
        files["group_prompts.csv"] = gp.getvalue().encode("utf-8")
    return files


def save_bundle(b: EmbeddingBundle, directory) -> None:
    b.validate()
    os.makedirs(directory, exist_ok=True)
    for name, data in _serialize(b).items():
        atomic_write_bytes(os.path.join(directory, name), data)


def _read_manifest(path) -> dict[str, str]:
    out = {}
    with open(path, "rb") as fh:
        raw = fh.read()
    offset = 0
    for line in raw.split(b"\n"):
        text = line.decode("utf-8").strip()
        if text and not text.startswith("#"):
            if "=" not in text:
                raise FormatError(f"manifest line without '=': {text!r}", field="manifest.txt", offset=offset)
            key, value = (s.strip() for s in text.split("=", 1))
            out[key] = value
        offset += len(line) + 1
    return out


def _manifest_int(m, key):
    if key not in m:
        raise FormatError("missing manifest key", field=key)
    try:
        return int(m[key])
    except ValueError:
        raise FormatError(f"manifest value {m[key]!r} is not an integer", field=key) from None


def _read_f32(path, rows, cols, fname):
    expected = rows * cols * 4
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) != expected:
        raise FormatError(
            f"{fname}: expected {expected} bytes ({rows}x{cols} float32), got {len(data)}",
            field=fname,
            offset=min(len(data), expected),
        )
    return np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(rows, cols)


def _read_csv(path, header, fname):
    with open(path, "rb") as fh:
        raw = fh.read()
    if b"\r" in raw:
        raise FormatError("CR line endings are not allowed", field=fname, offset=raw.index(b"\r"))
    lines = raw.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    if not lines or lines[0].decode("utf-8") != header:
        raise FormatError(f"expected header {header!r}", field=fname, offset=0)
    rows = []
    offset = len(lines[0]) + 1
    ncol = header.count(",") + 1
    for i, line in enumerate(lines[1:]):
        parts = line.decode("utf-8").split(",")
        if len(parts) != ncol:
            raise FormatError(f"row {i} has {len(parts)} columns, expected {ncol}", field=fname, offset=offset)
        try:
            if int(parts[0]) != i:
                raise ValueError
        except ValueError:
            raise FormatError(f"row {i} has index {parts[0]!r}", field=fname, offset=offset) from None
        rows.append((parts, offset))
        offset += len(line) + 1
    return rows


def _int_cell(value, fname, column, offset):
    try:
        return int(value)
    except ValueError:
        raise FormatError(f"column {column}: {value!r} is not an integer", field=fname, offset=offset) from None


def load_bundle(directory) -> EmbeddingBundle:
    m = _read_manifest(os.path.join(directory, "manifest.txt"))
    version = _manifest_int(m, "format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"bundle format_version {version}; this reader supports {FORMAT_VERSION}")
    d = _manifest_int(m, "dim")
    n = _manifest_int(m, "n_samples")
    c = _manifest_int(m, "n_classes")
    class_names = m.get("class_names", "").split(",") if m.get("class_names") else []
    group_names = m.get("group_names", "").split(",") if m.get("group_names") else []
    samples = _read_f32(os.path.join(directory, "embeddings.bin"), n, d, "embeddings.bin")
    class_embeds = _read_f32(os.path.join(directory, "class_embeddings.bin"), c, d, "class_embeddings.bin")
    rows = _read_csv(os.path.join(directory, "labels.csv"), "index,class,group,split", "labels.csv")
    if len(rows) != n:
        raise FormatError(f"labels.csv has {len(rows)} rows, manifest says n_samples = {n}", field="labels.csv")
    cls = np.array([_int_cell(p[1], "labels.csv", "class", o) for p, o in rows], dtype=np.int64)
    grp = np.array([_int_cell(p[2], "labels.csv", "group", o) for p, o in rows], dtype=np.int64)
    splits = np.array([p[3] for p, _ in rows], dtype="<U5")
    gp_embeds = gp_index = None
    if "n_group_prompts" in m:
        r = _manifest_int(m, "n_group_prompts")
        gp_embeds = _read_f32(os.path.join(directory, "group_prompts.bin"), r, d, "group_prompts.bin")
        gp_rows = _read_csv(os.path.join(directory, "group_prompts.csv"), "index,class,group", "group_prompts.csv")
        if len(gp_rows) != r:
            raise FormatError(f"group_prompts.csv has {len(gp_rows)} rows, expected {r}", field="group_prompts.csv")
        gp_index = np.array(
            [[_int_cell(p[1], "group_prompts.csv", "class", o), _int_cell(p[2], "group_prompts.csv", "group", o)] for p, o in gp_rows],
            dtype=np.int64,
        ).reshape(-1, 2)
    b = EmbeddingBundle(samples, class_embeds, cls, grp, splits, class_names, group_names, gp_embeds, gp_index)
    b.validate()
    return b


# ---------------------------------------------------------------- synthetic data


@dataclass
class ShiftSpec:
    shift_kind: str = "confounder"
    classes: int = 2
    groups_per_class: int = 2
    dim: int = 64
    minority_fraction: float = 0.05
    class_sep: float = 1.0
    group_sep: float = 1.0
    spurious_mix: float = 0.9
    noise_sigma: float = 0.1
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 800
    seed: int = 0

    def validate(self) -> None:
        if self.shift_kind not in SHIFT_KINDS:
            raise InvalidSpec(f"shift_kind must be one of {SHIFT_KINDS}, got {self.shift_kind!r}")
        if self.classes < 2:
            raise InvalidSpec("need at least 2 classes")
        if self.groups_per_class < 1:
            raise InvalidSpec("need at least 1 group per class")
        if self.shift_kind == "confounder" and self.groups_per_class != 2:
            raise InvalidSpec("confounder shifts use exactly 2 groups (the two signs of the spurious direction)")
        if self.dim < self.classes + self.classes * self.groups_per_class + 1:
            raise InvalidSpec(f"dim {self.dim} too small for the requested classes and groups")
        if not 0.0 < self.minority_fraction <= 0.5:
            raise InvalidSpec("minority_fraction must be in (0, 0.5]")
        if self.groups_per_class > 1 and self.minority_fraction * self.groups_per_class > 1.0 + 1e-12:
            raise InvalidSpec("minority_fraction * groups_per_class must not exceed 1")
        if self.class_sep < 0 or self.group_sep < 0:
            raise InvalidSpec("separations must be nonnegative")
        if not 0.0 <= self.spurious_mix <= 1.0:
            raise InvalidSpec("spurious_mix must be in [0, 1]")
        if not self.noise_sigma > 0:
            raise InvalidSpec("noise_sigma must be positive")
        cells = self.classes * self.groups_per_class
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < cells:
                raise InvalidSpec(f"{name} must be at least the number of (class, group) cells ({cells})")

    def to_dict(self) -> dict:
        return asdict(self)


def largest_remainder(total: int, weights) -> list[int]:
    """Integer apportionment of ``total`` proportional to ``weights``; ties to the lower index."""
    w = np.asarray(weights, dtype=np.float64)
    quotas = total * w / w.sum()
    base = np.floor(quotas).astype(np.int64)
    rem = total - int(base.sum())
    frac = quotas - base
    order = sorted(range(len(w)), key=lambda i: (-frac[i], i))
    for i in order[:rem]:
        base[i] += 1
    return base.tolist()


def _group_weights(spec: ShiftSpec, balanced: bool) -> list[float]:
    g = spec.groups_per_class
    if balanced or g == 1:
        return [1.0] * g
    mf = spec.minority_fraction
    return [1.0 - (g - 1) * mf] + [mf] * (g - 1)


def _orthonormal(rng: Rng, dim: int, k: int) -> np.ndarray:
    """``k`` orthonormal rows via modified Gram-Schmidt on Gaussian draws."""
    raw = rng.normals(dim * k).reshape(k, dim)
    out = np.zeros_like(raw)
    for i in range(k):
        v = raw[i].copy()
        for j in range(i):
            v -= (v @ out[j]) * out[j]
        out[i] = v / np.linalg.norm(v)
    return out


def _group_names(spec: ShiftSpec) -> list[str]:
    if spec.shift_kind == "confounder":
        return ["spurious_pos", "spurious_neg"]
    prefix = "subclass" if spec.shift_kind == "subclass" else "source"
    return [f"{prefix}{k}" for k in range(spec.groups_per_class)]


def _majority_group(spec: ShiftSpec, y: int) -> int:
    if spec.shift_kind == "confounder":
        return 0 if y % 2 == 0 else 1
    return 0


def generate_synthetic(spec: ShiftSpec) -> EmbeddingBundle:
    """Gaussian (class, group) clusters around unit-norm means.

    Class means sit on orthogonal directions ``class_sep`` apart. Group
    offsets of length ``group_sep`` depend on the shift kind:

    * confounder: one spurious direction ``d`` shared by every class, used
      with sign ``+`` by even classes' majority group and ``-`` by odd
      classes' majority group, so the minority of one class shares a side
      with the majority of its neighbour;
    * subclass: a random direction per (class, group); non-majority
      subclasses of class ``y`` also lean toward the majority subclass of
      class ``y + 1``, the way a rare subclass resembles a neighbour class;
    * data_source: a style direction per source shared across classes plus
      a class-specific appearance direction per (source, class).

    The class embedding is the unit vector between the class mean and its
    majority group mean, weighted by ``spurious_mix``. Train group sizes
    follow ``minority_fraction``; val and test are group balanced. The
    group-prompt embeddings are the normalized group means.
    """
    spec.validate()
    rng = Rng(spec.seed)
    C, G, D = spec.classes, spec.groups_per_class, spec.dim
    n_extra = {"confounder": 1, "subclass": C * G, "data_source": G + C * G}[spec.shift_kind]
    basis = _orthonormal(rng, D, C + n_extra)
    class_dirs, extra = basis[:C], basis[C:]
    class_means = class_dirs * (spec.class_sep / math.sqrt(2.0))

    group_means = np.zeros((C, G, D))
    for y in range(C):
        for k in range(G):
            if spec.shift_kind == "confounder":
                sign_y = 1.0 if y % 2 == 0 else -1.0
                is_major = k == _majority_group(spec, y)
                offset = spec.group_sep * sign_y * (1.0 if is_major else -1.0) * extra[0]
            elif spec.shift_kind == "subclass":
                direction = extra[y * G + k]
                if k != 0:
                    direction = direction + extra[((y + 1) % C) * G]
                offset = spec.group_sep * direction / np.linalg.norm(direction)
            else:
                direction = extra[k] + extra[G + y * G + k]
                offset = spec.group_sep * direction / np.linalg.norm(direction)
            mean = class_means[y] + offset
            nrm = np.linalg.norm(mean)
            group_means[y, k] = mean / nrm if nrm > 0 else class_dirs[y]

    class_embeds = np.zeros((C, D))
    for y in range(C):
        core = class_dirs[y]
        major = group_means[y, _majority_group(spec, y)]
        v = (1.0 - spec.spurious_mix) * core + spec.spurious_mix * major
        class_embeds[y] = v / np.linalg.norm(v)

    rows_mean, cls, grp, splits = [], [], [], []
    for split, n_split in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        per_class = largest_remainder(n_split, [1.0] * C)
        for y in range(C):
            weights = _group_weights(spec, balanced=(split != "train"))
            per_group = largest_remainder(per_class[y], weights)
            if split == "train" and G > 1:
                # keep every train cell observed
                for k in range(G):
                    if per_group[k] == 0:
                        per_group[k] = 1
                        per_group[int(np.argmax(per_group))] -= 1
            for k in range(G):
                maj = _majority_group(spec, y)
                # group weights are listed majority-first; map to group ids
                gid = maj if k == 0 else [g for g in range(G) if g != maj][k - 1]
                cnt = per_group[k]
                rows_mean.extend([group_means[y, gid]] * cnt)
                cls.extend([y] * cnt)
                grp.extend([gid] * cnt)
                splits.extend([split] * cnt)

    means = np.array(rows_mean)
    noise = rng.normals(means.size).reshape(means.shape) * spec.noise_sigma
    samples = normalize_rows(means + noise)

    gp_index = np.array([(y, k) for y in range(C) for k in range(G)], dtype=np.int64)
    gp_embeds = group_means.reshape(C * G, D)

    return EmbeddingBundle(
        samples=samples.astype(np.float32),
        class_embeds=normalize_rows(class_embeds).astype(np.float32),
        class_labels=np.array(cls),
        group_labels=np.array(grp),
        splits=np.array(splits),
        class_names=[f"class{y}" for y in range(C)],
        group_names=_group_names(spec),
        group_prompt_embeds=normalize_rows(gp_embeds).astype(np.float32),
        group_prompt_index=gp_index,
    )


def subsample_preserving_ratios(b: EmbeddingBundle, n: int, rng: Rng) -> EmbeddingBundle:
    """Shrink the train split to ``n`` rows keeping (class, group) proportions.

    Cell quotas use the largest-remainder method (ties to the lower class
    then group id) with a floor of one sample per cell; val and test rows
    are untouched.
    """
    train = split_view(b, "train")
    cells = b.cells("train")
    counts = [int(np.sum((b.class_labels[train] == c) & (b.group_labels[train] == g))) for c, g in cells]
    if n > len(train):
        raise TooFewSamples(f"requested {n} train samples but only {len(train)} exist")
    if n < len(cells):
        raise TooFewSamples(f"need at least one sample for each of {len(cells)} (class, group) cells, got n={n}")
    quotas = [n * c / len(train) for c in counts]
    alloc = [max(1, math.floor(q)) for q in quotas]
    frac = [q - math.floor(q) for q in quotas]
    diff = n - sum(alloc)
    if diff > 0:
        order = sorted(range(len(cells)), key=lambda i: (-frac[i], i))
        for i in order:
            if diff == 0:
                break
            if alloc[i] < counts[i]:
                alloc[i] += 1
                diff -= 1
    while diff < 0:
        shrinkable = [i for i in range(len(cells)) if alloc[i] > 1]
        i = min(shrinkable, key=lambda j: (frac[j], -j))
        alloc[i] -= 1
        frac[i] = 1.0
        diff += 1

    keep = np.ones(b.n_samples, dtype=bool)
    keep[train] = False
    for (c, g), k in zip(cells, alloc):
        members = train[(b.class_labels[train] == c) & (b.group_labels[train] == g)]
        chosen = members[np.sort(rng.choice(len(members), k))]
        keep[chosen] = True
    idx = np.flatnonzero(keep)
    return EmbeddingBundle(
        samples=b.samples[idx],
        class_embeds=b.class_embeds,
        class_labels=b.class_labels[idx],
        group_labels=b.group_labels[idx],
        splits=b.splits[idx],
        class_names=b.class_names,
        group_names=b.group_names,
        group_prompt_embeds=b.group_prompt_embeds,
        group_prompt_index=b.group_prompt_index,
    )


# ---------------------------------------------------------------- presets

# Frozen acceptance fixtures. S1 makes the spurious direction dominate the
# embedding norm so ERM latches onto it; S2 is group balanced; S3 mixes a
# shared style per source with a class-specific appearance shift.
PRESETS: dict[str, ShiftSpec] = {
    "s1": ShiftSpec(
        shift_kind="confounder", classes=2, groups_per_class=2, dim=64, minority_fraction=0.05,
        class_sep=0.3, group_sep=2.0, spurious_mix=0.9, noise_sigma=0.1,
        n_train=2000, n_val=1000, n_test=800, seed=7,
    ),
    "s2": ShiftSpec(
        shift_kind="subclass", classes=3, groups_per_class=2, dim=64, minority_fraction=0.5,
        class_sep=1.0, group_sep=0.8, spurious_mix=0.9, noise_sigma=0.1,
        n_train=2000, n_val=1000, n_test=800, seed=11,
    ),
    "s3": ShiftSpec(
        shift_kind="data_source", classes=3, groups_per_class=2, dim=64, minority_fraction=0.1,
        class_sep=1.0, group_sep=1.5, spurious_mix=0.9, noise_sigma=0.15,
        n_train=2000, n_val=1000, n_test=800, seed=13,
    ),
}


def preset(name: str) -> ShiftSpec:
    try:
        base = PRESETS[name]
    except KeyError:
        raise InvalidSpec(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ShiftSpec(**asdict(base))
