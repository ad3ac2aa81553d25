"""Checkpoint files for adapters and linear heads.

Layout: an ASCII header of ``key = value`` lines closed by a ``---`` line,
then the little-endian float32 blobs of every array field in the order the
``fields`` entry lists them. ``sha256`` covers the blob bytes.
"""

from __future__ import annotations

import os

import numpy as np

from ._io import atomic_write_bytes, sha256_hex
from .adapter import AdapterParams
from .errors import ChecksumError, FormatError, VersionMismatch
from .linear import LinearHead

MAGIC = "robust_adapt_checkpoint"
FORMAT_VERSION = 1
ADAPTER_FIELDS = ("w1", "b1", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var", "w2", "b2")
LINEAR_FIELDS = ("weights", "bias")


def _encode(header: dict, arrays: list[tuple[str, np.ndarray]]) -> bytes:
    blobs = [np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays]
    header = dict(header)
    header["fields"] = ",".join(f"{n}:{'x'.join(str(s) for s in a.shape)}" for n, a in arrays)
    header["sha256"] = sha256_hex(*blobs)
    lines = [MAGIC, f"format_version = {FORMAT_VERSION}"] + [f"{k} = {v}" for k, v in header.items()] + ["---", ""]
    return "\n".join(lines).encode("ascii") + b"".join(blobs)


def checkpoint_bytes(model) -> bytes:
    if isinstance(model, AdapterParams):
        header = {
            "kind": "adapter",
            "dim": model.dim,
            "hidden": model.hidden,
            "use_batchnorm": int(model.use_batchnorm),
            "bn_momentum": repr(float(model.bn_momentum)),
            "bn_eps": repr(float(model.bn_eps)),
        }
        return _encode(header, [(n, getattr(model, n)) for n in ADAPTER_FIELDS])
    if isinstance(model, LinearHead):
        header = {"kind": "linear", "classes": model.n_classes, "dim": model.dim, "normalize_inputs": int(model.normalize_inputs)}
        return _encode(header, [(n, getattr(model, n)) for n in LINEAR_FIELDS])
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(model, path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model))


def load_checkpoint(path):
    """Returns an ``AdapterParams`` or ``LinearHead`` with float32 arrays."""
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_checkpoint(data, os.fspath(path))


def parse_checkpoint(data: bytes, name: str = "checkpoint"):
    marker = b"\n---\n"
    end = data.find(marker)
    if end < 0:
        raise FormatError(f"{name}: header terminator not found", field="header", offset=len(data))
    try:
        lines = data[:end].decode("ascii").split("\n")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{name}: header is not ASCII", field="header", offset=exc.start) from None
    if lines[0] != MAGIC:
        raise FormatError(f"{name}: not a checkpoint file", field="magic", offset=0)
    header = {}
    offset = len(lines[0]) + 1
    for line in lines[1:]:
        key, sep, value = line.partition(" = ")
        if not sep:
            raise FormatError(f"{name}: malformed header line {line!r}", field="header", offset=offset)
        header[key] = value
        offset += len(line) + 1
    version = header.get("format_version")
    if version != str(FORMAT_VERSION):
        raise VersionMismatch(f"{name}: checkpoint format_version {version!r}, expected {FORMAT_VERSION}")
    body = data[end + len(marker) :]
    body_start = end + len(marker)

    arrays = {}
    pos = 0
    for spec in header.get("fields", "").split(","):
        fname, _, shape_s = spec.partition(":")
        try:
            shape = tuple(int(s) for s in shape_s.split("x"))
        except ValueError:
            raise FormatError(f"{name}: bad field entry {spec!r}", field="fields", offset=0) from None
        if any(s < 0 for s in shape):
            raise FormatError(f"{name}: negative extent in {spec!r}", field="fields", offset=0)
        nbytes = 4 * int(np.prod(shape))
        if pos + nbytes > len(body):
            raise FormatError(
                f"{name}: field {fname} needs {nbytes} bytes, {len(body) - pos} remain",
                field=fname,
                offset=body_start + pos,
            )
        arrays[fname] = np.frombuffer(body[pos : pos + nbytes], dtype="<f4").astype(np.float32).reshape(shape)
        pos += nbytes
    if pos != len(body):
        raise FormatError(f"{name}: {len(body) - pos} trailing bytes", field="body", offset=body_start + pos)
    if sha256_hex(body) != header.get("sha256"):
        raise ChecksumError(f"{name}: checksum mismatch", field="sha256", offset=body_start)

    kind = header.get("kind")
    expected = {"adapter": ADAPTER_FIELDS, "linear": LINEAR_FIELDS}.get(kind)
    if expected is not None and tuple(arrays) != expected:
        raise FormatError(f"{name}: fields {list(arrays)} do not match kind {kind!r}", field="fields", offset=0)
    try:
        return _build(kind, header, arrays, name)
    except KeyError as exc:
        raise FormatError(f"{name}: missing header key {exc.args[0]}", field=exc.args[0], offset=0) from None
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{name}: {exc}", field="body", offset=body_start) from None


def _adapter_shapes(w1_shape):
    d, h = w1_shape
    return {"w1": (d, h), "b1": (h,), "bn_gamma": (h,), "bn_beta": (h,), "bn_running_mean": (h,), "bn_running_var": (h,), "w2": (h, d), "b2": (d,)}


def _build(kind, header, arrays, name):
    if kind == "adapter":
        if arrays["w1"].ndim != 2:
            raise FormatError(f"{name}: w1 must be a matrix", field="w1", offset=0)
        for fname, shape in _adapter_shapes(arrays["w1"].shape).items():
            if arrays[fname].shape != shape:
                raise FormatError(f"{name}: {fname} has shape {arrays[fname].shape}, expected {shape}", field=fname, offset=0)
        return AdapterParams(
            **{n: arrays[n] for n in ADAPTER_FIELDS},
            bn_momentum=float(header["bn_momentum"]),
            bn_eps=float(header["bn_eps"]),
            use_batchnorm=header["use_batchnorm"] == "1",
        )
    if kind == "linear":
        return LinearHead(arrays["weights"], arrays["bias"], normalize_inputs=header["normalize_inputs"] == "1")
    raise FormatError(f"{name}: unknown checkpoint kind {kind!r}", field="kind", offset=0)
