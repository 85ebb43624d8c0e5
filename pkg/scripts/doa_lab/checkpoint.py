"""
Model checkpoints.

Layout (little-endian)::

    magic "DOAM" | version u16 | spec length u32 | ModelSpec JSON (utf-8)
    parameters as float32, declaration order, row-major
"""
from __future__ import annotations

import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Optional

import numpy as np

from .constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from .nn import Model, ModelSpec

logger = logging.getLogger(__name__)

_PREFIX = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def save_checkpoint(model: Model, path: Path) -> Path:
    spec_json = json.dumps(model.spec.to_dict(), sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(spec_json)))
        f.write(spec_json)
        for name, _ in model.spec.param_shapes():
            f.write(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())
    tmp.replace(path)
    logger.debug("wrote checkpoint %s", path)
    return path


def read_spec(path: Path) -> ModelSpec:
    """The ModelSpec stored in a checkpoint header."""
    with open(path, "rb") as f:
        spec, _ = _read_header(f.read(), path)
    return spec


def _read_header(raw: bytes, path: Path):
    if len(raw) < _PREFIX.size:
        raise TruncatedCheckpointError(f"{path}: {len(raw)} bytes, header needs {_PREFIX.size}")
    magic, version, spec_len = _PREFIX.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: checkpoint version {version} not supported (expected {CHECKPOINT_VERSION})"
        )
    end = _PREFIX.size + spec_len
    if len(raw) < end:
        raise TruncatedCheckpointError(f"{path}: spec block cut short")
    try:
        spec = ModelSpec.from_dict(json.loads(raw[_PREFIX.size : end].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable spec block: {exc}") from exc
    return spec, end


def load_checkpoint(path: Path, expected: Optional[ModelSpec] = None) -> Model:
    """Load a model; with *expected*, a differing spec raises ShapeMismatchError."""
    raw = Path(path).read_bytes()
    spec, offset = _read_header(raw, path)
    if expected is not None and spec != expected:
        diffs = [
            f"{k}: checkpoint {v} vs run {getattr(expected, k)}"
            for k, v in spec.to_dict().items()
            if expected.to_dict()[k] != v
        ]
        raise ShapeMismatchError(f"{path}: model shape differs ({'; '.join(diffs)})")

    params = OrderedDict()
    for name, shape in spec.param_shapes():
        n = int(np.prod(shape))
        if len(raw) < offset + 4 * n:
            raise TruncatedCheckpointError(f"{path}: parameter {name} cut short")
        params[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * n
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after parameters")
    return Model(spec=spec, params=params, dtype=np.dtype(np.float32))
