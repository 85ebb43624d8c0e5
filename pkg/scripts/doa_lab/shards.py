"""
Binary shard format for labelled phase-map records.

Layout (little-endian)::

    header   magic "DOAP" | version u16 | M u16 | K u32 | I u16 | count u64
    records  count × (label u64 bitmask | M·K float32 phases, mic-major)

Each failure mode of :func:`read_shard` raises its own ``ShardFormatError``
subclass.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import FrozenSet, Iterator, List, Tuple

import numpy as np

from .constants import BAND_HI, BAND_LO, SHARD_MAGIC, SHARD_VERSION
from .dsp import PhaseMap

_HEADER = struct.Struct("<4sHHIHQ")
HEADER_SIZE = _HEADER.size
MAX_CLASSES = 64


class ShardFormatError(ValueError):
    """Malformed shard file."""


class BadMagicError(ShardFormatError):
    pass


class UnsupportedVersionError(ShardFormatError):
    pass


class TruncatedShardError(ShardFormatError):
    pass


class RecordCountError(ShardFormatError):
    pass


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledFrame:
    phase: PhaseMap
    label: FrozenSet[int]


@dataclass
class RecordBatch:
    """Array form of a list of labelled frames.

    phases: (n, M, K) float32; labels: (n, I) uint8 multi-hot.
    """
    phases: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.phases.ndim != 3 or self.labels.ndim != 2:
            raise ValueError("phases must be (n, M, K) and labels (n, I)")
        if self.phases.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.phases.shape[0]} phase maps but {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return self.phases.shape[0]

    def __iter__(self) -> Iterator[LabeledFrame]:
        for phase, label in zip(self.phases, self.labels):
            yield LabeledFrame(
                phase=PhaseMap(values=phase, band_lo=BAND_LO, band_hi=BAND_LO + phase.shape[1] - 1),
                label=frozenset(int(i) for i in np.flatnonzero(label)),
            )

    @property
    def mics(self) -> int:
        return self.phases.shape[1]

    @property
    def bands(self) -> int:
        return self.phases.shape[2]

    @property
    def classes(self) -> int:
        return self.labels.shape[1]

    @classmethod
    def empty(cls, mics: int, bands: int = BAND_HI - BAND_LO + 1, classes: int = 37) -> RecordBatch:
        return cls(
            phases=np.zeros((0, mics, bands), dtype=np.float32),
            labels=np.zeros((0, classes), dtype=np.uint8),
        )

    @classmethod
    def concat(cls, batches: List[RecordBatch]) -> RecordBatch:
        return cls(
            phases=np.concatenate([b.phases for b in batches]),
            labels=np.concatenate([b.labels for b in batches]),
        )


def encode_labels(labels: np.ndarray) -> np.ndarray:
    """Multi-hot (n, I) → uint64 bitmask per record."""
    if labels.shape[1] > MAX_CLASSES:
        raise ValueError(f"at most {MAX_CLASSES} classes fit a u64 label, got {labels.shape[1]}")
    weights = np.left_shift(np.uint64(1), np.arange(labels.shape[1], dtype=np.uint64))
    return (labels.astype(np.uint64) * weights[None, :]).sum(axis=1, dtype=np.uint64)


def decode_labels(masks: np.ndarray, classes: int) -> np.ndarray:
    """uint64 bitmasks → (n, I) uint8 multi-hot."""
    bits = np.arange(classes, dtype=np.uint64)
    masks = np.asarray(masks, dtype=np.uint64)
    return ((masks[:, None] >> bits[None, :]) & np.uint64(1)).astype(np.uint8)


def record_dtype(mics: int, bands: int) -> np.dtype:
    return np.dtype([("label", "<u8"), ("phase", "<f4", (mics * bands,))])


# ---------------------------------------------------------------------------
# Header
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShardHeader:
    mics: int
    bands: int
    classes: int
    count: int
    version: int = SHARD_VERSION
    magic: bytes = SHARD_MAGIC

    def pack(self) -> bytes:
        return _HEADER.pack(self.magic, self.version, self.mics, self.bands, self.classes, self.count)

    @classmethod
    def unpack(cls, raw: bytes) -> ShardHeader:
        if len(raw) < HEADER_SIZE:
            raise TruncatedShardError(f"header needs {HEADER_SIZE} bytes, file has {len(raw)}")
        magic, version, mics, bands, classes, count = _HEADER.unpack(raw[:HEADER_SIZE])
        if magic != SHARD_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {SHARD_MAGIC!r}")
        if version != SHARD_VERSION:
            raise UnsupportedVersionError(f"shard version {version} not supported (expected {SHARD_VERSION})")
        return cls(mics=mics, bands=bands, classes=classes, count=count, version=version, magic=magic)


# ---------------------------------------------------------------------------
# Read / write
# ---------------------------------------------------------------------------

def _encode_records(batch: RecordBatch) -> bytes:
    records = np.empty(len(batch), dtype=record_dtype(batch.mics, batch.bands))
    records["label"] = encode_labels(batch.labels)
    records["phase"] = batch.phases.reshape(len(batch), batch.mics * batch.bands)
    return records.tobytes()


class ShardWriter:
    """Append record batches to a shard; the header count is patched on close.

    Usage::

        with ShardWriter(path, mics=4, bands=255, classes=37) as w:
            w.append(batch)
        digest = w.digest
    """

    def __init__(self, path: Path, mics: int, bands: int, classes: int) -> None:
        if classes > MAX_CLASSES:
            raise ValueError(f"at most {MAX_CLASSES} classes fit a u64 label, got {classes}")
        self.path = path
        self.mics, self.bands, self.classes = mics, bands, classes
        self.count = 0
        self.digest = ""
        self._file = None

    def __enter__(self) -> ShardWriter:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "wb")
        self._file.write(ShardHeader(self.mics, self.bands, self.classes, 0).pack())
        return self

    def append(self, batch: RecordBatch) -> None:
        if (batch.mics, batch.bands, batch.classes) != (self.mics, self.bands, self.classes):
            raise ValueError(
                f"batch shape (M={batch.mics}, K={batch.bands}, I={batch.classes}) does not match "
                f"shard (M={self.mics}, K={self.bands}, I={self.classes})"
            )
        self._file.write(_encode_records(batch))
        self.count += len(batch)

    def __exit__(self, exc_type, exc, tb) -> None:
        self._file.seek(0)
        self._file.write(ShardHeader(self.mics, self.bands, self.classes, self.count).pack())
        self._file.close()
        self._file = None
        if exc_type is None:
            self.digest = file_digest(self.path)


def write_shard(path: Path, batch: RecordBatch) -> str:
    """Write *batch* to *path*; returns the SHA-256 digest of the file bytes."""
    with ShardWriter(path, batch.mics, batch.bands, batch.classes) as writer:
        writer.append(batch)
    return writer.digest


def _checked_header(path: Path) -> Tuple[ShardHeader, int]:
    with open(path, "rb") as f:
        header = ShardHeader.unpack(f.read(HEADER_SIZE))
    body = path.stat().st_size - HEADER_SIZE
    itemsize = record_dtype(header.mics, header.bands).itemsize
    if body % itemsize:
        raise TruncatedShardError(f"{path}: body of {body} bytes is not a whole number of records")
    if body // itemsize != header.count:
        raise RecordCountError(
            f"{path}: header declares {header.count} records, file holds {body // itemsize}"
        )
    return header, itemsize


def read_shard(path: Path) -> Tuple[ShardHeader, RecordBatch]:
    header, _ = _checked_header(path)
    raw = np.fromfile(path, dtype=record_dtype(header.mics, header.bands), offset=HEADER_SIZE)
    batch = RecordBatch(
        phases=raw["phase"].reshape(header.count, header.mics, header.bands).copy(),
        labels=decode_labels(raw["label"], header.classes),
    )
    return header, batch


def open_records(path: Path) -> Tuple[ShardHeader, np.ndarray]:
    """Validated memory map of a shard's records (structured array)."""
    header, _ = _checked_header(path)
    if header.count == 0:
        return header, np.zeros(0, dtype=record_dtype(header.mics, header.bands))
    records = np.memmap(
        path,
        dtype=record_dtype(header.mics, header.bands),
        mode="r",
        offset=HEADER_SIZE,
        shape=(header.count,),
    )
    return header, records


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
