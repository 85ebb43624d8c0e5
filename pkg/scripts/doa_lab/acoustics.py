"""
Shoebox-room acoustics: geometry, image-source RIR simulation, rendering and
noise injection.

Coordinates are metres in a room spanning [0, Lx] × [0, Ly] × [0, Lz].
Multichannel time signals are arrays of shape (M, samples).

Wall reflectivity is uniform and derived from RT60 with Sabine's formula;
fractional image delays use a 17-tap Hann-windowed sinc so inter-microphone
phase survives sampling.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import fftconvolve

from .constants import (
    ARRAY_CLEARANCE,
    ARRAY_HEIGHT,
    MIC_COUNT,
    MIC_SPACING,
    MIN_PATH,
    MIN_SOURCE_DISTANCE,
    SAMPLE_RATE,
    SINC_HALF,
    SINC_TAPS,
    SPEED_OF_SOUND,
    WALL_MARGIN,
)

logger = logging.getLogger(__name__)

Vec3 = Tuple[float, float, float]

_EPS = 1e-9
_IMAGE_CHUNK = 1 << 16


class GeometryError(ValueError):
    """A source, array or microphone cannot be placed inside the room."""


class ReverberationError(ValueError):
    """RT60 too short for the room volume under Sabine's formula."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Room:
    dims: Vec3
    rt60: float = 0.0
    name: str = ""

    def __post_init__(self) -> None:
        if len(self.dims) != 3 or any(d <= 0 for d in self.dims):
            raise GeometryError(f"room dimensions must be three positive lengths, got {self.dims}")
        if self.rt60 < 0:
            raise ValueError(f"rt60 must be >= 0, got {self.rt60}")

    @property
    def label(self) -> str:
        return self.name or "x".join(f"{d:g}" for d in self.dims)

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dims
        return lx * ly * lz

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dims
        return 2.0 * (lx * ly + ly * lz + lx * lz)

    def contains(self, point: Sequence[float], margin: float = 0.0) -> bool:
        """True if *point* lies inside the room with at least *margin* to every wall."""
        p = np.asarray(point, dtype=float)
        dims = np.asarray(self.dims)
        if margin > 0:
            return bool(np.all(p >= margin - _EPS) and np.all(dims - p >= margin - _EPS))
        return bool(np.all(p > 0.0) and np.all(p < dims))


@dataclass(frozen=True)
class ArraySetup:
    """Uniform linear array; mic m sits at centre + (m - (M-1)/2)·d·axis."""
    center: Vec3
    axis: Vec3 = (1.0, 0.0, 0.0)
    mic_count: int = MIC_COUNT
    spacing: float = MIC_SPACING

    def __post_init__(self) -> None:
        if self.mic_count < 2:
            raise GeometryError(f"array needs at least 2 microphones, got {self.mic_count}")
        if self.spacing <= 0:
            raise GeometryError(f"mic spacing must be positive, got {self.spacing}")
        if abs(float(np.linalg.norm(self.axis)) - 1.0) > 1e-9 or abs(self.axis[2]) > 1e-12:
            raise GeometryError(f"array axis must be a horizontal unit vector, got {self.axis}")

    @property
    def mic_positions(self) -> np.ndarray:
        offsets = (np.arange(self.mic_count) - (self.mic_count - 1) / 2.0) * self.spacing
        return np.asarray(self.center)[None, :] + offsets[:, None] * np.asarray(self.axis)[None, :]

    @property
    def perpendicular(self) -> np.ndarray:
        """In-plane normal: the axis rotated +90° about z (the 90° DOA direction)."""
        ax, ay, _ = self.axis
        return np.array([-ay, ax, 0.0])

    def check_inside(self, room: Room) -> None:
        for m, pos in enumerate(self.mic_positions):
            if not room.contains(pos):
                raise GeometryError(f"microphone {m} at {tuple(pos)} is outside room {room.label}")


@dataclass(frozen=True)
class SourcePlacement:
    doa_deg: float
    distance: float
    position: Vec3
    clamped: bool = False
    requested_distance: float = 0.0


@dataclass
class Rir:
    taps: np.ndarray
    fs: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if self.taps.ndim != 1 or self.taps.size < 1:
            raise ValueError("RIR needs at least one tap")
        if not np.all(np.isfinite(self.taps)):
            raise ValueError("RIR taps must be finite")


# ---------------------------------------------------------------------------
# Room acoustics
# ---------------------------------------------------------------------------

def minimum_rt60(room: Room) -> float:
    """Smallest RT60 for which Sabine's absorption stays below 1."""
    return 0.161 * room.volume / room.surface


def sabine_reflection(room: Room) -> float:
    """Uniform wall reflection coefficient β = √(1 − α), α = 0.161·V/(S·T60).

    RT60 of 0 means anechoic and yields β = 0.
    """
    if room.rt60 == 0:
        return 0.0
    alpha = 0.161 * room.volume / (room.surface * room.rt60)
    if alpha >= 1.0:
        raise ReverberationError(
            f"RT60 {room.rt60:g} s is too short for room {room.label}: "
            f"minimum feasible RT60 is {minimum_rt60(room):.4f} s"
        )
    return math.sqrt(1.0 - alpha)


def array_axis(room: Room) -> Vec3:
    """Array line parallel to the room's long side."""
    lx, ly, _ = room.dims
    return (1.0, 0.0, 0.0) if lx >= ly else (0.0, 1.0, 0.0)


def array_centers(
    room: Room,
    count: int,
    rng: np.random.Generator,
    clearance: float = ARRAY_CLEARANCE,
    height: float = ARRAY_HEIGHT,
) -> List[Vec3]:
    """Draw *count* array centres with *clearance* to the side walls where the
    room allows it, otherwise the maximal clearance (the room's mid-line)."""
    lz = room.dims[2]
    z = min(height, lz / 2.0)
    centers: List[Vec3] = []
    for _ in range(count):
        coords = []
        for length in room.dims[:2]:
            lo = min(clearance, length / 2.0)
            hi = length - lo
            coords.append(float(rng.uniform(lo, hi)) if hi > lo else length / 2.0)
        centers.append((coords[0], coords[1], z))
    return centers


def place_source(
    array: ArraySetup,
    doa_deg: float,
    r: float,
    room: Room,
    margin: float = WALL_MARGIN,
) -> SourcePlacement:
    """Place a source in the array's horizontal plane at *doa_deg* from the axis.

    If the nominal position violates the wall margin the distance is reduced to
    the largest feasible value and the placement is flagged ``clamped``.
    """
    if not 0.0 <= doa_deg <= 180.0:
        raise ValueError(f"DOA must lie in [0, 180] degrees, got {doa_deg}")
    center = np.asarray(array.center, dtype=float)
    if not room.contains(center, margin):
        raise GeometryError(f"array centre {array.center} is within {margin} m of a wall of room {room.label}")

    theta = math.radians(doa_deg)
    direction = math.cos(theta) * np.asarray(array.axis) + math.sin(theta) * array.perpendicular

    r_max = r
    for i, length in enumerate(room.dims):
        u = direction[i]
        if u > 1e-12:
            r_max = min(r_max, (length - margin - center[i]) / u)
        elif u < -1e-12:
            r_max = min(r_max, (center[i] - margin) / -u)

    if r_max < MIN_SOURCE_DISTANCE:
        raise GeometryError(
            f"no feasible source distance >= {MIN_SOURCE_DISTANCE} m in room {room.label} "
            f"for array centre {array.center} at DOA {doa_deg:g} deg"
        )
    clamped = r_max < r - _EPS
    distance = r_max if clamped else r
    position = center + distance * direction
    if clamped:
        logger.debug("DOA %g deg in room %s clamped from %.2f m to %.3f m", doa_deg, room.label, r, distance)
    return SourcePlacement(
        doa_deg=float(doa_deg),
        distance=float(distance),
        position=(float(position[0]), float(position[1]), float(position[2])),
        clamped=clamped,
        requested_distance=float(r),
    )


def auto_max_order(room: Room, max_path: float) -> int:
    """Reflection order reaching every image source within *max_path* metres."""
    return int(math.ceil(sum(max_path / length for length in room.dims))) + 3


def _axis_images(source: float, mic: float, length: float, n_max: int) -> Tuple[np.ndarray, np.ndarray]:
    n = np.arange(-n_max, n_max + 1)
    coords, orders = [], []
    for p in (0, 1):
        coords.append((1 - 2 * p) * source + 2 * n * length - mic)
        orders.append(np.abs(n - p) + np.abs(n))
    return np.concatenate(coords), np.concatenate(orders)


def image_sources(
    room: Room,
    source: Sequence[float],
    mic: Sequence[float],
    max_order: int,
    max_path: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Distances and reflection orders of all image sources up to *max_order*
    whose path to *mic* is at most *max_path* (the direct path always kept)."""
    offsets, orders = [], []
    for i, length in enumerate(room.dims):
        n_max = min(int(math.ceil(max_path / (2.0 * length))) + 1, max_order + 1)
        offsets.append(_axis_images(source[i], mic[i], length, n_max))

    (dx, ox), (dy, oy), (dz, oz) = offsets
    order = ox[:, None, None] + oy[None, :, None] + oz[None, None, :]
    dist = np.sqrt(dx[:, None, None] ** 2 + dy[None, :, None] ** 2 + dz[None, None, :] ** 2)
    keep = (order <= max_order) & ((dist <= max_path) | (order == 0))
    return dist[keep], order[keep]


def simulate_rir(
    room: Room,
    beta: float,
    src: SourcePlacement,
    mic: Sequence[float],
    fs: int = SAMPLE_RATE,
    max_order: Optional[int] = None,
    c: float = SPEED_OF_SOUND,
    duration: Optional[float] = None,
) -> Rir:
    """Image-source RIR from *src* to *mic*.

    Each image contributes β^order / (4π·dist) at delay dist/c through a
    Hann-windowed sinc kernel. The response is truncated at *duration*
    (default: RT60, or the last image for an anechoic room) plus the kernel
    half-width. *max_order* defaults to :func:`auto_max_order`.
    """
    if fs <= 0:
        raise ValueError(f"sampling rate must be positive, got {fs}")
    if max_order is not None and max_order < 0:
        raise ValueError(f"max_order must be >= 0, got {max_order}")
    for label, point in (("source", src.position), ("microphone", mic)):
        if not room.contains(point):
            raise GeometryError(f"{label} at {tuple(point)} is outside room {room.label}")

    direct = max(float(np.linalg.norm(np.subtract(src.position, mic))), MIN_PATH)
    if duration is None:
        duration = room.rt60 if beta > 0 else direct / c
    duration = max(duration, direct / c)
    max_path = duration * c
    if beta == 0:
        max_order = 0
    elif max_order is None:
        max_order = auto_max_order(room, max_path)

    dist, order = image_sources(room, src.position, mic, max_order, max_path)
    dist = np.maximum(dist, MIN_PATH)
    amp = np.power(beta, order) / (4.0 * math.pi * dist)

    n_taps = int(math.ceil(duration * fs)) + SINC_HALF + 1
    taps = np.zeros(n_taps)
    kernel = np.arange(-SINC_HALF, SINC_HALF + 1)
    for start in range(0, dist.size, _IMAGE_CHUNK):
        delay = dist[start:start + _IMAGE_CHUNK] * (fs / c)
        idx = np.rint(delay).astype(np.int64)[:, None] + kernel[None, :]
        t = idx - delay[:, None]
        window = 0.5 * (1.0 + np.cos(2.0 * math.pi * t / SINC_TAPS))
        weights = window * np.sinc(t) * amp[start:start + _IMAGE_CHUNK, None]
        valid = (idx >= 0) & (idx < n_taps)
        taps += np.bincount(idx[valid], weights=weights[valid], minlength=n_taps)[:n_taps]
    return Rir(taps=taps, fs=fs)


def simulate_array_rirs(
    room: Room,
    beta: float,
    src: SourcePlacement,
    array: ArraySetup,
    fs: int = SAMPLE_RATE,
    max_order: Optional[int] = None,
) -> List[Rir]:
    """One RIR per microphone of *array*."""
    array.check_inside(room)
    return [simulate_rir(room, beta, src, mic, fs, max_order) for mic in array.mic_positions]


# ---------------------------------------------------------------------------
# Signal rendering
# ---------------------------------------------------------------------------

def render(signal: np.ndarray, rirs: Sequence[Rir]) -> np.ndarray:
    """Convolve a mono *signal* with one RIR per channel; output keeps the
    input length, shape (M, len(signal))."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.size == 0:
        raise ValueError("cannot render an empty signal")
    if len({r.fs for r in rirs}) > 1:
        raise ValueError("all RIRs must share one sampling rate")
    out = np.empty((len(rirs), signal.size))
    for m, rir in enumerate(rirs):
        out[m] = fftconvolve(signal, rir.taps, mode="full")[: signal.size]
    return out


def add_noise_snr(x: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add spatially white Gaussian noise at *snr_db*, powers taken over the
    whole multichannel signal. ``+inf`` returns an unchanged copy."""
    x = np.asarray(x, dtype=np.float64)
    if math.isinf(snr_db) and snr_db > 0:
        return x.copy()
    p_signal = float(np.mean(x ** 2))
    if p_signal == 0.0:
        raise ValueError("cannot set an SNR on a silent signal")
    noise = rng.standard_normal(x.shape)
    target = p_signal / 10.0 ** (snr_db / 10.0)
    noise *= math.sqrt(target / float(np.mean(noise ** 2)))
    return x + noise


def steering_delays(
    doa_deg: float,
    M: int = MIC_COUNT,
    d: float = MIC_SPACING,
    c: float = SPEED_OF_SOUND,
) -> np.ndarray:
    """Far-field ULA delays τ_m = m·d·cos(θ)/c relative to mic 0."""
    if not 0.0 <= doa_deg <= 180.0:
        raise ValueError(f"DOA must lie in [0, 180] degrees, got {doa_deg}")
    return np.arange(M) * d * math.cos(math.radians(doa_deg)) / c


# ---------------------------------------------------------------------------
# RIR diagnostics
# ---------------------------------------------------------------------------

def schroeder_curve(taps: np.ndarray) -> np.ndarray:
    """Backward-integrated energy decay in dB, 0 dB at the first tap."""
    energy = np.cumsum(np.asarray(taps, dtype=np.float64)[::-1] ** 2)[::-1]
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(energy / energy[0])


def estimate_rt60(rir: Rir, start_db: float = -5.0, stop_db: float = -25.0) -> float:
    """RT60 extrapolated from a line fit to the decay between the two levels."""
    curve = schroeder_curve(rir.taps)
    idx = np.nonzero((curve <= start_db) & (curve >= stop_db))[0]
    if idx.size < 2:
        raise ValueError("decay curve does not span the fitting range")
    slope, _ = np.polyfit(idx / rir.fs, curve[idx], 1)
    return -60.0 / slope


def write_rir_dump(rirs: Sequence[Rir], out_dir: Path, prefix: str = "rir") -> List[Path]:
    """Write each RIR as raw little-endian float32 plus a text sidecar."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: List[Path] = []
    for m, rir in enumerate(rirs):
        raw = out_dir / f"{prefix}_mic{m}.f32"
        rir.taps.astype("<f4").tofile(raw)
        (out_dir / f"{prefix}_mic{m}.txt").write_text(
            f"fs={rir.fs}\ntaps={rir.taps.size}\n", encoding="utf-8"
        )
        paths.append(raw)
    return paths
