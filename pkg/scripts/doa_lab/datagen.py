"""
Training and test data synthesis.

Training data follows the noise-signal recipe: for one source/array setup,
two reverberant white-noise renderings at different DOAs are concatenated
along time, their STFT bins are shuffled along time separately for each
frequency band (all microphones moving together), and every frame's phase
map becomes a record labelled with both DOA classes.

Generation is a pure function of (grid, master seed): every random draw
comes from a generator derived from the master seed and the cell's grid
coordinates, so worker count and scheduling cannot change the output.
"""
from __future__ import annotations

import json
import logging
import math
import multiprocessing
import zlib
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.io import wavfile

from .acoustics import (
    ArraySetup,
    GeometryError,
    Rir,
    Room,
    SourcePlacement,
    add_noise_snr,
    array_axis,
    array_centers,
    place_source,
    render,
    sabine_reflection,
    simulate_array_rirs,
)
from .constants import (
    BAND_HI,
    BAND_LO,
    DFT_LEN,
    DOA_RESOLUTION,
    MIC_COUNT,
    MIC_SPACING,
    SAMPLE_RATE,
    SIGNAL_DURATION,
    SNR_RANGE,
)
from .dsp import StftFrameSet, frame_count, phase_maps, stft
from .shards import LabeledFrame, RecordBatch, ShardWriter, file_digest

logger = logging.getLogger(__name__)

__all__ = ["LabeledFrame", "RecordBatch"]

# Seed-derivation streams
_ARRAY_STREAM = 1
_CELL_STREAM = 2
_SINGLE_STREAM = 3
_TEST_ARRAY_STREAM = 4
_TEST_SOURCE_STREAM = 5
_TEST_NOISE_STREAM = 6

MANIFEST_NAME = "manifest.json"


# ---------------------------------------------------------------------------
# DOA grid
# ---------------------------------------------------------------------------

def doa_classes(resolution: int = DOA_RESOLUTION) -> np.ndarray:
    """DOA class centres in degrees: 0, res, …, 180."""
    if resolution <= 0 or 180 % resolution:
        raise ValueError(f"DOA resolution must divide 180, got {resolution}")
    return np.arange(0, 181, resolution)


def class_index(doa_deg: float, resolution: int = DOA_RESOLUTION) -> int:
    idx = doa_deg / resolution
    if not 0 <= doa_deg <= 180 or abs(idx - round(idx)) > 1e-9:
        raise ValueError(f"DOA {doa_deg} is not on the {resolution}-degree class grid")
    return int(round(idx))


def all_pairs(resolution: int = DOA_RESOLUTION) -> List[Tuple[int, int]]:
    """Unordered DOA pairs (θ1 < θ2) over the class grid."""
    return [(int(a), int(b)) for a, b in combinations(doa_classes(resolution), 2)]


def derive_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a grid coordinate; same key, same stream."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(int(k) for k in key)))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainGrid:
    rooms: Tuple[Room, ...]
    positions_per_room: int = 7
    distances: Tuple[float, ...] = (1.0, 2.0)
    snr_range: Tuple[float, float] = SNR_RANGE
    doa_resolution: int = DOA_RESOLUTION
    signal_duration: float = SIGNAL_DURATION
    pairs: Optional[Tuple[Tuple[int, int], ...]] = None
    include_single: bool = False
    mic_count: int = MIC_COUNT
    spacing: float = MIC_SPACING

    def __post_init__(self) -> None:
        doa_classes(self.doa_resolution)
        if not self.rooms:
            raise ValueError("training grid needs at least one room")
        if self.positions_per_room < 1:
            raise ValueError("positions_per_room must be >= 1")
        if self.signal_duration * SAMPLE_RATE < DFT_LEN:
            raise ValueError(f"signal_duration {self.signal_duration} s is shorter than one STFT frame")
        lo, hi = self.snr_range
        if lo > hi:
            raise ValueError(f"snr_range {self.snr_range} is empty")

    @property
    def n_classes(self) -> int:
        return len(doa_classes(self.doa_resolution))

    def pair_list(self) -> List[Tuple[int, int]]:
        if self.pairs is None:
            return all_pairs(self.doa_resolution)
        pairs = []
        for a, b in self.pairs:
            if a == b:
                raise ValueError(f"DOA pair ({a}, {b}) needs two distinct directions")
            class_index(a, self.doa_resolution)
            class_index(b, self.doa_resolution)
            pairs.append((min(a, b), max(a, b)))
        return sorted(set(pairs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rooms"] = [{"name": r.name, "dims": list(r.dims), "rt60": r.rt60} for r in self.rooms]
        d["distances"] = list(self.distances)
        d["snr_range"] = list(self.snr_range)
        d["pairs"] = None if self.pairs is None else [list(p) for p in self.pair_list()]
        return d


@dataclass(frozen=True)
class Setup:
    """One source/array configuration: a cell of the training grid without the DOAs."""
    room: Room
    array: ArraySetup
    distance: float
    room_index: int = 0
    position_index: int = 0
    distance_index: int = 0

    @property
    def key(self) -> Tuple[int, int, int]:
        return (self.room_index, self.position_index, self.distance_index)


class RirBank:
    """Array RIRs of one setup, simulated once per DOA."""

    def __init__(self, setup: Setup, fs: int = SAMPLE_RATE) -> None:
        self.setup = setup
        self.fs = fs
        self.beta = sabine_reflection(setup.room)
        self._placements: Dict[float, SourcePlacement] = {}
        self._rirs: Dict[float, List[Rir]] = {}

    def placement(self, doa_deg: float) -> SourcePlacement:
        if doa_deg not in self._placements:
            self._placements[doa_deg] = place_source(
                self.setup.array, doa_deg, self.setup.distance, self.setup.room
            )
        return self._placements[doa_deg]

    def rirs(self, doa_deg: float) -> List[Rir]:
        if doa_deg not in self._rirs:
            self._rirs[doa_deg] = simulate_array_rirs(
                self.setup.room, self.beta, self.placement(doa_deg), self.setup.array, self.fs
            )
        return self._rirs[doa_deg]


# ---------------------------------------------------------------------------
# Single-DOA rendering and bin randomisation
# ---------------------------------------------------------------------------

def synth_single_doa(
    setup: Setup,
    doa_deg: float,
    duration: float,
    rng: np.random.Generator,
    bank: Optional[RirBank] = None,
    fs: int = SAMPLE_RATE,
) -> np.ndarray:
    """White Gaussian source rendered through the setup's array RIRs, (M, samples)."""
    n = int(round(duration * fs))
    if n < DFT_LEN:
        raise ValueError(f"duration {duration} s is shorter than one {DFT_LEN}-sample frame")
    bank = bank or RirBank(setup, fs)
    source = rng.standard_normal(n)
    return render(source, bank.rirs(doa_deg))


def randomize_bins(frames: StftFrameSet, rng: np.random.Generator) -> StftFrameSet:
    """Shuffle frames along time independently per band; each moved element is
    the full M-channel complex vector of a TF bin."""
    n, n_bins, _ = frames.data.shape
    order = rng.permuted(np.tile(np.arange(n), (n_bins, 1)), axis=1)
    data = frames.data[order.T, np.arange(n_bins)[None, :], :]
    return StftFrameSet(data=data, dft_len=frames.dft_len, hop=frames.hop, fs=frames.fs)


def randomize_pair(a: StftFrameSet, b: StftFrameSet, rng: np.random.Generator) -> StftFrameSet:
    """Concatenate two frame sets along time and randomise per band."""
    if a.data.shape[1:] != b.data.shape[1:] or a.dft_len != b.dft_len:
        raise ValueError(
            f"frame sets differ: {a.data.shape[1:]} (dft {a.dft_len}) vs "
            f"{b.data.shape[1:]} (dft {b.dft_len})"
        )
    joined = StftFrameSet(
        data=np.concatenate([a.data, b.data], axis=0), dft_len=a.dft_len, hop=a.hop, fs=a.fs
    )
    return randomize_bins(joined, rng)


# ---------------------------------------------------------------------------
# Training records
# ---------------------------------------------------------------------------

def _labels(n: int, classes: Sequence[int], n_classes: int) -> np.ndarray:
    labels = np.zeros((n, n_classes), dtype=np.uint8)
    labels[:, list(classes)] = 1
    return labels


def make_training_records(
    setup: Setup,
    theta1: int,
    theta2: int,
    master_seed: int,
    bank: Optional[RirBank] = None,
    duration: float = SIGNAL_DURATION,
    snr_range: Tuple[float, float] = SNR_RANGE,
    resolution: int = DOA_RESOLUTION,
) -> RecordBatch:
    """Labelled phase maps for one (setup, DOA pair) cell.

    Both renderings get their own noise level drawn from *snr_range*; they are
    concatenated in time before the STFT, so 2 s + 2 s at 16 kHz yields 249
    frames.
    """
    if theta1 == theta2:
        raise ValueError(f"DOA pair ({theta1}, {theta2}) needs two distinct directions")
    theta1, theta2 = min(theta1, theta2), max(theta1, theta2)
    c1, c2 = class_index(theta1, resolution), class_index(theta2, resolution)
    rng = derive_rng(master_seed, _CELL_STREAM, *setup.key, theta1, theta2)
    bank = bank or RirBank(setup)

    parts = []
    for theta in (theta1, theta2):
        clean = synth_single_doa(setup, theta, duration, rng, bank)
        parts.append(add_noise_snr(clean, rng.uniform(*snr_range), rng))
    frames = randomize_bins(stft(np.concatenate(parts, axis=1)), rng)
    phases = phase_maps(frames, BAND_LO, BAND_HI)
    return RecordBatch(phases=phases, labels=_labels(len(phases), (c1, c2), len(doa_classes(resolution))))


def make_single_records(
    setup: Setup,
    theta: int,
    master_seed: int,
    bank: Optional[RirBank] = None,
    duration: float = SIGNAL_DURATION,
    snr_range: Tuple[float, float] = SNR_RANGE,
    resolution: int = DOA_RESOLUTION,
) -> RecordBatch:
    """One-hot records for a single DOA (optional extension of the pair data)."""
    c = class_index(theta, resolution)
    rng = derive_rng(master_seed, _SINGLE_STREAM, *setup.key, theta)
    clean = synth_single_doa(setup, theta, duration, rng, bank)
    noisy = add_noise_snr(clean, rng.uniform(*snr_range), rng)
    phases = phase_maps(stft(noisy), BAND_LO, BAND_HI)
    return RecordBatch(phases=phases, labels=_labels(len(phases), (c,), len(doa_classes(resolution))))


def records_per_cell(grid: TrainGrid) -> int:
    return frame_count(2 * int(round(grid.signal_duration * SAMPLE_RATE)))


def projected_frame_count(grid: TrainGrid) -> int:
    """Records a full run over *grid* produces (before infeasible cells)."""
    cells = len(grid.rooms) * grid.positions_per_room * len(grid.distances)
    total = cells * len(grid.pair_list()) * records_per_cell(grid)
    if grid.include_single:
        total += cells * grid.n_classes * frame_count(int(round(grid.signal_duration * SAMPLE_RATE)))
    return total


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

def grid_arrays(grid: TrainGrid, master_seed: int, room_index: int) -> List[ArraySetup]:
    """The array placements of one room."""
    room = grid.rooms[room_index]
    rng = derive_rng(master_seed, _ARRAY_STREAM, room_index)
    arrays = []
    for center in array_centers(room, grid.positions_per_room, rng):
        array = ArraySetup(center=center, axis=array_axis(room), mic_count=grid.mic_count, spacing=grid.spacing)
        array.check_inside(room)
        arrays.append(array)
    return arrays


@dataclass
class ShardJob:
    grid: TrainGrid
    master_seed: int
    room_index: int
    position_index: int
    array: ArraySetup
    path: Path


@dataclass
class ShardEntry:
    path: str
    room: str
    room_index: int
    position_index: int
    array_center: List[float]
    records: int
    sha256: str
    failed_cells: List[str] = field(default_factory=list)


def _build_shard(job: ShardJob) -> ShardEntry:
    grid = job.grid
    room = grid.rooms[job.room_index]
    failed: List[str] = []
    bands = BAND_HI - BAND_LO + 1

    with ShardWriter(job.path, grid.mic_count, bands, grid.n_classes) as writer:
        for dist_index, distance in enumerate(grid.distances):
            setup = Setup(room, job.array, distance, job.room_index, job.position_index, dist_index)
            bank = RirBank(setup)
            for theta1, theta2 in grid.pair_list():
                try:
                    batch = make_training_records(
                        setup, theta1, theta2, job.master_seed, bank,
                        grid.signal_duration, grid.snr_range, grid.doa_resolution,
                    )
                except GeometryError as exc:
                    failed.append(f"{room.label}/p{job.position_index}/{distance:g}m/({theta1},{theta2}): {exc}")
                    logger.warning("skipping cell: %s", failed[-1])
                    continue
                writer.append(batch)
            if grid.include_single:
                for theta in doa_classes(grid.doa_resolution):
                    try:
                        batch = make_single_records(
                            setup, int(theta), job.master_seed, bank,
                            grid.signal_duration, grid.snr_range, grid.doa_resolution,
                        )
                    except GeometryError as exc:
                        failed.append(f"{room.label}/p{job.position_index}/{distance:g}m/({theta}): {exc}")
                        logger.warning("skipping cell: %s", failed[-1])
                        continue
                    writer.append(batch)

    logger.info("shard %s: %d records, sha256 %s", job.path.name, writer.count, writer.digest[:12])
    return ShardEntry(
        path=job.path.name,
        room=room.label,
        room_index=job.room_index,
        position_index=job.position_index,
        array_center=[round(c, 12) for c in job.array.center],
        records=writer.count,
        sha256=writer.digest,
        failed_cells=failed,
    )


def generate_dataset(grid: TrainGrid, master_seed: int, out_dir: Path, threads: int = 1) -> Path:
    """Write one shard per (room, array position) plus ``manifest.json``.

    Returns the manifest path. The output is byte-identical for a given
    (grid, master_seed) regardless of *threads*.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for room_index, room in enumerate(grid.rooms):
        for position_index, array in enumerate(grid_arrays(grid, master_seed, room_index)):
            name = f"shard_r{room_index:02d}_p{position_index:02d}.doap"
            jobs.append(ShardJob(grid, master_seed, room_index, position_index, array, out_dir / name))
    logger.info(
        "generating %d shard(s), projected %d records, %d worker(s)",
        len(jobs), projected_frame_count(grid), threads,
    )

    if threads > 1:
        with multiprocessing.Pool(processes=threads) as pool:
            entries = list(pool.imap(_build_shard, jobs))
    else:
        entries = [_build_shard(job) for job in jobs]

    manifest = {
        "format": "doa-shards",
        "master_seed": master_seed,
        "grid": grid.to_dict(),
        "mics": grid.mic_count,
        "bands": BAND_HI - BAND_LO + 1,
        "classes": grid.n_classes,
        "shards": [asdict(e) for e in entries],
        "total_records": sum(e.records for e in entries),
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("manifest %s: %d records, sha256 %s", path, manifest["total_records"], file_digest(path)[:12])
    return path


def load_manifest(path: Path) -> dict:
    """Read a dataset manifest; *path* may be the file or its directory."""
    if path.is_dir():
        path = path / MANIFEST_NAME
    with open(path, encoding="utf-8") as f:
        manifest = json.load(f)
    manifest["_dir"] = str(path.parent)
    return manifest


# ---------------------------------------------------------------------------
# Test sources
# ---------------------------------------------------------------------------

class SyntheticSpeech:
    """Speech-like test source: syllable-rate amplitude-modulated pink noise
    with random 100–300 ms pauses between talk spurts."""

    def __init__(self, fs: int = SAMPLE_RATE) -> None:
        self.fs = fs

    def _pink(self, n: int, rng: np.random.Generator) -> np.ndarray:
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.arange(spec.size, dtype=np.float64)
        f[0] = 1.0
        return np.fft.irfft(spec / np.sqrt(f), n=n)

    def _envelope(self, n: int, rng: np.random.Generator) -> np.ndarray:
        t = np.arange(n) / self.fs
        rate = rng.uniform(3.0, 6.0)
        env = 0.5 * (1.0 - np.cos(2.0 * math.pi * rate * t + rng.uniform(0, 2 * math.pi)))
        gate = np.zeros(n)
        pos = int(rng.uniform(0.0, 0.1) * self.fs)
        while pos < n:
            talk = int(rng.uniform(0.3, 0.8) * self.fs)
            gate[pos : pos + talk] = 1.0
            pos += talk + int(rng.uniform(0.1, 0.3) * self.fs)
        ramp = np.hanning(int(0.01 * self.fs) + 1)
        gate = np.convolve(gate, ramp / ramp.sum(), mode="same")
        return env * gate

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        x = self._pink(n, rng) * self._envelope(n, rng)
        return x / np.sqrt(np.mean(x ** 2))

    def draw_pair(self, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        return self.draw(n, rng), self.draw(n, rng)


def read_source_wav(path: Path, fs: int = SAMPLE_RATE) -> np.ndarray:
    """Mono 16-bit PCM WAV at *fs* as float in [-1, 1)."""
    rate, data = wavfile.read(path)
    if rate != fs:
        raise ValueError(f"{path}: sampling rate {rate} Hz, expected {fs} Hz (resampling is not supported)")
    if data.dtype != np.int16:
        raise ValueError(f"{path}: sample format {data.dtype}, expected 16-bit PCM")
    if data.ndim != 1:
        raise ValueError(f"{path}: {data.shape[1]} channels, expected mono")
    return data.astype(np.float64) / 32768.0


class WavSources:
    """User-supplied speech: random segments of at least two distinct files."""

    def __init__(self, paths: Sequence[Path], fs: int = SAMPLE_RATE) -> None:
        self.paths = sorted(Path(p) for p in paths)
        self.fs = fs
        if len(self.paths) < 2:
            raise ValueError(f"need at least 2 distinct source signals, found {len(self.paths)}")
        self.signals = [read_source_wav(p, fs) for p in self.paths]

    @classmethod
    def from_dir(cls, directory: Path, fs: int = SAMPLE_RATE) -> WavSources:
        return cls(sorted(directory.glob("*.wav")), fs)

    def _segment(self, signal: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        if signal.size < n:
            signal = np.pad(signal, (0, n - signal.size))
        start = int(rng.integers(0, signal.size - n + 1))
        return signal[start : start + n]

    def draw_pair(self, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        i, j = rng.choice(len(self.signals), size=2, replace=False)
        return self._segment(self.signals[i], n, rng), self._segment(self.signals[j], n, rng)


# ---------------------------------------------------------------------------
# Test mixtures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TestConfig:
    room: Room
    distance: float = 1.8
    snr_db: float = 30.0
    pair_stride: int = 1
    duration: float = SIGNAL_DURATION
    doa_resolution: int = DOA_RESOLUTION
    sources: str = "synthetic"
    array_center: Optional[Tuple[float, float, float]] = None
    mic_count: int = MIC_COUNT
    spacing: float = MIC_SPACING

    __test__ = False  # not a pytest class

    def pairs(self) -> List[Tuple[int, int]]:
        if self.pair_stride < 1:
            raise ValueError(f"pair_stride must be >= 1, got {self.pair_stride}")
        return all_pairs(self.doa_resolution)[:: self.pair_stride]


@dataclass
class Mixture:
    mixture_id: str
    audio: np.ndarray
    doas: Tuple[int, int]
    snr_db: float
    fs: int = SAMPLE_RATE


def _snr_key(snr_db: float) -> int:
    return zlib.crc32(repr(float(snr_db)).encode("ascii"))


def test_array(config: TestConfig, seed: int) -> ArraySetup:
    room = config.room
    if config.array_center is not None:
        center = tuple(float(c) for c in config.array_center)
    else:
        center = array_centers(room, 1, derive_rng(seed, _TEST_ARRAY_STREAM))[0]
    array = ArraySetup(center=center, axis=array_axis(room), mic_count=config.mic_count, spacing=config.spacing)
    array.check_inside(room)
    return array


test_array.__test__ = False


def gen_test_mixtures(config: TestConfig, sources, seed: int) -> List[Mixture]:
    """Two-source mixtures for every *pair_stride*-th unordered DOA pair.

    *sources* provides ``draw_pair(n, rng)``. Source signals depend only on the
    seed and pair index, so test sets at different SNRs share their speech.
    """
    setup = Setup(config.room, test_array(config, seed), config.distance)
    bank = RirBank(setup)
    n = int(round(config.duration * SAMPLE_RATE))
    mixtures = []
    for j, (theta1, theta2) in enumerate(config.pairs()):
        s1, s2 = sources.draw_pair(n, derive_rng(seed, _TEST_SOURCE_STREAM, j))
        clean = render(s1, bank.rirs(theta1)) + render(s2, bank.rirs(theta2))
        noisy = add_noise_snr(clean, config.snr_db, derive_rng(seed, _TEST_NOISE_STREAM, j, _snr_key(config.snr_db)))
        mixtures.append(Mixture(f"mix{j:04d}", noisy, (theta1, theta2), config.snr_db))
    logger.info("rendered %d test mixtures in room %s at %g dB", len(mixtures), config.room.label, config.snr_db)
    return mixtures


def write_test_set(mixtures: Sequence[Mixture], out_dir: Path) -> List[Path]:
    """One directory per mixture: ``audio.wav`` (M-channel int16) + ``truth.json``."""
    paths = []
    for mix in mixtures:
        d = out_dir / mix.mixture_id
        d.mkdir(parents=True, exist_ok=True)
        peak = float(np.max(np.abs(mix.audio))) or 1.0
        pcm = np.round(mix.audio / peak * 0.9 * 32767.0).astype(np.int16)
        wavfile.write(d / "audio.wav", mix.fs, pcm.T)
        truth = {"theta1": mix.doas[0], "theta2": mix.doas[1], "snr_db": mix.snr_db}
        (d / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True), encoding="utf-8")
        paths.append(d)
    return paths


def list_mixtures(test_dir: Path) -> List[Path]:
    return sorted(p for p in test_dir.iterdir() if p.is_dir() and (p / "truth.json").exists())


def read_mixture(mixture_dir: Path) -> Mixture:
    rate, pcm = wavfile.read(mixture_dir / "audio.wav")
    truth = json.loads((mixture_dir / "truth.json").read_text(encoding="utf-8"))
    audio = np.atleast_2d(pcm.T).astype(np.float64) / 32768.0
    return Mixture(
        mixture_id=mixture_dir.name,
        audio=audio,
        doas=(int(truth["theta1"]), int(truth["theta2"])),
        snr_db=float(truth["snr_db"]),
        fs=rate,
    )
