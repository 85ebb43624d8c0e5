"""
STFT analysis/synthesis and phase-map features.

Frame sets are stored (N frames, K' bins, M channels); time signals are
(M, samples). Analysis uses a periodic Hann window at 50 % overlap, which
satisfies constant overlap-add, so :func:`istft` reconstructs the interior
exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from .constants import BAND_HI, BAND_LO, DFT_LEN, HOP, SAMPLE_RATE


@dataclass
class StftFrameSet:
    data: np.ndarray
    dft_len: int = DFT_LEN
    hop: int = HOP
    fs: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ValueError(f"frame data must be (N, K', M), got shape {self.data.shape}")
        if self.data.shape[1] != self.dft_len // 2 + 1:
            raise ValueError(
                f"expected {self.dft_len // 2 + 1} bins for DFT length {self.dft_len}, "
                f"got {self.data.shape[1]}"
            )
        if self.hop != self.dft_len // 2:
            raise ValueError("hop must be half the DFT length")
        if self.data.shape[0] < 1:
            raise ValueError("frame set must hold at least one frame")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_bins(self) -> int:
        return self.data.shape[1]

    @property
    def n_channels(self) -> int:
        return self.data.shape[2]


MultiChannelStft = StftFrameSet


@dataclass
class PhaseMap:
    values: np.ndarray
    band_lo: int = BAND_LO
    band_hi: int = BAND_HI

    @property
    def n_bands(self) -> int:
        return self.band_hi - self.band_lo + 1


def analysis_window(dft_len: int = DFT_LEN) -> np.ndarray:
    return get_window("hann", dft_len, fftbins=True)


def frame_count(length: int, dft_len: int = DFT_LEN) -> int:
    """Number of full frames at 50 % overlap."""
    if length < dft_len:
        raise ValueError(f"signal of {length} samples is shorter than one {dft_len}-sample frame")
    return (length - dft_len) // (dft_len // 2) + 1


def stft(x: np.ndarray, dft_len: int = DFT_LEN, fs: int = SAMPLE_RATE) -> StftFrameSet:
    """One-sided Hann-windowed STFT of a multichannel signal, hop = dft_len/2."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    hop = dft_len // 2
    n = frame_count(x.shape[-1], dft_len)
    frames = sliding_window_view(x, dft_len, axis=-1)[:, : n * hop : hop, :]
    spec = np.fft.rfft(frames * analysis_window(dft_len), axis=-1)
    return StftFrameSet(data=np.ascontiguousarray(spec.transpose(1, 2, 0)), dft_len=dft_len, hop=hop, fs=fs)


def istft(frames: StftFrameSet) -> np.ndarray:
    """Overlap-add synthesis, normalised by the summed analysis window."""
    hop, dft_len = frames.hop, frames.dft_len
    n, _, m = frames.data.shape
    time = np.fft.irfft(frames.data.transpose(2, 0, 1), n=dft_len, axis=-1)
    window = analysis_window(dft_len)

    out = np.zeros((m, n + 1, hop))
    out[:, :n] += time[..., :hop]
    out[:, 1:] += time[..., hop:]
    norm = np.zeros((n + 1, hop))
    norm[:n] += window[:hop]
    norm[1:] += window[hop:]

    out = out.reshape(m, -1)
    norm = norm.reshape(-1)
    scale = np.zeros_like(norm)
    np.divide(1.0, norm, out=scale, where=norm > 1e-8)
    return out * scale


def _principal_phase(z: np.ndarray) -> np.ndarray:
    ang = np.angle(z)
    ang[ang <= -math.pi] = math.pi
    ang[z == 0] = 0.0
    return ang


def _check_bands(frames: StftFrameSet, band_lo: int, band_hi: int) -> None:
    if not 0 <= band_lo <= band_hi <= frames.n_bins - 1:
        raise ValueError(f"band range {band_lo}..{band_hi} outside 0..{frames.n_bins - 1}")


def phase_map(
    frames: StftFrameSet,
    n: int,
    band_lo: int = BAND_LO,
    band_hi: int = BAND_HI,
) -> PhaseMap:
    """M × K phase matrix of frame *n*; zero-magnitude bins get phase 0."""
    if not 0 <= n < frames.n_frames:
        raise IndexError(f"frame {n} out of range for {frames.n_frames} frames")
    _check_bands(frames, band_lo, band_hi)
    values = _principal_phase(frames.data[n, band_lo : band_hi + 1, :]).T
    return PhaseMap(values=np.ascontiguousarray(values), band_lo=band_lo, band_hi=band_hi)


def phase_maps(
    frames: StftFrameSet,
    band_lo: int = BAND_LO,
    band_hi: int = BAND_HI,
    dtype: np.dtype = np.float32,
) -> np.ndarray:
    """All phase maps of a frame set, shape (N, M, K)."""
    _check_bands(frames, band_lo, band_hi)
    values = _principal_phase(frames.data[:, band_lo : band_hi + 1, :])
    return np.ascontiguousarray(values.transpose(0, 2, 1), dtype=dtype)
