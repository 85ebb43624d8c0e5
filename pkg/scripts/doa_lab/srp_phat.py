"""
SRP-PHAT baseline over the DOA class grid.

A frame's inter-microphone cross-spectra are whitened (PHAT), steered to each
candidate DOA with far-field ULA delays and summed over microphone pairs and
bands. Scores are turned into per-frame pseudo-probabilities so the CNN's
aggregation and top-2 selection apply unchanged.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from .acoustics import steering_delays
from .constants import (
    BAND_HI,
    BAND_LO,
    DFT_LEN,
    MIC_COUNT,
    MIC_SPACING,
    SAMPLE_RATE,
    SPEED_OF_SOUND,
)
from .datagen import doa_classes
from .dsp import StftFrameSet

logger = logging.getLogger(__name__)

PHAT_FLOOR = 1e-12


@dataclass(frozen=True)
class SteeringTable:
    """Unit-modulus phase factors e^{jω_k τ_m(θ_i)}, shape (I, K, M)."""
    doas: np.ndarray
    factors: np.ndarray
    band_lo: int = BAND_LO
    band_hi: int = BAND_HI
    dft_len: int = DFT_LEN

    @classmethod
    def build(
        cls,
        doas: Optional[Sequence[float]] = None,
        band_lo: int = BAND_LO,
        band_hi: int = BAND_HI,
        mics: int = MIC_COUNT,
        spacing: float = MIC_SPACING,
        c: float = SPEED_OF_SOUND,
        dft_len: int = DFT_LEN,
        fs: int = SAMPLE_RATE,
    ) -> SteeringTable:
        doas = doa_classes() if doas is None else np.asarray(doas)
        omega = 2.0 * math.pi * np.arange(band_lo, band_hi + 1) * fs / dft_len
        tau = np.stack([steering_delays(float(t), mics, spacing, c) for t in doas])
        factors = np.exp(1j * omega[None, :, None] * tau[:, None, :])
        logger.debug("steering table: %d DOAs x %d bands x %d mics", len(doas), omega.size, mics)
        return cls(doas=np.asarray(doas), factors=factors, band_lo=band_lo, band_hi=band_hi, dft_len=dft_len)

    @property
    def n_bands(self) -> int:
        return self.band_hi - self.band_lo + 1

    @property
    def mics(self) -> int:
        return self.factors.shape[2]

    def pairs(self):
        return list(combinations(range(self.mics), 2))

    def pair_factors(self) -> np.ndarray:
        """e^{jω(τ_m2 − τ_m1)} per (class, band, pair), shape (I, K, P)."""
        m1, m2 = np.array(self.pairs()).T
        return np.conj(self.factors[:, :, m1]) * self.factors[:, :, m2]


def _phat_cross_spectra(bins: np.ndarray, pairs) -> np.ndarray:
    """PHAT-normalised X_m1·X*_m2 for (..., K, M) bins → (..., K, P)."""
    m1, m2 = np.array(pairs).T
    cross = bins[..., m1] * np.conj(bins[..., m2])
    mag = np.abs(cross)
    out = np.zeros_like(cross)
    np.divide(cross, mag, out=out, where=mag >= PHAT_FLOOR)
    return out


def _band_slice(bins: np.ndarray, table: SteeringTable) -> np.ndarray:
    if bins.shape[-1] != table.mics:
        raise ValueError(f"frame has {bins.shape[-1]} channels, steering table {table.mics}")
    if bins.shape[-2] == table.dft_len // 2 + 1:
        return bins[..., table.band_lo : table.band_hi + 1, :]
    if bins.shape[-2] == table.n_bands:
        return bins
    raise ValueError(
        f"frame has {bins.shape[-2]} bins; expected {table.dft_len // 2 + 1} or {table.n_bands}"
    )


def srp_response(frame: np.ndarray, table: SteeringTable) -> np.ndarray:
    """Steered response of one frame, (K' or K, M) complex bins → I scores."""
    if frame.ndim != 2:
        raise ValueError(f"frame must be (bins, mics), got shape {frame.shape}")
    return srp_scores(frame[None], table)[0]


def srp_scores(frames, table: SteeringTable) -> np.ndarray:
    """Scores for every frame, (N, I); *frames* is a StftFrameSet or (N, bins, M)."""
    data = frames.data if isinstance(frames, StftFrameSet) else np.asarray(frames)
    psi = _phat_cross_spectra(_band_slice(data, table), table.pairs())
    return np.einsum("nkp,ikp->ni", psi, table.pair_factors()).real


def srp_probabilities(scores: np.ndarray) -> np.ndarray:
    """Shift by the minimum and normalise to unit sum along the last axis;
    constant scores map to the uniform vector."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("SRP scores must be finite")
    shifted = scores - scores.min(axis=-1, keepdims=True)
    total = shifted.sum(axis=-1, keepdims=True)
    uniform = np.full_like(shifted, 1.0 / scores.shape[-1])
    return np.where(total > 0, shifted / np.where(total > 0, total, 1.0), uniform)
