"""
Shared pytest configuration and fixtures.

Provides:
  --slow          CLI flag to enable long-running tests
  slow            marker for desk-scale end-to-end and full-size training runs
  rng             seeded numpy generator
  plane_wave      factory for noise-free far-field STFT frames

Usage:
  pytest tests/ -q                  # fast tests only (default)
  pytest tests/ -q --slow           # everything
  pytest tests/ -q -m slow --slow   # slow tests only
"""
from __future__ import annotations

import math

import numpy as np
import pytest

from doa_lab.acoustics import ArraySetup, Room, steering_delays
from doa_lab.constants import DFT_LEN, MIC_COUNT, SAMPLE_RATE


# ---------------------------------------------------------------------------
# CLI option
# ---------------------------------------------------------------------------

def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption(
        "--slow",
        action="store_true",
        default=False,
        help="Run long-running tests (desk-scale pipeline, full-size training).",
    )


# ---------------------------------------------------------------------------
# Auto-skip tests marked @pytest.mark.slow unless --slow is passed
# ---------------------------------------------------------------------------

def pytest_configure(config: pytest.Config) -> None:
    config.addinivalue_line(
        "markers",
        "slow: long-running test (deselected by default, use --slow to run)",
    )


def pytest_collection_modifyitems(
    config: pytest.Config, items: list[pytest.Item]
) -> None:
    if config.getoption("--slow"):
        return
    skip_slow = pytest.mark.skip(reason="Need --slow flag to run long-running tests")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------

@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def room() -> Room:
    return Room(dims=(6.0, 6.0, 2.7), rt60=0.3, name="R1")


@pytest.fixture
def array() -> ArraySetup:
    return ArraySetup(center=(3.0, 3.0, 1.35))


def make_plane_wave(doa_deg: float, mics: int = MIC_COUNT, dft_len: int = DFT_LEN) -> np.ndarray:
    """One-sided spectrum (K', M) of a unit far-field plane wave: X_m = e^{jω τ_m}."""
    omega = 2.0 * math.pi * np.arange(dft_len // 2 + 1) * SAMPLE_RATE / dft_len
    tau = steering_delays(doa_deg, mics)
    return np.exp(1j * omega[:, None] * tau[None, :])


@pytest.fixture
def plane_wave():
    return make_plane_wave
