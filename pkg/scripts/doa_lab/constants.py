"""
Shared acoustic and format constants.

Single source of truth: all modules import from here.  The bundled configs
under configs/ repeat some of these values and must be kept in step.
"""

SPEED_OF_SOUND = 343.0       # m/s
SAMPLE_RATE = 16000          # Hz

# STFT
DFT_LEN = 512
HOP = DFT_LEN // 2
BAND_LO = 1                  # DC excluded
BAND_HI = DFT_LEN // 2 - 1   # Nyquist excluded → K = 255

# Uniform linear array
MIC_COUNT = 4
MIC_SPACING = 0.08           # m
ARRAY_HEIGHT = 1.5           # m
ARRAY_CLEARANCE = 2.5        # m, preferred wall clearance of an array centre

# Source placement
WALL_MARGIN = 0.3            # m
MIN_SOURCE_DISTANCE = 0.5    # m
MIN_PATH = 0.01              # m, coincident source/mic clamp

# DOA grid
DOA_RESOLUTION = 5           # degrees → I = 37

# Fractional-delay kernel (Hann-windowed sinc)
SINC_TAPS = 17
SINC_HALF = SINC_TAPS // 2

# Training signals
SIGNAL_DURATION = 2.0        # s per single-DOA signal
SNR_RANGE = (0.0, 20.0)      # dB

# Binary formats
SHARD_MAGIC = b"DOAP"
SHARD_VERSION = 1
CHECKPOINT_MAGIC = b"DOAM"
CHECKPOINT_VERSION = 1
