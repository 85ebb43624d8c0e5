"""
A small CNN written directly against numpy.

Activations are channels-last, (batch, mics, bands, channels). A 2×1 valid
convolution mixes each pair of neighbouring microphones, so three layers take
M = 4 down to one row while keeping every band. Parameters are stored in the
model's dtype (float32 by default); every forward and backward pass computes
in float64.
"""
from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .constants import BAND_HI, BAND_LO, MIC_COUNT

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


class ShapeError(ValueError):
    """Input or gradient shape does not match the model."""


class StaleCacheError(ValueError):
    """Backward called without a matching train-mode forward."""


# ---------------------------------------------------------------------------
# Architecture
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    mics: int = MIC_COUNT
    bands: int = BAND_HI - BAND_LO + 1
    conv_layers: int = 3
    filters: int = 64
    fc_widths: Tuple[int, ...] = (512, 512)
    classes: int = 37

    def __post_init__(self) -> None:
        if self.conv_layers < 1 or self.mics - self.conv_layers < 1:
            raise ValueError(
                f"{self.conv_layers} 2x1 conv layers cannot reduce {self.mics} mics to >= 1 row"
            )
        if min(self.bands, self.filters, self.classes, *self.fc_widths) < 1:
            raise ValueError(f"all layer sizes must be positive: {self}")

    @classmethod
    def toy(cls) -> ModelSpec:
        return cls(mics=4, bands=8, conv_layers=3, filters=3, fc_widths=(16, 16), classes=5)

    @property
    def conv_rows(self) -> int:
        return self.mics - self.conv_layers

    @property
    def flat_size(self) -> int:
        return self.conv_rows * self.bands * self.filters

    def param_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """Parameter names and shapes in declaration (and serialization) order."""
        shapes: List[Tuple[str, Tuple[int, ...]]] = []
        c_in = 1
        for i in range(self.conv_layers):
            shapes.append((f"conv{i}.weight", (2, c_in, self.filters)))
            shapes.append((f"conv{i}.bias", (self.filters,)))
            c_in = self.filters
        width = self.flat_size
        for j, out in enumerate(self.fc_widths):
            shapes.append((f"fc{j}.weight", (width, out)))
            shapes.append((f"fc{j}.bias", (out,)))
            width = out
        shapes.append(("out.weight", (width, self.classes)))
        shapes.append(("out.bias", (self.classes,)))
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fc_widths"] = list(self.fc_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        d = dict(d)
        d["fc_widths"] = tuple(d.get("fc_widths", (512, 512)))
        return cls(**d)


@dataclass
class Model:
    spec: ModelSpec
    params: Dict[str, np.ndarray]
    dtype: np.dtype = np.float32
    version: int = 0

    @classmethod
    def initialize(cls, spec: ModelSpec, seed: int, dtype: np.dtype = np.float32) -> Model:
        """He-scaled Gaussian weights drawn in declaration order; zero biases."""
        rng = np.random.default_rng(seed)
        params: Dict[str, np.ndarray] = OrderedDict()
        for name, shape in spec.param_shapes():
            if name.endswith(".bias"):
                params[name] = np.zeros(shape, dtype=dtype)
            else:
                fan_in = int(np.prod(shape[:-1]))
                params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        logger.debug("initialized %d parameters from seed %s", sum(v.size for v in params.values()), seed)
        return cls(spec=spec, params=params, dtype=np.dtype(dtype))

    def zeros_like(self) -> Model:
        return Model(
            spec=self.spec,
            params=OrderedDict((k, np.zeros_like(v)) for k, v in self.params.items()),
            dtype=self.dtype,
        )

    def astype(self, dtype: np.dtype) -> Model:
        return Model(
            spec=self.spec,
            params=OrderedDict((k, v.astype(dtype)) for k, v in self.params.items()),
            dtype=np.dtype(dtype),
        )

    def predict(self, x: np.ndarray, batch: int = 512) -> np.ndarray:
        """Infer-mode probabilities, evaluated in chunks of *batch* frames."""
        if len(x) == 0:
            return np.zeros((0, self.spec.classes))
        return np.concatenate([forward(self, x[i : i + batch])[0] for i in range(0, len(x), batch)])


@dataclass
class ForwardCache:
    version: int
    inputs: List[np.ndarray] = field(default_factory=list)
    relu_masks: List[np.ndarray] = field(default_factory=list)
    dropout_masks: List[Optional[np.ndarray]] = field(default_factory=list)
    probs: Optional[np.ndarray] = None
    relu_margin: float = math.inf  # smallest |pre-activation| seen by a ReLU


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def conv2x1(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid 2×1 convolution along the mic axis: (B, M, K, C) → (B, M-1, K, F)."""
    return x[:, :-1] @ w[0] + x[:, 1:] @ w[1] + b


def conv2x1_backward(
    x: np.ndarray, w: np.ndarray, dy: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    axes = ([0, 1, 2], [0, 1, 2])
    dw = np.stack([np.tensordot(x[:, :-1], dy, axes=axes), np.tensordot(x[:, 1:], dy, axes=axes)])
    db = dy.sum(axis=(0, 1, 2))
    dx = np.zeros_like(x)
    dx[:, :-1] += dy @ w[0].T
    dx[:, 1:] += dy @ w[1].T
    return dx, dw, db


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def dropout_mask(shape: Tuple[int, ...], rate: float, rng: np.random.Generator) -> Optional[np.ndarray]:
    """Inverted-dropout mask: kept units scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _check_input(model: Model, x: np.ndarray) -> None:
    spec = model.spec
    if x.ndim != 3 or x.shape[1:] != (spec.mics, spec.bands):
        raise ShapeError(
            f"expected input (batch, {spec.mics}, {spec.bands}), got {tuple(x.shape)}"
        )


def forward(
    model: Model,
    x: np.ndarray,
    mode: str = "infer",
    rng: Optional[np.random.Generator] = None,
    dropout: float = 0.5,
) -> Tuple[np.ndarray, Optional[ForwardCache]]:
    """Probabilities (batch, I); in train mode also the activation cache.

    Train mode applies dropout once after the conv stack and after each
    fully connected layer; *rng* drives the masks.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    _check_input(model, x)
    spec, p = model.spec, model.params
    train = mode == "train"
    if train and rng is None and dropout > 0:
        raise ValueError("train-mode forward needs an rng for dropout")
    cache = ForwardCache(version=model.version) if train else None

    h = np.asarray(x, dtype=np.float64)[..., None]
    for i in range(spec.conv_layers):
        z = conv2x1(h, p[f"conv{i}.weight"].astype(np.float64), p[f"conv{i}.bias"].astype(np.float64))
        if train:
            cache.inputs.append(h)
            cache.relu_masks.append(z > 0)
            cache.relu_margin = min(cache.relu_margin, float(np.abs(z).min()))
        h = np.maximum(z, 0.0)

    h = h.reshape(len(h), -1)
    for name in (f"fc{j}" for j in range(len(spec.fc_widths))):
        if train:
            mask = dropout_mask(h.shape, dropout, rng)
            cache.dropout_masks.append(mask)
            if mask is not None:
                h = h * mask
            cache.inputs.append(h)
        z = h @ p[f"{name}.weight"].astype(np.float64) + p[f"{name}.bias"].astype(np.float64)
        if train:
            cache.relu_masks.append(z > 0)
            cache.relu_margin = min(cache.relu_margin, float(np.abs(z).min()))
        h = np.maximum(z, 0.0)

    if train:
        mask = dropout_mask(h.shape, dropout, rng)
        cache.dropout_masks.append(mask)
        if mask is not None:
            h = h * mask
        cache.inputs.append(h)
    probs = sigmoid(h @ p["out.weight"].astype(np.float64) + p["out.bias"].astype(np.float64))
    if train:
        cache.probs = probs
    return probs, cache


def backward(model: Model, cache: Optional[ForwardCache], dprobs: np.ndarray) -> Dict[str, np.ndarray]:
    """Gradients of every parameter (float64, same shapes) given ∂loss/∂p."""
    if cache is None or cache.probs is None:
        raise StaleCacheError("backward needs the cache of a train-mode forward")
    if cache.version != model.version:
        raise StaleCacheError(
            f"cache from parameter version {cache.version}, model is at {model.version}"
        )
    if dprobs.shape != cache.probs.shape:
        raise ShapeError(f"gradient shape {dprobs.shape} does not match output {cache.probs.shape}")
    spec, p = model.spec, model.params
    grads: Dict[str, np.ndarray] = OrderedDict()
    n_conv, n_fc = spec.conv_layers, len(spec.fc_widths)

    probs = cache.probs
    dz = np.asarray(dprobs, dtype=np.float64) * probs * (1.0 - probs)
    h = cache.inputs[n_conv + n_fc]
    grads["out.weight"] = h.T @ dz
    grads["out.bias"] = dz.sum(axis=0)
    dh = dz @ p["out.weight"].astype(np.float64).T

    for j in reversed(range(n_fc)):
        mask = cache.dropout_masks[j + 1]
        if mask is not None:
            dh = dh * mask
        dz = dh * cache.relu_masks[n_conv + j]
        h = cache.inputs[n_conv + j]
        grads[f"fc{j}.weight"] = h.T @ dz
        grads[f"fc{j}.bias"] = dz.sum(axis=0)
        dh = dz @ p[f"fc{j}.weight"].astype(np.float64).T

    mask = cache.dropout_masks[0]
    if mask is not None:
        dh = dh * mask
    dh = dh.reshape(len(dh), spec.conv_rows, spec.bands, spec.filters)
    for i in reversed(range(n_conv)):
        dz = dh * cache.relu_masks[i]
        dh, dw, db = conv2x1_backward(cache.inputs[i], p[f"conv{i}.weight"].astype(np.float64), dz)
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db

    return OrderedDict((name, grads[name]) for name, _ in spec.param_shapes())


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def bce_loss(probs: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Per-class binary cross-entropy summed over classes, mean over the batch.

    Returns the loss and ∂loss/∂p. Probabilities are clamped to
    [1e-7, 1 - 1e-7] before the log.
    """
    if probs.shape != targets.shape or probs.ndim != 2:
        raise ShapeError(f"probabilities {probs.shape} and targets {targets.shape} must match (batch, I)")
    y = np.asarray(targets, dtype=np.float64)
    pc = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    batch = probs.shape[0]
    loss = -np.sum(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)) / batch
    grad = (pc - y) / (pc * (1.0 - pc)) / batch
    return float(loss), grad


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place; moments kept in float64.

    Every gradient is checked before anything moves, so a ShapeError leaves
    parameters and state untouched.
    """
    checked = {}
    for name, w in params.items():
        if name not in grads:
            raise ShapeError(f"{name}: no gradient supplied")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != w.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {w.shape}")
        checked[name] = g

    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, w in params.items():
        g = checked[name]
        m = state.m.setdefault(name, np.zeros(w.shape))
        v = state.v.setdefault(name, np.zeros(w.shape))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        w[...] = (w.astype(np.float64) - step).astype(w.dtype)


def apply_adam(model: Model, grads: Dict[str, np.ndarray], state: AdamState) -> None:
    adam_step(model.params, grads, state)
    model.version += 1
