"""
Training loop, loss log and finite-difference gradient verification.

One master seed drives the whole run: it is split into independent streams
for weight initialisation, epoch shuffling and dropout masks, so a
single-threaded run is reproducible end to end.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .checkpoint import save_checkpoint
from .datagen import load_manifest
from .nn import (
    AdamState,
    Model,
    ModelSpec,
    apply_adam,
    backward,
    bce_loss,
    forward,
)
from .shards import RecordBatch, decode_labels, open_records

logger = logging.getLogger(__name__)

LOSS_LOG_NAME = "loss_log.csv"
MODEL_NAME = "model.doam"


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 512
    epochs: int = 2
    lr: float = 1e-3
    dropout: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


def seed_streams(seed: int) -> Tuple[np.random.SeedSequence, ...]:
    """(init, shuffle, dropout) seed streams of a run."""
    return tuple(np.random.SeedSequence(seed).spawn(3))


def init_model(spec: ModelSpec, seed: int) -> Model:
    return Model.initialize(spec, seed_streams(seed)[0])


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

class RecordDataset:
    """In-memory records."""

    def __init__(self, records: RecordBatch) -> None:
        self.records = records
        self.mics, self.bands, self.classes = records.mics, records.bands, records.classes

    def __len__(self) -> int:
        return len(self.records)

    def batch(self, idx: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.records.phases[idx], self.records.labels[idx]


class ShardDataset:
    """Memory-mapped records of one or more shards, indexed as one sequence."""

    def __init__(self, paths: List[Path]) -> None:
        if not paths:
            raise ValueError("dataset has no shards")
        self.paths = list(paths)
        self.records = []
        shapes = set()
        for path in self.paths:
            header, records = open_records(path)
            shapes.add((header.mics, header.bands, header.classes))
            self.records.append(records)
        if len(shapes) != 1:
            raise ValueError(f"shards disagree on (M, K, I): {sorted(shapes)}")
        self.mics, self.bands, self.classes = shapes.pop()
        self.offsets = np.cumsum([0] + [len(r) for r in self.records])

    @classmethod
    def from_manifest(cls, path: Path) -> ShardDataset:
        manifest = load_manifest(path)
        root = Path(manifest["_dir"])
        return cls([root / entry["path"] for entry in manifest["shards"]])

    def __len__(self) -> int:
        return int(self.offsets[-1])

    def batch(self, idx: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        shard_of = np.searchsorted(self.offsets, idx, side="right") - 1
        phases = np.empty((len(idx), self.mics * self.bands), dtype=np.float32)
        masks = np.empty(len(idx), dtype=np.uint64)
        for s in np.unique(shard_of):
            sel = shard_of == s
            rec = self.records[s][idx[sel] - self.offsets[s]]
            phases[sel] = rec["phase"]
            masks[sel] = rec["label"]
        return phases.reshape(len(idx), self.mics, self.bands), decode_labels(masks, self.classes)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    wall_seconds: float


@dataclass
class TrainResult:
    model: Model
    log: List[EpochLog] = field(default_factory=list)
    first_batch_loss: float = float("nan")
    checkpoint: Optional[Path] = None

    @property
    def final_loss(self) -> float:
        return self.log[-1].mean_loss


def write_loss_log(log: List[EpochLog], path: Path) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "mean_loss", "wall_seconds"])
        for row in log:
            writer.writerow([row.epoch, repr(row.mean_loss), f"{row.wall_seconds:.3f}"])
    return path


def read_loss_log(path: Path) -> List[EpochLog]:
    with open(path, newline="", encoding="utf-8") as f:
        return [
            EpochLog(int(r["epoch"]), float(r["mean_loss"]), float(r["wall_seconds"]))
            for r in csv.DictReader(f)
        ]


def _check_dataset(model: Model, data) -> None:
    spec = model.spec
    if len(data) == 0:
        raise ValueError("training dataset is empty")
    if (data.mics, data.bands, data.classes) != (spec.mics, spec.bands, spec.classes):
        raise ValueError(
            f"dataset (M={data.mics}, K={data.bands}, I={data.classes}) does not match "
            f"model (M={spec.mics}, K={spec.bands}, I={spec.classes})"
        )


def train(model: Model, data, config: TrainConfig, out_dir: Optional[Path] = None) -> TrainResult:
    """Fixed-epoch minibatch training with Adam, dropout active.

    With *out_dir*, the loss log and a checkpoint are rewritten after every
    epoch (``epoch_NNN.doam`` plus ``model.doam`` for the latest).
    """
    _check_dataset(model, data)
    _, shuffle_seq, dropout_seq = seed_streams(config.seed)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    state = AdamState(lr=config.lr)
    result = TrainResult(model=model)
    n = len(data)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    logger.info("training on %d frames, %d batch(es) per epoch", n, -(-n // config.batch))

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            x, y = data.batch(idx)
            probs, cache = forward(model, x, "train", dropout_rng, config.dropout)
            loss, dprobs = bce_loss(probs, y)
            apply_adam(model, backward(model, cache, dprobs), state)
            if start == 0 and epoch == 1:
                result.first_batch_loss = loss
            total += loss * len(idx)
        row = EpochLog(epoch=epoch, mean_loss=total / n, wall_seconds=time.perf_counter() - t0)
        result.log.append(row)
        logger.info("epoch %d: mean loss %.5f (%.1fs)", row.epoch, row.mean_loss, row.wall_seconds)

        if out_dir is not None:
            save_checkpoint(model, out_dir / f"epoch_{epoch:03d}.doam")
            result.checkpoint = save_checkpoint(model, out_dir / MODEL_NAME)
            write_loss_log(result.log, out_dir / LOSS_LOG_NAME)
    return result


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_error: float
    per_tensor: dict
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def summary(self) -> str:
        lines = [f"{name:<14} {err:.3e}" for name, err in self.per_tensor.items()]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"max relative error {self.max_error:.3e} ({verdict}, tolerance {self.tolerance:g})")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def _relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def gradient_check(
    spec: Optional[ModelSpec] = None,
    seed: int = 0,
    h: float = 1e-5,
    batch: int = 4,
    dropout: float = 0.5,
    margin: float = 1e-3,
    max_draws: int = 100,
) -> GradCheckReport:
    """Backprop against central differences, double precision, fixed dropout masks.

    Biases are drawn non-zero and the parameters redrawn until every ReLU
    pre-activation is at least *margin* away from the kink, so no central
    difference straddles it.
    """
    spec = spec or ModelSpec.toy()
    data_rng = np.random.default_rng(seed + 1)
    x = data_rng.uniform(-np.pi, np.pi, (batch, spec.mics, spec.bands))
    y = (data_rng.random((batch, spec.classes)) < 0.4).astype(np.float64)

    def run(model):
        probs, cache = forward(model, x, "train", np.random.default_rng(seed + 2), dropout)
        loss, dprobs = bce_loss(probs, y)
        return loss, dprobs, cache

    param_rng = np.random.default_rng([seed, 3])
    for draw in range(max_draws):
        model = Model.initialize(spec, int(param_rng.integers(2**32)), dtype=np.float64)
        for name, b in model.params.items():
            if name.endswith(".bias"):
                b[...] = param_rng.choice([-1.0, 1.0], b.shape) * param_rng.uniform(0.05, 0.5, b.shape)
        _, dprobs, cache = run(model)
        if cache.relu_margin >= margin:
            break
    else:
        raise RuntimeError(f"no parameter draw kept ReLU inputs {margin:g} from zero in {max_draws} tries")
    logger.debug("gradient check parameters from draw %d, ReLU margin %.3e", draw, cache.relu_margin)
    analytic = backward(model, cache, dprobs)

    per_tensor = {}
    for name, w in model.params.items():
        numeric = np.zeros_like(w)
        for i in np.ndindex(w.shape):
            orig = w[i]
            w[i] = orig + h
            plus = run(model)[0]
            w[i] = orig - h
            minus = run(model)[0]
            w[i] = orig
            numeric[i] = (plus - minus) / (2.0 * h)
        per_tensor[name] = _relative_error(analytic[name], numeric)
    report = GradCheckReport(max_error=max(per_tensor.values()), per_tensor=per_tensor)
    logger.info("gradient check: max relative error %.3e", report.max_error)
    return report
