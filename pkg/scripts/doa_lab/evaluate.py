"""
Evaluation: posterior aggregation, top-2 selection, permutation-aligned MAE
and the CNN vs SRP-PHAT comparison table.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .constants import BAND_HI, BAND_LO, DOA_RESOLUTION
from .datagen import doa_classes, list_mixtures, read_mixture
from .dsp import StftFrameSet, phase_maps, stft
from .nn import Model
from .srp_phat import SteeringTable, srp_probabilities, srp_scores

logger = logging.getLogger(__name__)

RESULTS_NAME = "results.csv"
SUMMARY_NAME = "summary.json"
POSTERIORS_NAME = "posteriors.csv"
RESULT_FIELDS = ["mixture_id", "true_doa1", "true_doa2", "est_doa1", "est_doa2", "mae_deg"]


class AlignmentError(ValueError):
    """Result sets being compared do not cover the same mixtures in the same order."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class PosteriorTrace:
    frames: np.ndarray
    source: str = "cnn"

    def __post_init__(self) -> None:
        if self.frames.ndim != 2:
            raise ValueError(f"posterior trace must be (frames, classes), got {self.frames.shape}")
        if np.any(self.frames < 0):
            raise ValueError("posterior probabilities must be nonnegative")


@dataclass(frozen=True)
class ResultRow:
    mixture_id: str
    true_pair: Tuple[int, int]
    est_pair: Tuple[int, int]
    mae_deg: float

    def to_csv(self) -> List:
        return [self.mixture_id, *self.true_pair, *self.est_pair, f"{self.mae_deg:.6f}"]


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------

def aggregate(trace: PosteriorTrace) -> np.ndarray:
    """Mean over frames, then normalised to unit sum."""
    if trace.frames.shape[0] == 0:
        raise ValueError("cannot aggregate an empty posterior trace")
    mean = trace.frames.astype(np.float64).mean(axis=0)
    total = mean.sum()
    if total <= 0:
        return np.full_like(mean, 1.0 / mean.size)
    return mean / total


def top2(aggregated: np.ndarray, resolution: int = DOA_RESOLUTION) -> Tuple[int, int]:
    """The two most probable DOAs, ascending; ties go to the lower class."""
    if aggregated.size < 2:
        raise ValueError("need at least two classes")
    best = np.argsort(-np.asarray(aggregated), kind="stable")[:2]
    a, b = sorted(int(i) * resolution for i in best)
    return a, b


def pair_mae(est: Sequence[float], true: Sequence[float]) -> float:
    """Mean absolute error under the better of the two source assignments."""
    (e1, e2), (t1, t2) = est, true
    straight = (abs(e1 - t1) + abs(e2 - t2)) / 2.0
    crossed = (abs(e1 - t2) + abs(e2 - t1)) / 2.0
    return float(min(straight, crossed))


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------

class CnnEstimator:
    name = "cnn"

    def __init__(self, model: Model, batch: int = 512) -> None:
        self.model = model
        self.batch = batch

    def frame_posteriors(self, frames: StftFrameSet) -> PosteriorTrace:
        spec = self.model.spec
        x = phase_maps(frames, BAND_LO, BAND_LO + spec.bands - 1)
        return PosteriorTrace(frames=self.model.predict(x, self.batch), source=self.name)


class SrpEstimator:
    name = "srp"

    def __init__(self, table: Optional[SteeringTable] = None) -> None:
        self.table = table or SteeringTable.build()

    def frame_posteriors(self, frames: StftFrameSet) -> PosteriorTrace:
        return PosteriorTrace(frames=srp_probabilities(srp_scores(frames, self.table)), source=self.name)


# ---------------------------------------------------------------------------
# Experiment
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    method: str
    rows: List[ResultRow] = field(default_factory=list)
    posteriors: Dict[str, np.ndarray] = field(default_factory=dict)
    skipped: List[str] = field(default_factory=list)
    snr_db: Optional[float] = None

    @property
    def mean_mae(self) -> float:
        if not self.rows:
            return float("nan")
        return float(np.mean([r.mae_deg for r in self.rows]))

    def summary(self) -> dict:
        return {
            "method": self.method,
            "snr_db": self.snr_db,
            "mixtures": len(self.rows),
            "skipped": len(self.skipped),
            "mean_mae_deg": self.mean_mae,
        }


def _evaluate_one(mixture_dir: Path, estimator, resolution: int):
    try:
        mix = read_mixture(mixture_dir)
        trace = estimator.frame_posteriors(stft(mix.audio, fs=mix.fs))
    except (OSError, ValueError, KeyError) as exc:
        logger.warning("skipping mixture %s: %s", mixture_dir.name, exc)
        return mixture_dir.name, None, None, None
    agg = aggregate(trace)
    est = top2(agg, resolution)
    row = ResultRow(mix.mixture_id, tuple(mix.doas), est, pair_mae(est, mix.doas))
    return mix.mixture_id, row, agg, mix.snr_db


def run_experiment(
    test_dir: Path,
    estimator,
    out_dir: Optional[Path] = None,
    threads: int = 1,
    dump_posteriors: bool = False,
    resolution: int = DOA_RESOLUTION,
) -> ExperimentResult:
    """Score every mixture under *test_dir*; rows come out in mixture-id order."""
    dirs = list_mixtures(test_dir)
    if not dirs:
        raise ValueError(f"no mixtures found under {test_dir}")
    logger.info("evaluating %d mixtures with %s (%d thread(s))", len(dirs), estimator.name, threads)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(lambda d: _evaluate_one(d, estimator, resolution), dirs))
    else:
        outcomes = [_evaluate_one(d, estimator, resolution) for d in dirs]

    result = ExperimentResult(method=estimator.name)
    snrs = set()
    for mixture_id, row, agg, snr in outcomes:
        if row is None:
            result.skipped.append(mixture_id)
            continue
        result.rows.append(row)
        result.posteriors[mixture_id] = agg
        snrs.add(snr)
    if len(snrs) == 1:
        result.snr_db = snrs.pop()
    if result.skipped:
        logger.warning("%d mixture(s) skipped and excluded from the mean", len(result.skipped))

    if out_dir is not None:
        write_results(result, out_dir, dump_posteriors, resolution)
    return result


def write_results(result: ExperimentResult, out_dir: Path, dump_posteriors: bool = False, resolution: int = DOA_RESOLUTION) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / RESULTS_NAME, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(RESULT_FIELDS)
        for row in result.rows:
            writer.writerow(row.to_csv())
    with open(out_dir / SUMMARY_NAME, "w", encoding="utf-8") as f:
        json.dump(result.summary(), f, indent=2, sort_keys=True)
    if dump_posteriors:
        with open(out_dir / POSTERIORS_NAME, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["mixture_id"] + [f"p_{int(t):03d}" for t in doa_classes(resolution)])
            for mixture_id, agg in result.posteriors.items():
                writer.writerow([mixture_id] + [f"{p:.8f}" for p in agg])


def read_results(path: Path) -> List[ResultRow]:
    with open(path, newline="", encoding="utf-8") as f:
        return [
            ResultRow(
                mixture_id=r["mixture_id"],
                true_pair=(int(r["true_doa1"]), int(r["true_doa2"])),
                est_pair=(int(r["est_doa1"]), int(r["est_doa2"])),
                mae_deg=float(r["mae_deg"]),
            )
            for r in csv.DictReader(f)
        ]


def read_summary(results_csv: Path) -> dict:
    """The ``summary.json`` written next to a results CSV (empty if absent)."""
    path = results_csv.parent / SUMMARY_NAME
    if not path.exists():
        return {}
    return json.loads(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------

@dataclass
class ComparisonRow:
    snr_db: Optional[float]
    mixtures: int
    cnn_mae: float
    srp_mae: float
    win_rate: float

    @property
    def delta(self) -> float:
        return self.cnn_mae - self.srp_mae


@dataclass
class Comparison:
    rows: List[ComparisonRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "rows": [
                {
                    "snr_db": r.snr_db,
                    "mixtures": r.mixtures,
                    "cnn_mean_mae_deg": r.cnn_mae,
                    "srp_mean_mae_deg": r.srp_mae,
                    "delta_deg": r.delta,
                    "win_rate": r.win_rate,
                }
                for r in self.rows
            ]
        }

    def summary(self) -> str:
        """Methods as rows, SNRs as columns."""
        heads = ["n/a" if r.snr_db is None else f"{r.snr_db:g} dB" for r in self.rows]
        lines = [f"{'Mean absolute error (deg)':<28}" + "".join(f"{h:>10}" for h in heads)]
        lines.append(f"{'proposed (CNN)':<28}" + "".join(f"{r.cnn_mae:>10.2f}" for r in self.rows))
        lines.append(f"{'SRP-PHAT':<28}" + "".join(f"{r.srp_mae:>10.2f}" for r in self.rows))
        lines.append(f"{'CNN win rate':<28}" + "".join(f"{r.win_rate:>10.2f}" for r in self.rows))
        return "\n".join(lines)


def compare_rows(cnn: List[ResultRow], srp: List[ResultRow], snr_db: Optional[float] = None) -> ComparisonRow:
    if [r.mixture_id for r in cnn] != [r.mixture_id for r in srp]:
        raise AlignmentError("mixture id mismatch")
    if not cnn:
        raise ValueError("no result rows to compare")
    wins = sum(c.mae_deg < s.mae_deg for c, s in zip(cnn, srp))
    return ComparisonRow(
        snr_db=snr_db,
        mixtures=len(cnn),
        cnn_mae=float(np.mean([r.mae_deg for r in cnn])),
        srp_mae=float(np.mean([r.mae_deg for r in srp])),
        win_rate=wins / len(cnn),
    )


def compare(runs: Sequence[Tuple[List[ResultRow], List[ResultRow], Optional[float]]]) -> Comparison:
    """One comparison row per (cnn rows, srp rows, snr) run, sorted by SNR."""
    rows = [compare_rows(c, s, snr) for c, s, snr in runs]
    rows.sort(key=lambda r: (r.snr_db is None, r.snr_db if r.snr_db is not None else 0.0))
    return Comparison(rows=rows)
