#!/usr/bin/env python3
"""
Command-line entry point for the DOA lab.

Usage
-----
  doa-lab gen-train --config configs/desk_scale.json --out data/train --seed 7
  doa-lab gen-test  --config configs/desk_scale.json --out data/test --snr-db 30
  doa-lab train     --config configs/desk_scale.json --data data/train --out runs/cnn
  doa-lab eval-cnn  --model runs/cnn/model.doam --test data/test --out results/cnn
  doa-lab eval-srp  --test data/test --out results/srp
  doa-lab compare   --cnn results/cnn/results.csv --srp results/srp/results.csv
  doa-lab gradcheck
  doa-lab rir-dump  --config configs/desk_scale.json --out rirs --doa 60
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Iterator, List, Optional

# ---------------------------------------------------------------------------
# Bootstrap: prefer the installed package; fall back to the source tree.
# ---------------------------------------------------------------------------
_SCRIPT_DIR = Path(__file__).resolve().parent

try:
    import doa_lab  # noqa: F401
except ImportError:
    if str(_SCRIPT_DIR.parent) not in sys.path:
        sys.path.insert(0, str(_SCRIPT_DIR.parent))

from doa_lab.acoustics import (
    estimate_rt60,
    place_source,
    sabine_reflection,
    simulate_array_rirs,
    write_rir_dump,
)
from doa_lab.checkpoint import load_checkpoint
from doa_lab.config import ConfigError, RunConfig, load_config, save_resolved
from doa_lab.datagen import (
    SyntheticSpeech,
    WavSources,
    gen_test_mixtures,
    generate_dataset,
    grid_arrays,
    test_array,
    write_test_set,
)
from doa_lab.evaluate import (
    CnnEstimator,
    SrpEstimator,
    compare,
    read_results,
    read_summary,
    run_experiment,
)
from doa_lab.shards import file_digest
from doa_lab.train import ShardDataset, gradient_check, init_model, train

logger = logging.getLogger("doa_lab.cli")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@contextmanager
def stage(name: str) -> Iterator[None]:
    logger.info("%s ...", name)
    t0 = time.perf_counter()
    yield
    logger.info("%s done in %.2fs", name, time.perf_counter() - t0)


def configure_logging(verbose: int, quiet: int) -> None:
    level = logging.INFO
    if verbose:
        level = logging.DEBUG
    elif quiet:
        level = logging.WARNING
    logging.basicConfig(stream=sys.stderr, format=LOG_FORMAT, level=level)
    logging.getLogger("doa_lab").setLevel(level)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file (or defaults) with command-line overrides applied."""
    config = load_config(Path(args.config) if getattr(args, "config", None) else None)
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    if getattr(args, "threads", None) is not None:
        config = replace(config, threads=args.threads)
    if getattr(args, "snr_db", None) is not None:
        config = replace(config, test=replace(config.test, snr_db=[args.snr_db]))
    if getattr(args, "sources", None) is not None:
        config = replace(config, test=replace(config.test, sources=args.sources))
    train_overrides = {
        k: getattr(args, k) for k in ("epochs", "lr", "batch") if getattr(args, k, None) is not None
    }
    if train_overrides:
        config = replace(config, train=replace(config.train, **train_overrides))
    if config.threads < 1:
        raise ValueError("--threads must be >= 1")
    return config


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_train(args: argparse.Namespace) -> int:
    """Generate the training shards and manifest."""
    config = resolve_config(args)
    out = Path(args.out)
    save_resolved(config, out, "gen-train")
    with stage("gen-train"):
        manifest = generate_dataset(config.train_grid(), config.seed, out, config.threads)
    summary = json.loads(manifest.read_text(encoding="utf-8"))
    print(f"Records: {summary['total_records']} in {len(summary['shards'])} shard(s)")
    print(f"Manifest: {manifest} (sha256 {file_digest(manifest)})")
    return 0


def cmd_gen_test(args: argparse.Namespace) -> int:
    """Render test mixtures, one directory per SNR when several are configured."""
    config = resolve_config(args)
    out = Path(args.out)
    save_resolved(config, out, "gen-test")
    tests = config.test_configs()
    for test in tests:
        if test.sources == "synthetic":
            sources = SyntheticSpeech()
        else:
            sources = WavSources.from_dir(Path(test.sources))
        target = out if len(tests) == 1 else out / f"snr_{test.snr_db:g}dB"
        with stage(f"gen-test {test.snr_db:g} dB"):
            written = write_test_set(gen_test_mixtures(test, sources, config.seed), target)
        print(f"{len(written)} mixtures at {test.snr_db:g} dB -> {target}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = Path(args.out)
    save_resolved(config, out, "train")
    data = ShardDataset.from_manifest(Path(args.data))
    model = init_model(config.model, config.seed)
    with stage("train"):
        result = train(model, data, config.train_config(), out)
    print(f"Frames: {len(data)}  epochs: {len(result.log)}  final loss: {result.final_loss:.5f}")
    print(f"Checkpoint: {result.checkpoint}")
    return 0


def _evaluate(args: argparse.Namespace, estimator, command: str) -> int:
    config = resolve_config(args)
    out = Path(args.out)
    save_resolved(config, out, command)
    with stage(command):
        result = run_experiment(Path(args.test), estimator, out, config.threads, args.posteriors)
    if not result.rows:
        raise ValueError(f"every mixture under {args.test} failed to evaluate")
    print(f"{result.method}: {len(result.rows)} mixtures, mean MAE {result.mean_mae:.2f} deg")
    if result.skipped:
        print(f"  skipped {len(result.skipped)} unreadable mixture(s)")
    return 0


def cmd_eval_cnn(args: argparse.Namespace) -> int:
    expected = load_config(Path(args.config)).model if args.config else None
    model = load_checkpoint(Path(args.model), expected)
    return _evaluate(args, CnnEstimator(model), "eval-cnn")


def cmd_eval_srp(args: argparse.Namespace) -> int:
    return _evaluate(args, SrpEstimator(), "eval-srp")


def cmd_compare(args: argparse.Namespace) -> int:
    """Per-SNR comparison of row-aligned CNN and SRP-PHAT results."""
    if len(args.cnn) != len(args.srp):
        raise ValueError(f"{len(args.cnn)} --cnn file(s) but {len(args.srp)} --srp file(s)")
    runs = []
    for cnn_path, srp_path in zip(args.cnn, args.srp):
        cnn_path, srp_path = Path(cnn_path), Path(srp_path)
        snr = read_summary(cnn_path).get("snr_db", read_summary(srp_path).get("snr_db"))
        runs.append((read_results(cnn_path), read_results(srp_path), snr))
    comparison = compare(runs)
    print(comparison.summary())
    if args.out:
        out = Path(args.out)
        save_resolved(resolve_config(args), out, "compare")
        with open(out / "comparison.json", "w", encoding="utf-8") as f:
            json.dump(comparison.to_dict(), f, indent=2, sort_keys=True)
        print(f"\nFull comparison saved: {out / 'comparison.json'}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else 0
    with stage("gradcheck"):
        report = gradient_check(seed=seed)
    print(report.summary())
    if args.out:
        out = Path(args.out)
        save_resolved(resolve_config(args), out, "gradcheck")
        with open(out / "gradcheck.json", "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    return 0 if report.passed else 1


def cmd_rir_dump(args: argparse.Namespace) -> int:
    """Write the array RIRs of one training or test setup for inspection."""
    config = resolve_config(args)
    out = Path(args.out)
    save_resolved(config, out, "rir-dump")
    if args.room == "test":
        room = config.test.room.to_room()
        array = test_array(config.test_configs()[0], config.seed)
        distance = args.distance or config.test.distance
    else:
        grid = config.train_grid()
        index = int(args.room)
        if not 0 <= index < len(grid.rooms):
            raise ValueError(f"--room {index} out of range for {len(grid.rooms)} training room(s)")
        room = grid.rooms[index]
        arrays = grid_arrays(grid, config.seed, index)
        array = arrays[min(args.position, len(arrays) - 1)]
        distance = args.distance or grid.distances[0]
    placement = place_source(array, args.doa, distance, room)
    with stage("rir-dump"):
        rirs = simulate_array_rirs(room, sabine_reflection(room), placement, array)
        paths = write_rir_dump(rirs, out, prefix=f"{room.label}_doa{args.doa:g}")
    print(f"Room {room.label}, source at {placement.distance:.2f} m, DOA {args.doa:g} deg"
          + (" (clamped)" if placement.clamped else ""))
    if room.rt60 > 0:
        try:
            print(f"Estimated RT60 (mic 0): {estimate_rt60(rirs[0]):.3f} s (configured {room.rt60:g} s)")
        except ValueError as exc:
            logger.warning("RT60 estimate unavailable: %s", exc)
    for path in paths:
        print(f"  {path}")
    return 0


# ---------------------------------------------------------------------------
# Argument parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="doa-lab",
        description="Noise-trained multi-speaker DOA estimation vs. SRP-PHAT",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="Debug logging")
    parser.add_argument("-q", "--quiet", action="count", default=0, help="Warnings only")
    sub = parser.add_subparsers(dest="command")

    def common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
        p.add_argument("--config", help="Run config (YAML or JSON)")
        p.add_argument("--out", required=out_required, help="Output directory")
        p.add_argument("--seed", type=int, help="Master seed (overrides config)")

    # ── gen-train ───────────────────────────────────────────────────────
    p_gtrain = sub.add_parser("gen-train", help="Generate training shards")
    common(p_gtrain)
    p_gtrain.add_argument("--threads", type=int, help="Worker processes")

    # ── gen-test ────────────────────────────────────────────────────────
    p_gtest = sub.add_parser("gen-test", help="Render two-source test mixtures")
    common(p_gtest)
    p_gtest.add_argument("--snr-db", type=float, help="Test SNR in dB (overrides config)")
    p_gtest.add_argument("--sources", help="'synthetic' or a directory of 16 kHz mono WAVs")

    # ── train ───────────────────────────────────────────────────────────
    p_train = sub.add_parser("train", help="Train the CNN on generated shards")
    common(p_train)
    p_train.add_argument("--data", required=True, help="Training data directory or manifest")
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--batch", type=int)

    # ── eval-cnn / eval-srp ─────────────────────────────────────────────
    p_ecnn = sub.add_parser("eval-cnn", help="Evaluate a trained CNN on a test set")
    common(p_ecnn)
    p_ecnn.add_argument("--model", required=True, help="Checkpoint file")
    p_esrp = sub.add_parser("eval-srp", help="Evaluate the SRP-PHAT baseline on a test set")
    common(p_esrp)
    for p in (p_ecnn, p_esrp):
        p.add_argument("--test", required=True, help="Test set directory")
        p.add_argument("--threads", type=int, help="Worker threads")
        p.add_argument("--posteriors", action="store_true", help="Also dump aggregated posteriors")

    # ── compare ─────────────────────────────────────────────────────────
    p_cmp = sub.add_parser("compare", help="Tabulate CNN vs SRP-PHAT results")
    common(p_cmp, out_required=False)
    p_cmp.add_argument("--cnn", action="append", required=True, help="CNN results CSV (repeatable)")
    p_cmp.add_argument("--srp", action="append", required=True, help="SRP results CSV (repeatable)")

    # ── gradcheck ───────────────────────────────────────────────────────
    p_grad = sub.add_parser("gradcheck", help="Verify backprop against finite differences")
    common(p_grad, out_required=False)

    # ── rir-dump ────────────────────────────────────────────────────────
    p_rir = sub.add_parser("rir-dump", help="Write array RIRs of one setup")
    common(p_rir)
    p_rir.add_argument("--doa", type=float, default=90.0, help="Source DOA in degrees")
    p_rir.add_argument("--distance", type=float, help="Source distance in metres")
    p_rir.add_argument("--room", default="0", help="Training room index, or 'test'")
    p_rir.add_argument("--position", type=int, default=0, help="Array position index")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return 2
    configure_logging(args.verbose, args.quiet)

    handlers = {
        "gen-train": cmd_gen_train,
        "gen-test": cmd_gen_test,
        "train": cmd_train,
        "eval-cnn": cmd_eval_cnn,
        "eval-srp": cmd_eval_srp,
        "compare": cmd_compare,
        "gradcheck": cmd_gradcheck,
        "rir-dump": cmd_rir_dump,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for finding in exc.findings:
            print(f"  {finding.format()}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
