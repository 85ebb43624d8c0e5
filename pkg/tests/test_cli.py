"""
Tests for doa_lab.cli: subcommand dispatch, exit codes and end-to-end runs
on tiny configs.
"""
from __future__ import annotations

import csv
import json

import pytest

from doa_lab.cli import build_parser, main
from doa_lab.config import RESOLVED_NAME
from doa_lab.evaluate import RESULT_FIELDS
from doa_lab.shards import file_digest

TINY = {
    "seed": 3,
    "grid": {
        "rooms": [{"name": "R1", "dims": [6.0, 6.0, 2.7], "rt60": 0.2}],
        "positions_per_room": 1,
        "distances": [1.0],
        "pairs": [[0, 90], [45, 135]],
        "signal_duration": 0.5,
    },
    "test": {
        "room": {"name": "unseen", "dims": [7.0, 5.0, 3.0], "rt60": 0.5},
        "pair_stride": 333,
        "duration": 0.5,
    },
    "model": {"filters": 2, "fc_widths": [4]},
    "train": {"batch": 64, "epochs": 1},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def _write_results(path, ids, mae=5.0):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(RESULT_FIELDS)
        for mixture_id in ids:
            writer.writerow([mixture_id, 45, 105, 40, 110, mae])
    return path


# ---------------------------------------------------------------------------
# Tests: parser and dispatch
# ---------------------------------------------------------------------------

class TestParser:
    def test_no_command_prints_help(self, capsys):
        assert main([]) == 2
        assert "gen-train" in capsys.readouterr().out

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as info:
            main(["frobnicate"])
        assert info.value.code == 2

    def test_compare_flags_repeatable(self):
        args = build_parser().parse_args(["compare", "--cnn", "a", "--cnn", "b", "--srp", "c", "--srp", "d"])
        assert args.cnn == ["a", "b"] and args.srp == ["c", "d"]


# ---------------------------------------------------------------------------
# Tests: gradcheck / compare
# ---------------------------------------------------------------------------

class TestGradcheck:
    def test_passes(self, capsys, tmp_path):
        assert main(["gradcheck", "--out", str(tmp_path)]) == 0
        assert "PASS" in capsys.readouterr().out
        report = json.loads((tmp_path / "gradcheck.json").read_text())
        assert report["passed"] is True


class TestCompare:
    def test_misaligned_ids(self, capsys, tmp_path):
        cnn = _write_results(tmp_path / "cnn" / "results.csv", ["mix0000", "mix0001"])
        srp = _write_results(tmp_path / "srp" / "results.csv", ["mix0000", "mix0002"])
        assert main(["compare", "--cnn", str(cnn), "--srp", str(srp)]) == 1
        assert "mixture id mismatch" in capsys.readouterr().err

    def test_prints_table_and_saves(self, capsys, tmp_path):
        ids = ["mix0000", "mix0001"]
        cnn = _write_results(tmp_path / "cnn" / "results.csv", ids, mae=2.5)
        srp = _write_results(tmp_path / "srp" / "results.csv", ids, mae=10.0)
        (tmp_path / "cnn" / "summary.json").write_text(json.dumps({"snr_db": 20.0}))
        out = tmp_path / "cmp"
        assert main(["compare", "--cnn", str(cnn), "--srp", str(srp), "--out", str(out)]) == 0
        assert "20 dB" in capsys.readouterr().out
        rows = json.loads((out / "comparison.json").read_text())["rows"]
        assert rows[0]["win_rate"] == 1.0
        assert rows[0]["delta_deg"] == -7.5

    def test_unequal_file_counts(self, capsys, tmp_path):
        cnn = _write_results(tmp_path / "results.csv", ["mix0000"])
        assert main(["compare", "--cnn", str(cnn), "--cnn", str(cnn), "--srp", str(cnn)]) == 1
        assert "--srp" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# Tests: config errors
# ---------------------------------------------------------------------------

class TestConfigErrors:
    def test_bad_config_exit_code(self, capsys, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"grid": {"rooms": [{"dims": [6.0, 6.0, 2.7], "rt60": 0.01}]}}))
        assert main(["gen-train", "--config", str(path), "--out", str(tmp_path / "out")]) == 1
        err = capsys.readouterr().err
        assert "grid.rooms[0].rt60" in err

    def test_missing_config_file(self, capsys, tmp_path):
        assert main(["gen-train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 1
        assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# Tests: data generation, training and evaluation
# ---------------------------------------------------------------------------

class TestPipeline:
    def test_gen_train_reproducible(self, tiny_config, tmp_path, capsys):
        for name in ("a", "b"):
            assert main(["gen-train", "--config", str(tiny_config), "--out", str(tmp_path / name)]) == 0
        assert file_digest(tmp_path / "a" / "manifest.json") == file_digest(tmp_path / "b" / "manifest.json")
        assert (tmp_path / "a" / RESOLVED_NAME).exists()
        assert "Records:" in capsys.readouterr().out

    def test_seed_override_changes_data(self, tiny_config, tmp_path):
        main(["gen-train", "--config", str(tiny_config), "--out", str(tmp_path / "a")])
        main(["gen-train", "--config", str(tiny_config), "--out", str(tmp_path / "b"), "--seed", "4"])
        assert file_digest(tmp_path / "a" / "manifest.json") != file_digest(tmp_path / "b" / "manifest.json")

    def test_end_to_end(self, tiny_config, tmp_path, capsys):
        cfg = ["--config", str(tiny_config)]
        assert main(["gen-train", *cfg, "--out", str(tmp_path / "train")]) == 0
        assert main(["gen-test", *cfg, "--out", str(tmp_path / "test")]) == 0
        assert main(["train", *cfg, "--data", str(tmp_path / "train"), "--out", str(tmp_path / "run")]) == 0
        assert (tmp_path / "run" / "model.doam").exists()
        assert main([
            "eval-cnn", *cfg, "--model", str(tmp_path / "run" / "model.doam"),
            "--test", str(tmp_path / "test"), "--out", str(tmp_path / "cnn"),
        ]) == 0
        assert main(["eval-srp", *cfg, "--test", str(tmp_path / "test"), "--out", str(tmp_path / "srp")]) == 0
        assert main([
            "compare", "--cnn", str(tmp_path / "cnn" / "results.csv"),
            "--srp", str(tmp_path / "srp" / "results.csv"),
        ]) == 0
        out = capsys.readouterr().out
        assert "30 dB" in out and "CNN win rate" in out

    def test_gen_test_per_snr_subdirs(self, tiny_config, tmp_path):
        config = dict(TINY, test=dict(TINY["test"], snr_db=[10.0, 30.0]))
        tiny_config.write_text(json.dumps(config))
        assert main(["gen-test", "--config", str(tiny_config), "--out", str(tmp_path / "test")]) == 0
        assert (tmp_path / "test" / "snr_10dB" / "mix0000" / "truth.json").exists()
        assert (tmp_path / "test" / "snr_30dB" / "mix0000" / "truth.json").exists()

    def test_eval_cnn_shape_mismatch(self, tiny_config, tmp_path, capsys):
        cfg = ["--config", str(tiny_config)]
        main(["gen-train", *cfg, "--out", str(tmp_path / "train")])
        main(["train", *cfg, "--data", str(tmp_path / "train"), "--out", str(tmp_path / "run")])
        other = tmp_path / "other.json"
        other.write_text(json.dumps(dict(TINY, model={"filters": 3, "fc_widths": [4]})))
        assert main([
            "eval-cnn", "--config", str(other), "--model", str(tmp_path / "run" / "model.doam"),
            "--test", str(tmp_path), "--out", str(tmp_path / "cnn"),
        ]) == 1
        assert "filters" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# Tests: rir-dump
# ---------------------------------------------------------------------------

class TestRirDump:
    def test_writes_one_file_per_mic(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "rirs"
        assert main(["rir-dump", "--config", str(tiny_config), "--out", str(out), "--doa", "60"]) == 0
        text = capsys.readouterr().out
        assert "DOA 60 deg" in text
        assert "Estimated RT60" in text
        assert len(list(out.glob("*.f32"))) == 4

    def test_room_index_out_of_range(self, tiny_config, tmp_path, capsys):
        assert main(["rir-dump", "--config", str(tiny_config), "--out", str(tmp_path), "--room", "3"]) == 1
        assert "out of range" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# Tests: desk-scale run (slow)
# ---------------------------------------------------------------------------

@pytest.mark.slow
class TestDeskScale:
    def test_cnn_beats_srp(self, tmp_path, capsys):
        from pathlib import Path

        from doa_lab.evaluate import read_results
        from doa_lab.train import read_loss_log

        cfg = ["--config", str(Path(__file__).resolve().parent.parent / "configs" / "desk_scale.json")]
        assert main(["gen-train", *cfg, "--out", str(tmp_path / "train")]) == 0
        assert main(["gen-test", *cfg, "--out", str(tmp_path / "test")]) == 0
        assert main(["train", *cfg, "--data", str(tmp_path / "train"), "--out", str(tmp_path / "run")]) == 0
        assert main([
            "eval-cnn", *cfg, "--model", str(tmp_path / "run" / "model.doam"),
            "--test", str(tmp_path / "test"), "--out", str(tmp_path / "cnn"),
        ]) == 0
        assert main(["eval-srp", *cfg, "--test", str(tmp_path / "test"), "--out", str(tmp_path / "srp")]) == 0

        cnn = read_results(tmp_path / "cnn" / "results.csv")
        srp = read_results(tmp_path / "srp" / "results.csv")
        assert len(cnn) == len(srp) == 111
        cnn_mae = sum(r.mae_deg for r in cnn) / len(cnn)
        srp_mae = sum(r.mae_deg for r in srp) / len(srp)
        assert cnn_mae < srp_mae
        assert cnn_mae <= 20.0

        # same seed, same data and loss log
        assert main(["gen-train", *cfg, "--out", str(tmp_path / "train2")]) == 0
        assert file_digest(tmp_path / "train" / "manifest.json") == file_digest(tmp_path / "train2" / "manifest.json")
        assert main(["train", *cfg, "--data", str(tmp_path / "train2"), "--out", str(tmp_path / "run2")]) == 0
        first = [(r.epoch, r.mean_loss) for r in read_loss_log(tmp_path / "run" / "loss_log.csv")]
        second = [(r.epoch, r.mean_loss) for r in read_loss_log(tmp_path / "run2" / "loss_log.csv")]
        assert first == second
