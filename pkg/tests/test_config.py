"""
Tests for doa_lab.config: parsing, validation findings, bundled configs and
the resolved-config echo.
"""
from __future__ import annotations

import json
from pathlib import Path

import pytest

from doa_lab.config import (
    RESOLVED_NAME,
    ConfigError,
    Finding,
    RunConfig,
    load_config,
    parse_config,
    save_resolved,
)
from doa_lab.nn import ModelSpec

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def _errors(exc: ConfigError) -> list:
    return [f for f in exc.findings if f.level == "ERROR"]


# ---------------------------------------------------------------------------
# Tests: defaults and bundled configs
# ---------------------------------------------------------------------------

class TestDefaults:
    def test_none_gives_defaults(self):
        config = load_config(None)
        assert config == RunConfig()
        assert config.model == ModelSpec()

    def test_empty_mapping(self):
        assert parse_config({}) == RunConfig()

    def test_train_config_takes_top_level_seed(self):
        config = parse_config({"seed": 11})
        assert config.train_config().seed == 11


class TestBundledConfigs:
    @pytest.mark.parametrize("name", ["full_grid.json", "desk_scale.json"])
    def test_loads(self, name):
        config = load_config(CONFIG_DIR / name)
        assert config.model.classes == config.train_grid().n_classes == 37

    def test_full_grid_shape(self):
        config = load_config(CONFIG_DIR / "full_grid.json")
        grid = config.train_grid()
        assert [r.name for r in grid.rooms] == ["R1", "R2", "R3", "R4", "R5"]
        assert grid.positions_per_room == 7
        assert [t.snr_db for t in config.test_configs()] == [10.0, 20.0, 30.0]

    def test_desk_scale_shape(self):
        config = load_config(CONFIG_DIR / "desk_scale.json")
        assert config.seed == 7
        assert len(config.train_grid().rooms) == 1
        assert config.test_configs()[0].pair_stride == 6

    def test_yaml_accepted(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("seed: 3\ntrain:\n  epochs: 4\ntest:\n  snr_db: 20\n")
        config = load_config(path)
        assert config.seed == 3
        assert config.train.epochs == 4
        assert config.test.snr_db == [20]


# ---------------------------------------------------------------------------
# Tests: validation findings
# ---------------------------------------------------------------------------

class TestValidation:
    def test_unknown_keys_at_every_level(self):
        with pytest.raises(ConfigError) as info:
            parse_config({"colour": 1, "grid": {"roomz": []}, "model": {"width": 3}})
        keys = {f.key for f in _errors(info.value)}
        assert {"colour", "grid.roomz", "model.width"} <= keys

    def test_all_problems_reported_together(self):
        with pytest.raises(ConfigError) as info:
            parse_config({"seed": "x", "threads": 1.5, "train": {"lr": "fast"}})
        keys = {f.key for f in _errors(info.value)}
        assert {"seed", "threads", "train.lr"} <= keys
        assert "3 error(s)" in str(info.value)

    def test_bool_is_not_an_int(self):
        with pytest.raises(ConfigError):
            parse_config({"seed": True})

    def test_infeasible_rt60(self):
        data = {"grid": {"rooms": [{"dims": [6.0, 6.0, 2.7], "rt60": 0.05}]}}
        with pytest.raises(ConfigError) as info:
            parse_config(data)
        (finding,) = [f for f in _errors(info.value) if f.key == "grid.rooms[0].rt60"]
        assert "minimum feasible RT60" in finding.message

    def test_room_needs_dims(self):
        with pytest.raises(ConfigError) as info:
            parse_config({"test": {"room": {"rt60": 0.5}}})
        assert any(f.key == "test.room" for f in _errors(info.value))

    def test_model_mics_must_match_array(self):
        with pytest.raises(ConfigError) as info:
            parse_config({"array": {"mic_count": 5}})
        assert any(f.key == "model.mics" for f in _errors(info.value))

    def test_classes_follow_resolution(self):
        with pytest.raises(ConfigError) as info:
            parse_config({"grid": {"doa_resolution": 10}})
        assert any(f.key == "model.classes" for f in _errors(info.value))
        config = parse_config({"grid": {"doa_resolution": 10}, "model": {"classes": 19}})
        assert config.train_grid().n_classes == 19

    def test_invalid_model_section(self):
        with pytest.raises(ConfigError) as info:
            parse_config({"model": {"conv_layers": 4}})
        assert any(f.key == "model" for f in _errors(info.value))

    def test_train_seed_rejected(self):
        with pytest.raises(ConfigError) as info:
            parse_config({"train": {"seed": 4}})
        assert any(f.key == "train.seed" for f in _errors(info.value))

    def test_bad_pairs(self):
        with pytest.raises(ConfigError):
            parse_config({"grid": {"pairs": [[0, 0]]}})
        with pytest.raises(ConfigError):
            parse_config({"grid": {"pairs": [[0, 7]]}})

    def test_missing_sources_dir(self, tmp_path):
        with pytest.raises(ConfigError) as info:
            parse_config({"test": {"sources": str(tmp_path / "nope")}})
        assert any(f.key == "test.sources" for f in _errors(info.value))

    def test_anechoic_room_is_a_warning(self, caplog):
        config = parse_config({"grid": {"rooms": [{"dims": [6.0, 6.0, 2.7], "rt60": 0.0}]}})
        assert config.train_grid().rooms[0].rt60 == 0.0
        assert "anechoic" in caplog.text

    def test_malformed_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("seed: [1, 2\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_finding_format(self):
        assert Finding("WARN", "anechoic training room", "grid.rooms[0].rt60").format() == (
            "[WARN] grid.rooms[0].rt60: anechoic training room"
        )


# ---------------------------------------------------------------------------
# Tests: save_resolved
# ---------------------------------------------------------------------------

class TestSaveResolved:
    def test_echo_contents(self, tmp_path):
        config = parse_config({"seed": 5})
        path = save_resolved(config, tmp_path / "out", "gen-train")
        assert path.name == RESOLVED_NAME
        payload = json.loads(path.read_text())
        assert payload["command"] == "gen-train"
        assert payload["config"]["seed"] == 5
        assert payload["config"]["model"]["classes"] == 37
        assert "version" in payload

    def test_resolved_config_reloads(self, tmp_path):
        config = load_config(CONFIG_DIR / "desk_scale.json")
        path = save_resolved(config, tmp_path, "train")
        assert parse_config(json.loads(path.read_text())["config"]) == config
