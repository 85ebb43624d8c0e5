"""
Run configuration: a dataclass tree loaded from YAML or JSON.

Validation collects every problem as a :class:`Finding` before failing, so a
bad config file is reported in one pass. Unknown keys are errors at every
level.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from . import __version__
from .acoustics import ReverberationError, Room, sabine_reflection
from .constants import DOA_RESOLUTION, MIC_COUNT, MIC_SPACING, SIGNAL_DURATION, SNR_RANGE
from .datagen import TestConfig, TrainGrid
from .nn import ModelSpec
from .train import TrainConfig

logger = logging.getLogger(__name__)

RESOLVED_NAME = "resolved_config.json"


@dataclass
class Finding:
    level: str  # ERROR | WARN
    message: str
    key: str = ""

    def format(self) -> str:
        location = f"{self.key}: " if self.key else ""
        return f"[{self.level}] {location}{self.message}"


class ConfigError(ValueError):
    def __init__(self, findings: List[Finding], source: str = "") -> None:
        self.findings = findings
        errors = sum(f.level == "ERROR" for f in findings)
        super().__init__(f"{source or 'config'}: {errors} error(s)")


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------

@dataclass
class RoomConfig:
    dims: Tuple[float, float, float]
    rt60: float = 0.0
    name: str = ""

    def to_room(self) -> Room:
        return Room(dims=tuple(float(d) for d in self.dims), rt60=float(self.rt60), name=self.name)


@dataclass
class ArrayConfig:
    mic_count: int = MIC_COUNT
    spacing: float = MIC_SPACING


@dataclass
class GridConfig:
    rooms: List[RoomConfig] = field(
        default_factory=lambda: [RoomConfig(dims=(6.0, 6.0, 2.7), rt60=0.3, name="R1")]
    )
    positions_per_room: int = 1
    distances: List[float] = field(default_factory=lambda: [1.0, 2.0])
    snr_range: Tuple[float, float] = SNR_RANGE
    doa_resolution: int = DOA_RESOLUTION
    signal_duration: float = SIGNAL_DURATION
    pairs: Optional[List[Tuple[int, int]]] = None
    include_single: bool = False


@dataclass
class TestSection:
    room: RoomConfig = field(default_factory=lambda: RoomConfig(dims=(7.0, 5.0, 3.0), rt60=0.5, name="test"))
    distance: float = 1.8
    snr_db: List[float] = field(default_factory=lambda: [30.0])
    pair_stride: int = 6
    duration: float = SIGNAL_DURATION
    sources: str = "synthetic"
    array_center: Optional[Tuple[float, float, float]] = None

    __test__ = False


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    array: ArrayConfig = field(default_factory=ArrayConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    test: TestSection = field(default_factory=TestSection)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def train_grid(self) -> TrainGrid:
        g = self.grid
        return TrainGrid(
            rooms=tuple(r.to_room() for r in g.rooms),
            positions_per_room=g.positions_per_room,
            distances=tuple(float(d) for d in g.distances),
            snr_range=(float(g.snr_range[0]), float(g.snr_range[1])),
            doa_resolution=g.doa_resolution,
            signal_duration=float(g.signal_duration),
            pairs=None if g.pairs is None else tuple((int(a), int(b)) for a, b in g.pairs),
            include_single=g.include_single,
            mic_count=self.array.mic_count,
            spacing=self.array.spacing,
        )

    def test_configs(self) -> List[TestConfig]:
        t = self.test
        return [
            TestConfig(
                room=t.room.to_room(),
                distance=float(t.distance),
                snr_db=float(snr),
                pair_stride=t.pair_stride,
                duration=float(t.duration),
                doa_resolution=self.grid.doa_resolution,
                sources=t.sources,
                array_center=None if t.array_center is None else tuple(float(c) for c in t.array_center),
                mic_count=self.array.mic_count,
                spacing=self.array.spacing,
            )
            for snr in t.snr_db
        ]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        # the training seed is always the top-level one
        d["train"].pop("seed", None)
        return d


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_NUMBER = (int, float)


def _is_number(v: Any) -> bool:
    return isinstance(v, _NUMBER) and not isinstance(v, bool) and math.isfinite(v)


def _check_keys(data: Any, cls, key: str, findings: List[Finding]) -> Dict[str, Any]:
    if data is None:
        return {}
    if not isinstance(data, dict):
        findings.append(Finding("ERROR", f"expected a mapping, got {type(data).__name__}", key))
        return {}
    allowed = {f.name for f in fields(cls)}
    for k in sorted(set(data) - allowed):
        findings.append(Finding("ERROR", f"unknown key '{k}'", f"{key}.{k}" if key else k))
    return {k: v for k, v in data.items() if k in allowed}


def _expect(value: Any, kind: str, key: str, findings: List[Finding]) -> bool:
    ok = {
        "int": isinstance(value, int) and not isinstance(value, bool),
        "number": _is_number(value),
        "bool": isinstance(value, bool),
        "str": isinstance(value, str),
        "numbers": isinstance(value, list) and all(_is_number(v) for v in value),
    }[kind]
    if not ok:
        findings.append(Finding("ERROR", f"expected {kind}, got {value!r}", key))
    return ok


def _scalars(data: Dict[str, Any], kinds: Dict[str, str], key: str, findings: List[Finding]) -> Dict[str, Any]:
    return {
        k: v for k, v in data.items()
        if k in kinds and _expect(v, kinds[k], f"{key}.{k}" if key else k, findings)
    }


def _room(data: Any, key: str, findings: List[Finding]) -> Optional[RoomConfig]:
    d = _check_keys(data, RoomConfig, key, findings)
    if "dims" not in d:
        findings.append(Finding("ERROR", "room needs 'dims'", key))
        return None
    kw = _scalars(d, {"dims": "numbers", "rt60": "number", "name": "str"}, key, findings)
    if "dims" not in kw:
        return None
    if len(kw["dims"]) != 3 or min(kw["dims"]) <= 0:
        findings.append(Finding("ERROR", f"dims must be three positive lengths, got {kw['dims']}", f"{key}.dims"))
        return None
    room = RoomConfig(**{**kw, "dims": tuple(kw["dims"])})
    try:
        sabine_reflection(room.to_room())
    except ReverberationError as exc:
        findings.append(Finding("ERROR", str(exc), f"{key}.rt60"))
    except ValueError as exc:
        findings.append(Finding("ERROR", str(exc), key))
    return room


def _grid(data: Any, findings: List[Finding]) -> GridConfig:
    d = _check_keys(data, GridConfig, "grid", findings)
    kw = _scalars(
        d,
        {
            "positions_per_room": "int",
            "distances": "numbers",
            "snr_range": "numbers",
            "doa_resolution": "int",
            "signal_duration": "number",
            "include_single": "bool",
        },
        "grid",
        findings,
    )
    if "snr_range" in kw:
        if len(kw["snr_range"]) != 2:
            findings.append(Finding("ERROR", "snr_range must be [low, high]", "grid.snr_range"))
            del kw["snr_range"]
        else:
            kw["snr_range"] = tuple(kw["snr_range"])
    if "rooms" in d:
        if not isinstance(d["rooms"], list) or not d["rooms"]:
            findings.append(Finding("ERROR", "rooms must be a non-empty list", "grid.rooms"))
        else:
            rooms = [_room(r, f"grid.rooms[{i}]", findings) for i, r in enumerate(d["rooms"])]
            kw["rooms"] = [r for r in rooms if r is not None]
    if d.get("pairs") is not None:
        pairs = d["pairs"]
        if not isinstance(pairs, list) or not all(
            isinstance(p, list) and len(p) == 2 and all(isinstance(v, int) for v in p) for p in pairs
        ):
            findings.append(Finding("ERROR", "pairs must be a list of [theta1, theta2] integer pairs", "grid.pairs"))
        else:
            kw["pairs"] = [tuple(p) for p in pairs]
    return GridConfig(**kw)


def _test(data: Any, findings: List[Finding]) -> TestSection:
    d = _check_keys(data, TestSection, "test", findings)
    kw = _scalars(
        d,
        {"distance": "number", "pair_stride": "int", "duration": "number", "sources": "str"},
        "test",
        findings,
    )
    if "snr_db" in d:
        snr = d["snr_db"]
        if _is_number(snr):
            kw["snr_db"] = [snr]
        elif _expect(snr, "numbers", "test.snr_db", findings):
            kw["snr_db"] = snr
    if d.get("array_center") is not None and _expect(d["array_center"], "numbers", "test.array_center", findings):
        if len(d["array_center"]) != 3:
            findings.append(Finding("ERROR", "array_center must have three coordinates", "test.array_center"))
        else:
            kw["array_center"] = tuple(d["array_center"])
    if "room" in d:
        room = _room(d["room"], "test.room", findings)
        if room is not None:
            kw["room"] = room
    return TestSection(**kw)


def _section(data: Any, cls, key: str, kinds: Dict[str, str], findings: List[Finding]):
    d = _check_keys(data, cls, key, findings)
    kw = _scalars(d, kinds, key, findings)
    if "fc_widths" in kw:
        kw["fc_widths"] = tuple(int(v) for v in kw["fc_widths"])
    try:
        return cls(**kw)
    except ValueError as exc:
        findings.append(Finding("ERROR", str(exc), key))
        return cls()


def parse_config(data: Any, source: str = "") -> RunConfig:
    """Build and validate a RunConfig; raises ConfigError listing every problem."""
    findings: List[Finding] = []
    d = _check_keys(data, RunConfig, "", findings)
    kw = _scalars(d, {"seed": "int", "threads": "int"}, "", findings)
    kw["array"] = _section(d.get("array"), ArrayConfig, "array", {"mic_count": "int", "spacing": "number"}, findings)
    kw["grid"] = _grid(d.get("grid"), findings)
    kw["test"] = _test(d.get("test"), findings)
    kw["model"] = _section(
        d.get("model"), ModelSpec, "model",
        {"mics": "int", "bands": "int", "conv_layers": "int", "filters": "int", "fc_widths": "numbers", "classes": "int"},
        findings,
    )
    kw["train"] = _section(
        d.get("train"), TrainConfig, "train",
        {"batch": "int", "epochs": "int", "lr": "number", "dropout": "number"},
        findings,
    )
    if isinstance(d.get("train"), dict) and "seed" in d["train"]:
        findings.append(Finding("ERROR", "the training seed is the top-level 'seed'", "train.seed"))
    config = RunConfig(**kw)
    _cross_check(config, findings)
    if any(f.level == "ERROR" for f in findings):
        raise ConfigError(findings, source)
    for f in findings:
        logger.warning(f.format())
    return config


def _cross_check(config: RunConfig, findings: List[Finding]) -> None:
    if config.threads < 1:
        findings.append(Finding("ERROR", "threads must be >= 1", "threads"))
    if config.array.mic_count < 2 or config.array.spacing <= 0:
        findings.append(Finding("ERROR", "array needs >= 2 mics and positive spacing", "array"))
    try:
        grid = config.train_grid()
        grid.pair_list()
    except ValueError as exc:
        findings.append(Finding("ERROR", str(exc), "grid"))
        return
    if config.model.mics != config.array.mic_count:
        findings.append(Finding("ERROR", f"model.mics {config.model.mics} != array.mic_count {config.array.mic_count}", "model.mics"))
    if config.model.classes != grid.n_classes:
        findings.append(Finding("ERROR", f"model.classes {config.model.classes} != {grid.n_classes} DOA classes", "model.classes"))
    if config.test.pair_stride < 1:
        findings.append(Finding("ERROR", "pair_stride must be >= 1", "test.pair_stride"))
    if config.test.sources != "synthetic" and not Path(config.test.sources).is_dir():
        findings.append(Finding("ERROR", f"sources must be 'synthetic' or a WAV directory: {config.test.sources}", "test.sources"))
    for i, room in enumerate(config.grid.rooms):
        if room.rt60 == 0:
            findings.append(Finding("WARN", "anechoic training room", f"grid.rooms[{i}].rt60"))


def load_config(path: Optional[Path]) -> RunConfig:
    """Read a YAML/JSON config file; ``None`` gives the built-in defaults."""
    if path is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError([Finding("ERROR", f"not valid YAML/JSON: {exc}")], str(path)) from exc
    return parse_config(data, str(path))


def save_resolved(config: RunConfig, out_dir: Path, command: str) -> Path:
    """Echo the resolved config beside a command's outputs."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_NAME
    payload = {"command": command, "version": __version__, "config": config.to_dict()}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return path
