"""Run configuration: schema-checked JSON with every default spelled out."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .controller import ControllerGains
from .plant import PlantParams


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    S: int = 8
    L: int = 10
    stride: int = 1
    duration: float = 60.0
    full_duration: float = 300.0
    payloads: list[float] = field(default_factory=lambda: [0.0, 0.2, 0.4])
    episodes_per_payload: int = 3
    schedule: str = "pickdrop"
    split_seed: int = 0


@dataclass
class ModelConfig:
    steps: int = 5000
    batch: int = 256
    lr: float = 2e-4
    K: int = 20
    width: int = 64
    encoder_channels: int = 64
    mlp_hidden: int = 128
    log_every: int = 100
    val_size: int = 512


@dataclass
class ControllerConfig:
    phi: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.5, 1.1, 1.1, 1.0, 1.2, 1.2])
    lam: list[float] = field(default_factory=lambda: [2.0, 2.0, 3.5, 1.5, 1.5, 1.2, 3.0, 3.0])
    M_bar: list[float] = field(default_factory=lambda: [2.0, 2.0, 2.0, 0.02, 0.02, 0.02, 0.05, 0.05])
    sigma0: float = 0.1
    nu: float = 2.0
    varpi: float = 0.1


@dataclass
class EvaluationConfig:
    payload: float = 0.1
    episodes: int = 10
    duration: float = 60.0
    speeds: list[float] = field(default_factory=lambda: [0.5, 1.0])
    payloads: list[float] = field(default_factory=lambda: [0.3, 0.5])
    trials: int = 10
    init_radius: float = 0.05
    tracking_duration: float = 0.0  # 0 runs the whole scenario
    lyapunov_tol: float = 1e-3


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    plant: dict = field(default_factory=dict)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def plant_params(self) -> PlantParams:
        params = PlantParams()
        over = {k: tuple(v) if isinstance(v, list) else v for k, v in self.plant.items()}
        return dataclasses.replace(params, **over)

    def gains(self) -> ControllerGains:
        c = self.controller
        return ControllerGains(c.phi, c.lam, c.M_bar, c.sigma0, c.nu, c.varpi)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        """Content hash; the output location is not part of a run's identity."""
        content = {k: v for k, v in self.to_dict().items() if k != "out"}
        blob = json.dumps(content, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def write(self, directory) -> Path:
        path = Path(directory) / "resolved_config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"config_hash": self.hash(), "config": self.to_dict()}, indent=2, sort_keys=True))
        return path


def _check_value(value, tp, where: str):
    origin = typing.get_origin(tp)
    if origin is list:
        (inner,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return [_check_value(v, inner, f"{where}[{i}]") for i, v in enumerate(value)]
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table")
        return dict(value)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    raise ConfigError(f"{where}: unsupported type {tp}")


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a table")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _check_value(v, hints[k], f"{where}.{k}" if where else k) for k, v in data.items()}
    return cls(**kwargs)


def _validate(cfg: RunConfig) -> None:
    plant_fields = {f.name for f in dataclasses.fields(PlantParams)}
    unknown = sorted(set(cfg.plant) - plant_fields)
    if unknown:
        raise ConfigError(f"plant: unknown key(s) {', '.join(unknown)}")
    try:
        cfg.plant_params()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"plant: {exc}") from exc
    d, m, c, e = cfg.dataset, cfg.model, cfg.controller, cfg.evaluation
    checks = [
        (d.S >= 1, "dataset.S must be >= 1"),
        (d.L >= 1, "dataset.L must be >= 1"),
        (1 <= d.stride <= d.S, "dataset.stride must lie in 1..S"),
        (d.duration > 0 and d.full_duration > 0, "dataset durations must be positive"),
        (d.episodes_per_payload >= 1, "dataset.episodes_per_payload must be >= 1"),
        (all(p >= 0 for p in d.payloads) and d.payloads, "dataset.payloads must be non-negative"),
        (d.schedule in ("pickdrop", "constant", "none"), "dataset.schedule must be pickdrop, constant or none"),
        (m.steps >= 0 and m.batch >= 1 and m.lr >= 0, "model steps/batch/lr out of range"),
        (m.K >= 1, "model.K must be >= 1"),
        (m.width % 8 == 0 and m.encoder_channels % 8 == 0, "model widths must be divisible by 8 groups"),
        (len(c.phi) == len(c.lam) == len(c.M_bar) == 8, "controller gain vectors need 8 entries"),
        (min(c.phi + c.lam + c.M_bar) > 0, "controller gains must be positive"),
        (c.sigma0 > 0 and c.nu > 0 and c.varpi > 0, "controller sigma0, nu, varpi must be positive"),
        (e.episodes >= 1 and e.trials >= 1 and e.duration > 0, "evaluation counts must be positive"),
        (all(v > 0 for v in e.speeds), "evaluation.speeds must be positive"),
        (e.tracking_duration >= 0, "evaluation.tracking_duration must be non-negative"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    _validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)
