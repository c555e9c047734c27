"""Run configuration: nested dataclasses with strict JSON round-tripping and dotted overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kinds: list[str] = field(default_factory=lambda: ["torus", "box_frame", "table", "sphere"])
    per_kind: int = 2
    n_views: int = 3
    image_size: int = 64
    resolution: int = 64
    n_surface: int = 10_000
    randomize: bool = True


@dataclass
class ModelConfig:
    code_dim: int = 512
    n_curves: int = 20
    curve_samples: int = 64
    n_sheets: int = 20
    sheet_side: int = 8
    decoder_widths: list[int] = field(default_factory=lambda: [512, 256, 128, 3])
    r: int = 64
    M: float = 10.0
    p2v_tol: float = 1e-6
    global_down: list[int] = field(default_factory=lambda: [32, 64, 128, 128])
    global_up: list[int] = field(default_factory=lambda: [128, 64, 32, 2])
    local_down: list[int] = field(default_factory=lambda: [32, 64, 128, 128])
    local_up: list[int] = field(default_factory=lambda: [128, 64, 32, 16, 2])
    feature_channels: int = 8
    gcn_hidden: int = 192
    gcn_layers: int = 6
    max_vertices: int = 10_000
    disn_embed: list[int] = field(default_factory=lambda: [64, 128, 512])
    disn_head: list[int] = field(default_factory=lambda: [512, 256, 2])
    skeleton_channels: int = 16
    use_skeleton: bool = True


@dataclass
class TrainConfig:
    alpha: float = 0.2
    beta: float = 1.0
    lr: float = 1e-3
    skeleton_steps: int = 2000
    end_to_end: bool = False
    refine_steps: int = 500
    refine_lr: float = 1e-4
    refine_windows: int = 8
    finetune_steps: int = 200
    finetune_lr: float = 1e-5
    schedule_epochs: int = 60
    gcn_steps: int = 1000
    gcn_lr: float = 1e-4
    gcn_lr_decay: float = 0.1
    gcn_decay_epochs: int = 20
    gcn_samples: int = 2048
    lambda1: float = 0.7
    lambda2: float = 3e-4
    kappa_k: int = 16
    kappa_angle: float = 60.0
    kappa_weight: float = 5.0
    disn_steps: int = 2000
    disn_lr: float = 1e-4
    disn_lr_decay: float = 0.9
    disn_decay_epochs: int = 2
    disn_points: int = 4096
    disn_batch: int = 512
    eps: float = 0.1
    extract_resolution: int = 64
    log_every: int = 50


@dataclass
class EvalConfig:
    n_points: int = 10_000
    iou_resolution: int = 64


@dataclass
class InterpConfig:
    a: str = ""
    b: str = ""
    weights: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])


@dataclass
class RunConfig:
    run_dir: str = "runs/default"
    data_dir: str = "data"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    interp: InterpConfig = field(default_factory=InterpConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        return _build(cls, d, "")

    @classmethod
    def load(cls, path) -> RunConfig:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def with_overrides(self, assignments: list[str]) -> RunConfig:
        d = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            parts = key.strip().split(".")
            node = d
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = _parse_value(raw)
        return RunConfig.from_dict(d)


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _check_type(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        if default:
            return [_check_type(v, default[0], f"{where}[{i}]") for i, v in enumerate(value)]
    return value


def _build(cls, d, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(prefix + k for k in unknown))}")
    default = cls()
    kwargs = {}
    for name, value in d.items():
        cur = getattr(default, name)
        where = prefix + name
        if dataclasses.is_dataclass(cur):
            kwargs[name] = _build(type(cur), value, where + ".")
        else:
            checked = _check_type(value, cur, where)
            kwargs[name] = value if checked is None else checked
    return cls(**kwargs)
