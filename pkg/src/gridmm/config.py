"""Run configuration: one JSON file, dotted-path CLI overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

CONFIG_SCHEMA = "gridmm-config/1"


@dataclass
class ModelConfig:
    feature_dim: int = 16          # stored grid-feature width
    view_dim: int = 16             # panorama view-feature width
    hidden: int = 32
    relevance_dim: int = 32        # width of the relevance projections
    heads: int = 4
    language_layers: int = 2
    panorama_layers: int = 2
    stage_one_layers: int = 1
    stage_two_layers: int = 4
    max_instruction_length: int = 64
    max_step_embeddings: int = 48
    layer_norm_eps: float = 1e-5
    map_scale: int = 14
    min_side_length: float = 0.5
    use_map: bool = True
    egocentric_frame: bool = True
    use_trajectory_history: bool = True
    relevance_aggregation: bool = True   # False falls back to average pooling
    dtype: str = "float32"


@dataclass
class SimulatorConfig:
    views: int = 12                # panorama views per node
    grid_rows: int = 4
    grid_cols: int = 4
    node_count: int = 25
    area: float = 24.0             # square world side, meters
    connect_radius: float = 7.0
    min_node_spacing: float = 2.5
    max_range: float = 10.0        # visibility cap for observations
    angle_window: float = 0.20     # max angular mismatch to attach an element to a node
    elevation_span: float = 0.9    # total elevation fan across grid rows
    grid_noise: float = 0.25
    view_noise: float = 0.25
    landmark_count: int = 60
    feature_seed: int = 7771       # landmark appearance library, shared across envs
    success_radius: float = 3.0


@dataclass
class TrainingConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    grad_clip: float = 0.0         # 0 disables clipping
    weight_sap: float = 1.0
    weight_her: float = 1.0
    her_enabled: bool = True
    beta_start: float = 1.0
    beta_end: float = 0.3
    epochs: int = 20
    episodes_per_epoch: int = 200
    batch_episodes: int = 8
    eval_every: int = 2
    eval_episodes: int = 40
    min_path_hops: int = 4
    max_path_hops: int = 6
    step_cap_factor: int = 2
    step_cap_extra: int = 4


@dataclass
class Config:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["schema"] = CONFIG_SCHEMA
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _from_dict(cls: type, data: dict[str, Any]) -> Any:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key == "schema":
            continue
        if key not in fields:
            raise KeyError(f"unknown config key {key!r} for {cls.__name__}")
        ftype = fields[key].type
        if dataclasses.is_dataclass(_SECTION_TYPES.get(key, None)) and isinstance(value, dict):
            kwargs[key] = _from_dict(_SECTION_TYPES[key], value)
        else:
            kwargs[key] = value
        del ftype
    return cls(**kwargs)


_SECTION_TYPES: dict[str, type] = {
    "model": ModelConfig,
    "simulator": SimulatorConfig,
    "training": TrainingConfig,
}


def config_from_dict(data: dict[str, Any]) -> Config:
    return _from_dict(Config, data)


def load_config(path: str | Path) -> Config:
    return config_from_dict(json.loads(Path(path).read_text()))


def _coerce(current: Any, raw: str) -> Any:
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"cannot parse {raw!r} as a boolean")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def apply_overrides(config: Config, overrides: list[str]) -> Config:
    """Apply ``section.key=value`` strings in place; keys must already exist."""
    for item in overrides:
        if "=" not in item:
            raise KeyError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        target: Any = config
        for part in parts[:-1]:
            if not hasattr(target, part):
                raise KeyError(f"unknown config section {part!r} in {dotted!r}")
            target = getattr(target, part)
        leaf = parts[-1]
        if not dataclasses.is_dataclass(target) or not hasattr(target, leaf):
            raise KeyError(f"unknown config key {dotted!r}")
        setattr(target, leaf, _coerce(getattr(target, leaf), raw))
    return config
