"""Run configuration: nested dataclasses, strict JSON loading, dotted overrides."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from .model import ANCHOR, RECONFIGURE, ModelConfig
from .world import WorldConfig


class ConfigError(ValueError):
    pass


LR_SCHEDULES = ("constant", "cosine")


@dataclass
class DatasetSpec:
    n_ids: int = 200
    n_motions_per_id: int = 12
    split: float = 0.8
    seed: int = 0
    n_aux_ids: int = 10

    def __post_init__(self):
        if self.n_ids < 2 or self.n_motions_per_id < 1 or self.n_aux_ids < 0:
            raise ConfigError("dataset counts must be positive")


@dataclass
class TrainConfig:
    stage: str = ANCHOR
    lr: float = 1e-3
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    weight_decay: float = 0.01
    clip_norm: Optional[float] = 1.0
    checkpoint_every: int = 0  # 0 = final checkpoint only
    lr_schedule: str = "constant"  # or "cosine": decay to zero over ``steps``
    # anchoring
    p_uncond: float = 0.1
    p_motion_drop: float = 0.5
    p_isolate: float = 0.5
    p_layout: float = 0.0  # chance of the ground-truth layout intervention inside the window
    layout_alpha: float = 0.24  # window: t >= (1 - layout_alpha) * T_train
    layout_beta: float = 2.0
    # reconfiguration
    lam: float = 1.0
    m: int = 4
    sigma: float = 0.02
    p_aux: float = 0.05
    use_dfm: bool = True
    use_ldc: bool = True

    def __post_init__(self):
        if self.stage not in (ANCHOR, RECONFIGURE):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("lr and batch_size must be positive, steps and checkpoint_every non-negative")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or null")
        if self.layout_beta < 0:
            raise ConfigError("layout_beta must be >= 0")
        for name in ("p_uncond", "p_motion_drop", "p_isolate", "p_aux", "p_layout", "layout_alpha"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.m < 2:
            raise ConfigError("m must be at least 2 (one source, one target)")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.stage == RECONFIGURE and not (self.use_dfm or self.use_ldc):
            raise ConfigError("at least one of use_dfm / use_ldc must be enabled")


@dataclass
class SampleConfig:
    steps: int = 20
    cfg: float = 5.0
    alpha: float = 0.24
    beta: float = 2.0
    suppress: bool = True
    confine: bool = False
    isolate: bool = False
    threshold: float = 0.5
    fit_min: float = 0.8


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    model_seed: int = 0
    data: DatasetSpec = field(default_factory=DatasetSpec)
    anchor: TrainConfig = field(default_factory=lambda: TrainConfig(steps=6000, p_layout=1.0))
    imr: TrainConfig = field(
        default_factory=lambda: TrainConfig(stage=RECONFIGURE, steps=3000, batch_size=8, lr=1e-3)
    )
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval_triples: int = 200
    eval_seed: int = 1
    workers: int = 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# strict construction from plain dicts


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _coerce(tp, value: Any, path: str):
    origin = typing.get_origin(tp)
    if origin is Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if _is_dataclass_type(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return from_dict(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def from_dict(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key {where}{unknown[0]}")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{path or 'config'}: {e}") from e


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """``a.b.c=value`` pairs; values parse as JSON, falling back to strings."""
    out = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key}")
        node[parts[-1]] = parse_value(raw)
    return out


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Optional[list[str]] = None) -> RunConfig:
    base = RunConfig().to_dict()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg})") from e
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        from_dict(RunConfig, user)  # reject unknown keys before merging
        base = _merge(base, user)
    base = apply_overrides(base, overrides or [])
    return from_dict(RunConfig, base)


def _merge(base: dict, user: dict) -> dict:
    out = dict(base)
    for k, v in user.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


__all__ = [
    "ConfigError",
    "DatasetSpec",
    "TrainConfig",
    "SampleConfig",
    "RunConfig",
    "ModelConfig",
    "WorldConfig",
    "from_dict",
    "apply_overrides",
    "load_run_config",
    "dump_config",
]
