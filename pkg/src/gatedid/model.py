"""The full system: one ParamSet shared by every component, plus stage bookkeeping."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import rng as rngmod
from .encoders import FaceEncoder, MotionEncoder, TextEncoder
from .imr import Reconfigurator
from .pipeline import DenoiserNet, NoiseSchedule
from .tensor import ParamSet
from .world import LANDMARK_TEMPLATE, World, WorldConfig

ANCHOR = "anchor"
RECONFIGURE = "reconfigure"
STAGES = (ANCHOR, RECONFIGURE)

# parameter-name prefixes per role
FROZEN_PREFIXES = ("face.global.", "face.local.", "text.")
STAGE_PREFIXES = {
    ANCHOR: ("den.", "face.proj."),
    RECONFIGURE: ("imr.", "motion."),
}


@dataclass
class ModelConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    d_model: int = 64
    d_f: int = 32
    k: int = 8
    c: int = 4
    n_blocks: int = 2
    heads: int = 2
    saa_heads: int = 1
    precondition: bool = True
    d_global: int = 32
    d_hidden: int = 128
    d_landmark: int = 32
    t_train: int = 200
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    schedule_reference: Optional[int] = 500
    precision: str = "float32"

    def __post_init__(self):
        if isinstance(self.world, dict):
            self.world = WorldConfig(**self.world)
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        for name in ("d_model", "d_f", "k", "c", "n_blocks", "heads", "saa_heads", "d_global", "d_hidden", "d_landmark", "t_train"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class Model:
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, world: Optional[World] = None):
        self.config = config
        self.seed = seed
        self.world = world if world is not None else World(config.world)
        dtype = np.dtype(config.precision)
        self.dtype = dtype
        self.params = ParamSet()
        init = lambda i: rngmod.stream(seed, rngmod.INIT, i)  # noqa: E731
        wc = config.world
        self.text = TextEncoder(self.params, wc.n_scenes, config.d_f, init(0), dtype)
        self.face = FaceEncoder(
            self.params,
            self.world,
            d_f=config.d_f,
            k=config.k,
            d_global=config.d_global,
            d_hidden=config.d_hidden,
            rng=init(1),
            dtype=dtype,
        )
        self.schedule = NoiseSchedule.linear(config.t_train, config.beta_start, config.beta_end, config.schedule_reference)
        self.denoiser = DenoiserNet(
            self.params,
            n_tokens=wc.n,
            d_z=wc.d_z,
            d_model=config.d_model,
            d_f=config.d_f,
            n_blocks=config.n_blocks,
            heads=config.heads,
            saa_heads=config.saa_heads,
            alpha_bars=self.schedule.alpha_bars if config.precondition else None,
            rng=init(2),
            dtype=dtype,
        )
        self.motion = MotionEncoder(
            self.params,
            self.text,
            n_landmarks=len(LANDMARK_TEMPLATE),
            d_f=config.d_f,
            c=config.c,
            d_landmark=config.d_landmark,
            d_hidden=config.d_hidden,
            rng=init(3),
            dtype=dtype,
        )
        self.imr = Reconfigurator(self.params, config.d_f, init(4), heads=config.heads, dtype=dtype)
        self.freeze_all()

    # -- stage bookkeeping ------------------------------------------------
    def names(self, prefixes) -> list[str]:
        return [k for k in self.params if k.startswith(tuple(prefixes))]

    def frozen_names(self) -> list[str]:
        return self.names(FROZEN_PREFIXES)

    def stage_names(self, stage: str) -> list[str]:
        if stage not in STAGE_PREFIXES:
            raise ValueError(f"unknown stage {stage!r}")
        return self.names(STAGE_PREFIXES[stage])

    def freeze_all(self) -> None:
        self.params.set_trainable(False)

    def enter_stage(self, stage: str) -> ParamSet:
        """Mark exactly the stage's parameters trainable and return them."""
        self.freeze_all()
        names = self.stage_names(stage)
        for n in names:
            self.params[n].requires_grad = True
        return ParamSet({n: self.params[n] for n in names})

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray], names=None) -> None:
        wanted = list(self.params) if names is None else list(names)
        missing = [n for n in wanted if n not in state]
        if missing:
            raise KeyError(f"checkpoint lacks parameters {missing[:3]}{'...' if len(missing) > 3 else ''}")
        for n in wanted:
            cur = self.params[n]
            arr = np.asarray(state[n])
            if arr.shape != cur.shape:
                raise ValueError(f"{n}: checkpoint shape {arr.shape} vs model {cur.shape}")
            cur.data = arr.astype(cur.dtype).copy()
            cur.grad = None
