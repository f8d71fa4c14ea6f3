"""Two-stage training: anchoring (noise prediction) then reconfiguration (edit loss).

Also home of the optimizer and the binary checkpoint format.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .config import TrainConfig
from .imr import edit_loss
from .model import ANCHOR, RECONFIGURE, Model, ModelConfig
from .pipeline import AnchorBatch, add_noise, anchoring_loss, isolation_mask
from .saa import SampleLayout
from .tensor import NonFiniteError, ParamSet, Tensor
from .world import Dataset, perturb_landmarks


class CheckpointFormatError(ValueError):
    pass


class StageMismatchError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay: p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)."""

    def __init__(
        self,
        params: ParamSet,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data * (1.0 - self.lr * self.weight_decay) - self.lr * update).astype(p.dtype)


def clip_grad_norm(params: ParamSet, max_norm: Optional[float]) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params.values() if p.grad is not None))
    if max_norm is not None and total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * s).astype(p.dtype)
    return total


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"DYID"
VERSION = 1
STAGE_CODES = {"init": 0, ANCHOR: 1, RECONFIGURE: 2}
STAGE_NAMES = {v: k for k, v in STAGE_CODES.items()}
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
DTYPE_FROM_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
META_CONFIG = "meta/config"
META_RNG = "meta/rng"


@dataclass
class Checkpoint:
    stage: str
    tensors: dict[str, np.ndarray]
    config: dict
    seed: int = 0
    step: int = 0

    def model(self) -> Model:
        """Rebuild the model this checkpoint was taken from and load its weights."""
        mc = ModelConfig(**self.config["model"])
        m = Model(mc, seed=int(self.config.get("model_seed", 0)))
        m.load_state(self.tensors)
        return m


def _bytes_to_f64(b: bytes) -> np.ndarray:
    return np.frombuffer(b, dtype=np.uint8).astype("<f8")


def encode_checkpoint(ck: Checkpoint) -> bytes:
    if ck.stage not in STAGE_CODES:
        raise ValueError(f"unknown stage {ck.stage!r}")
    entries = dict(sorted(ck.tensors.items()))
    cfg = json.dumps(ck.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    entries[META_CONFIG] = _bytes_to_f64(cfg)
    entries[META_RNG] = np.array([ck.seed >> 32, ck.seed & 0xFFFFFFFF, ck.step], dtype="<f8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<IBI", VERSION, STAGE_CODES[ck.stage], len(entries))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}")
        key = name.encode("utf-8")
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<BB", DTYPE_CODES[dt], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=dt).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def decode_checkpoint(data: bytes, expect_stage: Optional[str] = None) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint: bad magic bytes")
    if len(data) < 17:
        raise CheckpointFormatError("truncated checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    version, stage_code, count = struct.unpack_from("<IBI", data, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"checkpoint version {version}, expected {VERSION}")
    if zlib.crc32(body) != crc:
        raise CheckpointFormatError("checkpoint checksum mismatch (corrupt or truncated)")
    if stage_code not in STAGE_NAMES:
        raise CheckpointFormatError(f"unknown stage code {stage_code}")
    stage = STAGE_NAMES[stage_code]
    if expect_stage is not None and stage != expect_stage:
        raise StageMismatchError(f"checkpoint holds stage {stage!r}, expected {expect_stage!r}")
    pos = 13
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            dt = DTYPE_FROM_CODE[code]
            size = int(np.prod(dims)) * dt.itemsize
            if pos + size > len(body):
                raise CheckpointFormatError("truncated checkpoint")
            tensors[name] = np.frombuffer(body, dtype=dt, count=int(np.prod(dims)), offset=pos).reshape(dims).copy()
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise CheckpointFormatError(f"malformed checkpoint entry ({e})") from e
    if pos != len(body):
        raise CheckpointFormatError("trailing bytes after checkpoint entries")
    try:
        cfg_raw = tensors.pop(META_CONFIG)
        rng = tensors.pop(META_RNG)
    except KeyError as e:
        raise CheckpointFormatError(f"checkpoint lacks {e.args[0]}") from e
    config = json.loads(cfg_raw.astype(np.uint8).tobytes().decode("utf-8"))
    seed = (int(rng[0]) << 32) | int(rng[1])
    return Checkpoint(stage, tensors, config, seed, int(rng[2]))


def save_checkpoint(ck: Checkpoint, path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode_checkpoint(ck))


def load_checkpoint(path: Union[str, Path], expect_stage: Optional[str] = None) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing checkpoint {p}")
    return decode_checkpoint(p.read_bytes(), expect_stage)


# ---------------------------------------------------------------------------
# helpers


def param_hash(params: ParamSet, names: Sequence[str]) -> str:
    h = hashlib.sha256()
    for n in sorted(names):
        h.update(n.encode())
        h.update(np.ascontiguousarray(params[n].data).tobytes())
    return h.hexdigest()


def snapshot(model: Model, stage: str, cfg: TrainConfig, step: int) -> Checkpoint:
    config = {
        "model": model.config.to_dict(),
        "model_seed": model.seed,
        "train": dataclasses.asdict(cfg),
    }
    return Checkpoint(stage, {k: v.copy() for k, v in model.state().items()}, config, cfg.seed, step)


class LossLog:
    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        self.rows: list[tuple] = []

    def add(self, step: int, *values: float) -> None:
        self.rows.append((step, *values))

    def write(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", *self.columns])
            for r in self.rows:
                w.writerow([r[0], *(repr(float(v)) for v in r[1:])])

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name) + 1
        return np.array([r[i] for r in self.rows])


class FeatureCache:
    """Frozen face-extractor outputs per dataset sample, computed once."""

    def __init__(self, model: Model, dataset: Dataset):
        self.model = model
        self.dataset = dataset
        self._feat: dict[int, np.ndarray] = {}

    def __call__(self, idx: Sequence[int]) -> np.ndarray:
        missing = [i for i in idx if i not in self._feat]
        if missing:
            feats = self.model.face.extract([self.dataset.samples[i] for i in missing])
            for i, f in zip(missing, feats):
                self._feat[i] = f
        return np.stack([self._feat[i] for i in idx])


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate for 0-based ``step``."""
    if cfg.lr_schedule == "cosine" and cfg.steps > 0:
        return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / cfg.steps))
    return cfg.lr


def _optimizer_step(loss: Tensor, trainable: ParamSet, opt: AdamW, cfg: TrainConfig, step: int) -> None:
    opt.lr = lr_at(cfg, step)
    trainable.zero_grad()
    try:
        loss.backward()
        clip_grad_norm(trainable, cfg.clip_norm)
        opt.step()
    except NonFiniteError as e:
        raise TrainingDiverged(f"{cfg.stage} step {step}: non-finite gradient ({e})") from e
    for name, p in trainable.items():
        if not np.all(np.isfinite(p.data)):
            raise TrainingDiverged(f"{cfg.stage} step {step}: parameter {name} became non-finite")


def _check_loss(value: float, cfg: TrainConfig, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"{cfg.stage} step {step}: loss is {value}")


# ---------------------------------------------------------------------------
# anchoring


def anchor_batch(model: Model, dataset: Dataset, features: FeatureCache, pool: Sequence[int], cfg: TrainConfig, step: int):
    g = rngmod.stream(cfg.seed, rngmod.DATA, 0, step)
    b = cfg.batch_size
    idx = [int(pool[j]) for j in g.integers(0, len(pool), size=b)]
    samples = [dataset.samples[i] for i in idx]
    t = g.integers(0, model.schedule.t_train, size=b)
    eps = g.normal(size=(b, model.world.config.n, model.world.config.d_z))
    uncond = g.random(b) < cfg.p_uncond
    motion_drop = g.random(b) < cfg.p_motion_drop
    isolate = g.random(b) < cfg.p_isolate
    prompts = []
    for s, u, md in zip(samples, uncond, motion_drop):
        e, o, sc = s.prompt
        if u:
            prompts.append((None, None, None))
        elif md:
            prompts.append((None, None, sc))
        else:
            prompts.append((e, o, sc))
    n = model.world.config.n
    masks = np.ones((b, n, n), dtype=bool)
    for j, s in enumerate(samples):
        if isolate[j]:
            masks[j] = isolation_mask([s.mask.m])
    z0 = np.stack([s.z0 for s in samples]).astype(np.float64)
    layout = None
    if cfg.p_layout > 0:
        window = t >= (1.0 - cfg.layout_alpha) * model.schedule.t_train
        active = window & (g.random(b) < cfg.p_layout)
        layout = SampleLayout(np.stack([s.mask.m for s in samples]), active, cfg.layout_beta)
    return idx, AnchorBatch(z0, None, model.text.encode(prompts), t, eps, ~uncond, masks, layout)


def train_anchor(
    config: TrainConfig,
    dataset: Dataset,
    model: Model,
    *,
    log: Optional[LossLog] = None,
    checkpoint_dir: Optional[Path] = None,
) -> Checkpoint:
    """Optimise the denoiser and face projection on the noise-prediction loss."""
    if config.stage != ANCHOR:
        raise StageMismatchError(f"train_anchor got a {config.stage!r} config")
    trainable = model.enter_stage(ANCHOR)
    frozen = [n for n in model.params if n not in trainable]
    before = param_hash(model.params, frozen)
    opt = AdamW(trainable, config.lr, weight_decay=config.weight_decay)
    features = FeatureCache(model, dataset)
    pool = dataset.indices(list(dataset.train_ids) + list(dataset.aux_ids))
    log = log if log is not None else LossLog(["loss"])
    for step in range(config.steps):
        idx, batch = anchor_batch(model, dataset, features, pool, config, step)
        batch.faces = model.face.project(features(idx))
        loss = anchoring_loss(model.denoiser, batch, model.schedule)
        value = loss.item()
        _check_loss(value, config, step)
        log.add(step, value)
        _optimizer_step(loss, trainable, opt, config, step)
        if checkpoint_dir is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(snapshot(model, ANCHOR, config, step + 1), Path(checkpoint_dir) / f"anchor_{step + 1:06d}.ckpt")
    model.params.zero_grad()
    model.freeze_all()
    if param_hash(model.params, frozen) != before:
        raise RuntimeError("frozen parameters changed during anchoring")
    return snapshot(model, ANCHOR, config, config.steps)


# ---------------------------------------------------------------------------
# reconfiguration


@dataclass
class IMRBatch:
    src: list[int]  # (B,) dataset indices
    tgt: list[int]  # (B * (m - 1),) dataset indices, grouped per individual
    src_landmarks: np.ndarray
    tgt_landmarks: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    motion_drop: np.ndarray


def imr_batch(model: Model, dataset: Dataset, cfg: TrainConfig, step: int, by_id: dict, train_ids, aux_ids) -> IMRBatch:
    g = rngmod.stream(cfg.seed, rngmod.DATA, 1, step)
    src, tgt = [], []
    for _ in range(cfg.batch_size):
        use_aux = bool(aux_ids) and g.random() < cfg.p_aux
        ids = aux_ids if use_aux else train_ids
        ident = ids[int(g.integers(len(ids)))]
        pool = by_id[ident]
        if len(pool) < cfg.m:
            raise ValueError(f"identity {ident} has {len(pool)} images, fewer than m={cfg.m}")
        pick = [pool[int(j)] for j in g.choice(len(pool), size=cfg.m, replace=False)]
        src.append(pick[0])
        tgt.extend(pick[1:])
    jitter = lambda i: perturb_landmarks(model.world, dataset.samples[i].landmarks, cfg.sigma, g)  # noqa: E731
    src_lm = np.stack([jitter(i) for i in src])
    tgt_lm = np.stack([jitter(i) for i in tgt])
    nt = len(tgt)
    t = g.integers(0, model.schedule.t_train, size=nt)
    eps = g.normal(size=(nt, model.world.config.n, model.world.config.d_z))
    motion_drop = g.random(nt) < cfg.p_motion_drop
    return IMRBatch(src, tgt, src_lm, tgt_lm, t, eps, motion_drop)


def reconfigure_forward(model: Model, dataset: Dataset, features: FeatureCache, batch: IMRBatch, cfg: TrainConfig):
    """(total, dfm, ldc) of the edit loss on one batch."""
    reps = cfg.m - 1
    samples = dataset.samples
    with T.no_grad():
        xi_src = model.face.project(features(batch.src))
        xi_tgt = model.face.project(features(batch.tgt))
    src_rep = [i for i in batch.src for _ in range(reps)]
    psi_src = model.motion(
        np.repeat(batch.src_landmarks, reps, axis=0),
        [samples[i].motion.expression for i in src_rep],
        [samples[i].motion.orientation for i in src_rep],
    )
    psi_tgt = model.motion(
        batch.tgt_landmarks,
        [samples[i].motion.expression for i in batch.tgt],
        [samples[i].motion.orientation for i in batch.tgt],
    )
    xi_src_rep = Tensor(np.repeat(xi_src.data, reps, axis=0))
    xi_pred = model.imr(xi_src_rep, psi_src, psi_tgt)
    z0 = np.stack([samples[i].z0 for i in batch.tgt]).astype(np.float64)
    z_t = add_noise(z0, batch.t, batch.eps, model.schedule)
    prompts = []
    for i, drop in zip(batch.tgt, batch.motion_drop):
        e, o, sc = samples[i].prompt
        prompts.append((None, None, sc) if drop else (e, o, sc))
    text = model.text.encode(prompts)

    def eps_model(z, t, tau, tokens):
        return model.denoiser(z, t, tau, [(0, tokens)])

    return edit_loss(
        xi_pred, xi_tgt, eps_model, z_t, batch.t, text, cfg.lam, use_dfm=cfg.use_dfm, use_ldc=cfg.use_ldc
    )


def train_imr(
    config: TrainConfig,
    dataset: Dataset,
    anchored: Checkpoint,
    *,
    log: Optional[LossLog] = None,
    checkpoint_dir: Optional[Path] = None,
    model: Optional[Model] = None,
) -> Checkpoint:
    """Optimise the reconfigurator and motion encoder against the frozen anchored model."""
    if config.stage != RECONFIGURE:
        raise StageMismatchError(f"train_imr got a {config.stage!r} config")
    if anchored.stage != ANCHOR:
        raise StageMismatchError(f"train_imr needs an anchor checkpoint, got stage {anchored.stage!r}")
    model = model if model is not None else anchored.model()
    trainable = model.enter_stage(RECONFIGURE)
    frozen = [n for n in model.params if n not in trainable]
    before = param_hash(model.params, frozen)
    opt = AdamW(trainable, config.lr, weight_decay=config.weight_decay)
    features = FeatureCache(model, dataset)
    by_id = dataset.by_identity()
    train_ids = sorted(dataset.train_ids)
    aux_ids = sorted(dataset.aux_ids)
    log = log if log is not None else LossLog(["loss", "dfm", "ldc"])
    for step in range(config.steps):
        batch = imr_batch(model, dataset, config, step, by_id, train_ids, aux_ids)
        total, dfm, ldc = reconfigure_forward(model, dataset, features, batch, config)
        value = total.item()
        _check_loss(value, config, step)
        log.add(step, value, dfm.item(), ldc.item())
        _optimizer_step(total, trainable, opt, config, step)
        if checkpoint_dir is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(
                snapshot(model, RECONFIGURE, config, step + 1), Path(checkpoint_dir) / f"imr_{step + 1:06d}.ckpt"
            )
    model.params.zero_grad()
    model.freeze_all()
    if param_hash(model.params, frozen) != before:
        raise RuntimeError("anchored parameters changed during reconfiguration")
    ck = snapshot(model, RECONFIGURE, config, config.steps)
    ck.config["anchor"] = anchored.config.get("train", {})
    return ck
