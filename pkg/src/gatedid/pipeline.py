"""Toy latent diffusion: noise schedule, denoiser, noise-prediction loss, DDIM.

The latent "image" is the H x W x d_z grid flattened to n tokens. The
denoiser is a small pre-norm transformer whose blocks run self-attention,
text cross-attention, gated face cross-attention and an MLP in that order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .nn import MLP, Attention, LayerNorm, Linear
from .saa import FaceInput, LayoutPolicy, SampleLayout, saa_multi_forward
from .tensor import ParamSet, Tensor

Array = np.ndarray


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class NoiseSchedule:
    betas: Array
    alpha_bars: Array = field(init=False, repr=False)

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size == 0 or not np.all((b > 0) & (b < 1)):
            raise ValueError("betas must be a non-empty vector strictly inside (0, 1)")
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - b))

    @classmethod
    def linear(
        cls, t_train: int = 200, beta_start: float = 1e-4, beta_end: float = 2e-2, reference_steps: Optional[int] = 1000
    ) -> "NoiseSchedule":
        """Linear betas. With ``reference_steps`` set, betas are multiplied by
        reference_steps / t_train so a short chain still ends near pure noise."""
        if t_train < 1:
            raise ValueError("t_train must be positive")
        scale = 1.0 if reference_steps is None else reference_steps / t_train
        return cls(np.linspace(beta_start * scale, beta_end * scale, t_train))

    @property
    def t_train(self) -> int:
        return self.betas.size


def corrupt(z0: Array, alpha_bar, eps: Array) -> Array:
    """sqrt(ab) * z0 + sqrt(1 - ab) * eps; ``alpha_bar`` scalar or per leading row."""
    ab = np.asarray(alpha_bar, dtype=np.float64)
    ab = ab.reshape(ab.shape + (1,) * (np.ndim(z0) - ab.ndim))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def add_noise(z0: Array, t, eps: Array, schedule: NoiseSchedule) -> Array:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 0) or np.any(t >= schedule.t_train):
        raise ValueError(f"timestep outside [0, {schedule.t_train})")
    if np.shape(z0) != np.shape(eps):
        raise T.ShapeError(f"z0 {np.shape(z0)} vs noise {np.shape(eps)}")
    return corrupt(np.asarray(z0, dtype=np.float64), schedule.alpha_bars[t], eps)


def timestep_embedding(t: Array, dim: int) -> Array:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def isolation_mask(masks: Sequence[Array]) -> Array:
    """(n, n) self-attention allow-mask: background queries see background keys
    only; a region's queries see their own region plus background."""
    if not masks:
        raise ValueError("isolation needs at least one region")
    region = np.zeros(np.asarray(masks[0]).size, dtype=np.int64)
    for r, m in enumerate(masks, 1):
        m = np.asarray(m, dtype=bool)
        if np.any(region[m]):
            raise ValueError("isolation regions overlap")
        region[m] = r
    return (region[None, :] == region[:, None]) | (region[None, :] == 0)


# ---------------------------------------------------------------------------
# denoiser


class DenoiserBlock:
    def __init__(self, params: ParamSet, name: str, d: int, d_f: int, rng, heads: int, saa_heads: int, dtype):
        self.ln_self = LayerNorm(params, f"{name}.ln_self", d, dtype)
        self.self_attn = Attention(params, f"{name}.self", d, d, d, d, rng, heads=heads, dtype=dtype)
        self.ln_text = LayerNorm(params, f"{name}.ln_text", d, dtype)
        self.text_attn = Attention(params, f"{name}.text", d, d_f, d, d, rng, heads=heads, dtype=dtype)
        self.ln_face = LayerNorm(params, f"{name}.ln_face", d, dtype)
        self.face_attn = Attention(params, f"{name}.saa", d, d_f, d, d, rng, heads=saa_heads, dtype=dtype)
        self.ln_mlp = LayerNorm(params, f"{name}.ln_mlp", d, dtype)
        self.mlp = MLP(params, f"{name}.mlp", d, 4 * d, d, rng, dtype=dtype)

    def __call__(
        self,
        h: Tensor,
        text: Tensor,
        faces: Sequence[tuple[int, Tensor]],
        *,
        keep: Optional[Array],
        policy: Optional[LayoutPolicy],
        step_index: int,
        total_steps: int,
        attn_mask: Optional[Array],
        trace: Optional[list],
        layout: Optional[SampleLayout] = None,
    ) -> Tensor:
        x = self.ln_self(h)
        mask = None
        if attn_mask is not None:
            mask = np.broadcast_to(attn_mask, h.shape[:-1] + (h.shape[-2],))
        h = T.add(h, self.self_attn(x, x, mask))
        h = T.add(h, self.text_attn(self.ln_text(h), text))
        if faces:
            inputs = [FaceInput(tok, self.face_attn, label, keep, layout) for label, tok in faces]
            h = saa_multi_forward(
                h, inputs, policy, step_index, total_steps, q_src=self.ln_face(h), trace=trace
            )
        return T.add(h, self.mlp(self.ln_mlp(h)))


class DenoiserNet:
    """epsilon_theta(z_t, t, xi, tau) with output shape equal to the latent shape.

    With ``alpha_bars`` given, the transformer output F is preconditioned as
    eps = sqrt(ab_t) * F + sqrt(1 - ab_t) * z_t. This is still a noise
    predictor trained on the same squared error, but at low signal-to-noise
    the identity part is exact instead of something the network has to copy
    through its layers, and the implied clean-latent estimate
    sqrt(ab_t) * z_t - sqrt(1 - ab_t) * F no longer amplifies output errors
    by 1 / sqrt(ab_t).
    """

    def __init__(
        self,
        params: ParamSet,
        *,
        n_tokens: int,
        d_z: int,
        d_model: int,
        d_f: int,
        n_blocks: int,
        heads: int,
        rng: np.random.Generator,
        saa_heads: int = 1,
        alpha_bars: Optional[Array] = None,
        dtype=np.float32,
    ):
        self.params = params
        self.alpha_bars = None if alpha_bars is None else np.asarray(alpha_bars, dtype=np.float64)
        self.n, self.d_z, self.d_model = n_tokens, d_z, d_model
        self.dtype = np.dtype(dtype)
        self.inp = Linear(params, "den.in", d_z, d_model, rng, dtype=dtype)
        params.add("den.pos", Tensor(rng.normal(0.0, 0.5, size=(n_tokens, d_model)).astype(dtype), requires_grad=True))
        self.time = MLP(params, "den.time", d_model, d_model, d_model, rng, dtype=dtype)
        self.blocks = [
            DenoiserBlock(params, f"den.block{i}", d_model, d_f, rng, heads, saa_heads, dtype) for i in range(n_blocks)
        ]
        self.ln_out = LayerNorm(params, "den.ln_out", d_model, dtype)
        self.out = Linear(params, "den.out", d_model, d_z, rng, zero=True, dtype=dtype)

    def __call__(
        self,
        z_t: Union[Array, Tensor],
        t: Array,
        text: Tensor,
        faces: Sequence[tuple[int, Tensor]] = (),
        *,
        keep: Optional[Array] = None,
        policy: Optional[LayoutPolicy] = None,
        step_index: int = 0,
        total_steps: int = 1,
        attn_mask: Optional[Array] = None,
        trace: Optional[list] = None,
        layout: Optional[SampleLayout] = None,
    ) -> Tensor:
        z = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=self.dtype))
        if z.ndim != 3 or z.shape[1:] != (self.n, self.d_z):
            raise T.ShapeError(f"latent of shape {z.shape}, expected (batch, {self.n}, {self.d_z})")
        b = z.shape[0]
        t = np.broadcast_to(np.asarray(t), (b,))
        temb = self.time(Tensor(timestep_embedding(t, self.d_model).astype(self.dtype)))
        h = T.add(self.inp(z), T.expand(self.params["den.pos"], 0, b))
        h = T.add(h, T.expand(temb, 1, self.n))
        for i, block in enumerate(self.blocks):
            block_trace = [] if trace is not None else None
            h = block(
                h,
                text,
                faces,
                keep=keep,
                policy=policy,
                step_index=step_index,
                total_steps=total_steps,
                attn_mask=attn_mask,
                trace=block_trace,
                layout=layout,
            )
            if trace is not None:
                trace.extend((i, label, w) for label, w in block_trace)
        out = self.out(self.ln_out(h))
        if self.alpha_bars is None:
            return out
        ab = self.alpha_bars[t]
        c_out = np.sqrt(ab).astype(self.dtype)[:, None, None]
        c_skip = np.sqrt(1.0 - ab).astype(self.dtype)[:, None, None]
        c_out = np.broadcast_to(c_out, out.shape)
        return T.add(T.mul(out, Tensor(c_out)), T.mul(z, Tensor(np.broadcast_to(c_skip, z.shape))))


# ---------------------------------------------------------------------------
# objective


@dataclass
class AnchorBatch:
    z0: Array  # (B, n, d_z)
    faces: Optional[Tensor]  # (B, k, d_f) face tokens, or None for an unconditional batch
    text: Tensor  # (B, t, d_f)
    t: Array  # (B,) int
    eps: Array  # (B, n, d_z)
    keep: Optional[Array] = None  # (B,) False = face branch dropped for that sample
    attn_mask: Optional[Array] = None  # (B, n, n) or (n, n)
    layout: Optional[SampleLayout] = None  # training-time layout intervention


def anchoring_loss(model: Callable, batch: AnchorBatch, schedule: NoiseSchedule) -> Tensor:
    """Mean squared error between the injected noise and the model's prediction."""
    z_t = add_noise(batch.z0, batch.t, batch.eps, schedule)
    faces = [] if batch.faces is None else [(0, batch.faces)]
    pred = model(z_t, batch.t, batch.text, faces, keep=batch.keep, attn_mask=batch.attn_mask, layout=batch.layout)
    return T.mse(pred, Tensor(np.asarray(batch.eps, dtype=pred.dtype)))


def cfg_combine(eps_cond, eps_uncond, s: float):
    """eps_u + s * (eps_c - eps_u); exact passthrough at s = 1 and s = 0."""
    if np.shape(eps_cond.data if isinstance(eps_cond, Tensor) else eps_cond) != np.shape(
        eps_uncond.data if isinstance(eps_uncond, Tensor) else eps_uncond
    ):
        raise T.ShapeError("conditional and unconditional predictions differ in shape")
    if s == 1:
        return eps_cond
    if s == 0:
        return eps_uncond
    if isinstance(eps_cond, Tensor):
        return T.add(eps_uncond, T.scale(T.sub(eps_cond, eps_uncond), s))
    return eps_uncond + s * (eps_cond - eps_uncond)


# ---------------------------------------------------------------------------
# sampler


def ddim_timesteps(t_train: int, steps: int) -> Array:
    if not 1 <= steps <= t_train:
        raise ValueError(f"steps must lie in [1, {t_train}], got {steps}")
    if steps == 1:
        return np.array([t_train - 1])
    return np.round(np.linspace(t_train - 1, 0, steps)).astype(np.int64)


def ddim_loop(
    schedule: NoiseSchedule, x_T: Array, steps: int, eps_fn: Callable[[Array, int, int], Array], on_step=None
) -> Array:
    """Deterministic DDIM (eta = 0) from x_T; ``eps_fn(x, t, step_index)``.

    The last step jumps to alpha_bar = 1, i.e. returns the predicted x_0.
    """
    ts = ddim_timesteps(schedule.t_train, steps)
    ab = schedule.alpha_bars
    x = np.asarray(x_T, dtype=np.float64)
    for i, t in enumerate(ts):
        a_t = ab[t]
        a_prev = ab[ts[i + 1]] if i + 1 < len(ts) else 1.0
        eps = np.asarray(eps_fn(x, int(t), i), dtype=np.float64)
        x0 = (x - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
        x = math.sqrt(a_prev) * x0 + math.sqrt(1.0 - a_prev) * eps
        if on_step is not None:
            on_step(i, int(t), x)
    return x


@dataclass
class SamplerTrace:
    gates: list = field(default_factory=list)  # (step, t, block, label, w (B, n))
    latents: list = field(default_factory=list)  # (step, t, x (B, n, d_z))

    def write(self, directory: Union[str, Path]) -> None:
        """gates.csv in long format plus latents.bin (float32, steps x B x n x d_z)."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "gates.csv", "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["step", "t", "block", "label", "sample", "cell", "w"])
            for step, t, block, label, w in self.gates:
                for b, row in enumerate(w):
                    for cell, v in enumerate(row):
                        out.writerow([step, t, block, label, b, cell, repr(float(v))])
        stack = np.stack([x for _, _, x in self.latents]).astype("<f4")
        stack.tofile(d / "latents.bin")
        with open(d / "latents.shape", "w") as fh:
            fh.write(",".join(str(s) for s in stack.shape) + "\n")


def initial_noise(seeds: Sequence[int], n: int, d_z: int) -> Array:
    return np.stack([rngmod.stream(int(s), rngmod.NOISE, 0).normal(size=(n, d_z)) for s in seeds])


def ddim_sample(
    model: DenoiserNet,
    faces: Sequence[tuple[int, Tensor]],
    text: Tensor,
    *,
    steps: int,
    cfg: float,
    policy: Optional[LayoutPolicy],
    seed: Union[int, Sequence[int]],
    schedule: NoiseSchedule,
    null_text: Optional[Tensor] = None,
    isolate: bool = False,
    trace: Optional[SamplerTrace] = None,
) -> Array:
    """One trajectory per seed; ``faces`` are (label, (B, k, d_f) tokens).

    The unconditional branch uses ``null_text`` and no face tokens, which is
    the same as forcing every gate to zero. With ``isolate`` the policy masks
    also restrict self-attention (see ``isolation_mask``).
    """
    seeds = [seed] if isinstance(seed, (int, np.integer)) else list(seed)
    b = len(seeds)
    if text.shape[0] != b or any(tok.shape[0] != b for _, tok in faces):
        raise T.ShapeError("conditioning batch does not match the number of seeds")
    if policy is not None:
        from .saa import check_disjoint

        check_disjoint(policy.masks)
    attn_mask = None
    if isolate:
        if policy is None or not policy.masks:
            raise ValueError("isolation needs layout masks")
        attn_mask = isolation_mask([m.m for m in policy.masks])
    if cfg != 1 and null_text is None:
        raise ValueError("guidance needs the unconditional text tokens")

    def eps_fn(x: Array, t: int, i: int) -> Array:
        ts = np.full(b, t)
        gates: Optional[list] = [] if trace is not None else None
        with T.no_grad():
            cond = model(
                x, ts, text, faces, policy=policy, step_index=i, total_steps=steps, attn_mask=attn_mask, trace=gates
            ).data
            if cfg == 1:
                out = cond
            else:
                uncond = model(x, ts, null_text, (), attn_mask=attn_mask).data
                out = cfg_combine(cond, uncond, cfg)
        if trace is not None:
            trace.gates.extend((i, t, blk, label, w) for blk, label, w in gates)
        return out

    x_T = initial_noise(seeds, model.n, model.d_z)
    on_step = None
    if trace is not None:
        trace.latents.append((-1, schedule.t_train, x_T.copy()))
        on_step = lambda i, t, x: trace.latents.append((i, t, x.copy()))  # noqa: E731
    return ddim_loop(schedule, x_T, steps, eps_fn, on_step)
