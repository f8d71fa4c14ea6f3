"""Query-gated cross-attention for injecting reference-face tokens.

The gate for each latent query is the min-max normalised sum of its raw
attention logits against all face tokens. Layout masks can boost the gate
inside a user box for the first ``alpha`` fraction of sampling steps, and
in multi-identity generation every identity is hard-suppressed inside the
other identities' boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .nn import Attention
from .tensor import Tensor

AttentionProjection = Attention

ADAPTIVE = "adaptive"
INTERVENED = "intervened"


class MaskOverlapError(ValueError):
    pass


@dataclass
class GatingWeights:
    w: Tensor  # (..., n)
    stage: str = ADAPTIVE

    def numpy(self) -> np.ndarray:
        return self.w.data


@dataclass
class RegionMask:
    m: np.ndarray  # (n,) of {0, 1}, row-major over the latent grid
    label: int

    def __post_init__(self):
        m = np.asarray(self.m)
        if m.ndim != 1 or not np.all((m == 0) | (m == 1)):
            raise ValueError("region mask must be a binary vector")
        self.m = m.astype(bool)

    @classmethod
    def from_box(cls, box: Sequence[int], height: int, width: int, label: int) -> "RegionMask":
        """Rasterise (x0, y0, x1, y1), inclusive-exclusive grid cells, x = column."""
        x0, y0, x1, y1 = (int(v) for v in box)
        if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
            raise ValueError(f"box {tuple(box)} outside a {width}x{height} grid or empty")
        grid = np.zeros((height, width), dtype=bool)
        grid[y0:y1, x0:x1] = True
        return cls(grid.reshape(-1), label)

    @property
    def n(self) -> int:
        return self.m.size


@dataclass
class LayoutPolicy:
    alpha: float = 0.24
    beta: float = 2.0
    masks: list[RegionMask] = field(default_factory=list)
    suppress_others: bool = True
    confine: bool = False  # zero each identity's gate outside its own mask

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        check_disjoint(self.masks)

    def intervention_steps(self, total_steps: int) -> int:
        # guard against 0.24 * 50 = 12.000000000000002
        return math.ceil(round(self.alpha * total_steps, 9))

    def mask_for(self, label: int) -> Optional[RegionMask]:
        for m in self.masks:
            if m.label == label:
                return m
        return None


def check_disjoint(masks: Sequence[RegionMask]) -> None:
    labels = [m.label for m in masks]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate mask labels {labels}")
    for i, a in enumerate(masks):
        for b in masks[i + 1 :]:
            if a.n != b.n:
                raise ValueError("masks cover grids of different sizes")
            if np.any(a.m & b.m):
                raise MaskOverlapError(f"masks of identities {a.label} and {b.label} overlap")


def _const(mask: np.ndarray, like: Tensor) -> np.ndarray:
    return np.broadcast_to(mask, like.shape)


def activation_weights(
    z: Tensor, c_f: Tensor, proj: Attention, *, q_src: Optional[Tensor] = None, scale_logits: bool = False
) -> GatingWeights:
    """Per-query gate: min-max over queries of the query's logit sum over keys.

    With several heads the per-head gates are averaged.
    """
    q, k, _ = proj.project(z if q_src is None else q_src, c_f)
    gates = []
    for qh, kh in zip(proj.head_slices(q), proj.head_slices(k)):
        sums = T.reduce_sum(T.matmul(qh, T.transpose(kh)), axis=-1)  # Q K^T J
        if scale_logits:
            sums = T.scale(sums, 1.0 / math.sqrt(proj.head_dim))
        gates.append(T.minmax_rows(sums))
    w = gates[0]
    for g in gates[1:]:
        w = T.add(w, g)
    if len(gates) > 1:
        w = T.scale(w, 1.0 / len(gates))
    return GatingWeights(w, ADAPTIVE)


def gated_attention(
    z: Tensor, c_f: Tensor, proj: Attention, gating: GatingWeights, q_src: Optional[Tensor] = None
) -> Tensor:
    """Expand(w) * Attn(Q, K, V), projected back to the width of z."""
    q, k, v = proj.project(z if q_src is None else q_src, c_f)
    out = proj.o(proj.attend(q, k, v))
    if gating.w.shape != out.shape[:-1]:
        raise T.ShapeError(f"gate of shape {gating.w.shape} for {out.shape[:-1]} queries")
    return T.mul(T.broadcast_expand(gating.w, out.shape[-1]), out)


def saa_forward(
    z: Tensor, c_f: Tensor, proj: Attention, gating: GatingWeights, q_src: Optional[Tensor] = None
) -> Tensor:
    if gating.w.shape != z.shape[:-1]:
        raise T.ShapeError(f"gate of shape {gating.w.shape} for latent {z.shape}")
    if not gating.w.requires_grad and not np.any(gating.w.data):
        return z
    return T.add(z, gated_attention(z, c_f, proj, gating, q_src))


def intervene(w: GatingWeights, mask: RegionMask, beta: float) -> GatingWeights:
    """M * (w + beta) + (1 - M) * w / (beta + 1), no clamping."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    if w.stage != ADAPTIVE:
        raise ValueError("intervention applies to adaptive gates only")
    if mask.n != w.w.shape[-1]:
        raise T.ShapeError(f"mask over {mask.n} queries for gate {w.w.shape}")
    boosted = T.add_scalar(w.w, beta)
    damped = T.scale(w.w, 1.0 / (beta + 1.0))
    return GatingWeights(T.where(_const(mask.m, w.w), boosted, damped), INTERVENED)


def multi_id_gate(
    w_i: GatingWeights, policy: LayoutPolicy, id_index: int, step_index: int, total_steps: int
) -> GatingWeights:
    """Apply the layout policy to one identity's adaptive gate at one sampler step.

    Steps count from the noisiest (step 0). Inside the first
    ceil(alpha * total) steps the identity's own mask is boosted; entries
    under any other identity's mask are zeroed at every step.
    """
    check_disjoint(policy.masks)
    own = policy.mask_for(id_index)
    out = w_i
    if own is not None and step_index < policy.intervention_steps(total_steps):
        out = intervene(out, own, policy.beta)
    w = out.w
    if policy.suppress_others:
        others = [m.m for m in policy.masks if m.label != id_index]
        if others:
            blocked = np.logical_or.reduce(others)
            w = T.where(_const(blocked, w), T.scale(w, 0.0), w)
    if policy.confine and own is not None:
        w = T.where(_const(own.m, w), w, T.scale(w, 0.0))
    return GatingWeights(w, out.stage)


@dataclass
class SampleLayout:
    """Per-sample layout intervention, used while training: rows with ``active``
    get w + beta inside their own ``masks`` row and w / (beta + 1) outside, the
    same reweighting ``intervene`` applies at sampling time; other rows are
    untouched."""

    masks: np.ndarray  # (batch, n) bool
    active: np.ndarray  # (batch,) bool
    beta: float

    def apply(self, w: GatingWeights) -> GatingWeights:
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.masks.shape != w.w.shape or self.active.shape != w.w.shape[:1]:
            raise T.ShapeError(f"layout masks {self.masks.shape} for gate {w.w.shape}")
        inside = self.masks & self.active[:, None]
        outside = ~self.masks & self.active[:, None]
        boosted = T.add_scalar(w.w, self.beta)
        damped = T.scale(w.w, 1.0 / (self.beta + 1.0))
        out = T.where(inside, boosted, T.where(outside, damped, w.w))
        return GatingWeights(out, INTERVENED)


@dataclass
class FaceInput:
    tokens: Tensor  # (..., k, d_f)
    proj: Attention
    label: int = 0
    keep: Optional[np.ndarray] = None  # (batch,) bool; False forces w = 0 for that sample
    layout: Optional[SampleLayout] = None


def saa_multi_forward(
    z: Tensor,
    faces: Sequence[FaceInput],
    policy: Optional[LayoutPolicy] = None,
    step_index: int = 0,
    total_steps: int = 1,
    *,
    q_src: Optional[Tensor] = None,
    trace: Optional[list] = None,
) -> Tensor:
    """z + sum_i Expand(w_i) * Attn_i, summed in ascending label order."""
    if not faces:
        raise ValueError("at least one identity is required")
    labels = [f.label for f in faces]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate identity labels {labels}")
    total = None
    for face in sorted(faces, key=lambda f: f.label):
        gate = activation_weights(z, face.tokens, face.proj, q_src=q_src)
        if policy is not None:
            gate = multi_id_gate(gate, policy, face.label, step_index, total_steps)
        if face.layout is not None:
            gate = face.layout.apply(gate)
        if face.keep is not None:
            keep = np.asarray(face.keep, dtype=bool).reshape(face.keep.shape + (1,) * (gate.w.ndim - np.ndim(face.keep)))
            w = gate.w
            gate = GatingWeights(T.where(np.broadcast_to(keep, w.shape), w, T.scale(w, 0.0)), gate.stage)
        if trace is not None:
            trace.append((face.label, gate.w.data.copy()))
        if not gate.w.requires_grad and not np.any(gate.w.data):
            continue
        contrib = gated_attention(z, face.tokens, face.proj, gate, q_src)
        total = contrib if total is None else T.add(total, contrib)
    return z if total is None else T.add(z, total)
