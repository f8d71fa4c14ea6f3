"""Layers over a shared ParamSet.

Layers keep only parameter *names*; tensors are looked up at call time so
that loading a checkpoint into the ParamSet updates every layer at once.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ParamSet, Tensor


def _new(params: ParamSet, name: str, value: np.ndarray, dtype) -> Tensor:
    return params.add(name, Tensor(value.astype(dtype), requires_grad=True))


def xavier(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / (d_in + d_out)), size=(d_in, d_out))


class Linear:
    def __init__(
        self,
        params: ParamSet,
        name: str,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        *,
        bias: bool = True,
        zero: bool = False,
        dtype=np.float32,
    ):
        self.params = params
        self.name = name
        self.d_in, self.d_out = d_in, d_out
        w = np.zeros((d_in, d_out)) if zero else xavier(rng, d_in, d_out)
        _new(params, f"{name}.weight", w, dtype)
        self.has_bias = bias
        if bias:
            _new(params, f"{name}.bias", np.zeros(d_out), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        b = self.params[f"{self.name}.bias"] if self.has_bias else None
        return T.linear(x, self.params[f"{self.name}.weight"], b)


class LayerNorm:
    def __init__(self, params: ParamSet, name: str, d: int, dtype=np.float32):
        self.params = params
        self.name = name
        _new(params, f"{name}.gamma", np.ones(d), dtype)
        _new(params, f"{name}.beta", np.zeros(d), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.params[f"{self.name}.gamma"], self.params[f"{self.name}.beta"])


class MLP:
    """Linear -> GELU -> Linear. ``zero_out`` starts the block as the zero map."""

    def __init__(
        self,
        params: ParamSet,
        name: str,
        d_in: int,
        d_hidden: int,
        d_out: int,
        rng: np.random.Generator,
        *,
        zero_out: bool = False,
        dtype=np.float32,
    ):
        self.params = params
        self.name = name
        self.fc1 = Linear(params, f"{name}.fc1", d_in, d_hidden, rng, dtype=dtype)
        self.fc2 = Linear(params, f"{name}.fc2", d_hidden, d_out, rng, zero=zero_out, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        return T.mlp(
            x,
            p[f"{self.name}.fc1.weight"],
            p[f"{self.name}.fc1.bias"],
            p[f"{self.name}.fc2.weight"],
            p[f"{self.name}.fc2.bias"],
        )


class Attention:
    """Multi-head attention projections: W_q (d_q x d_a), W_k/W_v (d_kv x d_a), W_o (d_a x d_out).

    No biases, so a zero-weighted output row is exactly zero.
    """

    def __init__(
        self,
        params: ParamSet,
        name: str,
        d_q: int,
        d_kv: int,
        d_attn: int,
        d_out: int,
        rng: np.random.Generator,
        *,
        heads: int = 1,
        zero_out: bool = False,
        dtype=np.float32,
    ):
        if heads < 1 or d_attn % heads:
            raise ValueError(f"attention width {d_attn} not divisible by {heads} heads")
        self.params = params
        self.name = name
        self.heads = heads
        self.d_attn = d_attn
        self.head_dim = d_attn // heads
        self.q = Linear(params, f"{name}.q", d_q, d_attn, rng, bias=False, dtype=dtype)
        self.k = Linear(params, f"{name}.k", d_kv, d_attn, rng, bias=False, dtype=dtype)
        self.v = Linear(params, f"{name}.v", d_kv, d_attn, rng, bias=False, dtype=dtype)
        self.o = Linear(params, f"{name}.o", d_attn, d_out, rng, bias=False, zero=zero_out, dtype=dtype)

    def project(self, q_in: Tensor, kv_in: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return self.q(q_in), self.k(kv_in), self.v(kv_in)

    def head_slices(self, x: Tensor) -> list[Tensor]:
        if self.heads == 1:
            return [x]
        d = self.head_dim
        return [T.take(x, h * d, (h + 1) * d, axis=-1) for h in range(self.heads)]

    def attend(self, q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        """softmax(Q K^T / sqrt(d)) V per head, heads concatenated (pre W_o)."""
        outs = []
        inv = 1.0 / math.sqrt(self.head_dim)
        for qh, kh, vh in zip(self.head_slices(q), self.head_slices(k), self.head_slices(v)):
            logits = T.scale(T.matmul(qh, T.transpose(kh)), inv)
            outs.append(T.matmul(T.softmax_rows(logits, mask), vh))
        return outs[0] if len(outs) == 1 else T.concat(outs, axis=-1)

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        q, k, v = self.project(q_in, kv_in)
        return self.o(self.attend(q, k, v, mask))
