"""Identity/motion reconfiguration of face tokens.

``disentangle`` strips the source motion from face tokens, ``entangle``
imposes a target motion. Both are one residual block (cross-attention
from face tokens to motion tokens, self-attention, MLP) whose output
projections start at zero, so an untrained reconfigurator is the identity
map.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .nn import MLP, Attention, LayerNorm
from .tensor import ParamSet, Tensor


class ReconfigBlock:
    def __init__(
        self, params: ParamSet, name: str, d_f: int, rng: np.random.Generator, *, heads: int = 1, mlp_ratio: int = 4, dtype=np.float32
    ):
        self.name = name
        self.ln_x = LayerNorm(params, f"{name}.ln_x", d_f, dtype)
        self.ln_m = LayerNorm(params, f"{name}.ln_m", d_f, dtype)
        self.cross = Attention(params, f"{name}.cross", d_f, d_f, d_f, d_f, rng, heads=heads, zero_out=True, dtype=dtype)
        self.ln_s = LayerNorm(params, f"{name}.ln_s", d_f, dtype)
        self.self_attn = Attention(params, f"{name}.self", d_f, d_f, d_f, d_f, rng, heads=heads, zero_out=True, dtype=dtype)
        self.ln_f = LayerNorm(params, f"{name}.ln_f", d_f, dtype)
        self.mlp = MLP(params, f"{name}.mlp", d_f, mlp_ratio * d_f, d_f, rng, zero_out=True, dtype=dtype)

    def __call__(self, x: Tensor, motion: Tensor) -> Tensor:
        if x.shape[:-2] != motion.shape[:-2] or x.shape[-1] != motion.shape[-1]:
            raise T.ShapeError(f"face tokens {x.shape} vs motion tokens {motion.shape}")
        x = T.add(x, self.cross(self.ln_x(x), self.ln_m(motion)))
        h = self.ln_s(x)
        x = T.add(x, self.self_attn(h, h))
        return T.add(x, self.mlp(self.ln_f(x)))


class Reconfigurator:
    def __init__(self, params: ParamSet, d_f: int, rng: np.random.Generator, *, heads: int = 1, dtype=np.float32):
        self.disentangle_net = ReconfigBlock(params, "imr.dis", d_f, rng, heads=heads, dtype=dtype)
        self.entangle_net = ReconfigBlock(params, "imr.ent", d_f, rng, heads=heads, dtype=dtype)

    def __call__(self, xi_src: Tensor, psi_src: Tensor, psi_tgt: Tensor) -> Tensor:
        return entangle(disentangle(xi_src, psi_src, self), psi_tgt, self)


def disentangle(xi_src: Tensor, psi_src: Tensor, imr: Reconfigurator) -> Tensor:
    """Identity latent, same token geometry as the face tokens."""
    return imr.disentangle_net(xi_src, psi_src)


def entangle(zeta: Tensor, psi_tgt: Tensor, imr: Reconfigurator) -> Tensor:
    return imr.entangle_net(zeta, psi_tgt)


def id_mix(zeta_a: Tensor, zeta_b: Tensor, gamma: float) -> Tensor:
    """(1 - gamma) * zeta_a + gamma * zeta_b."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if gamma == 0.0:
        return zeta_a
    if gamma == 1.0:
        return zeta_b
    return T.add(T.scale(zeta_a, 1.0 - gamma), T.scale(zeta_b, gamma))


def edit_loss(
    xi_pred: Tensor,
    xi_tgt: Tensor,
    eps_model,
    z_t: np.ndarray,
    t: np.ndarray,
    text: Tensor,
    lam: float = 1.0,
    *,
    use_dfm: bool = True,
    use_ldc: bool = True,
    eps_tgt: Optional[Tensor] = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Feature matching plus lambda times noise-prediction consistency.

    ``eps_model(z_t, t, text, face_tokens)`` must be the frozen anchored
    denoiser. Both terms are means over entries. Returns (total, dfm, ldc).
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if xi_pred.shape != xi_tgt.shape:
        raise T.ShapeError(f"predicted {xi_pred.shape} vs target {xi_tgt.shape} tokens")
    target = xi_tgt.detach()
    dfm = T.mse(xi_pred, target)
    if use_ldc and lam > 0:
        if eps_tgt is None:
            with T.no_grad():
                eps_tgt = eps_model(z_t, t, text, target)
        ldc = T.mse(eps_model(z_t, t, text, xi_pred), eps_tgt.detach())
    else:
        ldc = T.scale(dfm, 0.0).detach()
    terms = []
    if use_dfm:
        terms.append(dfm)
    if use_ldc and lam > 0:
        terms.append(T.scale(ldc, lam))
    if not terms:
        raise ValueError("both loss terms disabled")
    total = terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])
    return total, dfm, ldc
