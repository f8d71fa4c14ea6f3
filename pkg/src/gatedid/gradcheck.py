"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .tensor import NonFiniteError, ParamSet, Tensor


def _scalar(value) -> float:
    v = value.item() if isinstance(value, Tensor) else float(value)
    if not math.isfinite(v):
        raise NonFiniteError("grad_check: objective is not finite")
    return v


def grad_check(f: Callable[[], Tensor], params: ParamSet, h: float = 1e-5) -> float:
    """Max over all entries of |analytic - numeric| / max(1, |numeric|).

    ``f`` is re-evaluated with each parameter entry nudged by +-h in place,
    so it must read the live tensors from ``params``.
    """
    for t in params.values():
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
        t.requires_grad = True
    params.zero_grad()
    loss = f()
    _scalar(loss)
    loss.backward()
    worst = 0.0
    for name, t in params.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = _scalar(f())
            flat[i] = orig - h
            down = _scalar(f())
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    params.zero_grad()
    return worst


# ---------------------------------------------------------------------------
# registered composites


DEFAULT_TOL = 1e-4


@dataclass
class Composite:
    name: str
    build: Callable[[], tuple[Callable[[], Tensor], ParamSet]]


@dataclass
class CheckResult:
    name: str
    error: float
    n_params: int
    seconds: float

    def passed(self, tol: float = DEFAULT_TOL) -> bool:
        return self.error < tol


def _randomize(params: ParamSet, g: np.random.Generator, scale: float = 0.5) -> None:
    # zero-initialised output layers would make half the gradients trivially zero
    for t in params.values():
        t.data = g.normal(0.0, scale, size=t.shape)
        t.requires_grad = True


def _probe(out: Tensor, g: np.random.Generator) -> Callable[[Tensor], Tensor]:
    r = Tensor(g.normal(size=out.shape))
    return lambda y: T.reduce_sum(T.mul(y, r))


def _leaf(params: ParamSet, name: str, g: np.random.Generator, shape) -> Tensor:
    return params.add(name, Tensor(g.normal(size=shape), requires_grad=True))


def _saa_block():
    from .nn import Attention
    from .saa import FaceInput, LayoutPolicy, RegionMask, saa_multi_forward

    g = rngmod.stream(0, "gradcheck", 0)
    params = ParamSet()
    d, d_f, h, w_, k = 4, 3, 2, 3, 2
    proj = Attention(params, "saa", d, d_f, d, d, g, heads=1, dtype=np.float64)
    _randomize(params, g)
    _leaf(params, "z", g, (1, h * w_, d))
    toks = [_leaf(params, f"xi{i}", g, (1, k, d_f)) for i in range(2)]
    masks = [RegionMask.from_box((0, 0, 1, 2), h, w_, 0), RegionMask.from_box((2, 0, 3, 2), h, w_, 1)]
    policy = LayoutPolicy(0.5, 2.0, masks, suppress_others=True)

    def f():
        faces = [FaceInput(toks[i], proj, i) for i in range(2)]
        return saa_multi_forward(params["z"], faces, policy, 0, 2)

    reduce = _probe(f(), g)
    return lambda: reduce(f()), params


def _denoiser_block():
    from .pipeline import DenoiserBlock, isolation_mask
    from .saa import RegionMask

    g = rngmod.stream(0, "gradcheck", 1)
    params = ParamSet()
    d, d_f, n = 4, 3, 4
    block = DenoiserBlock(params, "blk", d, d_f, g, 2, 1, np.float64)
    _randomize(params, g)
    _leaf(params, "h", g, (1, n, d))
    _leaf(params, "text", g, (1, 2, d_f))
    _leaf(params, "xi", g, (1, 2, d_f))
    mask = isolation_mask([RegionMask.from_box((0, 0, 1, 1), 2, 2, 0).m])

    def f():
        return block(
            params["h"], params["text"], [(0, params["xi"])],
            keep=None, policy=None, step_index=0, total_steps=1, attn_mask=mask, trace=None,
        )

    reduce = _probe(f(), g)
    return lambda: reduce(f()), params


def _imr():
    from .imr import Reconfigurator

    g = rngmod.stream(0, "gradcheck", 2)
    params = ParamSet()
    d_f = 4
    imr = Reconfigurator(params, d_f, g, heads=1, dtype=np.float64)
    _randomize(params, g)
    for name, k in (("xi", 3), ("psi_src", 2), ("psi_tgt", 2)):
        _leaf(params, name, g, (1, k, d_f))

    def f():
        return imr(params["xi"], params["psi_src"], params["psi_tgt"])

    reduce = _probe(f(), g)
    return lambda: reduce(f()), params


def _edit_loss():
    from .imr import Reconfigurator, edit_loss
    from .pipeline import DenoiserNet, NoiseSchedule

    g = rngmod.stream(0, "gradcheck", 3)
    sched = NoiseSchedule.linear(10, reference_steps=None)
    frozen = ParamSet()
    den = DenoiserNet(
        frozen, n_tokens=4, d_z=2, d_model=4, d_f=3, n_blocks=1, heads=1, rng=g,
        alpha_bars=sched.alpha_bars, dtype=np.float64,
    )
    _randomize(frozen, g)
    frozen.set_trainable(False)
    params = ParamSet()
    imr = Reconfigurator(params, 3, g, heads=1, dtype=np.float64)
    _randomize(params, g)
    xi_src = Tensor(g.normal(size=(2, 2, 3)))
    psi_src, psi_tgt = Tensor(g.normal(size=(2, 2, 3))), Tensor(g.normal(size=(2, 2, 3)))
    xi_tgt = Tensor(g.normal(size=(2, 2, 3)))
    z_t = g.normal(size=(2, 4, 2))
    t = np.array([3, 7])
    text = Tensor(g.normal(size=(2, 2, 3)))

    def eps_model(z, tt, tau, tokens):
        return den(z, tt, tau, [(0, tokens)])

    def f():
        total, _, _ = edit_loss(imr(xi_src, psi_src, psi_tgt), xi_tgt, eps_model, z_t, t, text, 1.0)
        return total

    return f, params


REGISTRY: tuple[Composite, ...] = (
    Composite("saa_block", _saa_block),
    Composite("denoiser_block", _denoiser_block),
    Composite("imr_reconfigurator", _imr),
    Composite("edit_loss", _edit_loss),
)


def run_registry(names: Optional[Sequence[str]] = None) -> list[CheckResult]:
    known = {c.name: c for c in REGISTRY}
    chosen = list(known) if names is None else list(names)
    unknown = [n for n in chosen if n not in known]
    if unknown:
        raise KeyError(f"unknown composite(s) {unknown}; registered: {sorted(known)}")
    out = []
    for name in chosen:
        start = time.perf_counter()
        f, params = known[name].build()
        err = grad_check(f, params)
        out.append(CheckResult(name, float(err), params.num_elements(), time.perf_counter() - start))
    return out
