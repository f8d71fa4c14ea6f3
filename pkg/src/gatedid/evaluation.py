"""Synthetic metrics: analytic identity probe, blending rate, alpha/beta sweep,
motion-transfer report.

The probe inverts the world's frozen per-phase linear map by least squares
over a region's cells. It reads off an identity-vector estimate (matched to
a catalogue by cosine) and the expression / orientation one-hots. How well
the linear model explains the region (an uncentred R^2) decides whether the
region holds a face at all: scene background matches a random catalogue
identity with cosines around 0.6 but fits the face map poorly.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .model import Model
from .pipeline import ddim_sample
from .saa import LayoutPolicy, RegionMask, check_disjoint
from .world import Dataset, World, WorldSample

DEFAULT_THRESHOLD = 0.5
DEFAULT_FIT_MIN = 0.8
DEFAULT_BOXES = ((0, 3, 5, 9), (7, 3, 12, 9))


class SingularRegionError(ValueError):
    pass


@dataclass
class ProbeResult:
    best_id: int
    cosine: float  # cosine of the identity estimate to the best catalogue entry
    runner_up: float  # second-best catalogue cosine
    fit: float  # uncentred R^2 of the face-map fit
    margin: float  # cosine * max(fit, 0)
    is_face: bool
    expression: int
    orientation: int
    u_hat: np.ndarray = field(repr=False)

    def passes(self, intended: Optional[int] = None, threshold: float = DEFAULT_THRESHOLD) -> bool:
        ok = self.is_face and self.margin > threshold
        return ok and (intended is None or self.best_id == intended)


def _region_cells(mask) -> np.ndarray:
    m = mask.m if isinstance(mask, RegionMask) else np.asarray(mask, dtype=bool)
    return np.flatnonzero(m)


def identity_probe(
    z: np.ndarray,
    mask,
    world: World,
    catalog_ids: np.ndarray,
    catalog_u: np.ndarray,
    *,
    fit_min: float = DEFAULT_FIT_MIN,
) -> ProbeResult:
    """Probe the cells of ``mask`` in latent ``z`` (n, d_z).

    Ties between catalogue entries resolve to the lowest index.
    """
    cells = _region_cells(mask)
    if cells.size == 0:
        raise ValueError("probe region is empty")
    b = np.asarray(z, dtype=np.float64)[cells]
    if not np.any(b):
        raise SingularRegionError("probe region is all zeros")
    A = world.maps[world.phases[cells]].reshape(-1, world.config.code_dim)
    x, _, rank, _ = np.linalg.lstsq(A, b.reshape(-1), rcond=None)
    if rank < world.config.code_dim:
        raise SingularRegionError(f"region of {cells.size} cells does not determine the face code (rank {rank})")
    resid = A @ x - b.reshape(-1)
    fit = 1.0 - float(resid @ resid) / float(np.sum(b * b))
    d_id, n_e = world.config.d_id, world.config.n_expr
    u_hat = x[:d_id]
    norm = np.linalg.norm(u_hat)
    cat = np.asarray(catalog_u, dtype=np.float64)
    cat = cat / np.linalg.norm(cat, axis=1, keepdims=True)
    cos = cat @ (u_hat / norm) if norm > 0 else np.zeros(len(cat))
    best = int(np.argmax(cos))
    runner = float(np.max(np.delete(cos, best))) if len(cos) > 1 else -1.0
    c = float(cos[best])
    return ProbeResult(
        best_id=int(catalog_ids[best]),
        cosine=c,
        runner_up=runner,
        fit=fit,
        margin=c * max(fit, 0.0),
        is_face=fit >= fit_min,
        expression=int(np.argmax(x[d_id : d_id + n_e])),
        orientation=int(np.argmax(x[d_id + n_e :])),
        u_hat=u_hat,
    )


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return 0.0 if na == 0 or nb == 0 else float(a @ b / (na * nb))


@dataclass
class BlendingResult:
    rate: float
    mean_wrong_cosine: float  # mean cosine of each region's estimate to the other intended identities
    results: list[ProbeResult] = field(repr=False, default_factory=list)


def blending_metric(
    z: np.ndarray,
    masks: Sequence[RegionMask],
    intended_ids: Sequence[int],
    world: World,
    catalog_ids: np.ndarray,
    catalog_u: np.ndarray,
    *,
    fit_min: float = DEFAULT_FIT_MIN,
) -> BlendingResult:
    """Fraction of regions whose probed identity is not the intended one."""
    if len(masks) < 2:
        raise ValueError("blending needs at least two regions")
    if len(masks) != len(intended_ids):
        raise ValueError("one intended identity per mask")
    check_disjoint(masks)
    pos = {int(i): j for j, i in enumerate(catalog_ids)}
    results = [identity_probe(z, m, world, catalog_ids, catalog_u, fit_min=fit_min) for m in masks]
    wrong = [r.best_id != i for r, i in zip(results, intended_ids)]
    cross = []
    for r, mine in zip(results, intended_ids):
        for other in intended_ids:
            if other != mine:
                cross.append(cosine(r.u_hat, catalog_u[pos[int(other)]]))
    return BlendingResult(float(np.mean(wrong)), float(np.mean(cross)), results)


# ---------------------------------------------------------------------------
# multi-identity generation


@dataclass
class MultiIDTrial:
    seed: int
    ids: tuple[int, ...]
    success: bool
    blending: float
    region_pass: tuple[bool, ...]


def reference_tokens(model: Model, samples: Sequence[WorldSample]):
    with T.no_grad():
        return model.face(samples)


def multi_id_trials(
    model: Model,
    dataset: Dataset,
    seeds: Sequence[int],
    *,
    alpha: float,
    beta: float,
    steps: int = 20,
    cfg: float = 5.0,
    suppress: bool = True,
    confine: bool = False,
    isolate: bool = False,
    boxes: Sequence[Sequence[int]] = DEFAULT_BOXES,
    threshold: float = DEFAULT_THRESHOLD,
    fit_min: float = DEFAULT_FIT_MIN,
    pool_ids: Optional[Sequence[int]] = None,
) -> list[MultiIDTrial]:
    """Generate one image per seed with one held-out identity per box and score it.

    Identity choice, reference image and scene derive from the seed alone, so
    two policies evaluated on the same seeds form a paired comparison.
    """
    wc = model.world.config
    pool = sorted(dataset.heldout_ids if pool_ids is None else pool_ids)
    if len(pool) < len(boxes):
        raise ValueError("not enough identities for the layout")
    by_id = dataset.by_identity()
    masks = [RegionMask.from_box(b, wc.height, wc.width, j) for j, b in enumerate(boxes)]
    policy = LayoutPolicy(alpha, beta, masks, suppress_others=suppress, confine=confine)
    chosen, refs, prompts = [], [], []
    for s in seeds:
        g = rngmod.stream(int(s), "trial")
        ids = tuple(int(pool[j]) for j in g.choice(len(pool), size=len(boxes), replace=False))
        chosen.append(ids)
        refs.append([dataset.samples[by_id[i][int(g.integers(len(by_id[i])))]] for i in ids])
        prompts.append((None, None, int(g.integers(wc.n_scenes))))
    faces = []
    for j in range(len(boxes)):
        faces.append((j, reference_tokens(model, [r[j] for r in refs])))
    with T.no_grad():
        text = model.text.encode(prompts)
        null = model.text.null(len(seeds))
    z = ddim_sample(
        model.denoiser,
        faces,
        text,
        steps=steps,
        cfg=cfg,
        policy=policy,
        seed=list(seeds),
        schedule=model.schedule,
        null_text=null,
        isolate=isolate,
    )
    cat_ids, cat_u = dataset.catalog()
    out = []
    for s, ids, zi in zip(seeds, chosen, z):
        br = blending_metric(zi, masks, ids, model.world, cat_ids, cat_u, fit_min=fit_min)
        passes = tuple(r.passes(i, threshold) for r, i in zip(br.results, ids))
        out.append(MultiIDTrial(int(s), ids, all(passes), br.rate, passes))
    return out


def success_rate(trials: Sequence[MultiIDTrial]) -> float:
    return float(np.mean([t.success for t in trials])) if trials else 0.0


def blending_rate(trials: Sequence[MultiIDTrial]) -> float:
    return float(np.mean([t.blending for t in trials])) if trials else 0.0


# ---------------------------------------------------------------------------
# alpha / beta sweep


def parse_grid(text: str) -> list[float]:
    """``a,b,c`` or ``start:stop:step`` (stop inclusive)."""
    text = text.strip()
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise ValueError(f"bad range {text!r}; use start:stop:step")
        start, stop, step = parts
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(max(n, 0))]
    return [float(p) for p in text.split(",") if p.strip()]


@dataclass
class SweepCell:
    alpha: float
    beta: float
    success_rate: float
    n: int


def sweep_alpha_beta(
    alphas: Sequence[float], betas: Sequence[float], n_seeds: int, model: Model, dataset: Dataset, **trial_kwargs
) -> list[SweepCell]:
    if not alphas or not betas:
        raise ValueError("sweep grids must be non-empty")
    seeds = list(range(n_seeds))
    cells = []
    for a in alphas:
        for b in betas:
            trials = multi_id_trials(model, dataset, seeds, alpha=a, beta=b, **trial_kwargs)
            cells.append(SweepCell(float(a), float(b), success_rate(trials), len(trials)))
    return cells


def sweep_csv(cells: Sequence[SweepCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "beta", "success_rate", "n"])
    for c in cells:
        w.writerow([repr(c.alpha), repr(c.beta), repr(c.success_rate), c.n])
    return buf.getvalue()


def sweep_plot_data(cells: Sequence[SweepCell]) -> str:
    """gnuplot-style ``x y z`` triples, a blank line between alpha blocks."""
    lines, last = [], None
    for c in cells:
        if last is not None and c.alpha != last:
            lines.append("")
        lines.append(f"{c.alpha!r} {c.beta!r} {c.success_rate!r}")
        last = c.alpha
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# motion transfer


@dataclass
class MetricReport:
    expression_accuracy: float
    orientation_accuracy: float
    identity_retention: float
    identity_accuracy: float
    n: int
    threshold: float = DEFAULT_THRESHOLD
    fit_min: float = DEFAULT_FIT_MIN
    blending_rate: Optional[float] = None
    region_success_rate: Optional[float] = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("expression_accuracy", "orientation_accuracy", "identity_accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not -1.0 <= self.identity_retention <= 1.0:
            raise ValueError("retention cosine outside [-1, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def csv(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k != "config"}
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(d))
        w.writerow(["" if v is None else repr(v) for v in d.values()])
        return buf.getvalue()


@dataclass
class Triple:
    identity: int
    source: int  # dataset index
    target: int  # dataset index whose motion is transferred


def heldout_triples(dataset: Dataset, n: int, seed: int) -> list[Triple]:
    by_id = dataset.by_identity()
    ids = sorted(dataset.heldout_ids)
    g = rngmod.stream(seed, "triples")
    out = []
    for _ in range(n):
        ident = ids[int(g.integers(len(ids)))]
        pool = by_id[ident]
        src, tgt = (pool[int(j)] for j in g.choice(len(pool), size=2, replace=False))
        out.append(Triple(ident, src, tgt))
    return out


def predict_tokens(model: Model, dataset: Dataset, triples: Sequence[Triple], *, same_motion: bool = False):
    """xi_pred for each triple (target motion = source motion when ``same_motion``)."""
    S = dataset.samples
    src = [S[t.source] for t in triples]
    tgt = src if same_motion else [S[t.target] for t in triples]
    with T.no_grad():
        xi_src = model.face(src)
        psi_src = model.motion(np.stack([s.landmarks for s in src]), [s.motion.expression for s in src], [s.motion.orientation for s in src])
        psi_tgt = model.motion(np.stack([s.landmarks for s in tgt]), [s.motion.expression for s in tgt], [s.motion.orientation for s in tgt])
        return model.imr(xi_src, psi_src, psi_tgt), xi_src


def render_tokens(
    model: Model,
    tokens,
    boxes: Sequence[Sequence[int]],
    scenes: Sequence[int],
    seeds: Sequence[int],
    *,
    steps: int = 20,
    cfg: float = 5.0,
    alpha: float = 0.24,
    beta: float = 2.0,
) -> np.ndarray:
    """Decode face tokens into latents with the anchored model, one box per sample.

    Boxes may differ per sample, so samples sharing a box are batched together.
    """
    wc = model.world.config
    out = np.zeros((len(seeds), wc.n, wc.d_z))
    groups: dict[tuple, list[int]] = {}
    for j, b in enumerate(boxes):
        groups.setdefault(tuple(int(v) for v in b), []).append(j)
    for box, members in sorted(groups.items()):
        policy = LayoutPolicy(alpha, beta, [RegionMask.from_box(box, wc.height, wc.width, 0)])
        with T.no_grad():
            text = model.text.encode([(None, None, int(scenes[j])) for j in members])
            null = model.text.null(len(members))
            tok = T.Tensor(tokens.data[members])
        out[members] = ddim_sample(
            model.denoiser,
            [(0, tok)],
            text,
            steps=steps,
            cfg=cfg,
            policy=policy,
            seed=[int(seeds[j]) for j in members],
            schedule=model.schedule,
            null_text=null,
        )
    return out


def motion_transfer_eval(
    model: Model,
    dataset: Dataset,
    n_triples: int,
    *,
    seed: int = 1,
    same_motion: bool = False,
    steps: int = 20,
    cfg: float = 5.0,
    alpha: float = 0.24,
    beta: float = 2.0,
    threshold: float = DEFAULT_THRESHOLD,
    fit_min: float = DEFAULT_FIT_MIN,
) -> MetricReport:
    """Reconfigure held-out faces to a target motion, render them with the frozen
    anchored model at the target's box and probe the result."""
    triples = heldout_triples(dataset, n_triples, seed)
    S = dataset.samples
    xi_pred, _ = predict_tokens(model, dataset, triples, same_motion=same_motion)
    tgt = [S[t.source] if same_motion else S[t.target] for t in triples]
    seeds = [int(rngmod.stream(seed, "render-seed", j).integers(2**63)) for j in range(len(triples))]
    z = render_tokens(
        model, xi_pred, [s.box for s in tgt], [S[t.source].scene for t in triples], seeds,
        steps=steps, cfg=cfg, alpha=alpha, beta=beta,
    )
    cat_ids, cat_u = dataset.catalog()
    e_ok, o_ok, id_ok, ret = [], [], [], []
    for j, t in enumerate(triples):
        r = identity_probe(z[j], tgt[j].mask, model.world, cat_ids, cat_u, fit_min=fit_min)
        e_ok.append(r.expression == tgt[j].motion.expression)
        o_ok.append(r.orientation == tgt[j].motion.orientation)
        id_ok.append(r.passes(t.identity, threshold))
        ret.append(cosine(r.u_hat, S[t.source].identity.u))
    return MetricReport(
        expression_accuracy=float(np.mean(e_ok)),
        orientation_accuracy=float(np.mean(o_ok)),
        identity_retention=float(np.mean(ret)),
        identity_accuracy=float(np.mean(id_ok)),
        n=len(triples),
        threshold=threshold,
        fit_min=fit_min,
        config={"seed": seed, "steps": steps, "cfg": cfg, "alpha": alpha, "beta": beta, "same_motion": same_motion},
    )


def write_text(path: Union[str, Path], text: str) -> None:
    Path(path).write_text(text)
