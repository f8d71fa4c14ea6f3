"""Command-line entry point: ``gatedid <command> --out DIR [options]``.

Every command loads a RunConfig (defaults, then ``--config`` JSON, then
``--set a.b=value`` overrides, then command flags), writes the effective
config to ``DIR/config.json`` and its artifacts next to it. Failures print a
single ``error<TAB>kind<TAB>message`` line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import evaluation as E
from . import rng as rngmod
from . import tensor as T
from .config import ConfigError, RunConfig, load_run_config
from .gradcheck import DEFAULT_TOL, run_registry
from .model import ANCHOR, RECONFIGURE, Model
from .pipeline import SamplerTrace, ddim_sample
from .saa import LayoutPolicy, MaskOverlapError, RegionMask
from .training import (
    CheckpointFormatError,
    LossLog,
    StageMismatchError,
    TrainingDiverged,
    load_checkpoint,
    save_checkpoint,
    train_anchor,
    train_imr,
)
from .world import Dataset, World, load_dataset, make_dataset, save_dataset

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CLIError(ValueError):
    pass


# ---------------------------------------------------------------------------
# shared helpers


def parse_boxes(text: str) -> list[tuple[int, int, int, int]]:
    """``x0,y0,x1,y1;x0,y0,x1,y1`` in latent-grid cells, end-exclusive."""
    boxes = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        vals = part.split(",")
        if len(vals) != 4:
            raise CLIError(f"box {part!r} needs four comma-separated integers")
        try:
            boxes.append(tuple(int(v) for v in vals))
        except ValueError as e:
            raise CLIError(f"box {part!r} is not integral") from e
    if not boxes:
        raise CLIError("no boxes given")
    return boxes


def parse_ids(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise CLIError(f"identity list {text!r} is not integral") from e


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args, extra: Sequence[str] = ()) -> RunConfig:
    return load_run_config(args.config, list(args.set or []) + list(extra))


def _echo(cfg: RunConfig, out: Path, **extra) -> None:
    data = cfg.to_dict()
    if extra:
        data["command"] = extra
    (out / "config.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _dataset(args, cfg: RunConfig, model: Model) -> Dataset:
    if getattr(args, "data", None):
        ds = load_dataset(Path(args.data))
        if ds.world.config != model.world.config:
            raise CLIError("dataset world config differs from the model's")
        return ds
    d = cfg.data
    return make_dataset(
        model.world, n_ids=d.n_ids, n_motions_per_id=d.n_motions_per_id, split=d.split, seed=d.seed, n_aux_ids=d.n_aux_ids
    )


def _flag_overrides(args, mapping: dict[str, str]) -> list[str]:
    out = []
    for attr, key in mapping.items():
        v = getattr(args, attr, None)
        if v is not None:
            out.append(f"{key}={json.dumps(v)}")
    return out


def _sample_overrides(args) -> list[str]:
    out = _flag_overrides(args, {"alpha": "sample.alpha", "beta": "sample.beta", "steps": "sample.steps", "cfg": "sample.cfg"})
    for attr, key, value in (
        ("no_suppress", "sample.suppress", False),
        ("confine", "sample.confine", True),
        ("isolate", "sample.isolate", True),
    ):
        if getattr(args, attr, False):
            out.append(f"{key}={json.dumps(value)}")
    return out


def _load_model(path: str, expect: Optional[str] = None) -> tuple[Model, dict]:
    ck = load_checkpoint(path, expect)
    return ck.model(), ck.config


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    model_world = World(cfg.model.world)
    d = cfg.data
    ds = make_dataset(
        model_world, n_ids=d.n_ids, n_motions_per_id=d.n_motions_per_id, split=d.split, seed=d.seed, n_aux_ids=d.n_aux_ids
    )
    save_dataset(ds, out / "data")
    _echo(cfg, out, name="gen-data")
    print(f"wrote {len(ds.samples)} samples ({len(ds.train_ids)} train, {len(ds.heldout_ids)} held-out, "
          f"{len(ds.aux_ids)} auxiliary ids) to {out / 'data'}")
    return 0


def cmd_train_anchor(args) -> int:
    cfg = _config(args, _flag_overrides(args, {"steps": "anchor.steps", "seed": "anchor.seed"}))
    out = _out_dir(args)
    _echo(cfg, out, name="train-anchor", data=args.data)
    model = Model(cfg.model, cfg.model_seed)
    ds = _dataset(args, cfg, model)
    log = LossLog(["loss"])
    ckdir = out / "checkpoints" if cfg.anchor.checkpoint_every else None
    if ckdir is not None:
        ckdir.mkdir(exist_ok=True)
    ck = train_anchor(cfg.anchor, ds, model, log=log, checkpoint_dir=ckdir)
    ck.config["data"] = dataclasses.asdict(cfg.data)
    save_checkpoint(ck, out / "anchor.ckpt")
    log.write(out / "anchor_loss.csv")
    if log.rows:
        losses = log.column("loss")
        k = min(100, len(losses))
        print(f"anchor: {len(losses)} steps, mean loss first {k} {losses[:k].mean():.4f}, last {k} {losses[-k:].mean():.4f}")
    print(f"wrote {out / 'anchor.ckpt'}")
    return 0


def cmd_train_imr(args) -> int:
    extra = _flag_overrides(args, {"steps": "imr.steps", "seed": "imr.seed"})
    if args.no_dfm:
        extra.append("imr.use_dfm=false")
    if args.no_ldc:
        extra.append("imr.use_ldc=false")
    cfg = _config(args, extra)
    out = _out_dir(args)
    _echo(cfg, out, name="train-imr", anchor=args.anchor, data=args.data)
    anchored = load_checkpoint(args.anchor, ANCHOR)
    model = anchored.model()
    ds = _dataset(args, cfg, model)
    log = LossLog(["loss", "dfm", "ldc"])
    ckdir = out / "checkpoints" if cfg.imr.checkpoint_every else None
    if ckdir is not None:
        ckdir.mkdir(exist_ok=True)
    ck = train_imr(cfg.imr, ds, anchored, log=log, checkpoint_dir=ckdir, model=model)
    ck.config["data"] = dataclasses.asdict(cfg.data)
    save_checkpoint(ck, out / "imr.ckpt")
    log.write(out / "imr_loss.csv")
    print(f"wrote {out / 'imr.ckpt'}")
    return 0


def cmd_sample(args) -> int:
    cfg = _config(args, _sample_overrides(args))
    out = _out_dir(args)
    boxes = parse_boxes(args.boxes)
    _echo(cfg, out, name="sample", ckpt=args.ckpt, boxes=boxes, ids=args.ids, identities=args.identities,
          seed=args.seed, n=args.n, scene=args.scene, data=args.data)
    model, _ = _load_model(args.ckpt)
    wc = model.world.config
    masks = [RegionMask.from_box(b, wc.height, wc.width, j) for j, b in enumerate(boxes)]
    ds = _dataset(args, cfg, model)
    by_id = ds.by_identity()
    if args.identities:
        ids = parse_ids(args.identities)
    else:
        pool = sorted(ds.heldout_ids)
        g = rngmod.stream(args.seed, "sample-ids")
        n_ids = args.ids if args.ids is not None else len(boxes)
        if n_ids > len(pool):
            raise CLIError(f"asked for {n_ids} identities, {len(pool)} available")
        ids = [int(pool[j]) for j in g.choice(len(pool), size=n_ids, replace=False)]
    if len(ids) != len(boxes):
        raise CLIError(f"{len(ids)} identities for {len(boxes)} boxes")
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise CLIError(f"unknown identities {missing}")
    s = cfg.sample
    policy = LayoutPolicy(s.alpha, s.beta, masks, suppress_others=s.suppress, confine=s.confine)
    seeds = list(range(args.seed, args.seed + args.n))
    refs = [ds.samples[by_id[i][0]] for i in ids]
    with T.no_grad():
        faces = [(j, T.Tensor(np.repeat(model.face([r]).data, len(seeds), axis=0))) for j, r in enumerate(refs)]
        text = model.text.encode([(None, None, args.scene)] * len(seeds))
        null = model.text.null(len(seeds))
    trace = SamplerTrace() if args.trace else None
    z = ddim_sample(
        model.denoiser, faces, text, steps=s.steps, cfg=s.cfg, policy=policy, seed=seeds,
        schedule=model.schedule, null_text=null, isolate=s.isolate, trace=trace,
    )
    z.astype("<f4").tofile(out / "latents.bin")
    (out / "latents.shape").write_text(",".join(str(v) for v in z.shape) + "\n")
    if trace is not None:
        trace.write(out / "trace")
    cat_ids, cat_u = ds.catalog()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "label", "identity", "best_id", "cosine", "fit", "margin", "pass"])
    n_pass = 0
    for si, zi in zip(seeds, z):
        for j, (ident, mask) in enumerate(zip(ids, masks)):
            r = E.identity_probe(zi, mask, model.world, cat_ids, cat_u, fit_min=s.fit_min)
            ok = r.passes(ident, s.threshold)
            n_pass += ok
            w.writerow([si, j, ident, r.best_id, repr(r.cosine), repr(r.fit), repr(r.margin), int(ok)])
    (out / "probe.csv").write_text(buf.getvalue())
    print(f"sampled {len(seeds)} latent(s) with identities {ids}; {n_pass}/{len(seeds) * len(ids)} regions pass the probe")
    return 0


def _multi_id_rows(model: Model, ds: Dataset, cfg: RunConfig, n_seeds: int) -> list[list]:
    s = cfg.sample
    seeds = list(range(n_seeds))
    rows = []
    for suppress in (True, False):
        trials = E.multi_id_trials(
            model, ds, seeds, alpha=s.alpha, beta=s.beta, steps=s.steps, cfg=s.cfg, suppress=suppress,
            confine=s.confine, isolate=s.isolate, threshold=s.threshold, fit_min=s.fit_min,
        )
        rows.append(["gated" if suppress else "ungated", repr(E.success_rate(trials)), repr(E.blending_rate(trials)), len(trials)])
    return rows


def cmd_eval(args) -> int:
    extra = _sample_overrides(args)
    if args.triples is not None:
        extra.append(f"eval_triples={args.triples}")
    cfg = _config(args, extra)
    out = _out_dir(args)
    _echo(cfg, out, name="eval", ckpt=args.ckpt, multi_id=args.multi_id, data=args.data)
    ck = load_checkpoint(args.ckpt)
    model = ck.model()
    ds = _dataset(args, cfg, model)
    s = cfg.sample
    if ck.stage == RECONFIGURE:
        report = E.motion_transfer_eval(
            model, ds, cfg.eval_triples, seed=cfg.eval_seed, steps=s.steps, cfg=s.cfg, alpha=s.alpha, beta=s.beta,
            threshold=s.threshold, fit_min=s.fit_min,
        )
        (out / "metrics.csv").write_text(report.csv())
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        print(f"expression {report.expression_accuracy:.3f} orientation {report.orientation_accuracy:.3f} "
              f"retention {report.identity_retention:.3f} identity {report.identity_accuracy:.3f} (n={report.n})")
    elif not args.multi_id:
        raise CLIError(f"a {ck.stage} checkpoint has no reconfigurator to evaluate; pass --multi-id N")
    if args.multi_id:
        rows = _multi_id_rows(model, ds, cfg, args.multi_id)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["policy", "success_rate", "blending_rate", "n"])
        w.writerows(rows)
        (out / "multi_id.csv").write_text(buf.getvalue())
        for r in rows:
            print(f"{r[0]}: success {float(r[1]):.3f} blending {float(r[2]):.3f} (n={r[3]})")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args, _sample_overrides(args))
    out = _out_dir(args)
    alphas, betas = E.parse_grid(args.alphas), E.parse_grid(args.betas)
    _echo(cfg, out, name="sweep", ckpt=args.ckpt, alphas=alphas, betas=betas, seeds=args.seeds, data=args.data)
    model, _ = _load_model(args.ckpt)
    ds = _dataset(args, cfg, model)
    s = cfg.sample
    cells = E.sweep_alpha_beta(
        alphas, betas, args.seeds, model, ds, steps=s.steps, cfg=s.cfg, suppress=s.suppress, confine=s.confine,
        isolate=s.isolate, threshold=s.threshold, fit_min=s.fit_min,
    )
    (out / "sweep.csv").write_text(E.sweep_csv(cells))
    (out / "sweep.dat").write_text(E.sweep_plot_data(cells))
    best = max(cells, key=lambda c: c.success_rate)
    print(f"{len(cells)} cells; best alpha={best.alpha} beta={best.beta} success {best.success_rate:.3f}")
    return 0


def cmd_gradcheck(args) -> int:
    names = args.only.split(",") if args.only else None
    results = run_registry(names)
    ok = True
    for r in results:
        passed = r.passed(args.tol)
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {r.name} max_rel_err={r.error:.3e} params={r.n_params} time={r.seconds:.2f}s")
    if args.out:
        out = _out_dir(args)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["composite", "max_rel_err", "params", "passed"])
        for r in results:
            w.writerow([r.name, repr(r.error), r.n_params, int(r.passed(args.tol))])
        (out / "gradcheck.csv").write_text(buf.getvalue())
    return 0 if ok else EXIT_FAILURE


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override (repeatable)")


def _data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset directory from gen-data (default: regenerate from the config)")


def _sampling(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, help="fraction of sampler steps with layout intervention")
    p.add_argument("--beta", type=float, help="in-mask gate boost")
    p.add_argument("--steps", type=int, help="DDIM steps")
    p.add_argument("--cfg", type=float, help="classifier-free guidance scale")
    p.add_argument("--no-suppress", action="store_true", help="do not zero gates under other identities' masks")
    p.add_argument("--confine", action="store_true", help="zero each identity's gate outside its own mask")
    p.add_argument("--isolate", action="store_true", help="block self-attention between face regions and background")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gatedid", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic dataset")
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-anchor", help="anchoring stage")
    _common(p)
    _data(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_anchor)

    p = sub.add_parser("train-imr", help="reconfiguration stage")
    _common(p)
    _data(p)
    p.add_argument("--anchor", required=True, help="anchor checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-dfm", action="store_true", help="drop the feature-matching term")
    p.add_argument("--no-ldc", action="store_true", help="drop the noise-consistency term")
    p.set_defaults(func=cmd_train_imr)

    p = sub.add_parser("sample", help="multi-identity generation")
    _common(p)
    _data(p)
    _sampling(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--boxes", required=True, help='"x0,y0,x1,y1;..." in latent cells')
    p.add_argument("--ids", type=int, help="number of held-out identities to draw (default: one per box)")
    p.add_argument("--identities", help="explicit comma-separated identity ids, one per box")
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=1, help="number of seeds, starting at --seed")
    p.add_argument("--trace", "--dump-trace", dest="trace", action="store_true", help="dump per-step gates and latents")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="motion-transfer metrics and multi-identity rates")
    _common(p)
    _data(p)
    _sampling(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--triples", type=int, help="held-out triples (default: eval_triples)")
    p.add_argument("--multi-id", type=int, metavar="SEEDS", help="also run gated vs ungated two-identity trials")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="alpha/beta success-rate grid")
    _common(p)
    _data(p)
    _sampling(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--alphas", default="0:0.48:0.08")
    p.add_argument("--betas", default="0,0.5,1,2,4")
    p.add_argument("--seeds", type=int, default=100)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of every registered composite")
    _common(p, out_required=False)
    p.add_argument("--only", help="comma-separated composite names")
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def _error_line(exc: BaseException) -> str:
    msg = " ".join(str(exc).split()) or exc.__class__.__name__
    return f"error\t{exc.__class__.__name__}\t{msg}"


EXPECTED_ERRORS = (
    ConfigError,
    CLIError,
    CheckpointFormatError,
    StageMismatchError,
    TrainingDiverged,
    MaskOverlapError,
    FileNotFoundError,
    KeyError,
    ValueError,
    T.NonFiniteError,
)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EXPECTED_ERRORS as e:
        print(_error_line(e), file=sys.stderr)
        return EXIT_USAGE if isinstance(e, (ConfigError, CLIError)) else EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
