"""Command-line entry point: train, sample, eval, diag and gen-data.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as config_mod
from .data import LAYOUTS, DatasetSpec, generate, ingest_csv, write_points_csv, xyz_to_latlon
from .errors import (
    ConfigMismatch, CutLocus, FormatError, InvalidArgument, InvalidSpec, InvariantViolation,
    NonFinite, ParseError, ScheduleSingularity, UnconditionalNet,
)
from .evaluate import MmdConfig, eval_run, grad_cosine_stats
from .geometry import Sphere, Torus, manifold_from_spec
from .net import load_checkpoint
from .sampler import SamplePlan, sample_k_step
from .train import train

log = logging.getLogger("rmflow")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
RESOLVED_NAME = "config.resolved.json"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- helpers ----------------------------------------------------------------------


def _load_raw(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise CliError(EXIT_CONFIG, f"{path}: line 1: top level must be a JSON object")
    return raw


def _run_config(path):
    return config_mod.resolve(_load_raw(path))


def _find_resolved(checkpoint: Path):
    """config.resolved.json of the run a checkpoint belongs to, if any."""
    for d in (checkpoint.parent, checkpoint.parent.parent):
        p = d / RESOLVED_NAME
        if p.is_file():
            return p
    return None


def _checkpoint_and_config(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError(EXIT_IO, f"checkpoint not found: {ckpt}")
    cfg_path = args.config or _find_resolved(ckpt)
    cfg = _run_config(cfg_path) if cfg_path else None
    net = load_checkpoint(ckpt, expect=cfg.net if cfg is not None else None)
    return net, cfg


def _to_layout(x, m, layout):
    if layout in (None, "ambient"):
        return x
    if layout == "latlon_degrees":
        if not (isinstance(m, Sphere) and m.ambient_dim == 3):
            raise InvalidArgument("latlon_degrees layout needs sphere:3")
        return xyz_to_latlon(x)
    if not isinstance(m, Torus):
        raise InvalidArgument("angles layout needs a torus")
    return x


def _out_file(out, default_name, fallback_dir):
    if out is None:
        return Path(fallback_dir) / default_name
    p = Path(out)
    if p.is_dir() or str(out).endswith(os.sep):
        p.mkdir(parents=True, exist_ok=True)
        return p / default_name
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# -- subcommands ------------------------------------------------------------------


def cmd_train(args) -> int:
    raw = _load_raw(args.config)
    if args.seed is not None:
        raw.setdefault("train", {})["seed"] = args.seed
        raw.setdefault("net", {})["seed"] = args.seed
    if args.track_val:
        raw["track_val"] = True
    if args.out is not None:
        raw["output_dir"] = args.out
    cfg = config_mod.resolve(raw)
    out = Path(cfg.output_dir)
    result = train(cfg, out, resume=args.resume, progress=True)
    print(f"trained {len(result.reports)} steps; final total loss {result.reports[-1].total:.6g}; "
          f"checkpoint {out / 'final.rmf'}")
    return EXIT_OK


def cmd_sample(args) -> int:
    net, cfg = _checkpoint_and_config(args)
    m = manifold_from_spec(net.config.manifold)
    sc = cfg.sample if cfg is not None else {"steps": 1, "omega": 0.0, "label": None, "n": 1000, "seed": 0}
    steps = args.steps if args.steps is not None else int(sc["steps"])
    omega = args.omega if args.omega is not None else float(sc["omega"])
    label = args.label if args.label is not None else sc["label"]
    n = args.n if args.n is not None else int(sc["n"])
    seed = args.seed if args.seed is not None else int(sc["seed"])
    reverse = cfg.reverse_time if cfg is not None else args.reverse
    if omega and label is None:
        raise InvalidArgument("--omega needs --label")
    plan = SamplePlan(steps=steps, guidance_scale=omega, label=label)
    x = sample_k_step(net, m, plan, n, np.random.default_rng(seed), reverse=reverse)
    labels = np.full(n, int(label)) if label is not None else None
    path = _out_file(args.out, "samples.csv", ".")
    header = [f"manifold={m.spec} K={steps} seed={seed} omega={omega!r}"]
    write_points_csv(path, _to_layout(x, m, args.layout), labels, header)
    print(f"wrote {n} samples to {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net, cfg = _checkpoint_and_config(args)
    m = manifold_from_spec(net.config.manifold)
    if args.data is not None:
        test = ingest_csv(args.data, m, args.layout or "ambient")
        name = Path(args.data).stem
    elif cfg is not None:
        test = generate(cfg.dataset).test
        name = cfg.dataset.name
    else:
        raise InvalidSpec("eval needs --data or a run config (--config or a run directory)")
    ev = cfg.eval if cfg is not None else {"bandwidth": 1.0, "max_points": 10_000,
                                           "seeds": [0, 1, 2, 3, 4], "steps": [1], "n_samples": None}
    steps = [args.steps] if args.steps is not None else [int(k) for k in ev["steps"]]
    seeds = [args.seed] if args.seed is not None else [int(s) for s in ev["seeds"]]
    n = args.n if args.n is not None else ev["n_samples"]
    reverse = cfg.reverse_time if cfg is not None else args.reverse
    report = eval_run(net, m, test, n_samples=n, steps=steps, seeds=seeds,
                      cfg=MmdConfig(float(ev["bandwidth"]), int(ev["max_points"])),
                      label=args.label, omega=args.omega or 0.0, reverse=reverse, dataset=name)
    path = _out_file(args.out, "eval.csv", Path(args.checkpoint).parent)
    report.write_csv(path)
    for k, (mean, std) in report.aggregate().items():
        print(f"{name},K={k},mean={mean:.6f},std={std:.6f},seeds={len(seeds)},n={report.n}")
    print(f"report written to {path}")
    return EXIT_OK


def cmd_diag(args) -> int:
    path = Path(args.log)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read log {path}: {exc.strerror or exc}") from exc
    if not rows:
        raise CliError(EXIT_IO, f"{path}: log is empty")
    if "grad_cosine" not in rows[0]:
        raise CliError(EXIT_IO, f"{path}: no grad_cosine column; not a training log")
    vals = [r["grad_cosine"] for r in rows if r["grad_cosine"] not in ("", None)]
    if not vals:
        print("grad_cosine: not applicable (objective has no decomposed loss pair)")
        return EXIT_OK
    try:
        stats = grad_cosine_stats([float(v) for v in vals])
    except ValueError as exc:
        raise CliError(EXIT_IO, f"{path}: bad grad_cosine value: {exc}") from exc
    out = _out_file(args.out, "grad_cosine.csv", path.parent)
    stats.write_csv(out)
    print(f"iterations={len(vals)} mean={stats.mean:.6f} fraction_negative={stats.fraction_negative:.6f}")
    print(f"series written to {out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    raw = _load_raw(args.config)
    ds = raw.get("dataset", raw)
    if not isinstance(ds, dict):
        raise InvalidSpec("dataset section must be an object")
    ds = dict(ds)
    if args.n is not None:
        ds["n"] = args.n
    if args.seed is not None:
        ds["seed"] = args.seed
    spec = DatasetSpec.from_dict(ds)
    m = manifold_from_spec(spec.manifold)
    split = generate(spec)
    out = Path(args.out or f"data/{spec.name}")
    out.mkdir(parents=True, exist_ok=True)
    for part in ("train", "val", "test"):
        x, lab = getattr(split, part), getattr(split, f"{part}_labels")
        write_points_csv(out / f"{part}.csv", _to_layout(x, m, args.layout), lab,
                         [f"dataset={spec.name} manifold={m.spec} split={part} seed={spec.seed}"])
    print(f"wrote {len(split.train)}/{len(split.val)}/{len(split.test)} points to {out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmflow", description="One-step generative modelling on manifolds: training, sampling, evaluation.")
    p.add_argument("-q", "--quiet", action="store_true", help="only print results and errors")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (overrides output_dir)")
    t.add_argument("--seed", type=int)
    t.add_argument("--track-val", action="store_true", help="keep the best-by-validation-MMD checkpoint")
    t.add_argument("--resume", help="continue from an epoch checkpoint")
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("sample", cmd_sample, "draw samples from a checkpoint"),
                              ("eval", cmd_eval, "MMD of samples against a test set")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("checkpoint")
        s.add_argument("--config", help="run config; defaults to the run directory's resolved config")
        s.add_argument("--out")
        s.add_argument("--seed", type=int)
        s.add_argument("--n", type=int)
        s.add_argument("--steps", type=int)
        s.add_argument("--omega", type=float)
        s.add_argument("--label", type=int)
        s.add_argument("--layout", choices=LAYOUTS)
        s.add_argument("--reverse", action="store_true",
                       help="data-at-zero orientation when no run config is available")
        s.set_defaults(func=func)
    sub.choices["eval"].add_argument("--data", help="test CSV (layout from --layout)")

    d = sub.add_parser("diag", help="gradient-conflict statistics from a training log")
    d.add_argument("log")
    d.add_argument("--out")
    d.set_defaults(func=cmd_diag)

    g = sub.add_parser("gen-data", help="write a dataset's train/val/test splits as CSV")
    g.add_argument("--config", required=True, help="dataset spec or full run config")
    g.add_argument("--out")
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--layout", choices=LAYOUTS)
    g.set_defaults(func=cmd_gen_data)
    return p


def _thread_limit():
    val = os.environ.get("RMF_THREADS")
    if not val:
        return contextlib.nullcontext()
    try:
        n = int(val)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliError(EXIT_CONFIG, f"RMF_THREADS must be a positive integer, got {val!r}") from None
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return args.func(args)
    except CliError as exc:
        msg, code = str(exc), exc.code
    except (NonFinite, CutLocus, ScheduleSingularity, FloatingPointError) as exc:
        msg, code = f"numeric failure: {exc}", EXIT_NUMERIC
    except (FormatError, ParseError, InvariantViolation) as exc:
        msg, code = str(exc), EXIT_IO
    except OSError as exc:
        msg, code = f"{exc.filename or ''}: {exc.strerror or exc}", EXIT_IO
    except (InvalidSpec, InvalidArgument, ConfigMismatch, UnconditionalNet, ValueError, KeyError) as exc:
        msg, code = f"config error: {exc}", EXIT_CONFIG
    print(f"rmflow: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
