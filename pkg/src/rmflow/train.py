"""The training loop: batches, losses, gradient combination, AdamW, logs, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Split, generate, write_points_csv
from .errors import NonFinite
from .evaluate import MmdConfig, mmd_v
from .net import VelocityNet, adamw_step, cosine_lr, load_checkpoint, save_checkpoint
from .objective import (
    LossReport, TimeSampler, alpha_rmf_loss, cfg_losses, grad_cosine, imf_loss, make_batch,
    pcgrad_combine, rfm_loss, rmf_direct_loss, rmf_losses,
)
from .sampler import sample_one_step

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "lr", "l1", "l2", "total", "grad_cosine", "pcgrad_applied",
              "wallclock_ms")
NAN = float("nan")


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Counter-based stream: the draws of step k depend only on (seed, k)."""
    return np.random.default_rng([int(seed), int(step)])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch), 0xE90C]).permutation(n)


def objective_step(net: VelocityNet, batch, objective: dict, rng, pcgrad_eps=1e-12):
    """Gradient and LossReport for one minibatch under the configured objective."""
    name = objective["name"]
    if name in ("rmf_mt", "rmf_sum", "cfg"):
        if name == "cfg":
            l1, l2, _ = cfg_losses(net, batch, objective["p_drop"], rng)
            mt = objective.get("combine", "pcgrad") == "pcgrad"
        else:
            l1, l2, _ = rmf_losses(net, batch)
            mt = name == "rmf_mt"
        g1, g2 = l1.grad(), l2.grad()
        if mt:
            g, cos, applied = pcgrad_combine(g1, g2, pcgrad_eps)
        else:
            g, cos, applied = g1 + g2, grad_cosine(g1, g2), False
        return g, LossReport(l1.value, l2.value, l1.value + l2.value, cos, applied)
    if name == "rmf_direct":
        loss = rmf_direct_loss(net, batch)
    elif name == "alpha_rmf":
        loss = alpha_rmf_loss(net, batch, objective["alpha"])
    elif name == "imf":
        loss = imf_loss(net, batch)
    elif name == "rfm":
        loss = rfm_loss(net, batch)
    else:
        raise ValueError(f"unknown objective {name!r}")
    return loss.grad(), LossReport(loss.value, NAN, loss.value, NAN, False)


@dataclass
class TrainResult:
    net: VelocityNet
    reports: list
    split: Split
    output_dir: Path | None


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def train(cfg: RunConfig, output_dir=None, resume=None, progress: bool = False) -> TrainResult:
    """Run the configured training. Writes config.resolved.json, train_log.csv,
    per-epoch and final checkpoints when ``output_dir`` is given."""
    m = cfg.manifold
    split = generate(cfg.dataset)
    data, labels = split.train, split.train_labels
    if cfg.objective["name"] == "cfg" and labels is None:
        raise ValueError("cfg objective needs a labelled dataset")
    tc = cfg.train
    n = len(data)
    bs = min(int(tc["batch_size"]), n)
    iters = math.ceil(n / bs)
    epochs = int(tc["epochs"])
    total = epochs * iters
    seed = int(tc["seed"])
    sampler = TimeSampler(p_eq=float(tc["p_eq"]),
                          distribution=tc.get("time_distribution", "uniform"))
    betas = tuple(tc["betas"])

    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        resolved = cfg.to_dict()
        resolved["output_dir"] = str(out)
        resolved["train"]["iterations_per_epoch"] = iters
        resolved["train"]["total_steps"] = total
        (out / "config.resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
        write_points_csv(out / "test.csv", split.test, split.test_labels)
        write_points_csv(out / "val.csv", split.val, split.val_labels)

    if resume is not None:
        net = load_checkpoint(resume, expect=cfg.net)
        if net.step % iters:
            raise ValueError("can only resume from an epoch-boundary checkpoint")
    else:
        net = VelocityNet(cfg.net)
    start_epoch = net.step // iters

    log_fh = None
    writer = None
    if out is not None:
        mode = "a" if resume is not None else "w"
        log_fh = open(out / "train_log.csv", mode, newline="")
        writer = csv.writer(log_fh)
        if resume is None:
            writer.writerow(LOG_FIELDS)
    reports = []
    best = math.inf
    t0 = time.perf_counter()
    try:
        for epoch in range(start_epoch, epochs):
            order = epoch_order(seed, epoch, n)
            for i in range(iters):
                step = net.step
                idx = order[i * bs: (i + 1) * bs]
                rng = step_rng(seed, step)
                batch = make_batch(m, data[idx], rng, sampler,
                                   labels=None if labels is None else labels[idx],
                                   reverse=cfg.reverse_time)
                g, rep = objective_step(net, batch, cfg.objective, rng, float(tc["pcgrad_eps"]))
                lr = cosine_lr(float(tc["base_lr"]), step, total)
                adamw_step(net, g, lr, float(tc["weight_decay"]), betas, float(tc["eps"]))
                if not np.all(np.isfinite(net.theta)):
                    raise NonFinite("parameters became non-finite")
                net.rng_state = (seed, net.step)
                reports.append(rep)
                if writer is not None:
                    wall = (time.perf_counter() - t0) * 1000.0 if tc.get("log_wallclock", True) else 0.0
                    writer.writerow([_fmt(v) for v in (
                        step, epoch, lr, rep.l1, rep.l2, rep.total, rep.grad_cosine,
                        rep.pcgrad_applied, round(wall, 3))])
            if out is not None:
                save_checkpoint(net, out / "checkpoints" / f"epoch_{epoch + 1:04d}.rmf")
                if cfg.track_val:
                    score = validation_mmd(net, cfg, split)
                    log.info("epoch %d val mmd %.5f", epoch + 1, score)
                    if score < best:
                        best = score
                        save_checkpoint(net, out / "best.rmf")
            if progress:
                log.info("epoch %d/%d done, last total loss %.5f", epoch + 1, epochs, reports[-1].total)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None:
        save_checkpoint(net, out / "final.rmf")
    return TrainResult(net, reports, split, out)


def validation_mmd(net, cfg: RunConfig, split: Split, n_max: int = 2000) -> float:
    m = cfg.manifold
    n = min(len(split.val), n_max)
    x = sample_one_step(net, m, n, np.random.default_rng(0), reverse=cfg.reverse_time)
    ev = cfg.eval
    return mmd_v(x, split.val, m, MmdConfig(float(ev["bandwidth"]), int(ev["max_points"])))
