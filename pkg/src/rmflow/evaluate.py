"""Geodesic-kernel MMD, gradient-conflict summaries and run evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .geometry import Manifold
from .net import VelocityNet
from .sampler import SamplePlan, sample_k_step

BLOCK = 512


@dataclass(frozen=True)
class MmdConfig:
    bandwidth: float = 1.0
    max_points: int = 10_000

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise InvalidArgument("kernel bandwidth must be positive")
        if self.max_points < 2:
            raise InvalidArgument("max_points must be >= 2")


def _subsample(x, n, rng):
    if len(x) == n:
        return x
    return x[np.sort(rng.choice(len(x), size=n, replace=False))]


def match_sizes(x, y, max_points, seed=0):
    """Subsample (seeded) so both sets have the same size, capped at max_points."""
    n = min(len(x), len(y), max_points)
    rng = np.random.default_rng(seed)
    return _subsample(x, n, rng), _subsample(y, n, rng)


def _kernel_sum(m: Manifold, a, b, lam, symmetric):
    """Sum of exp(-lam d^2) over all pairs, visiting only i <= j blocks when symmetric."""
    total = 0.0
    n = len(a)
    for i in range(0, n, BLOCK):
        ai = a[i: i + BLOCK]
        start = i if symmetric else 0
        for j in range(start, len(b), BLOCK):
            d = m.dist(ai[:, None, :], b[None, j: j + BLOCK, :])
            s = float(np.exp(-lam * d * d).sum())
            total += 2.0 * s if (symmetric and j != i) else s
    return total


def mmd_squared(x, y, m: Manifold, bandwidth: float = 1.0):
    """V-statistic MMD^2 with k(x, y) = exp(-bandwidth * d_g(x, y)^2), no clamping."""
    x, y = m._check(x, y)
    if x.ndim != 2 or len(x) != len(y):
        raise InvalidArgument("mmd needs two point sets of equal size")
    n = len(x)
    if n < 2:
        raise InvalidArgument("mmd needs at least two points per set")
    kxx = _kernel_sum(m, x, x, bandwidth, True)
    kyy = _kernel_sum(m, y, y, bandwidth, True)
    kxy = _kernel_sum(m, x, y, bandwidth, False)
    return (kxx + kyy - 2.0 * kxy) / (n * n)


def mmd_v(x, y, m: Manifold, cfg: MmdConfig = MmdConfig(), seed: int = 0) -> float:
    """Square root of the (clamped) V-statistic MMD^2.

    Sets of different size, or larger than ``cfg.max_points``, are subsampled
    with a seeded generator first.
    """
    x, y = m._check(x, y)
    if len(x) < 2 or len(y) < 2:
        raise InvalidArgument("mmd needs at least two points per set")
    x, y = match_sizes(x, y, cfg.max_points, seed)
    return float(np.sqrt(max(0.0, mmd_squared(x, y, m, cfg.bandwidth))))


@dataclass
class CosineSummary:
    mean: float
    fraction_negative: float
    running_average: np.ndarray
    values: np.ndarray = field(repr=False)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "grad_cosine", "running_average"])
            for i, (c, a) in enumerate(zip(self.values, self.running_average)):
                w.writerow([i, repr(float(c)), repr(float(a))])


def grad_cosine_stats(log) -> CosineSummary:
    """Cumulative-mean series and the share of conflicting (cos < 0) iterations.

    ``log`` is a sequence of LossReport objects, dicts with a ``grad_cosine``
    key, or plain numbers.
    """
    vals = []
    for rec in log:
        if isinstance(rec, dict):
            vals.append(float(rec["grad_cosine"]))
        elif hasattr(rec, "grad_cosine"):
            vals.append(float(rec.grad_cosine))
        else:
            vals.append(float(rec))
    if not vals:
        raise InvalidArgument("empty log")
    v = np.asarray(vals)
    running = np.cumsum(v) / np.arange(1, len(v) + 1)
    return CosineSummary(float(v.mean()), float(np.mean(v < 0)), running, v)


@dataclass
class EvalReport:
    dataset: str
    n: int
    rows: list  # (K, seed, mmd)

    def aggregate(self):
        out = {}
        for k in sorted({r[0] for r in self.rows}):
            vals = np.array([r[2] for r in self.rows if r[0] == k])
            out[k] = (float(vals.mean()), float(vals.std()))
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset", "K", "seed", "mmd", "std", "n"])
            for k, seed, val in self.rows:
                w.writerow([self.dataset, k, seed, repr(val), "", self.n])
            # One aggregate row per K: seed column "mean", population std alongside.
            for k, (mean, std) in self.aggregate().items():
                w.writerow([self.dataset, k, "mean", repr(mean), repr(std), self.n])


def eval_run(net: VelocityNet, m: Manifold, test_set, n_samples: int | None = None,
             steps=(1,), seeds=(0, 1, 2, 3, 4), cfg: MmdConfig = MmdConfig(),
             label=None, omega: float = 0.0, reverse: bool = False,
             dataset: str = "") -> EvalReport:
    """MMD between generated samples and the test set for every (K, seed)."""
    test_set = m._check(test_set)
    if len(test_set) == 0:
        raise InvalidArgument("empty test set")
    n = min(len(test_set), cfg.max_points) if n_samples is None else int(n_samples)
    rows = []
    for k in steps:
        plan = SamplePlan(steps=int(k), guidance_scale=omega, label=label)
        for seed in seeds:
            rng = np.random.default_rng(seed)
            samples = sample_k_step(net, m, plan, n, rng, reverse)
            rows.append((int(k), int(seed), mmd_v(samples, test_set, m, cfg, seed)))
    return EvalReport(dataset, n, rows)


def read_report_csv(path):
    with open(Path(path), newline="") as fh:
        return list(csv.DictReader(fh))
