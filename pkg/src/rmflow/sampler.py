"""One-step and few-step generation with a trained average-velocity net.

Two time orientations are supported, matching ``make_batch``:

* ``reverse=False``: the source sits at t=0 and the data at t=1. A step
  evaluates the net at the current point with (r, t) = (t_k, t_{k+1}) and
  moves forward by (t_{k+1} - t_k) * u.
* ``reverse=True``: the source sits at t=1 and the data at t=0. A step from
  the current point at time t_k back to t_{k+1} < t_k evaluates
  u(x, t_{k+1}, t_k), the average velocity anchored at the later time it was
  trained at, and moves by -(t_k - t_{k+1}) * u.

No sampler uses parallel transport; the net's output already lives in the
tangent space of the point it is applied at.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, NonFinite, UnconditionalNet
from .geometry import Manifold
from .net import VelocityNet


@dataclass(frozen=True)
class SamplePlan:
    steps: int = 1
    grid: tuple | None = None
    guidance_scale: float = 0.0
    label: int | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidArgument("steps must be >= 1")
        if self.guidance_scale < 0:
            raise InvalidArgument("guidance scale must be >= 0")
        if self.grid is not None:
            g = np.asarray(self.grid, dtype=np.float64)
            if len(g) != self.steps + 1 or g[0] != 0.0 or g[-1] != 1.0 or np.any(np.diff(g) <= 0):
                raise InvalidArgument("grid must be strictly increasing from 0 to 1 with steps + 1 knots")

    def knots(self):
        if self.grid is not None:
            return np.asarray(self.grid, dtype=np.float64)
        return np.linspace(0.0, 1.0, self.steps + 1)


def _labels(net: VelocityNet, label, n):
    if label is None:
        return None
    if net.config.num_classes == 0:
        raise UnconditionalNet("labels given to an unconditional net")
    return np.full(n, int(label), dtype=np.int64)


def _field(net, x, r, t, labels, omega):
    u = net.forward(x, r, t, labels)
    if omega:
        if net.config.num_classes == 0:
            raise UnconditionalNet("guidance needs a conditional net")
        u0 = net.forward(x, r, t, np.full(x.shape[0], -1, dtype=np.int64))
        u = (1.0 + omega) * u - omega * u0
    if not np.all(np.isfinite(u)):
        raise NonFinite("network produced NaN or Inf during sampling")
    return u


def _integrate(net, m: Manifold, x, knots, labels, omega, reverse, rfm=False):
    if reverse:
        knots = 1.0 - knots
    for k in range(len(knots) - 1):
        a, b = knots[k], knots[k + 1]
        if rfm:
            r = t = a
        else:
            r, t = (b, a) if reverse else (a, b)
        u = _field(net, x, r, t, labels, omega)
        x = m.exp(x, (b - a) * u)
    return x


def sample_k_step(net: VelocityNet, m: Manifold, plan: SamplePlan, n: int,
                  rng: np.random.Generator, reverse: bool = False):
    """K network evaluations over the plan's knots."""
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    x = m.random_uniform(n, rng)
    return _integrate(net, m, x, plan.knots(), _labels(net, plan.label, n),
                      plan.guidance_scale, reverse)


def sample_one_step(net: VelocityNet, m: Manifold, n: int, rng: np.random.Generator,
                    label=None, reverse: bool = False):
    """One network evaluation per sample: Exp_{x0}(+-u(x0, 0, 1))."""
    return sample_k_step(net, m, SamplePlan(steps=1, label=label), n, rng, reverse)


def sample_cfg(net: VelocityNet, m: Manifold, n: int, rng: np.random.Generator, label: int,
               omega: float = 0.0, reverse: bool = False):
    """One-step sampling with the guided field (1 + omega) u(.|c) - omega u(.|null)."""
    if net.config.num_classes == 0:
        raise UnconditionalNet("classifier-free guidance needs a conditional net")
    plan = SamplePlan(steps=1, guidance_scale=omega, label=label)
    return sample_k_step(net, m, plan, n, rng, reverse)


def sample_rfm_euler(net: VelocityNet, m: Manifold, steps: int, n: int,
                     rng: np.random.Generator, reverse: bool = False, label=None):
    """Geodesic Euler integration of the instantaneous field u(x, t, t)."""
    if steps < 1:
        raise InvalidArgument("steps must be >= 1")
    x = m.random_uniform(n, rng)
    knots = np.linspace(0.0, 1.0, steps + 1)
    return _integrate(net, m, x, knots, _labels(net, label, n), 0.0, reverse, rfm=True)
