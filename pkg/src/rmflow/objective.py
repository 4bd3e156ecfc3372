"""Training batches on geodesic paths and the losses built on them.

Every loss here depends on the parameters only through a single recorded
forward pass u = u_theta(x_t, r, t | c); the JVP terms and all targets are
detached. A loss is therefore represented by its value together with dL/du,
and ``Loss.grad()`` backpropagates that cotangent through the recorded tape.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import CutLocus, InvalidArgument, NonFinite, UnconditionalNet
from .geometry import LINEAR, SO3, SO3_CUT_TOL, SPHERE_CUT_TOL, Manifold, Sphere
from .geometry import geodesic_interpolate, path_velocity
from .net import Tape, VelocityNet

T_MAX = 1.0 - 1e-4
MAX_RESAMPLE = 10
TIME_DISTRIBUTIONS = ("uniform", "sorted", "logit_normal")


@dataclass(frozen=True)
class TimeSampler:
    """Draws (r, t) with r <= t; with probability p_eq, r is set to t.

    ``uniform``: t ~ U(0, t_max), r ~ U(0, t).
    ``sorted``: two U(0, t_max) draws, the larger is t.
    ``logit_normal``: two draws of sigmoid(N(mu, sigma)), sorted.
    """

    p_eq: float = 0.75
    t_max: float = T_MAX
    distribution: str = "uniform"
    mu: float = -0.4
    sigma: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.p_eq <= 1.0:
            raise InvalidArgument("p_eq must lie in [0, 1]")
        if not 0.0 < self.t_max <= T_MAX:
            raise InvalidArgument(f"t_max must lie in (0, {T_MAX}]")
        if self.distribution not in TIME_DISTRIBUTIONS:
            raise InvalidArgument(f"time distribution must be one of {TIME_DISTRIBUTIONS}")
        if self.sigma <= 0:
            raise InvalidArgument("sigma must be positive")

    def sample(self, n: int, rng: np.random.Generator):
        if self.distribution == "uniform":
            t = rng.uniform(0.0, self.t_max, size=n)
            r = t * rng.uniform(0.0, 1.0, size=n)
        else:
            if self.distribution == "sorted":
                a = rng.uniform(0.0, self.t_max, size=(2, n))
            else:
                z = rng.normal(self.mu, self.sigma, size=(2, n))
                a = np.minimum(1.0 / (1.0 + np.exp(-z)), self.t_max)
            r, t = np.minimum(a[0], a[1]), np.maximum(a[0], a[1])
        eq = rng.uniform(size=n) < self.p_eq
        r = np.where(eq, t, r)
        return r, t


@dataclass
class TrainBatch:
    x0: np.ndarray
    x1: np.ndarray
    r: np.ndarray
    t: np.ndarray
    labels: np.ndarray | None
    x_t: np.ndarray
    xdot: np.ndarray


def _near_cut(m: Manifold, a, b):
    if isinstance(m, Sphere):
        return np.sum(a * b, axis=-1) <= -1.0 + 10 * SPHERE_CUT_TOL
    if isinstance(m, SO3):
        return m.dist(a, b) >= np.pi - 10 * SO3_CUT_TOL
    return np.zeros(a.shape[0], dtype=bool)


def make_batch(m: Manifold, data, rng: np.random.Generator, sampler: TimeSampler = TimeSampler(),
               schedule=LINEAR, labels=None, reverse: bool = False) -> TrainBatch:
    """Pair data with fresh source draws and place them on the geodesic path.

    By default the source sample is the t=0 endpoint and the data the t=1
    endpoint. With ``reverse`` the roles swap (data at t=0, source at t=1),
    which is the orientation the one-step sampler inverts.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise InvalidArgument("data batch must be a nonempty (n, dim) array")
    n = data.shape[0]
    noise = m.random_uniform(n, rng)
    for _ in range(MAX_RESAMPLE):
        bad = _near_cut(m, noise, data)
        if not np.any(bad):
            break
        noise[bad] = m.random_uniform(int(bad.sum()), rng)
    else:
        raise CutLocus("could not draw source points away from the cut locus")
    x0, x1 = (data, noise) if reverse else (noise, data)
    r, t = sampler.sample(n, rng)
    x_t = geodesic_interpolate(m, x0, x1, schedule.kappa(t))
    xdot = path_velocity(m, x_t, x1, t, schedule)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
    return TrainBatch(x0=x0, x1=x1, r=r, t=t, labels=labels, x_t=x_t, xdot=xdot)


@dataclass
class Loss:
    value: float
    cotangent: np.ndarray
    tape: Tape
    net: VelocityNet

    def grad(self):
        return self.net.backward(self.tape, self.cotangent)


@dataclass
class LossReport:
    l1: float
    l2: float
    total: float
    grad_cosine: float
    pcgrad_applied: bool


def _sq_norm_mean(m: Manifold, a):
    return float(m.metric_scale * np.mean(np.sum(a * a, axis=1)))


def _finite(*values):
    if not all(np.isfinite(v) for v in values):
        raise NonFinite("loss is NaN or Inf")


def _regression(net, m, u, tape, target, scale=1.0):
    diff = u - target
    value = scale * _sq_norm_mean(m, diff)
    _finite(value)
    cot = (2.0 * scale * m.metric_scale / u.shape[0]) * diff
    return Loss(value, cot, tape, net)


def rmf_losses(net: VelocityNet, batch: TrainBatch):
    """The decomposed objective: returns (L1, L2, xi).

    L1 = E ||u - xdot||^2 and L2 = 2 E <u, (t - r) sg(xi)>, where xi is the
    derivative of the network along the direction (xdot, 0, 1).
    """
    m = net.manifold
    u, xi, tape = net.jvp(batch.x_t, batch.r, batch.t, batch.labels,
                          dx=batch.xdot, dr=0.0, dt=1.0, record=True)
    n = u.shape[0]
    gap = (batch.t - batch.r)[:, None]
    l1 = _regression(net, m, u, tape, batch.xdot)
    l2_value = float(2.0 * m.metric_scale * np.mean(np.sum(u * gap * xi, axis=1)))
    _finite(l2_value)
    l2 = Loss(l2_value, (2.0 * m.metric_scale / n) * gap * xi, tape, net)
    return l1, l2, xi


def rmf_direct_loss(net: VelocityNet, batch: TrainBatch) -> Loss:
    """||u - sg(xdot - (t - r) xi)||^2, the undecomposed form."""
    u, xi, tape = net.jvp(batch.x_t, batch.r, batch.t, batch.labels,
                          dx=batch.xdot, dr=0.0, dt=1.0, record=True)
    target = batch.xdot - (batch.t - batch.r)[:, None] * xi
    return _regression(net, net.manifold, u, tape, target)


def drop_labels(labels, p_drop: float, rng: np.random.Generator | None = None, mask=None):
    """Replace labels by the null token (-1) where ``mask`` is set, or at random."""
    labels = np.asarray(labels, dtype=np.int64)
    if mask is None:
        if rng is None:
            raise InvalidArgument("need either a dropout mask or an rng")
        mask = rng.uniform(size=labels.shape[0]) < p_drop
    return np.where(np.asarray(mask, dtype=bool), -1, labels)


def cfg_losses(net: VelocityNet, batch: TrainBatch, p_drop: float,
               rng: np.random.Generator | None = None, mask=None):
    """Decomposed losses with conditioning dropout; returns (L1, L2, labels used)."""
    if net.config.num_classes == 0:
        raise UnconditionalNet("classifier-free guidance needs a conditional net")
    if batch.labels is None:
        raise InvalidArgument("cfg training needs labels")
    used = drop_labels(batch.labels, p_drop, rng, mask)
    l1, l2, _ = rmf_losses(net, replace(batch, labels=used))
    return l1, l2, used


def alpha_rmf_loss(net: VelocityNet, batch: TrainBatch, alpha: float, schedule=LINEAR) -> Loss:
    """alpha-Flow style consistency loss with the intermediate time s = alpha r + (1 - alpha) t."""
    if not 0.0 < alpha <= 1.0:
        raise InvalidArgument("alpha must lie in (0, 1]")
    m = net.manifold
    s = alpha * batch.r + (1.0 - alpha) * batch.t
    x_s = geodesic_interpolate(m, batch.x0, batch.x1, schedule.kappa(s))
    target = alpha * path_velocity(m, x_s, batch.x1, s, schedule)
    if alpha < 1.0:
        target = target + (1.0 - alpha) * net.forward(x_s, batch.r, s, batch.labels)
    u, tape = net.forward(batch.x_t, batch.r, batch.t, batch.labels, record=True)
    return _regression(net, m, u, tape, target, scale=1.0 / alpha)


def imf_loss(net: VelocityNet, batch: TrainBatch) -> Loss:
    """Like ``rmf_direct_loss`` but the JVP direction is the net's own u(x_t, t, t)."""
    direction = net.forward(batch.x_t, batch.t, batch.t, batch.labels)
    u, xi, tape = net.jvp(batch.x_t, batch.r, batch.t, batch.labels,
                          dx=direction, dr=0.0, dt=1.0, record=True)
    target = batch.xdot - (batch.t - batch.r)[:, None] * xi
    return _regression(net, net.manifold, u, tape, target)


def rfm_loss(net: VelocityNet, batch: TrainBatch) -> Loss:
    """Riemannian flow matching baseline: the net is queried at r = t."""
    u, tape = net.forward(batch.x_t, batch.t, batch.t, batch.labels, record=True)
    return _regression(net, net.manifold, u, tape, batch.xdot)


def grad_cosine(g1, g2) -> float:
    n1, n2 = np.linalg.norm(g1), np.linalg.norm(g2)
    if n1 == 0.0 or n2 == 0.0:
        return 0.0
    return float(np.clip(np.dot(g1, g2) / (n1 * n2), -1.0, 1.0))


def pcgrad_combine(g1, g2, eps: float = 1e-12):
    """Two-task PCGrad. Returns (combined gradient, cosine(g1, g2), projected?)."""
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    if g1.shape != g2.shape:
        raise InvalidArgument("gradients must have equal length")
    if eps <= 0:
        raise InvalidArgument("eps must be positive")
    dot = float(np.dot(g1, g2))
    cos = grad_cosine(g1, g2)
    if dot >= 0.0:
        return g1 + g2, cos, False
    # eps floors the squared norms so the projection is exact whenever it is defined.
    g1p = g1 - (dot / max(float(np.dot(g2, g2)), eps)) * g2
    g2p = g2 - (dot / max(float(np.dot(g1, g1)), eps)) * g1
    return g1p + g2p, cos, True
