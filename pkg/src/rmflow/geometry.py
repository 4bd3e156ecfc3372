"""Closed-form Riemannian primitives for the manifolds the models live on.

Points and tangent vectors are plain float64 arrays in ambient coordinates with
the manifold dimension on the last axis, so every method broadcasts over
leading batch axes:

* ``Euclidean(d)``: vectors in R^d.
* ``Sphere(d)``: unit vectors in R^d (the sphere S^{d-1}).
* ``Torus(n)``: angles in [0, 2*pi)^n with the flat metric.
* ``SO3()``: row-major flattened 3x3 rotation matrices (9 numbers), metric
  <R A, R B> = tr(A^T B) / 2 so a rotation by theta is at distance theta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CutLocus, InvalidArgument, ScheduleSingularity

TWO_PI = 2.0 * math.pi
SMALL_NORM = 1e-12
SPHERE_CUT_TOL = 1e-9
SO3_CUT_TOL = 1e-6


class Manifold:
    """Interface shared by all manifolds. Subclasses fill in the closed forms."""

    name: str = ""
    ambient_dim: int = 0
    # Multiplier turning the ambient dot product into the Riemannian inner product.
    metric_scale: float = 1.0

    # -- bookkeeping -----------------------------------------------------
    @property
    def spec(self) -> str:
        return f"{self.name}:{self.ambient_dim}"

    def __eq__(self, other):
        return isinstance(other, Manifold) and self.spec == other.spec

    def __hash__(self):
        return hash(self.spec)

    def __repr__(self):
        return f"{type(self).__name__}({self.ambient_dim})"

    def _check(self, *arrays):
        out = []
        for a in arrays:
            a = np.asarray(a, dtype=np.float64)
            if a.ndim == 0 or a.shape[-1] != self.ambient_dim:
                raise InvalidArgument(
                    f"{self.spec}: expected trailing dimension {self.ambient_dim}, got shape {a.shape}"
                )
            out.append(a)
        return out if len(out) > 1 else out[0]

    # -- metric ------------------------------------------------------------
    def inner(self, x, u, v):
        u, v = self._check(u, v)
        return self.metric_scale * np.sum(u * v, axis=-1)

    def norm(self, x, v):
        return np.sqrt(np.maximum(self.inner(x, v, v), 0.0))

    # -- to be provided by subclasses -------------------------------------
    def exp(self, x, v):
        raise NotImplementedError

    def log(self, x, y):
        raise NotImplementedError

    def dist(self, x, y):
        raise NotImplementedError

    def proj_tangent(self, x, w):
        raise NotImplementedError

    def transport(self, x, y, v):
        raise NotImplementedError

    def random_uniform(self, n: int, rng: np.random.Generator):
        raise NotImplementedError

    def project_point(self, x):
        """Map an ambient array back onto the manifold (renormalise, wrap, ...)."""
        return self._check(x).copy()

    def point_error(self, x):
        """Per-row violation of the point invariant (0 for a valid point)."""
        x = self._check(x)
        return np.zeros(x.shape[:-1])

    def tangent_error(self, x, v):
        v = self._check(v)
        return np.zeros(v.shape[:-1])

    def is_point(self, x, tol: float = 1e-8):
        return self.point_error(x) <= tol

    def is_tangent(self, x, v, tol: float = 1e-8):
        return self.tangent_error(x, v) <= tol


# ---------------------------------------------------------------------------


class Euclidean(Manifold):
    name = "euclidean"

    def __init__(self, d: int):
        if d < 1:
            raise InvalidArgument("Euclidean dimension must be >= 1")
        self.ambient_dim = int(d)

    def exp(self, x, v):
        x, v = self._check(x, v)
        return x + v

    def log(self, x, y):
        x, y = self._check(x, y)
        return y - x

    def dist(self, x, y):
        x, y = self._check(x, y)
        return np.linalg.norm(y - x, axis=-1)

    def proj_tangent(self, x, w):
        x, w = self._check(x, w)
        return np.broadcast_to(w, np.broadcast_shapes(x.shape, w.shape)).copy()

    def transport(self, x, y, v):
        x, y, v = self._check(x, y, v)
        return v.copy()

    def random_uniform(self, n, rng):
        # Lebesgue "uniform" is improper; the source distribution is N(0, I).
        return rng.standard_normal((n, self.ambient_dim))


class Sphere(Manifold):
    """Unit sphere S^{d-1} embedded in R^d."""

    name = "sphere"

    def __init__(self, d: int):
        if d < 2:
            raise InvalidArgument("Sphere requires ambient dimension d >= 2")
        self.ambient_dim = int(d)

    def project_point(self, x):
        x = self._check(x)
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    def point_error(self, x):
        x = self._check(x)
        return np.abs(np.linalg.norm(x, axis=-1) - 1.0)

    def tangent_error(self, x, v):
        x, v = self._check(x, v)
        return np.abs(np.sum(x * v, axis=-1))

    def proj_tangent(self, x, w):
        x, w = self._check(x, w)
        return w - np.sum(x * w, axis=-1, keepdims=True) * x

    def exp(self, x, v):
        x, v = self._check(x, v)
        nv = np.linalg.norm(v, axis=-1, keepdims=True)
        safe = np.where(nv < SMALL_NORM, 1.0, nv)
        y = np.cos(nv) * x + np.sin(nv) * (v / safe)
        y = np.where(nv < SMALL_NORM, x, y)
        return y / np.linalg.norm(y, axis=-1, keepdims=True)

    def _angle_and_direction(self, x, y):
        c = np.sum(x * y, axis=-1, keepdims=True)
        w = y - c * x
        s = np.linalg.norm(w, axis=-1, keepdims=True)
        return np.arctan2(s, c), w, s, c

    def log(self, x, y):
        x, y = self._check(x, y)
        theta, w, s, c = self._angle_and_direction(x, y)
        if np.any(c <= -1.0 + SPHERE_CUT_TOL):
            raise CutLocus("sphere log map: points are (nearly) antipodal")
        # theta / sin(theta) written as theta / |w|; |w| = sin(theta) on the sphere.
        scale = np.where(s < SMALL_NORM, 1.0, theta / np.where(s < SMALL_NORM, 1.0, s))
        return scale * w

    def dist(self, x, y):
        x, y = self._check(x, y)
        theta, *_ = self._angle_and_direction(x, y)
        return theta[..., 0]

    def transport(self, x, y, v):
        x, y, v = self._check(x, y, v)
        u = self.log(x, y)
        theta = np.linalg.norm(u, axis=-1, keepdims=True)
        e = u / np.where(theta < SMALL_NORM, 1.0, theta)
        ev = np.sum(e * v, axis=-1, keepdims=True)
        out = v + ev * ((np.cos(theta) - 1.0) * e - np.sin(theta) * x)
        return np.where(theta < SMALL_NORM, v, out)

    def random_uniform(self, n, rng):
        z = rng.standard_normal((n, self.ambient_dim))
        return z / np.linalg.norm(z, axis=-1, keepdims=True)


class Torus(Manifold):
    """Flat torus [0, 2*pi)^n."""

    name = "torus"

    def __init__(self, n: int):
        if n < 1:
            raise InvalidArgument("Torus requires N >= 1")
        self.ambient_dim = int(n)

    @staticmethod
    def wrap(x):
        out = np.mod(x, TWO_PI)
        # np.mod can round a tiny negative input up to exactly 2*pi.
        return np.where(out >= TWO_PI, 0.0, out)

    @staticmethod
    def principal(a):
        return np.arctan2(np.sin(a), np.cos(a))

    def project_point(self, x):
        return self.wrap(self._check(x))

    def point_error(self, x):
        x = self._check(x)
        below = np.maximum(-x, 0.0)
        above = np.maximum(x - TWO_PI, 0.0) + (x == TWO_PI)
        err = np.max(below + above, axis=-1)
        return np.where(np.all(np.isfinite(x), axis=-1), err, np.inf)

    def proj_tangent(self, x, w):
        x, w = self._check(x, w)
        return np.broadcast_to(w, np.broadcast_shapes(x.shape, w.shape)).copy()

    def exp(self, x, v):
        x, v = self._check(x, v)
        return self.wrap(x + v)

    def log(self, x, y):
        x, y = self._check(x, y)
        return self.principal(y - x)

    def dist(self, x, y):
        return np.linalg.norm(self.log(x, y), axis=-1)

    def transport(self, x, y, v):
        x, y, v = self._check(x, y, v)
        return v.copy()

    def random_uniform(self, n, rng):
        return self.wrap(rng.uniform(0.0, TWO_PI, size=(n, self.ambient_dim)))


# -- SO(3) helpers -----------------------------------------------------------


def hat(w):
    """Skew-symmetric matrix of a 3-vector (batched)."""
    w = np.asarray(w, dtype=np.float64)
    z = np.zeros(w.shape[:-1])
    return np.stack(
        [
            np.stack([z, -w[..., 2], w[..., 1]], axis=-1),
            np.stack([w[..., 2], z, -w[..., 0]], axis=-1),
            np.stack([-w[..., 1], w[..., 0], z], axis=-1),
        ],
        axis=-2,
    )


def vee(m):
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _t(m):
    return np.swapaxes(m, -1, -2)


def _sinc_terms(theta):
    """sin(t)/t and (1 - cos t)/t^2 with their small-angle limits."""
    small = theta < 1e-4
    ts = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(ts) / ts)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(ts)) / (ts * ts))
    return a, b


def so3_expm(omega):
    """Rodrigues' formula for skew matrices (batched, shape (..., 3, 3))."""
    theta = np.linalg.norm(omega, axis=(-2, -1)) / math.sqrt(2.0)
    a, b = _sinc_terms(theta)
    eye = np.broadcast_to(np.eye(3), omega.shape)
    return eye + a[..., None, None] * omega + b[..., None, None] * (omega @ omega)


def so3_logm(q, check_cut: bool = True):
    """Principal logarithm of rotation matrices; returns (skew matrix, angle)."""
    skew = 0.5 * (q - _t(q))
    s = np.linalg.norm(vee(skew), axis=-1)
    c = 0.5 * (np.trace(q, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)
    if check_cut and np.any(theta >= math.pi - SO3_CUT_TOL):
        raise CutLocus("SO(3) log map: relative rotation angle too close to pi")
    small = s < 1e-8
    factor = np.where(small, 1.0 + theta * theta / 6.0, theta / np.where(small, 1.0, s))
    return factor[..., None, None] * skew, theta


def polar(m):
    """Nearest rotation matrix (symmetric orthogonalisation)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    neg = np.linalg.det(r) < 0
    if np.any(neg):
        u = u.copy()
        u[neg, :, -1] *= -1.0
        r = u @ vt
    return r


class SO3(Manifold):
    name = "so3"
    ambient_dim = 9
    metric_scale = 0.5

    def __init__(self, *_):
        pass

    @property
    def spec(self) -> str:
        return "so3"

    def __repr__(self):
        return "SO3()"

    @staticmethod
    def mat(x):
        return np.asarray(x).reshape(np.shape(x)[:-1] + (3, 3))

    @staticmethod
    def flat(m):
        return m.reshape(m.shape[:-2] + (9,))

    def project_point(self, x):
        x = self._check(x)
        return self.flat(polar(self.mat(x)))

    def point_error(self, x):
        r = self.mat(self._check(x))
        orth = np.linalg.norm(_t(r) @ r - np.eye(3), axis=(-2, -1))
        return np.maximum(orth, np.abs(np.linalg.det(r) - 1.0))

    def tangent_error(self, x, v):
        x, v = self._check(x, v)
        a = _t(self.mat(x)) @ self.mat(v)
        return np.max(np.abs(a + _t(a)), axis=(-2, -1))

    def proj_tangent(self, x, w):
        x, w = self._check(x, w)
        r, m = self.mat(x), self.mat(w)
        return self.flat(r @ (0.5 * (_t(r) @ m - _t(m) @ r)))

    def exp(self, x, v):
        x, v = self._check(x, v)
        r = self.mat(x)
        a = _t(r) @ self.mat(v)
        omega = 0.5 * (a - _t(a))
        out = r @ so3_expm(omega)
        return self.flat(polar(out))

    def log(self, x, y):
        x, y = self._check(x, y)
        r = self.mat(x)
        omega, _ = so3_logm(_t(r) @ self.mat(y))
        return self.flat(r @ omega)

    def dist(self, x, y):
        x, y = self._check(x, y)
        _, theta = so3_logm(_t(self.mat(x)) @ self.mat(y), check_cut=False)
        return theta

    def transport(self, x, y, v):
        """Levi-Civita transport along the geodesic x -> y.

        For the bi-invariant metric, V = R A travels to S exp(-W/2) A exp(W/2)
        where W = log(R^T S).
        """
        x, y, v = self._check(x, y, v)
        r, s = self.mat(x), self.mat(y)
        omega, _ = so3_logm(_t(r) @ s)
        a = _t(r) @ self.mat(v)
        half = so3_expm(0.5 * omega)
        return self.flat(s @ _t(half) @ a @ half)

    def random_uniform(self, n, rng):
        z = rng.standard_normal((n, 3, 3))
        q, rr = np.linalg.qr(z)
        d = np.sign(np.diagonal(rr, axis1=-2, axis2=-1))
        d = np.where(d == 0, 1.0, d)
        q = q * d[:, None, :]
        neg = np.linalg.det(q) < 0
        q[neg, :, 0] *= -1.0
        return self.flat(q)


# ---------------------------------------------------------------------------


def manifold_from_spec(spec: str) -> Manifold:
    """Parse ``"sphere:3"``, ``"torus:2"``, ``"euclidean:4"`` or ``"so3"``."""
    if isinstance(spec, Manifold):
        return spec
    name, _, dim = str(spec).strip().lower().partition(":")
    try:
        if name == "so3":
            if dim not in ("", "9"):
                raise InvalidArgument("so3 has a fixed ambient dimension of 9")
            return SO3()
        d = int(dim)
    except ValueError as exc:
        raise InvalidArgument(f"bad manifold spec {spec!r}") from exc
    kinds = {"sphere": Sphere, "torus": Torus, "euclidean": Euclidean}
    if name not in kinds:
        raise InvalidArgument(f"unknown manifold {name!r}")
    return kinds[name](d)


@dataclass(frozen=True)
class LinearSchedule:
    """kappa(t) = 1 - t, the usual geodesic interpolation schedule."""

    name: str = "linear"

    def kappa(self, t):
        return 1.0 - np.asarray(t, dtype=np.float64)

    def dkappa(self, t):
        return -np.ones_like(np.asarray(t, dtype=np.float64))


LINEAR = LinearSchedule()


def geodesic_interpolate(m: Manifold, x0, x1, kappa):
    """Exp_{x1}(kappa * Log_{x1}(x0)); kappa=1 gives x0 and kappa=0 gives x1."""
    x0, x1 = m._check(x0, x1)
    v0 = m.log(x1, x0)
    k = np.asarray(kappa, dtype=np.float64)
    if k.ndim > 0:
        k = k.reshape(k.shape + (1,) * (v0.ndim - k.ndim))
    return m.exp(x1, k * v0)


def path_velocity(m: Manifold, x_t, x1, t, schedule=LINEAR):
    """Velocity of the geodesic interpolant: -kappa'(t)/kappa(t) * Log_{x_t}(x1)."""
    t = np.asarray(t, dtype=np.float64)
    k = schedule.kappa(t)
    if np.any(k <= 1e-8):
        raise ScheduleSingularity("kappa(t) vanishes; t is too close to 1")
    coef = -schedule.dkappa(t) / k
    lg = m.log(x_t, x1)
    if coef.ndim > 0:
        coef = coef.reshape(coef.shape + (1,) * (lg.ndim - coef.ndim))
    return coef * lg


def pairwise_dist(m: Manifold, x, y):
    """Matrix of geodesic distances d(x_i, y_j)."""
    x, y = m._check(x, y)
    return m.dist(x[:, None, :], y[None, :, :])
