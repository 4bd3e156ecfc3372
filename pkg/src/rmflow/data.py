"""Synthetic datasets per manifold, CSV ingestion and deterministic splits.

All randomness comes from ``numpy.random.Generator(PCG64(seed))``; the split is
a single seeded permutation, so the same spec gives the same splits on every
platform.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .errors import InvalidSpec, InvariantViolation, ParseError
from .geometry import SO3, Euclidean, Manifold, Sphere, Torus, hat, manifold_from_spec, so3_expm

GENERATORS = (
    "sphere_vmf_mixture", "sphere_ring", "torus_wrapped_mixture", "so3_fisher", "so3_line", "csv",
)


@dataclass
class DatasetSpec:
    name: str
    manifold: str
    generator: str
    n: int = 10_000
    params: dict = field(default_factory=dict)
    split: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise InvalidSpec(f"unknown generator {self.generator!r}")
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise InvalidSpec("split fractions must be three nonnegative numbers summing to 1")
        if self.generator != "csv" and self.n < 10:
            raise InvalidSpec("n must be >= 10")
        try:
            manifold_from_spec(self.manifold)
        except ValueError as exc:
            raise InvalidSpec(str(exc)) from exc

    def to_dict(self):
        return {
            "name": self.name, "manifold": self.manifold, "generator": self.generator,
            "n": self.n, "params": dict(self.params), "split": list(self.split), "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "split" in d:
            d["split"] = tuple(d["split"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from exc


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    train_labels: np.ndarray | None = None
    val_labels: np.ndarray | None = None
    test_labels: np.ndarray | None = None


# -- samplers -----------------------------------------------------------------


def sample_vmf(mu, kappa: float, n: int, rng: np.random.Generator):
    """Von Mises-Fisher draws on S^{d-1} (Wood's rejection scheme)."""
    mu = np.asarray(mu, dtype=np.float64)
    mu = mu / np.linalg.norm(mu)
    d = mu.size
    if kappa <= 0:
        z = rng.standard_normal((n, d))
        return z / np.linalg.norm(z, axis=1, keepdims=True)
    b = (-2.0 * kappa + math.sqrt(4.0 * kappa ** 2 + (d - 1) ** 2)) / (d - 1)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + (d - 1) * math.log(1.0 - x0 ** 2)
    w = np.empty(n)
    filled = 0
    while filled < n:
        m = 2 * (n - filled) + 16
        z = rng.beta((d - 1) / 2.0, (d - 1) / 2.0, size=m)
        cand = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=m)
        ok = kappa * cand + (d - 1) * np.log(1.0 - x0 * cand) - c >= np.log(u)
        take = cand[ok][: n - filled]
        w[filled: filled + take.size] = take
        filled += take.size
    # uniform direction orthogonal to mu
    v = rng.standard_normal((n, d))
    v -= (v @ mu)[:, None] * mu
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    out = w[:, None] * mu + np.sqrt(np.maximum(1.0 - w ** 2, 0.0))[:, None] * v
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def quat_to_matrix(q):
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def sample_bingham(A, n: int, rng: np.random.Generator):
    """Bingham draws, density ~ exp(-x^T A x) on the unit sphere, A >= 0 diagonal.

    Angular-central-Gaussian envelope rejection sampler (Kent, Ganeiber and
    Mardia, 2013).
    """
    lam = np.asarray(A, dtype=np.float64)
    q = lam.size
    if np.all(lam == 0):
        z = rng.standard_normal((n, q))
        return z / np.linalg.norm(z, axis=1, keepdims=True)
    b = brentq(lambda b: np.sum(1.0 / (b + 2.0 * lam)) - 1.0, 1e-12, float(q))
    omega = 1.0 + 2.0 * lam / b
    log_m = -(q - b) / 2.0 + (q / 2.0) * math.log(q / b)
    out = np.empty((n, q))
    filled = 0
    while filled < n:
        m = 2 * (n - filled) + 16
        y = rng.standard_normal((m, q)) / np.sqrt(omega)
        y /= np.linalg.norm(y, axis=1, keepdims=True)
        log_ratio = -(y * y) @ lam + (q / 2.0) * np.log((y * y) @ omega) - log_m
        ok = np.log(rng.uniform(size=m)) < log_ratio
        take = y[ok][: n - filled]
        out[filled: filled + len(take)] = take
        filled += len(take)
    return out


def sample_matrix_fisher(mode, concentration: float, n: int, rng: np.random.Generator):
    """Matrix Fisher draws with parameter F = concentration * mode.

    For Q = mode^T R the density is ~ exp(c tr Q) = exp(c (4 q_w^2 - 1)) in
    quaternion coordinates, i.e. a Bingham law with A = diag(0, 4c, 4c, 4c).
    """
    c = float(concentration)
    quats = sample_bingham(np.array([0.0, 4 * c, 4 * c, 4 * c]), n, rng)
    return np.asarray(mode, dtype=np.float64).reshape(3, 3) @ quat_to_matrix(quats)


# -- generators -----------------------------------------------------------------


def _ring_frame(d: int):
    e = np.zeros((2, d))
    e[0, 0] = 1.0
    e[1, 1] = 1.0
    return e


def gen_sphere_ring(d: int, n: int, rng, noise: float = 0.05):
    """Uniform angle on the great circle spanned by e1, e2, plus tangent Gaussian noise."""
    e = _ring_frame(d)
    ang = rng.uniform(0.0, 2.0 * math.pi, size=n)
    x = np.cos(ang)[:, None] * e[0] + np.sin(ang)[:, None] * e[1]
    if noise > 0:
        m = Sphere(d)
        v = m.proj_tangent(x, noise * rng.standard_normal((n, d)))
        x = m.exp(x, v)
    return x


def gen_sphere_vmf_mixture(d: int, n: int, rng, components):
    """Labelled mixture; each component is {"mu": [...], "kappa": k, "weight": w}."""
    weights = np.array([c.get("weight", 1.0) for c in components], dtype=np.float64)
    weights /= weights.sum()
    labels = rng.choice(len(components), size=n, p=weights)
    x = np.empty((n, d))
    for k, comp in enumerate(components):
        idx = np.flatnonzero(labels == k)
        if idx.size:
            x[idx] = sample_vmf(comp["mu"], comp["kappa"], idx.size, rng)
    return x, labels


def gen_torus_wrapped_mixture(N: int, n: int, rng, components):
    """Labelled wrapped-normal mixture; components {"center": [...], "std": s, "weight": w}."""
    weights = np.array([c.get("weight", 1.0) for c in components], dtype=np.float64)
    weights /= weights.sum()
    labels = rng.choice(len(components), size=n, p=weights)
    centers = np.array([c["center"] for c in components], dtype=np.float64)
    stds = np.array([c.get("std", 0.3) for c in components], dtype=np.float64)
    if centers.shape[1] != N:
        raise InvalidSpec("torus component centers must have N coordinates")
    x = centers[labels] + stds[labels, None] * rng.standard_normal((n, N))
    return Torus.wrap(x), labels


def gen_so3_fisher(n: int, rng, mode=None, concentration: float = 5.0):
    mode = np.eye(3) if mode is None else np.asarray(mode, dtype=np.float64).reshape(3, 3)
    return SO3.flat(sample_matrix_fisher(mode, concentration, n, rng))


def gen_so3_line(n: int, rng, noise: float = 0.05, axis=(0.0, 0.0, 1.0), length: float = 2.0):
    """Points along the one-parameter subgroup exp(s * hat(axis)), s ~ U(-length/2, length/2),
    each perturbed by exp(hat(noise * N(0, I)))."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    s = rng.uniform(-length / 2, length / 2, size=n)
    base = so3_expm(hat(s[:, None] * axis))
    jitter = so3_expm(hat(noise * rng.standard_normal((n, 3))))
    return SO3().project_point(SO3.flat(base @ jitter))


def _generate_all(spec: DatasetSpec):
    m = manifold_from_spec(spec.manifold)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    p = dict(spec.params)
    g = spec.generator
    labels = None
    try:
        if g == "sphere_ring":
            _need(m, Sphere, g)
            x = gen_sphere_ring(m.ambient_dim, spec.n, rng, p.get("noise", 0.05))
        elif g == "sphere_vmf_mixture":
            _need(m, Sphere, g)
            x, labels = gen_sphere_vmf_mixture(m.ambient_dim, spec.n, rng, p["components"])
        elif g == "torus_wrapped_mixture":
            _need(m, Torus, g)
            x, labels = gen_torus_wrapped_mixture(m.ambient_dim, spec.n, rng, p["components"])
        elif g == "so3_fisher":
            _need(m, SO3, g)
            x = gen_so3_fisher(spec.n, rng, p.get("mode"), p.get("concentration", 5.0))
        elif g == "so3_line":
            _need(m, SO3, g)
            x = gen_so3_line(spec.n, rng, p.get("noise", 0.05), p.get("axis", (0, 0, 1)),
                             p.get("length", 2.0))
        else:
            x, labels = ingest_csv(p["path"], m, p.get("layout", "ambient"), with_labels=True)
            if labels is not None and np.all(labels == -1):
                labels = None
    except KeyError as exc:
        raise InvalidSpec(f"generator {g} is missing parameter {exc}") from exc
    return m, x, labels


def _need(m, kind, g):
    if not isinstance(m, kind):
        raise InvalidSpec(f"generator {g} does not match manifold {m.spec}")


def split_counts(n: int, split=(0.8, 0.1, 0.1)):
    n_train = int(round(split[0] * n))
    n_val = int(round(split[1] * n))
    return n_train, n_val, n - n_train - n_val


def generate(spec: DatasetSpec) -> Split:
    """Deterministic (train, val, test) split of the dataset described by ``spec``."""
    m, x, labels = _generate_all(spec)
    bad = ~m.is_point(x, 1e-8)
    if np.any(bad):
        raise InvalidSpec(f"{int(bad.sum())} generated points violate the manifold invariant")
    n = len(x)
    order = np.random.Generator(np.random.PCG64(spec.seed + 0x5EED)).permutation(n)
    n_train, n_val, _ = split_counts(n, spec.split)
    parts = np.split(order, [n_train, n_train + n_val])
    sets = [x[p] for p in parts]
    labs = [labels[p] for p in parts] if labels is not None else [None] * 3
    return Split(*sets, *labs)


# -- CSV --------------------------------------------------------------------------

LAYOUTS = ("latlon_degrees", "ambient", "angles")


def latlon_to_xyz(lat_deg, lon_deg):
    lat = np.radians(lat_deg)
    lon = np.radians(lon_deg)
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)


def xyz_to_latlon(x):
    """Unit 3-vectors to (lat, lon) in degrees, lon in (-180, 180]."""
    x = np.asarray(x, dtype=np.float64)
    lat = np.degrees(np.arcsin(np.clip(x[..., 2], -1.0, 1.0)))
    lon = np.degrees(np.arctan2(x[..., 1], x[..., 0]))
    return np.stack([lat, lon], axis=-1)


def ingest_csv(path, m: Manifold, layout: str = "ambient", with_labels: bool = False, tol: float = 1e-6):
    """Read one point per row; an optional trailing integer column holds labels (-1 = none).

    The first line is treated as a header when none of its fields parse as
    numbers. Lines starting with '#' and blank lines are skipped.
    """
    if layout not in LAYOUTS:
        raise InvalidSpec(f"unknown layout {layout!r}")
    if layout == "latlon_degrees" and not (isinstance(m, Sphere) and m.ambient_dim == 3):
        raise InvalidSpec("latlon_degrees layout needs sphere:3")
    if layout == "angles" and not isinstance(m, Torus):
        raise InvalidSpec("angles layout needs a torus")
    width = 2 if layout == "latlon_degrees" else m.ambient_dim
    points, labels = [], []
    with open(Path(path), newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            vals = []
            for cell in row:
                try:
                    vals.append(float(cell))
                except ValueError:
                    vals.append(None)
            if lineno == 1 and all(v is None for v in vals):
                continue
            if any(v is None for v in vals):
                raise ParseError(lineno, f"non-numeric field in {row!r}")
            if len(vals) == width:
                coords, lab = vals, -1
            elif len(vals) == width + 1 and float(vals[-1]).is_integer():
                coords, lab = vals[:-1], int(vals[-1])
            else:
                raise ParseError(lineno, f"expected {width} columns (+ optional label), got {len(vals)}")
            coords = np.asarray(coords, dtype=np.float64)
            if not np.all(np.isfinite(coords)):
                raise ParseError(lineno, "non-finite value")
            if layout == "latlon_degrees":
                lat, lon = coords
                if abs(lat) > 90.0:
                    raise InvariantViolation(lineno, "latitude outside [-90, 90]")
                p = latlon_to_xyz(lat, lon)
            elif layout == "angles":
                p = Torus.wrap(coords)
            else:
                if isinstance(m, Torus):
                    p = Torus.wrap(coords)
                elif isinstance(m, Euclidean):
                    p = coords
                else:
                    err = float(m.point_error(coords[None])[0])
                    if err > tol:
                        raise InvariantViolation(lineno, f"point off the manifold by {err:.3g}")
                    p = m.project_point(coords[None])[0]
            points.append(p)
            labels.append(lab)
    if not points:
        raise ParseError(0, "no data rows")
    x = np.vstack(points)
    if with_labels:
        return x, np.asarray(labels, dtype=np.int64)
    return x


def write_points_csv(path, x, labels=None, header_lines=()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        for i, row in enumerate(np.asarray(x)):
            vals = [repr(float(v)) for v in row]
            if labels is not None:
                vals.append(str(int(labels[i])))
            w.writerow(vals)
