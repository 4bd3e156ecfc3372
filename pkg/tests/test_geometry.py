import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmflow.errors import CutLocus, InvalidArgument, ScheduleSingularity
from rmflow.geometry import (
    SO3, Euclidean, Sphere, Torus, geodesic_interpolate, hat, manifold_from_spec, pairwise_dist,
    path_velocity,
)

from .conftest import MANIFOLDS, off_cut_pairs, random_tangent


def rot_z(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).reshape(9)


# -- worked examples ----------------------------------------------------------------


def test_sphere_quarter_great_circle():
    m = Sphere(3)
    y = m.exp(np.array([0.0, 0.0, 1.0]), np.array([math.pi / 2, 0.0, 0.0]))
    np.testing.assert_allclose(y, [1.0, 0.0, 0.0], atol=1e-15)


@pytest.mark.parametrize("m", MANIFOLDS, ids=repr)
def test_exp_of_zero_is_identity(m, rng):
    x = m.random_uniform(4, rng)
    np.testing.assert_allclose(m.exp(x, np.zeros_like(x)), x, atol=1e-14)


def test_torus_exp_wraps():
    y = Torus(2).exp(np.array([6.2, 0.1]), np.array([0.2, 0.0]))
    np.testing.assert_allclose(y, [6.4 - 2 * math.pi, 0.1], atol=1e-14)
    assert abs(y[0] - 0.11681469) < 1e-8


def test_torus_log_crosses_zero():
    v = Torus(1).log(np.array([0.1]), np.array([2 * math.pi - 0.1]))
    np.testing.assert_allclose(v, [-0.2], atol=1e-14)


def test_so3_log_of_z_rotation():
    m = SO3()
    v = m.log(np.eye(3).reshape(9), rot_z(0.5))
    omega = v.reshape(3, 3)
    np.testing.assert_allclose(omega, hat(np.array([0.0, 0.0, 0.5])), atol=1e-15)
    assert m.norm(None, v) == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("m", MANIFOLDS, ids=repr)
def test_log_of_self_is_zero(m, rng):
    x = m.random_uniform(5, rng)
    np.testing.assert_allclose(m.log(x, x), 0.0, atol=1e-14)
    np.testing.assert_allclose(m.dist(x, x), 0.0, atol=1e-7)


def test_distance_examples():
    assert Sphere(3).dist(np.array([1.0, 0, 0]), np.array([0.0, 1, 0])) == pytest.approx(math.pi / 2)
    d = Torus(2).dist(np.zeros(2), np.array([math.pi, math.pi]))
    assert d == pytest.approx(math.pi * math.sqrt(2), abs=1e-14)


def test_projection_examples():
    x = np.array([0.0, 0.0, 1.0])
    np.testing.assert_allclose(Sphere(3).proj_tangent(x, np.ones(3)), [1.0, 1.0, 0.0])
    np.testing.assert_allclose(Torus(2).proj_tangent(np.zeros(2), np.array([0.3, -0.4])), [0.3, -0.4])
    np.testing.assert_allclose(SO3().proj_tangent(np.eye(3).reshape(9), np.eye(3).reshape(9)), 0.0)


@pytest.mark.parametrize("m", MANIFOLDS, ids=repr)
def test_projection_is_idempotent(m, rng):
    x = m.random_uniform(20, rng)
    v = random_tangent(m, x, rng)
    np.testing.assert_allclose(m.proj_tangent(x, v), v, atol=1e-12)


def test_transport_examples(rng):
    m = Sphere(3)
    y = m.transport(np.array([0.0, 0, 1]), np.array([1.0, 0, 0]), np.array([0.0, 1, 0]))
    np.testing.assert_allclose(y, [0.0, 1.0, 0.0], atol=1e-15)
    t = Torus(3)
    x, z = t.random_uniform(3, rng), t.random_uniform(3, rng)
    v = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(t.transport(x, z, v), v)


@pytest.mark.parametrize("m", MANIFOLDS, ids=repr)
def test_transport_to_self(m, rng):
    x = m.random_uniform(5, rng)
    v = random_tangent(m, x, rng)
    np.testing.assert_allclose(m.transport(x, x, v), v, atol=1e-14)


def ladder_transport(m, x, y, v, steps=2000):
    """Numerical transport: walk the geodesic in small steps, projecting the
    vector onto each new tangent space and restoring its length."""
    u = m.log(x, y)
    nv = m.norm(x, v)
    for k in range(1, steps + 1):
        q = m.exp(x, (k / steps) * u)
        v = m.proj_tangent(q, v)
        v = v * (nv / m.norm(q, v))[:, None]
    return v


def test_sphere_transport_matches_ladder(rng):
    m = Sphere(3)
    x, y = off_cut_pairs(m, 6, rng, margin=0.5)
    v = random_tangent(m, x, rng)
    np.testing.assert_allclose(m.transport(x, y, v), ladder_transport(m, x, y, v), atol=2e-3)


def test_so3_transport_matches_ladder(rng):
    m = SO3()
    x, y = off_cut_pairs(m, 4, rng, margin=0.5)
    v = random_tangent(m, x, rng)
    np.testing.assert_allclose(m.transport(x, y, v), ladder_transport(m, x, y, v), atol=2e-3)


def test_geodesic_interpolation_endpoints_and_midpoint(rng):
    m = Sphere(3)
    x0, x1 = np.array([1.0, 0, 0]), np.array([0.0, 1, 0])
    np.testing.assert_allclose(geodesic_interpolate(m, x0, x1, 0.0), x1, atol=1e-15)
    np.testing.assert_allclose(geodesic_interpolate(m, x0, x1, 1.0), x0, atol=1e-15)
    mid = geodesic_interpolate(m, x0, x1, 0.5)
    np.testing.assert_allclose(mid, [1 / math.sqrt(2), 1 / math.sqrt(2), 0], atol=1e-15)
    for mm in MANIFOLDS:
        a, b = off_cut_pairs(mm, 10, rng)
        assert np.max(mm.dist(geodesic_interpolate(mm, a, b, np.ones(len(a))), a)) < 1e-8


def test_path_velocity_examples(rng):
    m = Sphere(3)
    x0, x1 = np.array([1.0, 0, 0]), np.array([0.0, 1, 0])
    v = path_velocity(m, x0, x1, 0.0)
    np.testing.assert_allclose(v, m.log(x0, x1))
    assert m.norm(x0, v) == pytest.approx(math.pi / 2)
    e = Euclidean(4)
    a, b = rng.standard_normal((2, 7, 4))
    t = rng.uniform(0, 0.99, 7)
    xt = geodesic_interpolate(e, a, b, 1 - t)
    np.testing.assert_allclose(path_velocity(e, xt, b, t), b - a, atol=1e-12)


def test_path_velocity_singularity():
    m = Sphere(3)
    with pytest.raises(ScheduleSingularity):
        path_velocity(m, np.array([1.0, 0, 0]), np.array([0.0, 1, 0]), 1.0)


@pytest.mark.parametrize("m", MANIFOLDS, ids=repr)
def test_finite_difference_path_velocity(m, rng):
    x0, x1 = off_cut_pairs(m, 20, rng, margin=0.3)
    t = rng.uniform(0.05, 0.9, len(x0))
    h = 1e-4
    xt = geodesic_interpolate(m, x0, x1, 1 - t)
    xth = geodesic_interpolate(m, x0, x1, 1 - (t + h))
    fd = m.log(xt, xth) / h
    v = path_velocity(m, xt, x1, t)
    rel = m.norm(xt, fd - v) / np.maximum(m.norm(xt, v), 1e-12)
    assert rel.max() <= 1e-2


def test_cut_locus_raises():
    with pytest.raises(CutLocus):
        Sphere(3).log(np.array([0.0, 0, 1]), np.array([0.0, 0, -1]))
    with pytest.raises(CutLocus):
        SO3().log(np.eye(3).reshape(9), rot_z(math.pi))


def test_dimension_mismatch():
    with pytest.raises(InvalidArgument):
        Sphere(3).exp(np.zeros(4), np.zeros(4))
    with pytest.raises(InvalidArgument):
        Torus(2).log(np.zeros(2), np.zeros(3))


def test_invalid_kinds():
    with pytest.raises(InvalidArgument):
        Sphere(1)
    with pytest.raises(InvalidArgument):
        Torus(0)
    assert manifold_from_spec("sphere:5") == Sphere(5)
    assert manifold_from_spec("so3") == SO3()
    with pytest.raises(InvalidArgument):
        manifold_from_spec("hyperbolic:3")


def test_random_uniform_invariants(rng):
    x = Sphere(3).random_uniform(100_000, rng)
    assert np.max(Sphere(3).point_error(x)) < 1e-12
    assert np.linalg.norm(x.mean(axis=0)) < 0.02
    r = SO3().random_uniform(1000, rng)
    assert np.max(SO3().point_error(r)) < 1e-12
    t = Torus(3).random_uniform(1000, rng)
    assert np.all((t >= 0) & (t < 2 * math.pi))


def test_so3_haar_angle_distribution(rng):
    # Haar measure: rotation angle has density (1 - cos theta) / pi, mean pi/2 + 2/pi.
    r = SO3().random_uniform(200_000, rng)
    theta = SO3().dist(np.eye(3).reshape(9), r)
    assert theta.mean() == pytest.approx(math.pi / 2 + 2 / math.pi, abs=0.01)


def test_pairwise_dist_matches_loop(rng):
    m = SO3()
    x, y = m.random_uniform(5, rng), m.random_uniform(4, rng)
    d = pairwise_dist(m, x, y)
    for i in range(5):
        for j in range(4):
            assert d[i, j] == m.dist(x[i], y[j])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(0, len(MANIFOLDS) - 1))
def test_exp_output_is_on_manifold(seed, k):
    m = MANIFOLDS[k]
    rng = np.random.default_rng(seed)
    x = m.random_uniform(8, rng)
    v = random_tangent(m, x, rng) * 3.0
    assert np.all(m.is_point(m.exp(x, v), 1e-9))
