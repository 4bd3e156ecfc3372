import numpy as np
import pytest

from rmflow.geometry import SO3, Euclidean, Sphere, Torus

MANIFOLDS = [Euclidean(3), Sphere(3), Sphere(6), Torus(2), SO3()]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_tangent(m, x, rng, max_norm=None):
    v = m.proj_tangent(x, rng.standard_normal(x.shape))
    if max_norm is not None:
        nv = m.norm(x, v)
        scale = np.minimum(1.0, max_norm / np.maximum(nv, 1e-300))
        v = v * scale[..., None]
    return v


def off_cut_pairs(m, n, rng, margin=0.05):
    """Random point pairs kept away from the cut locus."""
    x = m.random_uniform(n, rng)
    y = m.random_uniform(n, rng)
    if isinstance(m, (Sphere, SO3)):
        keep = m.dist(x, y) < np.pi - margin
        x, y = x[keep], y[keep]
    return x, y


# -- acceptance report --------------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    """Collects (criterion, passed, detail) rows for the end-of-run report."""
    return pytestconfig.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config.stash.get(_ACCEPTANCE, [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(rows, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'}  {detail}")
