import numpy as np
import pytest
from scipy import integrate

from ebgqd.analysis import models

RNG = np.random.default_rng(2024)


def fd_jacobian(f, p, h=1e-6):
    p = np.asarray(p, dtype=float)
    cols = []
    for i in range(len(p)):
        step = h * max(abs(p[i]), 1.0)
        up, dn = p.copy(), p.copy()
        up[i] += step
        dn[i] -= step
        cols.append((f(up) - f(dn)) / (2 * step))
    return np.column_stack(cols)


def assert_jacobian(model, points, t):
    for p in points:
        value, jac = model(t, p)
        num = fd_jacobian(lambda q: model(t, q)[0], p)
        scale = np.maximum(np.abs(num), np.abs(jac)).max(axis=0) + 1e-300
        assert np.all(np.abs(jac - num) <= 1e-5 * scale), p


T = np.linspace(-3.0, 12.0, 301)


def test_decay_irf_jacobian():
    pts = [(RNG.uniform(0.3, 5), RNG.uniform(10, 1e4), RNG.uniform(-0.5, 1), RNG.uniform(0, 50)) for _ in range(20)]
    for sigma in (0.0, 0.05):
        # keep the kink of the bare exponential away from the sample points
        t = T + 0.0123 if sigma == 0 else T
        assert_jacobian(lambda x, p: models.decay_irf(x, p, sigma), pts, t)
    assert_jacobian(lambda x, p: models.decay_irf(x, p, 0.05, period=13.158), pts[:5], T)


def test_two_sided_exp_jacobian():
    t = T + 0.0071
    pts = [(RNG.uniform(1, 100), RNG.uniform(0.3, 3), RNG.uniform(0.3, 3), RNG.uniform(-0.5, 0.5), RNG.uniform(0, 50)) for _ in range(20)]
    for sign in (1.0, -1.0):
        assert_jacobian(lambda x, p: models.two_sided_exp(x, p, sign), pts, t)


def test_hom_dip_jacobian():
    pts = [(RNG.uniform(1, 100), RNG.uniform(0.3, 3), RNG.uniform(-0.5, 0.5), RNG.uniform(100, 200), RNG.uniform(0.01, 0.2)) for _ in range(20)]
    assert_jacobian(lambda x, p: models.hom_dip(x, p), pts, T)
    assert_jacobian(lambda x, p: models.hom_dip(x, p, 0.03), [p[:4] for p in pts], T)


def test_telegraph_jacobian():
    t = np.linspace(0, 5e6, 60)
    pts = [(RNG.uniform(0.1, 2), RNG.uniform(1e5, 1e6), RNG.uniform(0.8, 1.2)) for _ in range(20)]
    assert_jacobian(models.telegraph_envelope, pts, t)


@pytest.mark.parametrize("x", [-0.3, 0.0, 0.1, 0.8, 3.0])
def test_exp_gauss_matches_numerical_convolution(x):
    tau, sigma = 0.775, 0.05
    f = lambda u: np.exp(-u / tau) * np.exp(-0.5 * ((x - u) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
    lo = max(x - 10 * sigma, 0.0)
    ref = integrate.quad(f, lo, lo + 20 * sigma, limit=200, epsabs=0)[0] + integrate.quad(f, lo + 20 * sigma, 60, epsabs=0)[0]
    assert models.exp_gauss(np.array([x]), tau, sigma)[0][0] == pytest.approx(ref, rel=1e-7, abs=1e-12)


def test_exp_gauss_is_stable_far_from_the_edge():
    g = models.exp_gauss(np.array([-50.0, 200.0]), 0.775, 0.02)[0]
    assert np.all(np.isfinite(g)) and g[0] == 0.0


def test_exp_gauss_narrow_kernel_limit():
    x = np.array([0.2, 1.0, 2.5])
    narrow = models.exp_gauss(x, 0.775, 1e-6)[0]
    bare = models.exp_gauss(x, 0.775, 0.0)[0]
    assert np.allclose(narrow, bare, rtol=1e-5)
