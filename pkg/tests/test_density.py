import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import norm, wasserstein_distance

from densteer.density import (
    AffineMap, GaussianDensity, Grid, GridDensity, ParticleEnsemble, interpolate_grid,
    load_ensemble, load_grid_density, moments, pushforward_density, pushforward_particles,
    recover_original_density, save_ensemble, save_grid_density, wasserstein1_1d,
)
from densteer.errors import DomainExitError, SingularJacobianError
from densteer.vectorfield import Box


def grid1d(lo=-10.0, hi=10.0, n=2000):
    return Grid.from_bounds([lo], [hi], [n])


def gauss1d(grid, m=0.0, s=1.0):
    return GridDensity.from_function(grid, lambda x: norm.pdf(x[..., 0], m, s))


def test_grid_geometry():
    g = Grid.from_bounds([0, -1], [1, 1], [4, 5])
    assert g.dim == 2
    np.testing.assert_allclose(g.h, [0.25, 0.4])
    assert g.cell_volume == pytest.approx(0.1)
    assert g.centers().shape == (4, 5, 2)
    np.testing.assert_allclose(g.axes()[0], [0.125, 0.375, 0.625, 0.875])
    assert g.refine().shape == (8, 10)
    with pytest.raises(ValueError):
        Grid.from_bounds([0] * 4, [1] * 4, [2] * 4)


def test_grid_density_invariants():
    g = grid1d(0, 1, 10)
    with pytest.raises(ValueError):
        GridDensity(g, np.ones(10) * 2)
    with pytest.raises(ValueError):
        GridDensity(g, -np.ones(10))
    d, mass = GridDensity.from_values(g, np.full(10, 3.0))
    assert mass == pytest.approx(3.0)
    assert d.values.sum() * g.cell_volume == pytest.approx(1.0)
    tiny, _ = GridDensity.from_values(g, np.r_[1e-320, np.ones(9)])
    assert tiny.values[0] == 0.0


def test_gaussian_invariants():
    with pytest.raises(ValueError):
        GaussianDensity([0, 0], [[1, 0.5], [0.4, 1]])
    with pytest.raises(ValueError):
        GaussianDensity([0, 0], [[1, 0], [0, 0]])
    g = GaussianDensity([1.0, -1.0], [[2.0, 0.3], [0.3, 0.5]])
    from scipy.stats import multivariate_normal
    x = np.array([[0.2, 0.1], [1.0, -1.0]])
    np.testing.assert_allclose(g.pdf(x), multivariate_normal(g.mean, g.cov).pdf(x), rtol=1e-12)


def test_pushforward_identity():
    g = grid1d(-5, 5, 200)
    rho = gauss1d(g, 0.3, 0.7)
    sigma, factor = pushforward_density(rho, None, g)
    np.testing.assert_allclose(sigma.values, rho.values, atol=1e-12)
    assert factor == pytest.approx(1.0, abs=1e-12)


def test_pushforward_scaling():
    g = grid1d()
    sigma, factor = pushforward_density(GaussianDensity([0.0], [[1.0]]), AffineMap([[2.0]]), g)
    x = g.axes()[0]
    np.testing.assert_allclose(sigma.values, norm.pdf(x, 0, 2), atol=1e-6)
    assert factor == pytest.approx(1.0, abs=1e-6)


def test_pushforward_singular():
    g = grid1d(-1, 1, 10)
    with pytest.raises(SingularJacobianError):
        pushforward_density(GaussianDensity([0.0], [[1.0]]), AffineMap([[1e-13]]), g)


def test_paper_tau_volume_preserving(paper, rng):
    _, _, fl = paper
    x = rng.uniform(-0.5, 0.5, size=(100, 5))
    np.testing.assert_allclose(np.abs(fl.jacobian_det(x)), 1.0, atol=1e-12)


def test_particles_examples(paper):
    _, _, fl = paper
    ens = ParticleEnsemble([[1.0, 2, 3, 4, 5], [0.1, 0.2, 0.3, 0.4, 0.5]], [0.25, 0.75])
    same = pushforward_particles(ens, None)
    np.testing.assert_array_equal(same.points, ens.points)
    out = pushforward_particles(ens, fl)
    np.testing.assert_allclose(out.points[0], [-4, 2, 19, 4, 5])
    np.testing.assert_array_equal(out.weights, ens.weights)
    with pytest.raises(DomainExitError):
        pushforward_particles(ens, fl, domain=Box((-1.0,) * 5, (1.0,) * 5))


def test_particle_round_trip(paper_newton, rng):
    x = rng.uniform(-0.6, 0.6, size=(300, 5))
    z = pushforward_particles(ParticleEnsemble.uniform(x), paper_newton).points
    np.testing.assert_allclose(paper_newton.tau_inv(z), x, atol=1e-8)


def test_round_trip_2d(toy2d):
    _, _, fl = toy2d
    rho = GaussianDensity([0.2, 0.1], np.diag([0.1, 0.05]))
    xg = Grid.from_bounds([-2, -1.5], [2, 1.5], [120, 120])
    zg = Grid.from_bounds([-2, -5], [2, 5], [120, 400])
    sigma, f1 = pushforward_density(rho, fl, zg)
    back, f2 = recover_original_density(sigma, fl, xg)
    ref = GridDensity.from_function(xg, rho.pdf)
    err = np.abs(back.values - ref.values).sum() * xg.cell_volume
    assert err < 0.02
    assert 0.98 <= f1 <= 1.02 and 0.98 <= f2 <= 1.02
    # |det| = 1 + 3 x2^2 >= 1, so the peak can only drop under the pushforward
    assert sigma.values.max() <= ref.values.max() * 1.01


def test_recover_identity_exact():
    g = Grid.from_bounds([-1, -1], [1, 1], [30, 20])
    rho = GridDensity.from_function(g, GaussianDensity([0, 0], np.eye(2) * 0.2).pdf)
    back, f = recover_original_density(rho, None, g)
    np.testing.assert_allclose(back.values, rho.values, atol=1e-12)


def test_volume_preserving_keeps_peak():
    shear = AffineMap([[1.0, 0.5], [0.0, 1.0]])
    rho = GaussianDensity([0, 0], np.eye(2) * 0.1)
    g = Grid.from_bounds([-2, -2], [2, 2], [200, 200])
    sigma, _ = pushforward_density(rho, shear, g)
    assert sigma.values.max() == pytest.approx(rho.pdf(np.zeros(2)), rel=1e-2)


def test_moments_examples():
    m, c = moments(gauss1d(grid1d()))
    assert abs(m[0]) < 1e-3 and abs(c[0, 0] - 1) < 1e-2
    m, c = moments(ParticleEnsemble([[1.0, -2.0]], [1.0]))
    np.testing.assert_array_equal(m, [1, -2])
    np.testing.assert_array_equal(c, 0)
    u = GridDensity.from_values(grid1d(0, 1, 1000), np.ones(1000))[0]
    m, c = moments(u)
    assert abs(m[0] - 0.5) < 1e-3 and abs(c[0, 0] - 1 / 12) < 1e-3


def test_affine_moments():
    rho = GaussianDensity([0.3, -0.2], [[0.2, 0.05], [0.05, 0.1]])
    M, b = np.array([[1.0, 0.4], [-0.3, 0.8]]), np.array([0.1, 0.2])
    g = Grid.from_bounds([-3, -3], [3, 3], [240, 240])
    sigma, _ = pushforward_density(rho, AffineMap(M, b), g)
    m, c = moments(sigma)
    np.testing.assert_allclose(m, M @ rho.mean + b, atol=1e-3)
    np.testing.assert_allclose(c, M @ rho.cov @ M.T, atol=1e-3)


def test_wasserstein_examples():
    g = grid1d()
    a = gauss1d(g, 0, 0.5)
    assert wasserstein1_1d(a, a) == 0.0
    assert wasserstein1_1d(a, gauss1d(g, 0.7, 0.5)) == pytest.approx(0.7, abs=1e-3)
    p0 = ParticleEnsemble([[0.0]], [1.0])
    p1 = ParticleEnsemble([[1.0]], [1.0])
    assert wasserstein1_1d(p0, p1) == pytest.approx(1.0)


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=20),
       st.lists(st.floats(-3, 3), min_size=1, max_size=20))
def test_wasserstein_matches_scipy(a, b):
    pa, pb = ParticleEnsemble.uniform(np.array(a)), ParticleEnsemble.uniform(np.array(b))
    assert wasserstein1_1d(pa, pb) == pytest.approx(wasserstein_distance(a, b), abs=1e-9)


@given(st.floats(-2, 2), st.floats(0.3, 1.5), st.floats(0.5, 2.0), st.floats(-0.5, 0.5))
def test_pushforward_mass(m, s, scale, shift):
    g = grid1d(-12, 12, 600)
    rho = GaussianDensity([m], [[s * s]])
    sigma, factor = pushforward_density(rho, AffineMap([[scale]], [shift]), g)
    assert 0.98 <= factor <= 1.02
    assert sigma.values.sum() * g.cell_volume == pytest.approx(1.0, abs=1e-12)


def test_interpolation_linear_exact():
    g = Grid.from_bounds([0, 0], [1, 2], [10, 20])
    c = g.centers()
    vals = 2 * c[..., 0] - 3 * c[..., 1] + 1
    q = np.array([[0.3, 0.7], [0.51, 1.49]])
    np.testing.assert_allclose(interpolate_grid(g, vals, q), 2 * q[:, 0] - 3 * q[:, 1] + 1)


def test_serialization(tmp_path, rng):
    g = Grid.from_bounds([-1, 0], [1, 2], [6, 4])
    d = GridDensity.from_values(g, rng.uniform(size=(6, 4)))[0]
    save_grid_density(d, tmp_path / "d.csv")
    back = load_grid_density(tmp_path / "d.csv")
    np.testing.assert_allclose(back.values, d.values, rtol=1e-14)
    assert back.grid == g
    ens = ParticleEnsemble.uniform(rng.normal(size=(5, 3)))
    save_ensemble(ens, tmp_path / "e.csv")
    e2 = load_ensemble(tmp_path / "e.csv")
    np.testing.assert_array_equal(e2.points, ens.points)
    np.testing.assert_allclose(e2.weights, ens.weights)
