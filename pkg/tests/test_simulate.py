import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from densteer.bridge import LinearizedPlant
from densteer.density import GaussianDensity, ParticleEnsemble, moments
from densteer.feedlin import build_linearization
from densteer.registry import get
from densteer.simulate import (
    ControlField, SimConfig, euler_maruyama, liouville_flow, save_trajectory, standard_normals,
    steer_original_coordinates,
)
from densteer.vectorfield import Box

sys.path.insert(0, str(Path(__file__).parent / "oracles"))
import freeze_toy1d  # noqa: E402


def const_field(v):
    v = np.asarray(v, float)
    return lambda z, t: np.broadcast_to(v, (*np.shape(z)[:-1], v.size))


def det(N=1, dt=1e-2, **kw):
    return SimConfig(dt=dt, N=N, scheme="deterministic", **kw)


def em(N=1, dt=1e-2, **kw):
    return SimConfig(dt=dt, N=N, scheme="euler_maruyama", **kw)


@pytest.fixture(scope="module")
def toy1d():
    return freeze_toy1d.solve()


@pytest.fixture(scope="module")
def line():
    return LinearizedPlant.linear([[0.0]], [[1.0]], 0.5, Box((-4.0,), (4.0,)))


def test_config_invariants():
    with pytest.raises(ValueError):
        SimConfig(dt=0.3)
    with pytest.raises(ValueError):
        SimConfig(N=0)
    with pytest.raises(ValueError):
        SimConfig(scheme="milstein")
    assert SimConfig(dt=1e-3).steps == 1000


def test_frozen_without_control(line, rng):
    pts = rng.normal(size=(50, 1))
    tr = liouville_flow(line, const_field([0.0]), ParticleEnsemble.uniform(pts), det(50))
    np.testing.assert_array_equal(tr.final, pts)
    assert tr.points.shape[1] == 50
    np.testing.assert_array_equal(tr.weights, np.full(50, 1 / 50))


def test_integrator_chain(paper, rng):
    _, _, fl = paper
    plant = LinearizedPlant.linear(fl.A, fl.B, 0.0, Box((-9,) * 5, (9,) * 5))
    z0 = rng.uniform(-1, 1, size=(4, 5))
    tr = liouville_flow(plant, const_field([1.0, 0.0]), ParticleEnsemble.uniform(z0),
                        det(4, dt=0.05, record_every=1))
    t = tr.times[:, None]
    np.testing.assert_allclose(tr.points[:, :, 2], z0[:, 2] + t, atol=1e-12)
    np.testing.assert_allclose(tr.points[:, :, 1], z0[:, 1] + z0[:, 2] * t + t ** 2 / 2, atol=1e-12)
    np.testing.assert_allclose(tr.points[:, :, 0],
                               z0[:, 0] + z0[:, 1] * t + z0[:, 2] * t ** 2 / 2 + t ** 3 / 6,
                               atol=1e-12)
    np.testing.assert_allclose(tr.points[:, :, 3], z0[:, 3] + z0[:, 4] * t, atol=1e-12)


def test_brownian_variance(line):
    N, s0 = 100_000, 0.25
    pts = np.sqrt(s0) * standard_normals(99, 10 ** 6, N, 1)
    tr = euler_maruyama(line, const_field([0.0]), ParticleEnsemble.uniform(pts), em(N, seed=4))
    var = tr.final[:, 0].var()
    target = s0 + 2 * 0.5
    # standard error of a Gaussian sample variance
    assert abs(var - target) < 3 * target * np.sqrt(2 / (N - 1))


def test_zero_noise_em_is_euler(rng):
    plant = LinearizedPlant.linear([[0, 1], [-1, 0]], [[0], [1]], 0.0, Box((-5, -5), (5, 5)))
    pts = rng.uniform(-1, 1, size=(20, 2))
    v = lambda z, t: -0.3 * z[..., 1:2]  # noqa: E731
    gaps = []
    for dt in (1e-2, 5e-3):
        a = euler_maruyama(plant, v, ParticleEnsemble.uniform(pts), em(20, dt=dt)).final
        b = liouville_flow(plant, v, ParticleEnsemble.uniform(pts), det(20, dt=dt)).final
        gaps.append(np.abs(a - b).max())
    assert gaps[0] < 0.05
    assert 1.7 < gaps[0] / gaps[1] < 2.3


def test_standard_normals_per_particle():
    a = standard_normals(7, 3, 10, 3)
    b = standard_normals(7, 3, 1000, 3)
    np.testing.assert_array_equal(a, b[:10])
    assert not np.array_equal(standard_normals(7, 4, 10, 3), a)
    assert not np.array_equal(standard_normals(8, 3, 10, 3), a)
    big = standard_normals(0, 0, 200_000, 1)[:, 0]
    assert abs(big.mean()) < 0.01 and abs(big.std() - 1) < 0.01


@settings(max_examples=10)
@given(st.integers(0, 2 ** 32 - 1))
def test_reproducible(toy1d, seed):
    _, s0, _, sol = toy1d
    plant = LinearizedPlant.linear([[0.0]], [[1.0]], 0.5, s0.grid.box)
    ens = ParticleEnsemble.uniform(np.linspace(-1.5, -0.5, 30)[:, None])
    cfg = em(30, dt=0.02, seed=seed)
    a = euler_maruyama(plant, sol, ens, cfg, energy=True)
    b = euler_maruyama(plant, sol, ens, cfg, energy=True)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(a.energy, b.energy)


def test_monte_carlo_scaling(line):
    """Standard error of a group mean halves when the group is four times larger."""
    N = 64_000
    pts = np.zeros((N, 1))
    tr = euler_maruyama(line, const_field([0.0]), ParticleEnsemble.uniform(pts), em(N, dt=0.05, seed=11))
    x = tr.final[:, 0]
    small = x.reshape(-1, 250).mean(1)
    large = x.reshape(-1, 1000).mean(1)
    ratio = small.std(ddof=1) / large.std(ddof=1)
    # ratio of sample standard deviations from 256 and 64 groups: relative
    # error about sqrt(1/(2*255) + 1/(2*63))
    band = 3 * 2 * np.sqrt(1 / 510 + 1 / 126)
    assert abs(ratio - 2) < band


def test_toy1d_deterministic_mean(toy1d):
    plant, s0, s1, sol = toy1d
    x0 = GaussianDensity([-1.0], [[0.25]]).sample(5000, np.random.default_rng(2))
    tr = liouville_flow(plant, sol, ParticleEnsemble.uniform(x0), det(5000, dt=1e-2))
    assert tr.final.mean() == pytest.approx(1.0, rel=0.05)


def test_toy1d_em(toy1d):
    plant, s0, s1, sol = toy1d
    x0 = GaussianDensity([-1.0], [[0.25]]).sample(20_000, np.random.default_rng(3))
    tr = euler_maruyama(plant, sol, ParticleEnsemble.uniform(x0), em(20_000, dt=2e-3, seed=1))
    m, c = moments(tr.ensemble())
    assert abs(m[0] - 1) < 0.05
    assert abs(c[0, 0] - 0.25) < 0.025


def test_control_field_interpolation(toy1d):
    _, _, _, sol = toy1d
    f = ControlField.from_solution(sol)
    z = sol.grid.axes()[0][[10, 200, 300]][:, None]
    np.testing.assert_allclose(f(z, 0.5)[:, 0], sol.v_opt[100, [10, 200, 300], 0])
    mid = f(z, 0.5 + 0.5 / sol.nt)[:, 0]
    np.testing.assert_allclose(mid, 0.5 * (sol.v_opt[100] + sol.v_opt[101])[[10, 200, 300], 0])
    before = f.exits
    f(np.array([[10.0]]), 0.3)
    assert f.exits == before + 1


def test_steer_linear_system(toy1d):
    plant, s0, s1, sol = toy1d
    e = get("toy1d")
    sys_ = e.system()
    fl = build_linearization(sys_, e.outputs(), e.x0, e.analytic_inverse())
    pl = LinearizedPlant.from_linearization(fl, 0.5, s0.grid.box)
    rho0 = GaussianDensity([-1.0], [[0.25]])
    rep = steer_original_coordinates(sys_, fl, pl, sol, lambda n, r: rho0.sample(n, r),
                                     em(2000, dt=1e-2, seed=5), rho1=s1, n_consistency=100)
    assert rep.consistency < 1e-6
    assert abs(rep.terminal_mean[0] - 1) < 0.1
    np.testing.assert_allclose(rep.target_mean, [1.0], atol=1e-6)
    d = rep.as_dict()
    assert d["consistency_particles"] == 100 and d["energy_particles"] > 0


def test_save_trajectory(tmp_path, line):
    ens = ParticleEnsemble.uniform(np.arange(6.0)[:, None] / 10)
    tr = liouville_flow(line, const_field([1.0]), ens, det(6, dt=0.25, record_every=2))
    save_trajectory(tr, tmp_path / "t.csv", max_particles=4)
    rows = np.loadtxt(tmp_path / "t.csv", delimiter=",", skiprows=1)
    assert rows.shape == (3 * 4, 3)
    np.testing.assert_allclose(rows[-1], [1.0, 3, 1.3])
