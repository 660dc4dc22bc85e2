"""Particle propagation under a computed control field.

Deterministic runs integrate ``z' = A z + B v(z, t)`` with RK4; stochastic
runs use Euler-Maruyama with noise ``sqrt(2 eps) B Gamma_tau(z)^{-1} dw``.
Gaussian increments come from a counter-based generator keyed by
``(seed, step)`` whose output words are laid out per particle, so a particle's
noise does not depend on how many other particles are simulated.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bridge import LinearizedPlant, SchrodingerSolution
from .density import Grid, ParticleEnsemble, interpolate_grid, moments
from .errors import DomainExitError
from .feedlin import FeedbackLinearization, pullback_control
from .vectorfield import ControlAffineSystem

SCHEMES = ("deterministic", "euler_maruyama")


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    T: float = 1.0
    N: int = 1000
    seed: int = 0
    scheme: str = "euler_maruyama"
    record_every: int = 10

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if self.dt <= 0 or abs(self.steps * self.dt - self.T) > 1e-12:
            raise ValueError("dt must divide T")

    @property
    def steps(self):
        return int(round(self.T / self.dt))


class ControlField:
    """``v(z, t)``: multilinear in space, linear in time, nearest value outside the grid.

    ``exits`` counts queries more than one cell outside the grid box.
    """

    def __init__(self, grid: Grid, times, values):
        self.grid = grid
        self.times = np.asarray(times, float)
        self.values = np.asarray(values, float)  # (K, *shape, m)
        self.m = self.values.shape[-1]
        self.exits = 0

    @classmethod
    def from_solution(cls, sol: SchrodingerSolution):
        return cls(sol.grid, sol.times, sol.v_opt)

    def _at_slice(self, k, z):
        return np.stack([interpolate_grid(self.grid, self.values[k, ..., j], z)
                         for j in range(self.m)], axis=-1)

    def __call__(self, z, t):
        z = np.asarray(z, float)
        box = self.grid.box
        self.exits += int((~box.contains(z, tol=float(self.grid.h.max()))).sum())
        K = len(self.times)
        s = np.interp(t, self.times, np.arange(K))
        k0 = min(int(math.floor(s)), K - 2)
        a = s - k0
        out = (1 - a) * self._at_slice(k0, z)
        if a > 0:
            out = out + a * self._at_slice(k0 + 1, z)
        return out


def _as_field(v_field):
    if isinstance(v_field, SchrodingerSolution):
        return ControlField.from_solution(v_field)
    return v_field


# ---------------------------------------------------------------- random numbers

def standard_normals(seed: int, step: int, N: int, m: int) -> np.ndarray:
    """``(N, m)`` standard normals; row ``i`` depends only on ``(seed, step, i)``."""
    pairs = (m + 1) // 2
    bg = np.random.Philox(key=seed, counter=[0, step, 0, 0])
    words = bg.random_raw(N * 2 * pairs).reshape(N, pairs, 2)
    u = ((words >> np.uint64(11)).astype(float) + 0.5) * 2.0 ** -53
    r = np.sqrt(-2.0 * np.log(u[..., 0]))
    ang = 2 * np.pi * u[..., 1]
    xi = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=-1).reshape(N, 2 * pairs)
    return xi[:, :m]


# ---------------------------------------------------------------- trajectories

@dataclass
class Trajectory:
    times: np.ndarray
    points: np.ndarray      # (K, N, n)
    weights: np.ndarray
    exits: int = 0
    energy: np.ndarray | None = None  # per particle, int 1/2 |u|^2 dt

    def ensemble(self, k=-1) -> ParticleEnsemble:
        return ParticleEnsemble(self.points[k], self.weights)

    @property
    def final(self):
        return self.points[-1]


def _plant_coefficients(plant: LinearizedPlant, z, seed=None):
    """``(delta_tau, Gamma_tau, preimage)``; the preimage warm-starts the next step."""
    if plant.fl is not None:
        x = plant.fl.tau_inv(z, seed=seed, check_domain=False)
        return (*plant.fl.feedback(x), x)
    return plant.delta_tau(z), plant.Gamma_tau(z), None


def _run(plant, v_field, ens: ParticleEnsemble, cfg: SimConfig, noise: bool, energy: bool):
    field_ = _as_field(v_field)
    z = ens.points.astype(float).copy()
    N = len(z)
    rec = [z.copy()]
    times = [0.0]
    total = np.zeros(N) if energy else None
    seed_x = None
    need_coeffs = energy or (noise and plant.epsilon > 0)
    sq = math.sqrt(2 * plant.epsilon * cfg.dt)
    A, B = plant.A, plant.B

    def rhs(t, y):
        return y @ A.T + field_(y, t) @ B.T

    for k in range(cfg.steps):
        t = k * cfg.dt
        if noise or energy:
            v = field_(z, t)
        if need_coeffs:
            delta, Gam, seed_x = _plant_coefficients(plant, z, seed_x)
        if energy:
            u = delta + np.einsum("...ij,...j->...i", Gam, v)
            total += 0.5 * (u ** 2).sum(-1) * cfg.dt
        if noise:
            znew = z + (z @ A.T + v @ B.T) * cfg.dt
            if plant.epsilon > 0:
                xi = standard_normals(cfg.seed, k, N, plant.m)
                Ginv_xi = np.linalg.solve(Gam, xi[..., None])[..., 0]
                znew = znew + sq * Ginv_xi @ B.T
            z = znew
        else:
            k1 = rhs(t, z)
            k2 = rhs(t + cfg.dt / 2, z + cfg.dt / 2 * k1)
            k3 = rhs(t + cfg.dt / 2, z + cfg.dt / 2 * k2)
            k4 = rhs(t + cfg.dt, z + cfg.dt * k3)
            z = z + cfg.dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if (k + 1) % cfg.record_every == 0 or k + 1 == cfg.steps:
            rec.append(z.copy())
            times.append((k + 1) * cfg.dt)
    exits = getattr(field_, "exits", 0)
    return Trajectory(np.array(times), np.array(rec), ens.weights.copy(), exits, total)


def liouville_flow(plant: LinearizedPlant, v_field, ens: ParticleEnsemble, cfg: SimConfig,
                   energy: bool = False) -> Trajectory:
    """Noise-free transport of particles (RK4)."""
    if cfg.scheme != "deterministic":
        raise ValueError("liouville_flow needs scheme='deterministic'")
    return _run(plant, v_field, ens, cfg, noise=False, energy=energy)


def euler_maruyama(plant: LinearizedPlant, v_field, ens: ParticleEnsemble, cfg: SimConfig,
                   energy: bool = False) -> Trajectory:
    if cfg.scheme != "euler_maruyama":
        raise ValueError("euler_maruyama needs scheme='euler_maruyama'")
    return _run(plant, v_field, ens, cfg, noise=True, energy=energy)


# ---------------------------------------------------------------- original coordinates

@dataclass
class SteeringReport:
    consistency: float              # max_t,i |tau(x_i(t)) - z_i(t)|
    consistency_particles: int
    energy_particles: float         # mean over particles of int 1/2 |u|^2 dt
    energy_stderr: float
    terminal_mean: np.ndarray       # original coordinates
    terminal_cov: np.ndarray
    target_mean: np.ndarray | None
    target_cov: np.ndarray | None
    exits: int
    z_trajectory: Trajectory = field(repr=False)
    x_trajectory: Trajectory = field(repr=False)

    def as_dict(self):
        def lst(a):
            return None if a is None else np.asarray(a).tolist()
        return {
            "consistency": self.consistency,
            "consistency_particles": self.consistency_particles,
            "energy_particles": self.energy_particles,
            "energy_stderr": self.energy_stderr,
            "terminal_mean": lst(self.terminal_mean),
            "terminal_cov": lst(self.terminal_cov),
            "target_mean": lst(self.target_mean),
            "target_cov": lst(self.target_cov),
            "exits": self.exits,
        }


def closed_loop_pair(sys: ControlAffineSystem, fl: FeedbackLinearization, plant: LinearizedPlant,
                     v_field, x0, cfg: SimConfig, strict_domain: bool = False):
    """RK4 runs of the original closed loop and of the linear plant from ``tau(x0)``.

    Returns ``(x trajectory, z trajectory, max deviation)``.
    """
    field_ = _as_field(v_field)
    x = np.asarray(x0, float).copy()
    z = fl.tau(x)
    A, B = plant.A, plant.B
    w = np.full(len(x), 1.0 / len(x))
    xs, zs, times = [x.copy()], [z.copy()], [0.0]
    dev = 0.0

    def frhs(t, y):
        return sys.rhs(y, pullback_control(fl, y, field_(fl.tau(y), t)))

    def zrhs(t, y):
        return y @ A.T + field_(y, t) @ B.T

    for k in range(cfg.steps):
        t = k * cfg.dt
        x = _rk4(frhs, x, t, cfg.dt)
        z = _rk4(zrhs, z, t, cfg.dt)
        if strict_domain and not np.all(sys.domain.contains(x)):
            raise DomainExitError(f"particle left the state domain at t={t + cfg.dt:.4f}")
        dev = max(dev, float(np.abs(fl.tau(x) - z).max()))
        if (k + 1) % cfg.record_every == 0 or k + 1 == cfg.steps:
            xs.append(x.copy())
            zs.append(z.copy())
            times.append((k + 1) * cfg.dt)
    times = np.array(times)
    exits = getattr(field_, "exits", 0)
    return (Trajectory(times, np.array(xs), w, exits), Trajectory(times, np.array(zs), w, exits), dev)


def _rk4(rhs, y, t, dt):
    k1 = rhs(t, y)
    k2 = rhs(t + dt / 2, y + dt / 2 * k1)
    k3 = rhs(t + dt / 2, y + dt / 2 * k2)
    k4 = rhs(t + dt, y + dt * k3)
    return y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def steer_original_coordinates(sys: ControlAffineSystem, fl: FeedbackLinearization,
                               plant: LinearizedPlant, solution: SchrodingerSolution,
                               rho0_sampler: Callable, cfg: SimConfig, rho1=None,
                               n_consistency: int = 200) -> SteeringReport:
    """Push samples of ``rho0`` through the steering pipeline.

    (a) A noise-free pair of runs, original closed loop under
    ``u = delta(x) + Gamma(x) v(tau(x), t)`` and the linear plant from
    ``tau(x0)``, gives the cross-coordinate consistency. (b) A run of
    ``cfg.scheme`` in linear coordinates gives the particle control energy
    and, mapped back through ``tau^{-1}``, the terminal moments, compared
    against ``rho1`` (a density with ``moments``) when given.
    """
    rng = np.random.default_rng(cfg.seed)
    x0 = np.asarray(rho0_sampler(cfg.N, rng), float)
    field_ = ControlField.from_solution(solution)
    det_cfg = SimConfig(cfg.dt, cfg.T, min(cfg.N, n_consistency), cfg.seed, "deterministic",
                        cfg.record_every)
    xt, _, dev = closed_loop_pair(sys, fl, plant, field_, x0[:det_cfg.N], det_cfg)
    ens = ParticleEnsemble.uniform(fl.tau(x0))
    runner = euler_maruyama if cfg.scheme == "euler_maruyama" else liouville_flow
    zt = runner(plant, field_, ens, cfg, energy=True)
    xT = fl.tau_inv(zt.final, check_domain=False)
    mean, cov = moments(ParticleEnsemble.uniform(xT))
    tm, tc = moments(rho1) if rho1 is not None else (None, None)
    e = zt.energy
    return SteeringReport(dev, det_cfg.N, float(e.mean()), float(e.std(ddof=1) / math.sqrt(len(e)))
                          if len(e) > 1 else 0.0, mean, cov, tm, tc, field_.exits, zt, xt)


def save_trajectory(traj: Trajectory, path, max_particles: int | None = None):
    """Long-format CSV: ``t, particle, z1..zn``."""
    P = traj.points if max_particles is None else traj.points[:, :max_particles]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "particle"] + [f"c{a + 1}" for a in range(P.shape[-1])])
        for t, snap in zip(traj.times, P):
            tt = repr(float(t))
            for i, p in enumerate(snap):
                w.writerow([tt, i] + [repr(float(c)) for c in p])
