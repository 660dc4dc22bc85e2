"""Density steering in linearized coordinates.

The plant is ``dz = (A z + B v) dt`` with running cost
``L(z, v) = |delta_tau(z) + Gamma_tau(z) v|^2`` and, for ``eps > 0``, noise
``sqrt(2 eps) B Gamma_tau(z)^{-1} dw``. Its optimality system is solved
through the pair of linear PDEs

    phi_t + <grad phi, w> + eps <D, Hess phi> = 0           (backward)
    phi_hat_t + div(w phi_hat) - eps d_ij(D_ij phi_hat) = 0  (forward)

with ``w = A z - B Gamma_tau^{-1} delta_tau`` and
``D = B (Gamma_tau^T Gamma_tau)^{-1} B^T``, coupled only through the
boundary data ``phi phi_hat = sigma_0`` at t=0 and ``sigma_1`` at t=1.
Then ``sigma = phi phi_hat`` and ``psi = 2 eps log phi``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage
from scipy.integrate import trapezoid

from .density import Grid, GridDensity, moments
from .errors import (DivisionBlowupError, NoConvergenceError, PositivityError,
                     SingularityError)
from .feedlin import TOL_SING, FeedbackLinearization, singular_value_range
from .gridops import Propagator
from .vectorfield import Box

DIV_FLOOR = 1e-12
DIV_CEIL = 1e12
MAX_FLAGGED = 0.5  # fraction of endpoint mass allowed on flagged cells
MAX_GRID_DIM = 2


@dataclass(frozen=True)
class GridCoefficients:
    centers: np.ndarray
    delta: np.ndarray      # (*shape, m)
    Gamma: np.ndarray      # (*shape, m, m)
    Gamma_inv: np.ndarray  # (*shape, m, m)
    D: np.ndarray          # (*shape, n, n)
    drift: np.ndarray      # (*shape, n)


@dataclass(frozen=True, eq=False)
class LinearizedPlant:
    A: np.ndarray
    B: np.ndarray
    delta_tau: Callable
    Gamma_tau: Callable
    epsilon: float
    z_box: Box
    fl: FeedbackLinearization | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, float))
        B = np.asarray(self.B, float).reshape(A.shape[0], -1)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    @classmethod
    def linear(cls, A, B, epsilon, z_box: Box):
        """Plant with ``delta_tau = 0`` and ``Gamma_tau = I``."""
        B = np.atleast_2d(np.asarray(B, float))
        m = B.shape[1]

        def delta(z):
            return np.zeros((*np.shape(z)[:-1], m))

        def gamma(z):
            return np.broadcast_to(np.eye(m), (*np.shape(z)[:-1], m, m)).copy()

        return cls(A, B, delta, gamma, float(epsilon), z_box)

    @classmethod
    def from_linearization(cls, fl: FeedbackLinearization, epsilon, z_box: Box | None = None):
        return cls(fl.A, fl.B, fl.delta_tau, fl.Gamma_tau, float(epsilon), z_box or fl.z_domain, fl)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    def Gamma_inv(self, z):
        G = np.asarray(self.Gamma_tau(z), float)
        smin, smax = singular_value_range(G)
        if np.any(smin <= TOL_SING * smax):
            raise SingularityError("Gamma_tau is singular at a query point")
        return np.linalg.inv(G)

    def drift(self, z):
        """``A z - B Gamma_tau^{-1} delta_tau``."""
        z = np.asarray(z, float)
        gd = np.einsum("...ij,...j->...i", self.Gamma_inv(z), self.delta_tau(z))
        return z @ self.A.T - gd @ self.B.T

    def diffusion(self, z):
        return diffusion_matrix(self, z)

    def on_grid(self, grid: Grid) -> GridCoefficients:
        """Coefficients at cell centers (cached per grid)."""
        if grid not in self._cache:
            if grid.dim != self.n:
                raise ValueError(f"grid dimension {grid.dim} != plant dimension {self.n}")
            c = grid.centers()
            delta = np.asarray(self.delta_tau(c), float)
            Gam = np.asarray(self.Gamma_tau(c), float)
            Ginv = self.Gamma_inv(c)
            BG = self.B @ Ginv
            D = BG @ np.swapaxes(BG, -1, -2)
            drift = c @ self.A.T - np.einsum("...ij,...j->...i", Ginv, delta) @ self.B.T
            self._cache[grid] = GridCoefficients(c, delta, Gam, Ginv, D, drift)
        return self._cache[grid]


# ---------------------------------------------------------------- pointwise quantities

def lagrangian_cost(plant: LinearizedPlant, z, v):
    """``|delta_tau(z) + Gamma_tau(z) v|^2`` (no factor 1/2)."""
    u = plant.delta_tau(z) + np.einsum("...ij,...j->...i", plant.Gamma_tau(z), np.asarray(v, float))
    plant.Gamma_inv(z)  # singularity check
    return (u ** 2).sum(-1)


def cost_J(plant: LinearizedPlant, z, sigma: float, mflux) -> float:
    """Perspective cost ``|delta sigma + Gamma m|^2 / (2 sigma)``, 0 at (0, 0), else +inf."""
    mflux = np.asarray(mflux, float)
    if sigma > 0:
        r = np.asarray(plant.delta_tau(z)) * sigma + np.asarray(plant.Gamma_tau(z)) @ mflux
        return float(0.5 * (r ** 2).sum() / sigma)
    if sigma == 0 and not np.any(mflux):
        return 0.0
    return float("inf")


def diffusion_matrix(plant: LinearizedPlant, z):
    BG = plant.B @ plant.Gamma_inv(z)
    return BG @ np.swapaxes(BG, -1, -2)


def _gradient(field_, grid: Grid, lead: int):
    """Gradient over the spatial axes; central inside, one-sided at faces."""
    axes = tuple(range(lead, lead + grid.dim))
    g = np.gradient(field_, *grid.h, axis=axes)
    if grid.dim == 1:
        g = [g]
    return np.stack(g, axis=-1)


def optimal_control_field(plant: LinearizedPlant, psi, grid: Grid):
    """``(Gamma^T Gamma)^{-1} B^T grad psi - Gamma^{-1} delta`` for a field ``(*lead, *shape)``."""
    psi = np.asarray(psi, float)
    lead = psi.ndim - grid.dim
    co = plant.on_grid(grid)
    grad = _gradient(psi, grid, lead)
    GtG_inv = co.Gamma_inv @ np.swapaxes(co.Gamma_inv, -1, -2)
    K = GtG_inv @ plant.B.T                                   # (*shape, m, n)
    feed = np.einsum("...ij,...j->...i", co.Gamma_inv, co.delta)
    return np.einsum("...ij,...j->...i", K, grad) - feed


# ---------------------------------------------------------------- residuals

def _interior(grid: Grid, extra_lead=1):
    return (slice(None),) * extra_lead + (slice(1, -1),) * grid.dim


def _shift(a, axis, s, lead):
    """Interior view of ``a`` shifted by ``s`` cells along spatial ``axis``."""
    sl = [slice(None)] * lead
    for ax in range(a.ndim - lead):
        n = a.shape[lead + ax]
        off = s if ax == axis else 0
        sl.append(slice(1 + off, n - 1 + off))
    return a[tuple(sl)]


def _second(q, grid, a, b, lead=1):
    """Central second derivative ``d_a d_b q`` on interior cells."""
    if a == b:
        return (_shift(q, a, 1, lead) - 2 * _shift(q, a, 0, lead) + _shift(q, a, -1, lead)) / grid.h[a] ** 2
    sl = lambda sa, sb: _shift2(q, a, sa, b, sb, lead)  # noqa: E731
    return (sl(1, 1) - sl(1, -1) - sl(-1, 1) + sl(-1, -1)) / (4 * grid.h[a] * grid.h[b])


def _shift2(a, ax1, s1, ax2, s2, lead):
    sl = [slice(None)] * lead
    for ax in range(a.ndim - lead):
        n = a.shape[lead + ax]
        off = s1 if ax == ax1 else s2 if ax == ax2 else 0
        sl.append(slice(1 + off, n - 1 + off))
    return a[tuple(sl)]


def hjb_residual(plant: LinearizedPlant, psi, grid: Grid, include_diffusion: bool = True):
    """Residual of the value-function PDE on interior cells at time midpoints.

    ``psi`` has shape ``(nt + 1, *shape)`` over ``t_k = k / nt``. Returns
    ``(nt, *interior)``.
    """
    psi = np.asarray(psi, float)
    nt = psi.shape[0] - 1
    co = plant.on_grid(grid)
    mid = 0.5 * (psi[1:] + psi[:-1])
    res = (psi[1:] - psi[:-1])[_interior(grid)] * nt
    grad = _gradient(mid, grid, 1)[_interior(grid)]
    inner = (slice(1, -1),) * grid.dim
    w, D = co.drift[inner], co.D[inner]
    res = res + (grad * w).sum(-1) + 0.5 * np.einsum("...i,...ij,...j->...", grad, D, grad)
    if include_diffusion:
        for a in range(grid.dim):
            for b in range(grid.dim):
                res = res + plant.epsilon * D[..., a, b] * _second(mid, grid, a, b)
    return res


def fpk_residual(plant: LinearizedPlant, sigma, v, grid: Grid):
    """Residual of the controlled Fokker-Planck equation on interior cells at time midpoints.

    ``sigma``: ``(nt + 1, *shape)``; ``v``: ``(nt + 1, *shape, m)``.
    """
    sigma = np.asarray(sigma, float)
    v = np.asarray(v, float)
    nt = sigma.shape[0] - 1
    co = plant.on_grid(grid)
    s_mid = 0.5 * (sigma[1:] + sigma[:-1])
    v_mid = 0.5 * (v[1:] + v[:-1])
    vel = co.centers @ plant.A.T + v_mid @ plant.B.T
    flux = vel * s_mid[..., None]
    res = (sigma[1:] - sigma[:-1])[_interior(grid)] * nt
    for a in range(grid.dim):
        fa = flux[..., a]
        res = res + (_shift(fa, a, 1, 1) - _shift(fa, a, -1, 1)) / (2 * grid.h[a])
    for a in range(grid.dim):
        for b in range(grid.dim):
            q = co.D[..., a, b] * s_mid
            res = res - plant.epsilon * _second(q, grid, a, b)
    return res


# ---------------------------------------------------------------- linear PDE solves

def _propagator(plant: LinearizedPlant, grid: Grid, nt: int, auto_substep=True) -> Propagator:
    key = ("prop", grid, nt, auto_substep)
    if key not in plant._cache:
        co = plant.on_grid(grid)
        plant._cache[key] = Propagator.build(grid, plant.drift, co.D, plant.epsilon, nt, auto_substep)
    return plant._cache[key]


def solve_backward_pde(plant: LinearizedPlant, phi_terminal, grid: Grid, nt: int,
                       auto_substep: bool = True):
    """``phi`` over ``t_k = k / nt`` (shape ``(nt + 1, *shape)``) from its t=1 slice."""
    phi_terminal = np.asarray(phi_terminal, float)
    if np.any(phi_terminal <= 0):
        raise PositivityError("terminal data for the backward equation must be positive")
    return _propagator(plant, grid, nt, auto_substep).run(phi_terminal, "backward")


def solve_forward_pde(plant: LinearizedPlant, phi_hat_initial, grid: Grid, nt: int,
                      auto_substep: bool = True):
    """``phi_hat`` over ``t_k = k / nt`` from its t=0 slice."""
    phi_hat_initial = np.asarray(phi_hat_initial, float)
    if np.any(phi_hat_initial < 0):
        raise PositivityError("initial data for the forward equation must be non-negative")
    return _propagator(plant, grid, nt, auto_substep).run(phi_hat_initial, "forward")


def hopf_cole_recover(phi, phi_hat, epsilon):
    """``(sigma, psi) = (phi * phi_hat, 2 eps log phi)``."""
    phi = np.asarray(phi, float)
    if np.any(phi <= 0):
        raise PositivityError("phi must be positive to take its logarithm")
    return phi * np.asarray(phi_hat, float), 2 * epsilon * np.log(phi)


def _fill_nearest(a, valid):
    """Replace entries where ``valid`` is False by the nearest valid entry (per slice)."""
    out = a.copy()
    for k in range(a.shape[0]):
        if valid[k].all() or not valid[k].any():
            continue
        _, idx = ndimage.distance_transform_edt(~valid[k], return_indices=True)
        out[k] = a[k][tuple(idx)]
    return out


def _guarded_divide(num, den):
    flagged = den < DIV_FLOOR
    lost = num[flagged].sum() / max(num.sum(), 1e-300)
    if lost > MAX_FLAGGED:
        raise DivisionBlowupError(
            f"{lost:.1%} of an endpoint density sits where the propagated factor vanishes; "
            "the endpoints are too far apart for this epsilon and grid")
    q = np.where(flagged, 0.0, num / np.where(flagged, 1.0, den))
    if q.max(initial=0.0) > DIV_CEIL:
        raise DivisionBlowupError(
            f"boundary coupling quotient reached {q.max():.3e}; "
            "the endpoint densities are not supported where the propagated factor is")
    return q, flagged


def _balance(phi0, phi_hat1):
    """Factor ``a`` with ``a max(phi_hat1) = max(phi0) / a``."""
    top, bottom = phi0.max(initial=0.0), phi_hat1.max(initial=0.0)
    if top <= 0 or bottom <= 0:
        return 1.0
    return float(np.sqrt(top / bottom))


@dataclass(frozen=True, eq=False)
class SchrodingerSolution:
    grid: Grid
    epsilon: float
    phi: np.ndarray
    phi_hat: np.ndarray
    sigma_opt: np.ndarray
    psi: np.ndarray
    v_opt: np.ndarray
    iterations: int
    residual_history: list
    flagged_mass: float
    substeps: int

    @property
    def nt(self):
        return self.phi.shape[0] - 1

    @property
    def times(self):
        return np.linspace(0.0, 1.0, self.nt + 1)

    def density_at(self, k: int) -> GridDensity:
        return GridDensity.from_values(self.grid, self.sigma_opt[k])[0]

    def mass(self):
        return self.sigma_opt.reshape(self.nt + 1, -1).sum(-1) * self.grid.cell_volume

    def moment_path(self):
        """Mean ``(nt+1, n)`` and covariance ``(nt+1, n, n)`` of every stored slice."""
        ms = [moments(self.density_at(k)) for k in range(self.nt + 1)]
        return np.array([m for m, _ in ms]), np.array([c for _, c in ms])


def schrodinger_fixed_point(plant: LinearizedPlant, sigma0: GridDensity, sigma1: GridDensity,
                            nt: int, tol: float = 1e-8, max_iter: int = 500,
                            auto_substep: bool = True) -> SchrodingerSolution:
    """Alternate forward/backward solves and boundary divisions until ``phi_hat(., 0)`` settles.

    ``phi_hat(., 0)`` is rescaled to unit L1 norm after every sweep and the
    stopping quantity is its L1 change. Raises :class:`NoConvergenceError` after ``max_iter`` sweeps.
    """
    grid = sigma0.grid
    if sigma1.grid != grid:
        raise ValueError("endpoint densities must share a grid")
    if grid.dim > MAX_GRID_DIM:
        raise ValueError(f"grid solver supports n <= {MAX_GRID_DIM}")
    if plant.epsilon <= 0:
        raise ValueError("the grid bridge solver needs epsilon > 0")
    prop = _propagator(plant, grid, nt, auto_substep)
    s0, s1 = sigma0.values, sigma1.values
    vol = grid.cell_volume

    def endpoint(q, direction):
        for _ in range(nt):
            q = prop.forward(q) if direction == "forward" else prop.backward(q)
        return q

    # (c phi, phi_hat / c) is the same solution. phi_hat(., 0) is kept at unit
    # L1 norm for the stopping test; the divisions use a gauge where max
    # phi_hat(., 1) = max phi(., 0), so the absolute floor in the guard only
    # trips where the densities are negligible rather than wherever one factor
    # happens to be small in an arbitrary scale.
    phi_hat0 = np.ones(grid.shape)
    gauge = 1.0
    history = []
    for it in range(1, max_iter + 1):
        phi_hat1 = gauge * endpoint(phi_hat0, "forward")
        phi1, _ = _guarded_divide(s1, phi_hat1)
        phi0 = endpoint(phi1, "backward")
        new, _ = _guarded_divide(s0, phi0)
        gauge *= _balance(phi0, phi_hat1)
        new = new / max(new.sum() * vol, 1e-300)
        change = np.abs(new - phi_hat0).sum() * vol
        history.append(float(change))
        phi_hat0 = new
        if change < tol:
            break
    else:
        raise NoConvergenceError(
            f"fixed point did not reach {tol:g} in {max_iter} iterations "
            f"(last change {history[-1]:.3e})", history)

    phi_hat = gauge * prop.run(phi_hat0, "forward")
    phi1, flag1 = _guarded_divide(s1, phi_hat[-1])
    phi = prop.run(phi1, "backward")
    _, flag0 = _guarded_divide(s0, phi[0])
    flagged_mass = float((s1[flag1].sum() + s0[flag0].sum()) * vol)
    sigma = phi * phi_hat
    valid = phi > 0
    with np.errstate(divide="ignore"):
        psi = np.where(valid, 2 * plant.epsilon * np.log(np.where(valid, phi, 1.0)), np.nan)
    psi = _fill_nearest(psi, valid)
    v = optimal_control_field(plant, psi, grid)
    return SchrodingerSolution(grid, plant.epsilon, phi, phi_hat, sigma, psi, v, it, history,
                               flagged_mass, prop.substeps)


def control_energy(plant: LinearizedPlant, sol: SchrodingerSolution) -> float:
    """``int_0^1 int 1/2 |delta_tau + Gamma_tau v|^2 sigma dz dt`` by trapezoid in time."""
    co = plant.on_grid(sol.grid)
    u = co.delta + np.einsum("...ij,...j->...i", co.Gamma, sol.v_opt)
    dens = 0.5 * (u ** 2).sum(-1) * sol.sigma_opt
    per_t = dens.reshape(sol.nt + 1, -1).sum(-1) * sol.grid.cell_volume
    return float(trapezoid(per_t, sol.times))


# ---------------------------------------------------------------- serialization

def save_solution(sol: SchrodingerSolution, out_dir, extra: dict | None = None, every: int = 1):
    """One CSV per stored time slice under ``out_dir/slices`` plus ``bridge_manifest.json``."""
    out = Path(out_dir)
    (out / "slices").mkdir(parents=True, exist_ok=True)
    pts = sol.grid.centers().reshape(-1, sol.grid.dim)
    n = sol.grid.dim
    m = sol.v_opt.shape[-1]
    head = ([f"z{a + 1}" for a in range(n)] + ["phi", "phi_hat", "sigma", "psi"]
            + [f"v{j + 1}" for j in range(m)])
    for k in range(0, sol.nt + 1, every):
        cols = [pts, sol.phi[k].reshape(-1, 1), sol.phi_hat[k].reshape(-1, 1),
                sol.sigma_opt[k].reshape(-1, 1), sol.psi[k].reshape(-1, 1),
                sol.v_opt[k].reshape(-1, m)]
        table = np.hstack(cols)
        with open(out / "slices" / f"t_{k:04d}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + head)
            t = repr(float(sol.times[k]))
            for row in table:
                w.writerow([t] + [repr(float(c)) for c in row])
    manifest = {
        "epsilon": sol.epsilon,
        "grid": {"lower": list(sol.grid.box.lower), "upper": list(sol.grid.box.upper),
                 "shape": list(sol.grid.shape)},
        "nt": sol.nt,
        "substeps": sol.substeps,
        "iterations": sol.iterations,
        "residual_history": sol.residual_history,
        "flagged_mass": sol.flagged_mass,
    }
    manifest.update(extra or {})
    (out / "bridge_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out
