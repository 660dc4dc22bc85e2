"""Density representations, transport through diffeomorphisms, and metrics.

Grid densities are cell-centered on a regular box grid (``n <= 3``); every
transform evaluates at cell centers and renormalizes, returning the factor it
divided by so callers can treat it as a discretization diagnostic.

A "map" here is any object with ``forward(x)``, ``inverse(z)`` and
``jacobian_det(x)``; :class:`~densteer.feedlin.FeedbackLinearization` and
:class:`AffineMap` both qualify.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainExitError, SingularJacobianError
from .vectorfield import Box

MAX_GRID_DIM = 3
CLAMP = 1e-300
DET_TOL = 1e-12


@dataclass(frozen=True)
class Grid:
    """Regular cell-centered grid over ``box`` with ``shape`` cells per axis."""

    box: Box
    shape: tuple

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != self.box.dim:
            raise ValueError("grid shape and box dimension differ")
        if len(shape) > MAX_GRID_DIM:
            raise ValueError(f"grid densities are limited to n <= {MAX_GRID_DIM}")
        if min(shape) < 2:
            raise ValueError("need at least two cells per axis")
        object.__setattr__(self, "shape", shape)

    @classmethod
    def from_bounds(cls, lower, upper, shape):
        return cls(Box(tuple(lower), tuple(upper)), tuple(shape))

    @property
    def dim(self):
        return len(self.shape)

    @property
    def h(self):
        return (self.box.hi - self.box.lo) / np.array(self.shape)

    @property
    def cell_volume(self):
        return float(np.prod(self.h))

    def axes(self):
        return [self.box.lower[a] + (np.arange(self.shape[a]) + 0.5) * self.h[a]
                for a in range(self.dim)]

    def centers(self):
        """Cell centers with shape ``(*shape, dim)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def refine(self, factor=2):
        return Grid(self.box, tuple(s * factor for s in self.shape))


def _normalize(values, vol):
    values = np.where(values < CLAMP, 0.0, values)
    mass = float(values.sum() * vol)
    if not np.isfinite(mass) or mass <= 0:
        raise ValueError("density has no mass on the grid")
    return values / mass, mass


@dataclass(frozen=True, eq=False)
class GridDensity:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, float)
        if v.shape != self.grid.shape:
            raise ValueError(f"values shape {v.shape} != grid shape {self.grid.shape}")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("density values must be finite and non-negative")
        mass = v.sum() * self.grid.cell_volume
        if abs(mass - 1) > 1e-6:
            raise ValueError(f"density integrates to {mass}, not 1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_values(cls, grid, values):
        """Normalize arbitrary non-negative values; returns ``(density, mass)``."""
        v, mass = _normalize(np.asarray(values, float), grid.cell_volume)
        return cls(grid, v), mass

    @classmethod
    def from_function(cls, grid, pdf):
        return cls.from_values(grid, pdf(grid.centers()))[0]

    @property
    def cell_volume(self):
        return self.grid.cell_volume

    def interpolate(self, x):
        """Multilinear interpolation at points ``(..., dim)``; zero outside the box."""
        return interpolate_grid(self.grid, self.values, x, outside=0.0)

    def marginal(self, axes):
        keep = tuple(np.atleast_1d(axes))
        drop = tuple(a for a in range(self.grid.dim) if a not in keep)
        vals = self.values.sum(axis=drop) * np.prod(self.grid.h[list(drop)]) if drop else self.values
        box = Box(tuple(self.grid.box.lower[a] for a in keep), tuple(self.grid.box.upper[a] for a in keep))
        return GridDensity.from_values(Grid(box, tuple(self.grid.shape[a] for a in keep)), vals)[0]


@dataclass(frozen=True, eq=False)
class GaussianDensity:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, float))
        cov = np.atleast_2d(np.asarray(self.cov, float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape does not match mean")
        if np.abs(cov - cov.T).max() > 1e-12:
            raise ValueError("covariance is not symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("covariance is not positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.size

    def logpdf(self, x):
        x = np.asarray(x, float)
        L = np.linalg.cholesky(self.cov)
        d = x - self.mean
        y = np.linalg.solve(L, d.reshape(-1, self.dim).T).T.reshape(d.shape)
        logdet = 2 * np.log(np.diag(L)).sum()
        return -0.5 * (y ** 2).sum(-1) - 0.5 * (self.dim * np.log(2 * np.pi) + logdet)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    __call__ = pdf

    def sample(self, n, rng):
        return rng.multivariate_normal(self.mean, self.cov, size=n)


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, float)
        if p.ndim == 1:
            p = p[:, None]
        w = np.asarray(self.weights, float)
        if p.shape[0] < 1 or w.shape != (p.shape[0],):
            raise ValueError("need N >= 1 points and one weight per point")
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points):
        points = np.asarray(points, float)
        return cls(points, np.full(len(points), 1.0 / len(points)))

    @property
    def N(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]


class AffineMap:
    """``x -> M x + b`` with the map interface used by the pushforward routines."""

    def __init__(self, M, b=None):
        self.M = np.atleast_2d(np.asarray(M, float))
        self.b = np.zeros(self.M.shape[0]) if b is None else np.asarray(b, float)
        self._Minv = np.linalg.inv(self.M)

    def forward(self, x):
        return np.asarray(x, float) @ self.M.T + self.b

    def inverse(self, z, **_):
        return (np.asarray(z, float) - self.b) @ self._Minv.T

    def jacobian_det(self, x):
        return np.broadcast_to(np.linalg.det(self.M), np.shape(x)[:-1])


IDENTITY = None  # sentinel accepted by the functions below as "no map"


def interpolate_grid(grid: Grid, values, x, outside=None):
    """Multilinear interpolation of cell-centered ``values`` at points ``x``.

    With ``outside=None`` query points are clamped to the outermost cell
    centers (nearest-value extrapolation); otherwise points outside the box get
    ``outside``.
    """
    x = np.asarray(x, float)
    values = np.asarray(values, float)
    lead = x.shape[:-1]
    pts = x.reshape(-1, grid.dim)
    pos = (pts - grid.box.lo) / grid.h - 0.5
    out = np.zeros(len(pts))
    idx0, frac = [], []
    for a in range(grid.dim):
        p = np.clip(pos[:, a], 0, grid.shape[a] - 1)
        i0 = np.minimum(np.floor(p).astype(int), grid.shape[a] - 2)
        idx0.append(i0)
        frac.append(p - i0)
    for corner in range(2 ** grid.dim):
        w = np.ones(len(pts))
        idx = []
        for a in range(grid.dim):
            bit = (corner >> a) & 1
            w = w * (frac[a] if bit else 1 - frac[a])
            idx.append(idx0[a] + bit)
        out += w * values[tuple(idx)]
    if outside is not None:
        inside = grid.box.contains(pts)
        out = np.where(inside, out, outside)
    return out.reshape(lead)


def _density_at(rho, x):
    if isinstance(rho, GaussianDensity):
        return rho.pdf(x)
    if isinstance(rho, GridDensity):
        return rho.interpolate(x)
    return np.asarray(rho(x), float)


def pushforward_density(rho, fmap, out_grid: Grid):
    """``sigma(z) = rho(tau^{-1}(z)) / |det grad tau(tau^{-1}(z))|`` on ``out_grid``.

    Returns ``(GridDensity, factor)`` where ``factor`` is the mass before
    renormalization (ideally 1).
    """
    z = out_grid.centers()
    if fmap is None:
        return GridDensity.from_values(out_grid, _density_at(rho, z))
    x = fmap.inverse(z, check_domain=False) if _takes_check(fmap) else fmap.inverse(z)
    det = np.abs(np.asarray(fmap.jacobian_det(x), float))
    if np.any(det < DET_TOL):
        raise SingularJacobianError("|det grad tau| below 1e-12 at a grid cell center")
    return GridDensity.from_values(out_grid, _density_at(rho, x) / det)


def recover_original_density(sigma: GridDensity, fmap, out_grid: Grid):
    """``rho(x) = sigma(tau(x)) |det grad tau(x)|`` on ``out_grid``; returns ``(density, factor)``."""
    x = out_grid.centers()
    if fmap is None:
        return GridDensity.from_values(out_grid, sigma.interpolate(x))
    det = np.abs(np.asarray(fmap.jacobian_det(x), float))
    if np.any(det < DET_TOL):
        raise SingularJacobianError("|det grad tau| below 1e-12 at a grid cell center")
    return GridDensity.from_values(out_grid, sigma.interpolate(fmap.forward(x)) * det)


def _takes_check(fmap):
    import inspect

    try:
        return "check_domain" in inspect.signature(fmap.inverse).parameters
    except (TypeError, ValueError):
        return False


def pushforward_particles(ens: ParticleEnsemble, fmap, domain: Box | None = None):
    """Apply a point map to every particle; weights are carried over unchanged."""
    pts = ens.points if fmap is None else np.asarray(
        fmap(ens.points) if callable(fmap) else fmap.forward(ens.points), float)
    if domain is not None and not np.all(domain.contains(pts)):
        raise DomainExitError("pushed particles left the target domain")
    return ParticleEnsemble(pts, ens.weights)


def moments(d):
    """Weighted mean and covariance of a grid density, particle ensemble or Gaussian."""
    if isinstance(d, GaussianDensity):
        return d.mean.copy(), d.cov.copy()
    if isinstance(d, GridDensity):
        pts = d.grid.centers().reshape(-1, d.grid.dim)
        w = d.values.reshape(-1) * d.cell_volume
    else:
        pts, w = d.points, d.weights
    w = w / w.sum()
    mean = w @ pts
    c = pts - mean
    cov = (c * w[:, None]).T @ c
    return mean, cov


def _cdf_pieces(d):
    """Support points and CDF values of a 1D density (CDF piecewise linear for grids)."""
    if isinstance(d, GridDensity):
        if d.grid.dim != 1:
            raise ValueError("wasserstein1_1d needs 1D densities")
        lo, h = d.grid.box.lower[0], d.grid.h[0]
        edges = lo + h * np.arange(d.grid.shape[0] + 1)
        cdf = np.concatenate([[0.0], np.cumsum(d.values) * h])
        return edges, cdf, True
    if d.dim != 1:
        raise ValueError("wasserstein1_1d needs 1D ensembles")
    order = np.argsort(d.points[:, 0])
    return d.points[order, 0], np.cumsum(d.weights[order]), False


def _cdf_ends(pieces, left, right):
    """CDF value at ``left`` and its left limit at ``right`` on each interval."""
    pts, cdf, linear = pieces
    if linear:
        return (np.interp(left, pts, cdf, left=0.0, right=1.0),
                np.interp(right, pts, cdf, left=0.0, right=1.0))
    k = np.searchsorted(pts, left, side="right")
    v = np.where(k > 0, cdf[np.maximum(k - 1, 0)], 0.0)
    return v, v


def wasserstein1_1d(a, b) -> float:
    """``integral |F_a - F_b| dx``, exact for piecewise-linear or step CDFs."""
    pa, pb = _cdf_pieces(a), _cdf_pieces(b)
    xs = np.unique(np.concatenate([pa[0], pb[0]]))
    if xs.size < 2:
        return 0.0
    left, right = xs[:-1], xs[1:]
    a0, a1 = _cdf_ends(pa, left, right)
    b0, b1 = _cdf_ends(pb, left, right)
    return float(_abs_linear_integral(a0 - b0, a1 - b1, right - left))


def _abs_linear_integral(d0, d1, width):
    """Integral of |linear function| from value d0 to d1 over ``width``."""
    same = d0 * d1 >= 0
    whole = 0.5 * (np.abs(d0) + np.abs(d1)) * width
    denom = np.abs(d0) + np.abs(d1)
    with np.errstate(invalid="ignore", divide="ignore"):
        split = 0.5 * (d0 ** 2 + d1 ** 2) / np.where(denom > 0, denom, 1.0) * width
    return np.sum(np.where(same, whole, split))


# ---------------------------------------------------------------- serialization

def save_grid_density(d: GridDensity, path):
    """Write ``path`` (one CSV row per cell) and ``path.header.json`` (box, shape)."""
    path = Path(path)
    pts = d.grid.centers().reshape(-1, d.grid.dim)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{a + 1}" for a in range(d.grid.dim)] + ["value"])
        for p, v in zip(pts, d.values.reshape(-1)):
            w.writerow([repr(float(c)) for c in p] + [repr(float(v))])
    header = {"lower": list(d.grid.box.lower), "upper": list(d.grid.box.upper),
              "shape": list(d.grid.shape)}
    Path(str(path) + ".header.json").write_text(json.dumps(header, indent=2))


def load_grid_density(path) -> GridDensity:
    path = Path(path)
    header = json.loads(Path(str(path) + ".header.json").read_text())
    grid = Grid.from_bounds(header["lower"], header["upper"], header["shape"])
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] != int(np.prod(grid.shape)):
        raise ValueError(f"{path}: expected {np.prod(grid.shape)} rows, got {data.shape[0]}")
    return GridDensity.from_values(grid, data[:, -1].reshape(grid.shape))[0]


def save_ensemble(ens: ParticleEnsemble, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["weight"] + [f"x{a + 1}" for a in range(ens.dim)])
        for wt, p in zip(ens.weights, ens.points):
            w.writerow([repr(float(wt))] + [repr(float(c)) for c in p])


def load_ensemble(path) -> ParticleEnsemble:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return ParticleEnsemble(data[:, 1:], data[:, 0] / data[:, 0].sum())
