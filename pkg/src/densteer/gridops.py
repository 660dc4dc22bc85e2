"""Sparse finite-volume operators on cell-centered grids (n <= 2).

The forward operator is conservative: first-order upwind advection with zero
flux through the box faces, and ``eps * d_ii(D_ii q)`` diffusion with zero
flux. Mixed terms ``2 eps d_ab(D_ab q)`` use the central four-point stencil on
cells away from the faces. The backward equation uses the matrix transpose,
which is the non-conservative (copy-out) counterpart and keeps
``sum(phi * phi_hat)`` exactly constant across a solve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .density import Grid
from .errors import CFLViolationError, PositivityLossError

CFL_ADV = 0.9
CFL_DIFF = 0.45
DENSE_LIMIT = 2000


def _index(grid: Grid):
    return np.arange(int(np.prod(grid.shape))).reshape(grid.shape)


def _face_points(grid: Grid, axis: int):
    """Centers of the interior faces normal to ``axis``: shape ``(*shape_minus_one, dim)``."""
    c = grid.centers()
    sl = [slice(None)] * grid.dim
    sl[axis] = slice(0, -1)
    pts = c[tuple(sl)].copy()
    pts[..., axis] += 0.5 * grid.h[axis]
    return pts


def _pairs(idx, axis):
    lo = [slice(None)] * idx.ndim
    hi = [slice(None)] * idx.ndim
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    return idx[tuple(lo)].ravel(), idx[tuple(hi)].ravel()


def advection_operator(grid: Grid, velocity):
    """``-div(w q)`` with upwind fluxes; ``velocity`` maps points ``(..., dim)`` to ``(..., dim)``.

    Returns ``(L, rate)`` where ``rate`` bounds ``sum_a |w_a| / h_a`` over cells.
    """
    idx = _index(grid)
    N = idx.size
    rows, cols, vals = [], [], []
    out_rate = np.zeros(N)
    for a in range(grid.dim):
        w = np.asarray(velocity(_face_points(grid, a)), float)[..., a].ravel()
        left, right = _pairs(idx, a)
        wp, wm = np.maximum(w, 0) / grid.h[a], np.minimum(w, 0) / grid.h[a]
        # flux left -> right = wp * q_left + wm * q_right
        rows += [left, left, right, right]
        cols += [left, right, left, right]
        vals += [-wp, -wm, wp, wm]
        np.add.at(out_rate, left, wp)
        np.add.at(out_rate, right, -wm)
    L = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(N, N))
    return L, float(out_rate.max(initial=0.0))


def diffusion_operator(grid: Grid, D, eps: float):
    """``eps * sum_ab d_a d_b (D_ab q)``; ``D`` holds cell-center values ``(*shape, dim, dim)``.

    Returns ``(L, rate)`` where ``rate`` bounds the diagonal decay rate.
    """
    idx = _index(grid)
    N = idx.size
    D = np.asarray(D, float).reshape(N, grid.dim, grid.dim)
    rows, cols, vals = [], [], []
    rate = np.zeros(N)
    for a in range(grid.dim):
        left, right = _pairs(idx, a)
        c = eps / grid.h[a] ** 2
        dl, dr = c * D[left, a, a], c * D[right, a, a]
        # flux left -> right = -(dr q_right - dl q_left)
        rows += [left, left, right, right]
        cols += [right, left, left, right]
        vals += [dr, -dl, dl, -dr]
        rate += 2 * c * D[:, a, a]
    for a in range(grid.dim):
        for b in range(a + 1, grid.dim):
            core = [slice(1, -1)] * grid.dim
            centre = idx[tuple(core)].ravel()
            c = 2 * eps / (4 * grid.h[a] * grid.h[b])
            for sa, sb, sign in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
                shift = [slice(1, -1)] * grid.dim
                shift[a] = slice(1 + sa, grid.shape[a] - 1 + sa)
                shift[b] = slice(1 + sb, grid.shape[b] - 1 + sb)
                nb = idx[tuple(shift)].ravel()
                rows.append(centre)
                cols.append(nb)
                vals.append(sign * c * D[nb, a, b])
            rate += 4 * c * np.abs(D[:, a, b])
    L = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(N, N))
    return L, float(rate.max(initial=0.0))


@dataclass
class Propagator:
    """Maps a stored time slice to the next one (``forward``) or the previous one (``backward``).

    One interval of length ``1/nt`` is split into ``substeps`` explicit
    steps ``(I + dt L_diff)(I + dt L_adv)``.
    """

    grid: Grid
    nt: int
    substeps: int
    step: sp.csr_matrix
    dense: np.ndarray | None

    @classmethod
    def build(cls, grid: Grid, velocity, D, eps: float, nt: int, auto_substep: bool = True):
        L_adv, r_adv = advection_operator(grid, velocity)
        L_diff, r_diff = diffusion_operator(grid, D, eps)
        interval = 1.0 / nt
        limit = min(CFL_ADV / r_adv if r_adv > 0 else math.inf,
                    CFL_DIFF / r_diff if r_diff > 0 else math.inf)
        substeps = max(1, math.ceil(interval / limit * (1 + 1e-12))) if math.isfinite(limit) else 1
        if substeps > 1 and not auto_substep:
            raise CFLViolationError(
                f"nt={nt} violates the explicit stability limit "
                f"(advective {r_adv * interval:.3g}, diffusive {r_diff * interval:.3g})",
                suggested_nt=nt * substeps)
        dt = interval / substeps
        N = L_adv.shape[0]
        eye = sp.identity(N, format="csr")
        step = ((eye + dt * L_diff) @ (eye + dt * L_adv)).tocsr()
        dense = None
        if N <= DENSE_LIMIT:
            dense = np.linalg.matrix_power(step.toarray(), substeps)
        return cls(grid, nt, substeps, step, dense)

    def forward(self, q):
        q = np.asarray(q, float).reshape(-1)
        if self.dense is not None:
            return (self.dense @ q).reshape(self.grid.shape)
        for _ in range(self.substeps):
            q = self.step @ q
        return q.reshape(self.grid.shape)

    def backward(self, q):
        q = np.asarray(q, float).reshape(-1)
        if self.dense is not None:
            return (self.dense.T @ q).reshape(self.grid.shape)
        stepT = self.step.T.tocsr()
        for _ in range(self.substeps):
            q = stepT @ q
        return q.reshape(self.grid.shape)

    def run(self, q0, direction: str):
        """All ``nt + 1`` slices; ``direction='forward'`` starts at t=0, ``'backward'`` at t=1."""
        out = np.empty((self.nt + 1, *self.grid.shape))
        if direction == "forward":
            out[0] = q0
            for k in range(self.nt):
                out[k + 1] = _check_sign(self.forward(out[k]))
        elif direction == "backward":
            out[-1] = q0
            for k in range(self.nt, 0, -1):
                out[k - 1] = _check_sign(self.backward(out[k]))
        else:
            raise ValueError(direction)
        return out


def _check_sign(q, rel=1e-10):
    scale = np.abs(q).max(initial=0.0)
    if q.min(initial=0.0) < -rel * scale:
        raise PositivityLossError(
            f"solution went negative ({q.min():.3e} vs scale {scale:.3e}); refine nt or the grid")
    return np.maximum(q, 0.0)
