"""Full-state static feedback linearization of control-affine systems.

Given user-supplied outputs ``h_1..h_m``, this module finds the vector
relative degree, assembles the decoupling matrix ``C`` and drift vector
``d``, and builds the triple ``(delta, Gamma, tau)`` with
``delta = -C^{-1} d``, ``Gamma = C^{-1}`` and ``tau`` stacking the output
chains ``L_f^{k-1} h_i``. The resulting linear system is in Brunovsky form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (DomainError, DomainExitError, IncompleteLinearizationError,
                     NewtonDivergenceError, NoRelativeDegreeError, PreconditionError,
                     SingularDecouplingError, SingularityError)
from .vectorfield import (RANK_TOL, Box, ControlAffineSystem, ScalarField, VectorField,
                          ad_fields, distribution_rank, is_identically_zero, is_involutive,
                          lie_chain, probe_points)

log = logging.getLogger(__name__)

TOL_SING = 1e-8
NEWTON_MAX_ITER = 50


@dataclass(frozen=True)
class RelativeDegree:
    pi: tuple
    C0: np.ndarray

    @property
    def total(self):
        return int(sum(self.pi))


def singular_value_range(C):
    """``(sigma_min, sigma_max)`` of square matrices ``(..., m, m)``; closed form for m <= 2."""
    C = np.asarray(C, float)
    m = C.shape[-1]
    if m == 1:
        a = np.abs(C[..., 0, 0])
        return a, a
    if m == 2:
        fro2 = (C ** 2).sum(axis=(-2, -1))
        det = np.abs(C[..., 0, 0] * C[..., 1, 1] - C[..., 0, 1] * C[..., 1, 0])
        smax = np.sqrt(0.5 * (fro2 + np.sqrt(np.maximum(fro2 ** 2 - 4 * det ** 2, 0.0))))
        with np.errstate(invalid="ignore", divide="ignore"):
            smin = np.where(smax > 0, det / np.where(smax > 0, smax, 1.0), 0.0)
        return smin, smax
    s = np.linalg.svd(C, compute_uv=False)
    return s[..., -1], s[..., 0]


def _singular(C, tol=TOL_SING):
    """True where ``C`` (shape ``(..., m, m)``) is numerically singular."""
    smin, smax = singular_value_range(C)
    return smin <= tol * smax


def _check_input_rank(sys: ControlAffineSystem, x0):
    if sys.input_rank(x0) != sys.m:
        raise PreconditionError(f"rank G(x0) < m = {sys.m} at x0 = {list(x0)}")


class _Chains:
    """Symbolic Lie chains shared by the relative-degree and triple builders."""

    def __init__(self, sys: ControlAffineSystem, h: Sequence[ScalarField], x0, kmax):
        self.sys = sys
        self.h = list(h)
        self.probes = probe_points(x0, domain=sys.domain)
        pis, chains = [], []
        for i, hi in enumerate(self.h):
            chain = [hi]
            found = None
            for k in range(1, kmax + 1):
                lg = [chain[-1].lie(g) for g in sys.G]
                if not all(is_identically_zero(c, self.probes) for c in lg):
                    found = k
                    break
                chain.append(chain[-1].lie(sys.f))
            if found is None:
                raise NoRelativeDegreeError(f"output h{i + 1} has no relative degree <= {kmax}")
            pis.append(found)
            chains.append(chain)
        self.pi = tuple(pis)
        # chain[i][k] = L_f^k h_i for k = 0..pi_i-1
        self.chains = chains
        self.C_fields = [[chains[i][-1].lie(g) for g in sys.G] for i in range(len(h))]
        self.d_fields = [chains[i][-1].lie(sys.f) for i in range(len(h))]


def _eval_matrix(fields, x):
    x = np.asarray(x, float)
    shape = x.shape[:-1]
    return np.stack([np.stack([np.broadcast_to(c(x), shape) for c in row], axis=-1)
                     for row in fields], axis=-2)


def vector_relative_degree(sys: ControlAffineSystem, h: Sequence[ScalarField], x0,
                           kmax: int | None = None) -> RelativeDegree:
    """Smallest ``pi_i`` with some ``L_gj L_f^{pi_i-1} h_i`` not identically zero."""
    x0 = np.asarray(x0, float)
    if len(h) != sys.m:
        raise PreconditionError(f"need m = {sys.m} outputs, got {len(h)}")
    kmax = sys.n if kmax is None else kmax
    if kmax < sys.n:
        raise PreconditionError("kmax must be at least n")
    _check_input_rank(sys, x0)
    ch = _Chains(sys, h, x0, kmax)
    C0 = _eval_matrix(ch.C_fields, x0)
    if _singular(C0):
        raise SingularDecouplingError(f"decoupling matrix is singular at x0: {C0.tolist()}")
    return RelativeDegree(ch.pi, C0)


def decoupling_matrix(sys, h, rd: RelativeDegree, x) -> np.ndarray:
    fields = [[lie_chain(hi, sys.f, p - 1)[-1].lie(g) for g in sys.G]
              for hi, p in zip(h, rd.pi)]
    return _eval_matrix(fields, x)


def drift_vector(sys, h, rd: RelativeDegree, x) -> np.ndarray:
    x = np.asarray(x, float)
    return np.stack([np.broadcast_to(lie_chain(hi, sys.f, p)[-1](x), x.shape[:-1])
                     for hi, p in zip(h, rd.pi)], axis=-1)


def brunovsky(pi) -> tuple[np.ndarray, np.ndarray]:
    """Block chain-of-integrators pair ``(A, B)`` for relative degree ``pi``."""
    n, m = sum(pi), len(pi)
    A = np.zeros((n, n))
    B = np.zeros((n, m))
    off = 0
    for i, p in enumerate(pi):
        for k in range(p - 1):
            A[off + k, off + k + 1] = 1.0
        B[off + p - 1, i] = 1.0
        off += p
    return A, B


@dataclass(frozen=True, eq=False)
class FeedbackLinearization:
    """The triple ``(delta, Gamma, tau)`` together with ``(A, B)``."""

    system: ControlAffineSystem
    outputs: tuple
    rd: RelativeDegree
    tau_field: VectorField
    C_fields: tuple
    d_fields: tuple
    A: np.ndarray
    B: np.ndarray
    z_domain: Box
    analytic_inverse: VectorField | None = None

    @property
    def n(self):
        return self.system.n

    @property
    def m(self):
        return self.system.m

    # -- coordinate change
    def tau(self, x):
        return self.tau_field(x)

    forward = tau

    def tau_jacobian(self, x):
        return self.tau_field.jacobian(x)

    def jacobian_det(self, x):
        return np.linalg.det(self.tau_jacobian(x))

    def tau_inv(self, z, seed=None, check_domain=True):
        return inverse_map(self, z, seed=seed, check_domain=check_domain)

    inverse = tau_inv

    # -- feedback
    def C(self, x):
        return _eval_matrix(self.C_fields, x)

    def d(self, x):
        x = np.asarray(x, float)
        return np.stack([np.broadcast_to(f(x), x.shape[:-1]) for f in self.d_fields], axis=-1)

    def Gamma(self, x):
        C = self.C(x)
        if np.any(_singular(C)):
            raise SingularityError("decoupling matrix singular; Gamma undefined")
        return np.linalg.inv(C)

    def delta(self, x):
        C = self.C(x)
        if np.any(_singular(C)):
            raise SingularityError("decoupling matrix singular; delta undefined")
        return -np.linalg.solve(C, self.d(x)[..., None])[..., 0]

    def feedback(self, x):
        """``(delta(x), Gamma(x))`` from a single evaluation of the decoupling matrix."""
        C = self.C(x)
        if np.any(_singular(C)):
            raise SingularityError("decoupling matrix singular; feedback undefined")
        Gam = np.linalg.inv(C)
        return -np.einsum("...ij,...j->...i", Gam, self.d(x)), Gam

    def delta_tau(self, z, seed=None):
        return self.delta(self.tau_inv(z, seed=seed, check_domain=False))

    def Gamma_tau(self, z, seed=None):
        return self.Gamma(self.tau_inv(z, seed=seed, check_domain=False))

    def pullback_control(self, x, v):
        return pullback_control(self, x, v)


def build_linearization(sys: ControlAffineSystem, h: Sequence[ScalarField], x0,
                        analytic_inverse: VectorField | None = None) -> FeedbackLinearization:
    x0 = np.asarray(x0, float)
    if len(h) != sys.m:
        raise PreconditionError(f"need m = {sys.m} outputs, got {len(h)}")
    _check_input_rank(sys, x0)
    ch = _Chains(sys, h, x0, sys.n)
    C0 = _eval_matrix(ch.C_fields, x0)
    if _singular(C0):
        raise SingularDecouplingError(f"decoupling matrix is singular at x0: {C0.tolist()}")
    rd = RelativeDegree(ch.pi, C0)
    if rd.total != sys.n:
        raise IncompleteLinearizationError(
            f"relative degree {rd.pi} sums to {rd.total}, not n = {sys.n}; "
            "the system is not full-state linearizable with these outputs")
    tau_comps = [c.expr for chain in ch.chains for c in chain]
    tau_field = VectorField(tau_comps, sys.n)
    zc = tau_field(sys.domain.corners())
    z_domain = Box(tuple(zc.min(axis=0)), tuple(zc.max(axis=0) + 1e-12 * (zc.max(axis=0) == zc.min(axis=0))))
    A, B = brunovsky(rd.pi)
    return FeedbackLinearization(sys, tuple(h), rd, tau_field,
                                 tuple(tuple(r) for r in ch.C_fields), tuple(ch.d_fields),
                                 A, B, z_domain, analytic_inverse)


def inverse_map(fl: FeedbackLinearization, z, seed=None, check_domain=True):
    """Solve ``tau(x) = z`` (batched over leading axes).

    Uses the registered analytic inverse when there is one, otherwise damped
    Newton with step halving seeded at ``seed`` (default: domain center).
    """
    z = np.asarray(z, float)
    if check_domain and not np.all(fl.z_domain.contains(z, tol=1e-9)):
        raise DomainError("query point outside the image of the state domain")
    if fl.analytic_inverse is not None:
        return fl.analytic_inverse(z)
    flat = z.reshape(-1, fl.n)
    if seed is None:
        x = np.broadcast_to(fl.system.domain.center, flat.shape).copy()
    else:
        x = np.broadcast_to(np.asarray(seed, float), z.shape).reshape(-1, fl.n).copy()
    scale = 1.0 + np.abs(flat).max(axis=-1)
    r = fl.tau(x) - flat
    rn = np.abs(r).max(axis=-1)
    stalled = np.zeros(len(flat), bool)
    for _ in range(NEWTON_MAX_ITER):
        idx = np.flatnonzero((rn > 1e-14 * scale) & ~stalled)
        if idx.size == 0:
            break
        xa, ra, rna = x[idx], r[idx], rn[idx]
        J = fl.tau_jacobian(xa)
        if np.any(_singular(J, 1e-14)):
            raise NewtonDivergenceError("singular Jacobian of tau during Newton")
        step = np.linalg.solve(J, ra[..., None])[..., 0]
        t = np.ones(len(idx))
        for _ in range(30):
            trial = xa - t[:, None] * step
            rt = fl.tau(trial) - flat[idx]
            rtn = np.abs(rt).max(axis=-1)
            worse = rtn >= rna
            if not worse.any():
                break
            t = np.where(worse, t / 2, t)
        better = rtn < rna
        x[idx[better]] = trial[better]
        r[idx[better]] = rt[better]
        rn[idx[better]] = rtn[better]
        # no descent possible: rounding floor reached (or a genuine failure,
        # caught by the residual check below)
        stalled[idx[~better]] = True
    bad = rn > 1e-10 * scale
    if bad.any():
        raise NewtonDivergenceError(
            f"Newton inverse did not converge for {int(bad.sum())} point(s) "
            f"after {NEWTON_MAX_ITER} iterations (max residual {rn.max():.3e})")
    return x.reshape(z.shape)


def pullback_control(fl: FeedbackLinearization, x, v):
    """Original input ``u = delta(x) + Gamma(x) v``."""
    v = np.asarray(v, float)
    C = fl.C(x)
    if np.any(_singular(C)):
        raise SingularityError("Gamma(x) undefined: decoupling matrix singular")
    Gam = np.linalg.inv(C)
    delta = -np.einsum("...ij,...j->...i", Gam, fl.d(x))
    return delta + np.einsum("...ij,...j->...i", Gam, v)


# ---------------------------------------------------------------- feasibility

@dataclass
class Prop1Report:
    ranks: list                # ranks[i][p]: rank of Delta_i at probe point p
    constant_dimension: list   # per Delta_i
    involutive: list           # per Delta_i, i = 0..n-2
    witnesses: list            # (probe index, pair) or None per Delta_i
    full_rank: bool            # Delta_{n-1} has dimension n
    feasible: bool

    def as_dict(self):
        return {
            "ranks": self.ranks,
            "constant_dimension": self.constant_dimension,
            "involutive": self.involutive,
            "witnesses": self.witnesses,
            "full_rank": self.full_rank,
            "feasible": self.feasible,
        }


def check_proposition1(sys: ControlAffineSystem, x0, tol: float = RANK_TOL,
                       n_probe: int = 9, radius: float = 0.1) -> Prop1Report:
    """Distribution tests for full-state linearizability near ``x0``.

    Checks, at a small probe set, that each ``Delta_i`` (span of
    ``ad_f^k g_j`` for ``k <= i``) has constant rank, that ``Delta_{n-1}`` has
    rank ``n``, and that ``Delta_0..Delta_{n-2}`` are involutive.
    """
    x0 = np.asarray(x0, float)
    _check_input_rank(sys, x0)
    n = sys.n
    probes = probe_points(x0, radius=radius, count=n_probe, domain=sys.domain)
    ads = [ad_fields(sys.f, g, n - 1) for g in sys.G]
    ranks, const, invol, wit = [], [], [], []
    for i in range(n):
        fields = [ads[j][k] for k in range(i + 1) for j in range(sys.m)]
        r = [distribution_rank(fields, p, tol) for p in probes]
        ranks.append(r)
        const.append(len(set(r)) == 1)
        if i <= n - 2:
            ok, w = True, None
            for pidx, p in enumerate(probes):
                if r[pidx] == n:
                    continue  # full span is trivially closed
                res = is_involutive(fields, p, tol)
                if not res.involutive:
                    ok, w = False, {"probe": pidx, "pair": list(res.witness)}
                    break
            invol.append(ok)
            wit.append(w)
    full = ranks[n - 1][0] == n
    feasible = bool(all(const) and full and all(invol))
    return Prop1Report(ranks, const, invol, wit, full, feasible)


# ---------------------------------------------------------------- closed-loop check

class PiecewiseConstant:
    """Input signal holding ``values[k]`` on ``[k T/K, (k+1) T/K)``."""

    def __init__(self, values, T=1.0):
        self.values = np.atleast_2d(np.asarray(values, float))
        self.T = float(T)

    @classmethod
    def random(cls, rng, segments, m, bound, T=1.0):
        return cls(rng.uniform(-bound, bound, size=(segments, m)), T)

    def __call__(self, t):
        K = len(self.values)
        k = np.clip(np.floor(np.asarray(t) / self.T * K).astype(int), 0, K - 1)
        return self.values[k]


def _rk4(rhs, y, t, dt):
    k1 = rhs(t, y)
    k2 = rhs(t + dt / 2, y + dt / 2 * k1)
    k3 = rhs(t + dt / 2, y + dt / 2 * k2)
    k4 = rhs(t + dt, y + dt * k3)
    return y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def verify_linearization(sys: ControlAffineSystem, fl: FeedbackLinearization, x0,
                         v_signal: Callable, T: float = 1.0, dt: float = 1e-3) -> float:
    """Max over time of ``|tau(x(t)) - z(t)|`` between the closed loop and (A, B).

    The input is sampled once per step (at the step midpoint) and held, so a
    piecewise-constant signal whose breaks fall on the step grid is integrated
    without smoothing error.
    """
    steps = int(round(T / dt))
    if abs(steps * dt - T) > 1e-12 * max(1.0, T):
        raise ValueError("dt must divide T")
    x = np.asarray(x0, float).copy()
    z = fl.tau(x)
    dev = 0.0
    for k in range(steps):
        t = k * dt
        v = np.asarray(v_signal(t + dt / 2), float)
        x = _rk4(lambda _t, y: sys.rhs(y, pullback_control(fl, y, v)), x, t, dt)
        z = _rk4(lambda _t, y: fl.A @ y + fl.B @ v, z, t, dt)
        if not sys.domain.contains(x):
            raise DomainExitError(f"closed-loop trajectory left the domain at t={t + dt:.4f}")
        dev = max(dev, float(np.abs(fl.tau(x) - z).max()))
    return dev
