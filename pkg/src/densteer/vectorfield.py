"""Scalar/vector fields with Lie calculus and distribution tests.

Fields wrap expression trees from :mod:`densteer.exprdsl`. Derivatives are
taken symbolically on the tree, so nested Lie derivatives and brackets are
exact up to floating point evaluation; finite differences appear only as a
cross-check (:func:`fd_gradient`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.stats import qmc

from . import exprdsl as ex
from .errors import CapabilityError, DomainError, NumericsError

TOL_ZERO = 1e-9
N_PROBE = 64
R_PROBE = 0.5
RANK_TOL = 1e-8


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lower, upper]`` in R^n."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != len(hi):
            raise ValueError("box bounds differ in length")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"empty box: lower={lo}, upper={hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def cube(cls, n, radius, center=None):
        c = np.zeros(n) if center is None else np.asarray(center, float)
        return cls(tuple(c - radius), tuple(c + radius))

    @property
    def dim(self):
        return len(self.lower)

    @property
    def lo(self):
        return np.array(self.lower)

    @property
    def hi(self):
        return np.array(self.upper)

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    def contains(self, x, tol=0.0):
        x = np.asarray(x, float)
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=-1)

    def corners(self):
        n = self.dim
        idx = (np.arange(2 ** n)[:, None] >> np.arange(n)) & 1
        return np.where(idx == 1, self.hi, self.lo)


def _as_points(x, n):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (n,):
        raise ValueError(f"expected points with trailing dimension {n}, got shape {x.shape}")
    return x


def _finite(val, what):
    if not np.all(np.isfinite(val)):
        raise NumericsError(f"non-finite value while evaluating {what}")
    return val


class ScalarField:
    """Smooth scalar field on R^n defined by an expression tree.

    ``max_order`` caps how many nested derivatives may be requested; ``None``
    means unbounded (symbolic differentiation has no intrinsic limit).
    """

    def __init__(self, expr, n, domain: Box | None = None, max_order: int | None = None):
        if n < 1:
            raise ValueError("arity must be positive")
        bad = [i for i in ex.free_vars(expr) if i > n]
        if bad:
            raise ValueError(f"expression uses x{max(bad)} but arity is {n}")
        self.expr = expr
        self.n = n
        self.domain = domain
        self.max_order = max_order
        self._fn = ex.compile_expr(expr)
        self._partials = {}

    @classmethod
    def parse(cls, src, n, **kw):
        return cls(ex.parse(src, n), n, **kw)

    def __repr__(self):
        return f"ScalarField({ex.to_string(self.expr)!r}, n={self.n})"

    def __str__(self):
        return ex.to_string(self.expr)

    def _derived(self, expr):
        order = None if self.max_order is None else self.max_order - 1
        return ScalarField(expr, self.n, self.domain, order)

    def __call__(self, x):
        x = _as_points(x, self.n)
        with np.errstate(all="ignore"):
            val = self._fn(x)
        val = _finite(val, str(self))
        return float(val) if np.ndim(val) == 0 else val

    def partial(self, i: int) -> "ScalarField":
        """Derivative with respect to ``x_i`` (0-based index)."""
        if self.max_order is not None and self.max_order < 1:
            raise CapabilityError(f"derivative order exhausted for {self}")
        if i not in self._partials:
            self._partials[i] = self._derived(ex.simplify(ex.diff(self.expr, i + 1)))
        return self._partials[i]

    def gradient(self, x):
        x = _as_points(x, self.n)
        return np.stack([np.broadcast_to(self.partial(i)(x), x.shape[:-1])
                         for i in range(self.n)], axis=-1)

    def hessian(self, x):
        x = _as_points(x, self.n)
        rows = [np.stack([np.broadcast_to(self.partial(i).partial(j)(x), x.shape[:-1])
                          for j in range(self.n)], axis=-1) for i in range(self.n)]
        return np.stack(rows, axis=-2)

    def lie(self, xi: "VectorField") -> "ScalarField":
        """Symbolic Lie derivative ``<grad self, xi>``."""
        _check_arity(self, xi)
        acc = ex.ZERO
        for i in range(self.n):
            acc = ex.add(acc, ex.mul(self.partial(i).expr, xi.components[i]))
        return self._derived(ex.simplify(acc))

    def __mul__(self, other: "ScalarField") -> "ScalarField":
        return ScalarField(ex.mul(self.expr, other.expr), self.n, self.domain, self.max_order)


class VectorField:
    """Smooth vector field R^n -> R^n, one expression per component."""

    def __init__(self, components: Sequence, n: int, domain: Box | None = None,
                 max_order: int | None = None):
        comps = tuple(components)
        if len(comps) != n:
            raise ValueError(f"vector field needs {n} components, got {len(comps)}")
        self.components = comps
        self.n = n
        self.domain = domain
        self.max_order = max_order
        self.scalars = tuple(ScalarField(c, n, domain, max_order) for c in comps)

    @classmethod
    def parse(cls, srcs, n, **kw):
        vf = ex.parse_vector(srcs, n)
        return cls(vf.components, n, **kw)

    @classmethod
    def constant(cls, values):
        values = [float(v) for v in values]
        return cls([ex.num(v) for v in values], len(values))

    def __repr__(self):
        return f"VectorField({[str(s) for s in self.scalars]})"

    def __call__(self, x):
        x = _as_points(x, self.n)
        return np.stack([np.broadcast_to(s(x), x.shape[:-1]) for s in self.scalars], axis=-1)

    def jacobian(self, x):
        """``J[..., i, j] = d xi_i / d x_j``."""
        return np.stack([s.gradient(x) for s in self.scalars], axis=-2)

    def with_domain(self, domain):
        return VectorField(self.components, self.n, domain, self.max_order)

    def bracket(self, other: "VectorField") -> "VectorField":
        """Symbolic Lie bracket ``(grad other) self - (grad self) other``."""
        _check_arity(self, other)
        comps = []
        for i in range(self.n):
            a = other.scalars[i].lie(self).expr
            b = self.scalars[i].lie(other).expr
            comps.append(ex.simplify(ex.sub(a, b)))
        order = _min_order(self.max_order, other.max_order)
        return VectorField(comps, self.n, self.domain or other.domain,
                           None if order is None else order - 1)

    def is_constant(self):
        return all(not ex.free_vars(c) for c in self.components)


def _min_order(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return min(a, b)


def _check_arity(*fields):
    ns = {f.n for f in fields}
    if len(ns) != 1:
        raise ValueError(f"fields have mismatched arities {sorted(ns)}")


def _check_domain(x, *fields):
    for f in fields:
        if f.domain is not None and not np.all(f.domain.contains(x, tol=1e-12)):
            raise DomainError(f"point {np.asarray(x).tolist()} outside field domain")


@dataclass(frozen=True)
class ControlAffineSystem:
    """``xdot = f(x) + sum_j g_j(x) u_j`` on a box-shaped domain."""

    f: VectorField
    G: tuple
    domain: Box
    name: str = "system"

    def __post_init__(self):
        object.__setattr__(self, "G", tuple(self.G))
        n = self.f.n
        if any(g.n != n for g in self.G):
            raise ValueError("drift and input fields must share arity")
        if not 1 <= len(self.G) <= n:
            raise ValueError(f"need 1 <= m <= n, got m={len(self.G)}, n={n}")
        if self.domain.dim != n:
            raise ValueError("domain dimension differs from state dimension")

    @property
    def n(self):
        return self.f.n

    @property
    def m(self):
        return len(self.G)

    def input_matrix(self, x):
        """``G(x)`` with shape ``(..., n, m)``."""
        return np.stack([g(x) for g in self.G], axis=-1)

    def rhs(self, x, u):
        u = np.asarray(u, float)
        return self.f(x) + np.einsum("...ij,...j->...i", self.input_matrix(x), u)

    def input_rank(self, x, tol=RANK_TOL):
        return distribution_rank(list(self.G), x, tol)


# ---------------------------------------------------------------- pointwise operations

def lie_derivative(lam: ScalarField, xi: VectorField, x) -> float:
    _check_arity(lam, xi)
    _check_domain(x, lam, xi)
    return lam.lie(xi)(x)


def lie_derivative_k(lam: ScalarField, xi: VectorField, k: int, x) -> float:
    if k < 0:
        raise ValueError("k must be non-negative")
    if lam.max_order is not None and k > lam.max_order:
        raise CapabilityError(f"requested order {k} exceeds supported order {lam.max_order}")
    _check_domain(x, lam, xi)
    return lie_chain(lam, xi, k)[k](x)


def lie_chain(lam: ScalarField, xi: VectorField, k: int) -> list[ScalarField]:
    """``[L^0 lam, L^1 lam, ..., L^k lam]`` as symbolic fields."""
    chain = [lam]
    for _ in range(k):
        chain.append(chain[-1].lie(xi))
    return chain


def lie_bracket(xi: VectorField, eta: VectorField, x) -> np.ndarray:
    _check_arity(xi, eta)
    _check_domain(x, xi, eta)
    val = eta.jacobian(x) @ xi(x) - xi.jacobian(x) @ eta(x)
    return _finite(val, "Lie bracket")


def ad_fields(f: VectorField, g: VectorField, k: int) -> list[VectorField]:
    """``[ad_f^0 g, ..., ad_f^k g]`` as symbolic fields."""
    out = [g]
    for _ in range(k):
        out.append(f.bracket(out[-1]))
    return out


def ad_k(f: VectorField, g: VectorField, k: int, x) -> np.ndarray:
    if k < 0:
        raise ValueError("k must be non-negative")
    order = _min_order(f.max_order, g.max_order)
    if order is not None and k > order - 1:
        raise CapabilityError(f"ad^{k} needs derivative order {k + 1} > {order}")
    _check_domain(x, f, g)
    return _finite(ad_fields(f, g, k)[k](x), "iterated bracket")


def _rank_of(M, tol):
    s = np.linalg.svd(M, compute_uv=False)
    if not np.all(np.isfinite(s)):
        raise NumericsError("non-finite singular values")
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > tol * s[0]))


def distribution_rank(fields: Sequence[VectorField], x, tol: float = RANK_TOL) -> int:
    """Numerical rank of ``span{fields}(x)`` (relative SVD threshold)."""
    if not fields:
        raise ValueError("empty field list")
    _check_arity(*fields)
    M = np.column_stack([_finite(np.asarray(v(x), float), "distribution") for v in fields])
    return _rank_of(M, tol)


class Involutivity(NamedTuple):
    involutive: bool
    witness: tuple | None  # 1-based indices of a violating pair


def is_involutive(fields: Sequence[VectorField], x, tol: float = RANK_TOL) -> Involutivity:
    """Test ``[xi_i, xi_j](x) in span{fields}(x)`` for all pairs."""
    if not fields:
        raise ValueError("empty field list")
    _check_arity(*fields)
    cols = [np.asarray(v(x), float) for v in fields]
    base = _rank_of(np.column_stack(cols), tol)
    for i in range(len(fields)):
        for j in range(i + 1, len(fields)):
            br = lie_bracket(fields[i], fields[j], x)
            if _rank_of(np.column_stack(cols + [br]), tol) > base:
                return Involutivity(False, (i + 1, j + 1))
    return Involutivity(True, None)


# ---------------------------------------------------------------- probing

def probe_points(x0, radius: float = R_PROBE, count: int = N_PROBE, domain: Box | None = None):
    """Deterministic quasi-random points in a box around ``x0`` (``x0`` first)."""
    x0 = np.asarray(x0, float)
    n = x0.size
    pts = qmc.Halton(d=n, scramble=False).random(count)
    pts = x0 + radius * (2 * pts - 1)
    pts[0] = x0
    if domain is not None:
        pts = np.clip(pts, domain.lo, domain.hi)
    return pts


def is_identically_zero(lam: ScalarField, points, tol: float = TOL_ZERO) -> bool:
    """Heuristic ``lam == 0`` near a point: all probe values below ``tol``."""
    if not ex.free_vars(lam.expr) and isinstance(lam.expr, ex.Num):
        return abs(lam.expr.value) < tol
    return bool(np.max(np.abs(np.broadcast_to(lam(points), (len(points),)))) < tol)


def fd_gradient(lam: ScalarField, x, scale: float = 1.0):
    """Central-difference gradient with step ``1e-5 * scale`` (cross-check only)."""
    x = np.asarray(x, float)
    h = 1e-5 * scale
    g = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (lam(x + e) - lam(x - e)) / (2 * h)
    return g


def fd_jacobian(xi: VectorField, x, scale: float = 1.0):
    return np.stack([fd_gradient(s, x, scale) for s in xi.scalars])
