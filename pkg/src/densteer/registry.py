"""Built-in systems, written in the expression language."""

from __future__ import annotations

from dataclasses import dataclass

from .vectorfield import Box, ControlAffineSystem, ScalarField, VectorField


@dataclass(frozen=True)
class SystemEntry:
    name: str
    f: tuple
    G: tuple  # input columns, each n expressions
    h: tuple
    lower: tuple
    upper: tuple
    x0: tuple
    inverse: tuple | None = None  # analytic tau^{-1}, in variables x1..xn standing for z
    description: str = ""

    @property
    def n(self):
        return len(self.f)

    def system(self) -> ControlAffineSystem:
        return build_system(self.f, self.G, self.lower, self.upper, self.name)

    def outputs(self):
        return [ScalarField.parse(s, self.n) for s in self.h]

    def analytic_inverse(self):
        if self.inverse is None:
            return None
        return VectorField.parse(self.inverse, self.n)


def build_system(f, G, lower, upper, name="system") -> ControlAffineSystem:
    n = len(f)
    dom = Box(tuple(lower), tuple(upper))
    return ControlAffineSystem(
        VectorField.parse(f, n, domain=dom),
        tuple(VectorField.parse(g, n, domain=dom) for g in G),
        dom, name)


REGISTRY = {
    e.name: e
    for e in [
        SystemEntry(
            "paper_example",
            f=("x2 + x2^2", "x3 - x1*x4 + x4*x5", "x2*x4 + x1*x5 - x5^2", "x5", "x2^2"),
            G=(("0", "0", "cos(x1 - x5)", "0", "0"), ("1", "0", "1", "0", "1")),
            h=("x1 - x5", "x4"),
            lower=(-0.75,) * 5, upper=(0.75,) * 5, x0=(0.0,) * 5,
            inverse=("x1 + x5", "x2", "x3 + x1*x4", "x4", "x5"),
            description="five-state two-input example; the box keeps |x1 - x5| < pi/2",
        ),
        SystemEntry(
            "double_integrator",
            f=("x2", "0"), G=(("0", "1"),), h=("x1",),
            lower=(-10.0, -10.0), upper=(10.0, 10.0), x0=(0.0, 0.0),
            inverse=("x1", "x2"),
        ),
        SystemEntry(
            "toy1d",
            f=("0",), G=(("1",),), h=("x1",),
            lower=(-10.0,), upper=(10.0,), x0=(0.0,),
            inverse=("x1",),
        ),
        SystemEntry(
            "toy2d_nonlinear",
            f=("x2 + x2^3", "0"), G=(("0", "1"),), h=("x1",),
            lower=(-4.0, -2.0), upper=(4.0, 2.0), x0=(0.0, 0.0),
            description="x1' = x2 + x2^3, x2' = u; tau = (x1, x2 + x2^3)",
        ),
    ]
}


def get(name: str) -> SystemEntry:
    try:
        return REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown registry system {name!r}; known: {sorted(REGISTRY)}") from None
