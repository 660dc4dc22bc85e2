"""Scenario files: YAML documents describing one steering problem.

Example (all keys shown; ``system`` may instead give ``f``, ``G`` and
``domain`` inline)::

    name: toy1d_bridge
    system: {registry: toy1d}
    outputs: [x1]                  # optional with a registry system
    x0: [0.0]                      # optional with a registry system
    epsilon: 0.5
    endpoints:
      rho0: {gaussian: {mean: [-1.0], cov: [[0.25]]}}
      rho1: {grid_file: rho1.csv}  # relative to the scenario file
    grid: {lower: [-4.0], upper: [4.0], shape: [400]}
    nt: 200
    dt: 0.001
    N: 100000
    seed: 7
    scheme: euler_maruyama
    run_mode: all

``endpoints`` are densities in the original coordinates; ``grid`` is the
solver grid in linearized coordinates.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import registry
from .errors import ParseError, ScenarioError
from .exprdsl import parse

RUN_MODES = ("analyze", "steer", "simulate", "all")
SCHEMES = ("deterministic", "euler_maruyama")

DEFAULTS = {
    "epsilon": 0.5,
    "nt": 100,
    "dt": 1e-3,
    "N": 1000,
    "seed": 0,
    "scheme": "euler_maruyama",
    "run_mode": "analyze",
    "tol": 1e-8,
    "max_iter": 500,
    "record_every": 10,
}


@dataclass(frozen=True)
class Diagnostic:
    path: str
    message: str

    def __str__(self):
        return f"{self.path}: {self.message}"


@dataclass(frozen=True, eq=False)
class Scenario:
    data: dict
    source: Path | None = None

    def __getitem__(self, key):
        return self.data[key]

    def get(self, key, default=None):
        return self.data.get(key, default)

    @property
    def base_dir(self) -> Path:
        return self.source.parent if self.source else Path.cwd()

    @property
    def name(self):
        return self.data.get("name") or (self.source.stem if self.source else "scenario")

    def digest(self) -> str:
        return scenario_hash(self.data)

    # resolved system description
    def system_spec(self):
        """``(f, G, h, lower, upper, x0, inverse)`` with registry values filled in."""
        s = self.data["system"]
        if "registry" in s:
            e = registry.get(s["registry"])
            f, G, lower, upper, inv = e.f, e.G, e.lower, e.upper, e.inverse
            h, x0 = e.h, e.x0
        else:
            f, G = s["f"], s["G"]
            lower, upper = s["domain"]["lower"], s["domain"]["upper"]
            inv, h, x0 = s.get("inverse"), None, None
        h = self.data.get("outputs", h)
        x0 = self.data.get("x0", x0)
        return (tuple(f), tuple(tuple(g) for g in G), tuple(h), tuple(lower), tuple(upper),
                tuple(x0), None if inv is None else tuple(inv))


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def scenario_hash(data) -> str:
    return hashlib.sha256(canonical_json(data).encode()).hexdigest()


def bundled_path(name: str) -> Path | None:
    p = resources.files("densteer") / "scenarios" / (name if name.endswith(".scn") else name + ".scn")
    return Path(str(p)) if p.is_file() else None


def bundled_names():
    d = resources.files("densteer") / "scenarios"
    return sorted(p.name for p in d.iterdir() if p.name.endswith(".scn"))


def resolve_path(arg: str) -> Path:
    """A path as given, or a bundled scenario when ``arg`` is a bare name."""
    p = Path(arg)
    if p.exists() or p.parent != Path("."):
        return p
    return bundled_path(arg) or p


def parse_override(item: str):
    if "=" not in item:
        raise ScenarioError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    if not key:
        raise ScenarioError(f"override {item!r} has an empty key")
    return key.strip(), yaml.safe_load(raw)


def apply_overrides(data: dict, overrides) -> dict:
    out = copy.deepcopy(data)
    for item in overrides or ():
        key, value = parse_override(item) if isinstance(item, str) else item
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            nxt = node.get(p)
            if not isinstance(nxt, dict):
                nxt = node[p] = {}
            node = nxt
        node[parts[-1]] = value
    return out


def load(path, overrides=()) -> Scenario:
    """Read a scenario file and apply overrides; defaults are filled in."""
    path = Path(path)
    if not path.is_file():
        raise ScenarioError(f"scenario file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(raw, dict):
        raise ScenarioError(f"{path}: top level must be a mapping")
    data = {**DEFAULTS, **raw}
    return Scenario(apply_overrides(data, overrides), path.resolve())


# ---------------------------------------------------------------- static checks

def _is_number(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool) and np.isfinite(x)


def _vector(diags, path, value, n=None):
    if not isinstance(value, (list, tuple)) or not all(_is_number(v) for v in value):
        diags.append(Diagnostic(path, "expected a list of numbers"))
        return None
    if n is not None and len(value) != n:
        diags.append(Diagnostic(path, f"expected {n} entries, got {len(value)}"))
        return None
    return np.asarray(value, float)


def _exprs(diags, path, value, n):
    if not isinstance(value, (list, tuple)) or not all(isinstance(v, (str, int, float)) for v in value):
        diags.append(Diagnostic(path, "expected a list of expression strings"))
        return
    for i, src in enumerate(value):
        try:
            parse(str(src), n)
        except ParseError as exc:
            diags.append(Diagnostic(f"{path}[{i}]", str(exc)))


def _check_endpoint(diags, path, spec, n, base: Path):
    if not isinstance(spec, dict) or len(spec) != 1 or not ({"gaussian", "grid_file"} & set(spec)):
        diags.append(Diagnostic(path, "expected exactly one of 'gaussian' or 'grid_file'"))
        return
    if "grid_file" in spec:
        f = base / str(spec["grid_file"])
        if not f.is_file():
            diags.append(Diagnostic(f"{path}.grid_file", f"file not found: {f}"))
        elif not Path(str(f) + ".header.json").is_file():
            diags.append(Diagnostic(f"{path}.grid_file", f"header not found: {f}.header.json"))
        return
    g = spec["gaussian"]
    if not isinstance(g, dict):
        diags.append(Diagnostic(f"{path}.gaussian", "expected a mapping with mean and cov"))
        return
    _vector(diags, f"{path}.gaussian.mean", g.get("mean"), n)
    cov = g.get("cov")
    try:
        C = np.asarray(cov, float)
    except (TypeError, ValueError):
        C = None
    if C is None or C.shape != (n, n):
        diags.append(Diagnostic(f"{path}.gaussian.cov", f"expected a {n}x{n} matrix"))
    elif np.abs(C - C.T).max() > 1e-12 or np.linalg.eigvalsh(C).min() <= 0:
        diags.append(Diagnostic(f"{path}.gaussian.cov", "must be symmetric positive definite"))


def validate(scn: Scenario) -> list[Diagnostic]:
    """Static checks only: structure, grammar, dimensions, boxes, files."""
    d = scn.data
    diags: list[Diagnostic] = []
    s = d.get("system")
    if not isinstance(s, dict):
        return [Diagnostic("system", "missing or not a mapping")]
    if "registry" in s:
        if s["registry"] not in registry.REGISTRY:
            return [Diagnostic("system.registry",
                               f"unknown system {s['registry']!r}; known: {sorted(registry.REGISTRY)}")]
        e = registry.get(s["registry"])
        n, m = e.n, len(e.G)
    else:
        f, G, dom = s.get("f"), s.get("G"), s.get("domain")
        if not isinstance(f, list) or not f:
            return [Diagnostic("system.f", "expected a non-empty list of expressions")]
        n = len(f)
        _exprs(diags, "system.f", f, n)
        if not isinstance(G, list) or not G:
            diags.append(Diagnostic("system.G", "expected a non-empty list of input columns"))
            m = 0
        else:
            m = len(G)
            for j, col in enumerate(G):
                if not isinstance(col, list) or len(col) != n:
                    got = len(col) if isinstance(col, list) else "none"
                    diags.append(Diagnostic(f"system.G[{j}]", f"expected {n} expressions, got {got}"))
                else:
                    _exprs(diags, f"system.G[{j}]", col, n)
        if not isinstance(dom, dict):
            diags.append(Diagnostic("system.domain", "expected a mapping with lower and upper"))
        else:
            lo = _vector(diags, "system.domain.lower", dom.get("lower"), n)
            hi = _vector(diags, "system.domain.upper", dom.get("upper"), n)
            if lo is not None and hi is not None and np.any(lo >= hi):
                diags.append(Diagnostic("system.domain", "lower must be below upper on every axis"))
        if "inverse" in s:
            _exprs(diags, "system.inverse", s["inverse"], n)
        if "outputs" not in d:
            diags.append(Diagnostic("outputs", "required for an inline system"))
        if "x0" not in d:
            diags.append(Diagnostic("x0", "required for an inline system"))
    if "outputs" in d:
        h = d["outputs"]
        if not isinstance(h, list):
            diags.append(Diagnostic("outputs", "expected a list of expression strings"))
        else:
            if m and len(h) != m:
                diags.append(Diagnostic(
                    "outputs", f"need one output per input (m = {m}) for a square "
                    f"decoupling matrix, got {len(h)}"))
            _exprs(diags, "outputs", h, n)
    if "x0" in d:
        _vector(diags, "x0", d["x0"], n)

    eps = d.get("epsilon")
    if not _is_number(eps) or eps < 0:
        diags.append(Diagnostic("epsilon", "expected a non-negative number"))
    for key in ("nt", "N", "max_iter", "record_every"):
        v = d.get(key)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            diags.append(Diagnostic(key, "expected a positive integer"))
    if not isinstance(d.get("seed"), int) or d.get("seed") < 0:
        diags.append(Diagnostic("seed", "expected a non-negative integer"))
    for key in ("dt", "tol"):
        v = d.get(key)
        if not _is_number(v) or v <= 0:
            diags.append(Diagnostic(key, "expected a positive number"))
    dt = d.get("dt")
    if _is_number(dt) and dt > 0 and abs(round(1 / dt) * dt - 1) > 1e-12:
        diags.append(Diagnostic("dt", "must divide the unit horizon"))
    if d.get("scheme") not in SCHEMES:
        diags.append(Diagnostic("scheme", f"expected one of {SCHEMES}"))
    mode = d.get("run_mode")
    if mode not in RUN_MODES:
        diags.append(Diagnostic("run_mode", f"expected one of {RUN_MODES}"))

    needs_endpoints = mode in ("steer", "simulate", "all")
    ends = d.get("endpoints")
    if ends is not None or needs_endpoints:
        if not isinstance(ends, dict):
            diags.append(Diagnostic("endpoints", "expected a mapping with rho0 and rho1"))
        else:
            for key in ("rho0", "rho1"):
                if key not in ends:
                    diags.append(Diagnostic(f"endpoints.{key}", "missing"))
                else:
                    _check_endpoint(diags, f"endpoints.{key}", ends[key], n, scn.base_dir)
    grid = d.get("grid")
    if grid is not None or (needs_endpoints and n <= 2):
        if not isinstance(grid, dict):
            diags.append(Diagnostic("grid", "expected a mapping with lower, upper and shape"))
        else:
            lo = _vector(diags, "grid.lower", grid.get("lower"), n)
            hi = _vector(diags, "grid.upper", grid.get("upper"), n)
            if lo is not None and hi is not None and np.any(lo >= hi):
                diags.append(Diagnostic("grid", "lower must be below upper on every axis"))
            sh = grid.get("shape")
            if (not isinstance(sh, list) or len(sh) != n
                    or not all(isinstance(c, int) and c >= 2 for c in sh)):
                diags.append(Diagnostic("grid.shape", f"expected {n} integers >= 2"))
    if mode == "steer" and n > 2:
        diags.append(Diagnostic("run_mode", f"grid steering supports n <= 2, system has n = {n}"))
    return diags
