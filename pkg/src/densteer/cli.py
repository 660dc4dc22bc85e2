"""Command line entry point: ``densteer run`` and ``densteer validate``."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import platform
import sys
import traceback
from importlib import metadata
from pathlib import Path

import numpy as np

from . import __version__
from .bridge import (LinearizedPlant, control_energy, save_solution,
                     schrodinger_fixed_point)
from .density import (Grid, GaussianDensity, load_grid_density, moments,
                      pushforward_density)
from .errors import DensteerError, ScenarioError
from .feedlin import PiecewiseConstant, build_linearization, check_proposition1
from .registry import build_system
from .scenario import Scenario, load, resolve_path, validate as static_checks
from .simulate import (SimConfig, closed_loop_pair, save_trajectory,
                       steer_original_coordinates)
from .vectorfield import ScalarField, VectorField, probe_points

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
SPOT_POINTS = 8
TRAJ_PARTICLES = 100
CLOSED_LOOP_PARTICLES = 200


# ---------------------------------------------------------------- helpers

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(c)) if isinstance(c, (float, np.floating)) else c for c in r])


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o))


def _versions():
    out = {"densteer": __version__, "python": platform.python_version()}
    for pkg in ("numpy", "scipy", "matplotlib", "PyYAML"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


class Pipeline:
    """Builds the linearization once and runs the requested stages."""

    def __init__(self, scn: Scenario, out: Path, plots: bool = True):
        self.scn = scn
        self.out = out
        self.plots = plots
        f, G, h, lower, upper, x0, inv = scn.system_spec()
        self.sys = build_system(f, G, lower, upper, scn.name)
        self.h = [ScalarField.parse(s, self.sys.n) for s in h]
        self.x0 = np.asarray(x0, float)
        inverse = VectorField.parse(inv, self.sys.n) if inv else None
        self.fl = build_linearization(self.sys, self.h, self.x0, inverse)
        self.solution = None
        self.plant = None
        self.summary = {}

    @property
    def n(self):
        return self.sys.n

    def _endpoint(self, key):
        spec = self.scn["endpoints"][key]
        if "gaussian" in spec:
            g = spec["gaussian"]
            return GaussianDensity(g["mean"], g["cov"])
        return load_grid_density(self.scn.base_dir / spec["grid_file"])

    # -- stages
    def analyze(self):
        fl, out = self.fl, self.out
        C0 = fl.rd.C0
        rep = check_proposition1(self.sys, self.x0)
        radius = 0.5 * float(np.min(self.sys.domain.hi - self.sys.domain.lo)) / 4
        pts = probe_points(self.x0, radius, SPOT_POINTS, self.sys.domain)
        rows = []
        for p, x in enumerate(pts):
            for name, val in (("x", x), ("tau", fl.tau(x)), ("delta", fl.delta(x)),
                              ("Gamma", fl.Gamma(x).reshape(-1))):
                for i, v in enumerate(np.atleast_1d(val)):
                    rows.append([p, name, i, float(v)])
        _write_csv(out / "spot_table.csv", ["point", "quantity", "index", "value"], rows)
        analysis = {
            "relative_degree": list(fl.rd.pi),
            "total_relative_degree": fl.rd.total,
            "decoupling_matrix_at_x0": C0,
            "A": fl.A, "B": fl.B,
            "tau": [str(c) for c in fl.tau_field.scalars],
            "decoupling_matrix": [[str(c) for c in row] for row in fl.C_fields],
            "drift_vector": [str(c) for c in fl.d_fields],
            "proposition1": rep.as_dict(),
            "x0": self.x0,
        }
        _write_json(out / "analysis.json", analysis)
        self.summary["analyze"] = {"relative_degree": list(fl.rd.pi),
                                   "decoupling_matrix_at_x0": C0.tolist(),
                                   "feasible": rep.feasible}

    def steer(self, write=True):
        scn = self.scn
        if self.n > 2:
            raise ScenarioError(f"grid steering supports n <= 2, system has n = {self.n}")
        g = scn["grid"]
        grid = Grid.from_bounds(g["lower"], g["upper"], g["shape"])
        s0, f0 = pushforward_density(self._endpoint("rho0"), self.fl, grid)
        s1, f1 = pushforward_density(self._endpoint("rho1"), self.fl, grid)
        self.plant = LinearizedPlant.from_linearization(self.fl, scn["epsilon"], grid.box)
        sol = schrodinger_fixed_point(self.plant, s0, s1, scn["nt"], scn["tol"], scn["max_iter"])
        self.solution, self.sigma1 = sol, s1
        energy = control_energy(self.plant, sol)
        mean, cov = sol.moment_path()
        l1 = [float(np.abs(sol.sigma_opt[0] - s0.values).sum() * grid.cell_volume),
              float(np.abs(sol.sigma_opt[-1] - s1.values).sum() * grid.cell_volume)]
        info = {"iterations": sol.iterations, "final_change": sol.residual_history[-1],
                "control_energy": energy, "pushforward_factors": [f0, f1],
                "boundary_l1": l1, "flagged_mass": sol.flagged_mass, "substeps": sol.substeps}
        self.summary["steer"] = info
        if not write:
            return
        every = max(1, scn["nt"] // 10)
        save_solution(sol, self.out / "bridge", extra={"scenario_hash": scn.digest(), **info},
                      every=every)
        rows = []
        for k, t in enumerate(sol.times):
            for a in range(self.n):
                rows.append([float(t), f"mean{a + 1}", float(mean[k, a])])
                for b in range(a, self.n):
                    rows.append([float(t), f"cov{a + 1}{b + 1}", float(cov[k, a, b])])
        _write_csv(self.out / "moment_path.csv", ["t", "statistic", "value"], rows)
        if self.plots:
            from . import plotting
            if self.n == 1:
                plotting.bridge_1d(sol, self.out / "bridge.png")
                plotting.moment_path(sol.times, mean[:, 0], cov[:, 0, 0], self.out / "moment_path.png")
            else:
                plotting.bridge_2d(sol, self.out / "bridge.png")

    def simulate(self):
        scn = self.scn
        cfg = SimConfig(scn["dt"], 1.0, scn["N"], scn["seed"], scn["scheme"], scn["record_every"])
        if self.n > 2:
            return self._simulate_closed_loop(cfg)
        if self.solution is None:
            self.steer(write=False)
        rho0, rho1 = self._endpoint("rho0"), self._endpoint("rho1")
        sampler = _sampler(rho0)
        rep = steer_original_coordinates(self.sys, self.fl, self.plant, self.solution, sampler, cfg,
                                         rho1=rho1)
        info = rep.as_dict()
        info["energy_grid"] = self.summary.get("steer", {}).get("control_energy")
        if info["energy_grid"] is None:
            info["energy_grid"] = control_energy(self.plant, self.solution)
        _write_json(self.out / "simulation_report.json", info)
        save_trajectory(rep.z_trajectory, self.out / "trajectories_z.csv", TRAJ_PARTICLES)
        save_trajectory(rep.x_trajectory, self.out / "trajectories_x.csv", TRAJ_PARTICLES)
        rows = []
        for k, t in enumerate(rep.z_trajectory.times):
            m, c = moments(rep.z_trajectory.ensemble(k))
            for a in range(self.n):
                rows.append([float(t), f"mean{a + 1}", float(m[a])])
                rows.append([float(t), f"var{a + 1}", float(c[a, a])])
        _write_csv(self.out / "particle_moments.csv", ["t", "statistic", "value"], rows)
        self.summary["simulate"] = {k: info[k] for k in
                                    ("consistency", "energy_particles", "energy_grid",
                                     "terminal_mean", "target_mean", "exits")}
        if self.plots:
            from . import plotting
            zT = rep.z_trajectory.final
            if self.n == 1:
                plotting.terminal_1d(zT[:, 0], self.solution.grid, self.sigma1.values,
                                     self.out / "terminal.png")
            else:
                x_first = self.fl.tau_inv(rep.z_trajectory.points[0], check_domain=False)
                x_last = self.fl.tau_inv(zT, check_domain=False)
                plotting.terminal_2d(x_first, x_last, self.out / "terminal.png")

    def _simulate_closed_loop(self, cfg: SimConfig):
        """Closed-loop equivalence for systems too large for the grid solver.

        Particles from ``rho0`` are driven by independent random
        piecewise-constant inputs through both the original closed loop and the
        linear plant.
        """
        rng = np.random.default_rng(cfg.seed)
        count = min(cfg.N, CLOSED_LOOP_PARTICLES)
        xs = _sampler(self._endpoint("rho0"))(count, rng)
        signal = PiecewiseConstant(rng.uniform(-0.5, 0.5, size=(10, count, self.sys.m)))
        plant = LinearizedPlant.from_linearization(self.fl, 0.0)
        cfg = SimConfig(cfg.dt, 1.0, count, cfg.seed, "deterministic", cfg.record_every)
        xt, zt, dev = closed_loop_pair(self.sys, self.fl, plant, lambda z, t: signal(t), xs, cfg)
        per = np.abs(self.fl.tau(xt.points) - zt.points).max(axis=(0, 2))
        _write_csv(self.out / "closed_loop.csv", ["particle", "max_deviation"],
                   [[i, float(d)] for i, d in enumerate(per)])
        save_trajectory(xt, self.out / "trajectories_x.csv")
        info = {"particles": count, "max_deviation": dev}
        _write_json(self.out / "simulation_report.json", info)
        self.summary["simulate"] = info


def _sampler(rho):
    if isinstance(rho, GaussianDensity):
        return rho.sample

    def draw(N, rng):
        # inverse-CDF over cells, uniform within the chosen cell
        p = rho.values.reshape(-1) * rho.cell_volume
        idx = rng.choice(p.size, size=N, p=p / p.sum())
        c = rho.grid.centers().reshape(-1, rho.grid.dim)[idx]
        return c + (rng.random((N, rho.grid.dim)) - 0.5) * rho.grid.h
    return draw


# ---------------------------------------------------------------- commands

def validate(scenario_path, overrides=()):
    """Static diagnostics for a scenario file (no computation)."""
    scn = load(resolve_path(str(scenario_path)), overrides)
    return static_checks(scn)


def run(scenario_path, out_dir, overrides=(), mode=None, plots=True, stream=None) -> int:
    stream = stream or sys.stderr
    out = Path(out_dir)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    try:
        scn = load(resolve_path(str(scenario_path)), overrides)
        if mode:
            scn = Scenario({**scn.data, "run_mode": mode}, scn.source)
        diags = static_checks(scn)
    except ScenarioError as exc:
        print(f"error: {exc}", file=stream)
        return EXIT_INVALID
    if diags:
        for d in diags:
            print(f"invalid: {d}", file=stream)
        return EXIT_INVALID
    out.mkdir(parents=True, exist_ok=True)
    mode = scn["run_mode"]
    manifest = {"scenario": scn.name, "scenario_hash": scn.digest(), "run_mode": mode,
                "parameters": scn.data, "versions": _versions()}
    try:
        pipe = Pipeline(scn, out, plots)
        if mode in ("analyze", "all"):
            pipe.analyze()
        if mode == "steer" or (mode == "all" and pipe.n <= 2):
            pipe.steer()
        if mode in ("simulate", "all"):
            pipe.simulate()
    except (DensteerError, ValueError, np.linalg.LinAlgError) as exc:
        diag = {"error": type(exc).__name__, "module": getattr(exc, "module", None),
                "message": str(exc), "traceback": traceback.format_exc().splitlines()[-6:]}
        if hasattr(exc, "residual_history"):
            diag["residual_history"] = exc.residual_history
        _write_json(out / "diagnostics.json", diag)
        print(f"numerical failure: {exc}", file=stream)
        return EXIT_NUMERIC
    manifest["summary"] = pipe.summary
    manifest["artifacts"] = sorted(str(p.relative_to(out)) for p in out.rglob("*")
                                   if p.is_file() and p.name not in ("manifest.json", "timestamp.json"))
    _write_json(out / "manifest.json", manifest)
    _write_json(out / "timestamp.json", {"started": started,
                                         "finished": _dt.datetime.now(_dt.timezone.utc).isoformat()})
    print(json.dumps(pipe.summary, sort_keys=True, default=_jsonable), file=sys.stdout)
    return EXIT_OK


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="densteer", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a scenario and write artifacts")
    r.add_argument("scenario", help="scenario file, or the name of a bundled scenario")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--mode", choices=("analyze", "steer", "simulate", "all"))
    r.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a scenario entry (dotted keys, YAML values)")
    r.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    v = sub.add_parser("validate", help="static checks only")
    v.add_argument("scenario")
    v.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args(argv)
    if args.command == "run":
        return run(args.scenario, args.out, args.overrides, args.mode, not args.no_plots)
    try:
        diags = validate(args.scenario, args.overrides)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    for d in diags:
        print(str(d))
    return EXIT_OK if not diags else EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
