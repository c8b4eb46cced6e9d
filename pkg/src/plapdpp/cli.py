"""Configuration-driven experiment runner.

Configs are YAML files with five blocks::

    kind: dirichlet            # expansion | dirichlet | whole_space | game_value | property_suite
    params: {d: 1, p: 3, eps: 0.3}           # or eps_ladder: [0.4, 0.3, 0.2]
    geometry: {domain: box, lo: [-1], hi: [1]}   # or {domain: ball, center: [0], radius: 1}
    data:
      u0: {name: pos_power}
      g: {name: pos_power, args: {scale: 1.0}}
    run: {seed: 0, T: 1.0, output_dir: dirichlet}

Relative output directories are resolved against ``$PLAPDPP_OUTPUT_ROOT``
(default ``runs``).  Exit status: 0 success, 2 validation failure,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass

import numpy as np
import scipy
import yaml

from . import __version__
from . import game as gm
from . import testfuncs
from .amvf import CGrid, a_eps, expansion_report
from .core import Params
from .dpp import (
    DirichletProblem,
    NumericalAbort,
    build_barrier,
    check_barrier_ordering,
    comparison_report,
    regularity_report,
    solve_bounded,
    solve_whole_space,
)
from .field import Ball, Box, LatticeField

OUTPUT_ROOT_ENV = "PLAPDPP_OUTPUT_ROOT"
KINDS = ("expansion", "dirichlet", "whole_space", "game_value", "property_suite")
STRATEGIES = ("greedy", "uniform_random", "always_stay", "center_stay", "worst_sampled_point")

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 2, 3
NON_SEMANTIC_RUN_KEYS = ("output_dir", "threads")


class ConfigError(ValueError):
    """The configuration does not validate."""


# ---------------------------------------------------------------------------
# config


DEFAULT_RUN = {
    "seed": 0,
    "n_episodes": 1000,
    "n_c": 48,
    "h": None,
    "T": 1.0,
    "output_dir": None,
    "stride": 1,
    "x": None,
    "x0": None,
    "t0": 0.5,
    "eta": 1e-3,
    "strategies": {"I": "greedy", "II": "greedy"},
    "trace_episodes": 0,
    "K": None,
    "shift": 1,
    "threads": None,
}


@dataclass
class ExperimentConfig:
    kind: str
    params: dict
    geometry: dict
    data: dict
    run: dict

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        unknown = set(raw) - {"kind", "params", "geometry", "data", "run"}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        run = dict(DEFAULT_RUN)
        run.update(raw.get("run") or {})
        cfg = cls(raw.get("kind"), dict(raw.get("params") or {}), dict(raw.get("geometry") or {}),
                  dict(raw.get("data") or {}), run)
        cfg.validate()
        return cfg

    def as_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params, "geometry": self.geometry, "data": self.data,
                "run": self.run}

    def hash(self) -> str:
        """SHA-256 of the canonical config; output location and thread cap do not change results."""
        body = self.as_dict()
        body["run"] = {k: v for k, v in self.run.items() if k not in NON_SEMANTIC_RUN_KEYS}
        blob = json.dumps(body, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    # -- validation ----------------------------------------------------------

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        prm = self.params
        for key in ("d", "p"):
            if key not in prm:
                raise ConfigError(f"params.{key} is required")
        if not isinstance(prm["d"], int) or prm["d"] < 1:
            raise ConfigError("params.d must be a positive integer")
        if not float(prm["p"]) > 2:
            raise ConfigError("params.p must exceed 2")
        for e in self.eps_values():
            if not 0 < e < 1:
                raise ConfigError("eps values must lie in (0, 1)")
        ladder = prm.get("eps_ladder")
        if ladder is not None:
            if len(ladder) < (3 if self.kind == "expansion" else 1):
                raise ConfigError("eps_ladder is too short")
            if any(b >= a for a, b in zip(ladder, ladder[1:])):
                raise ConfigError("eps_ladder must be strictly decreasing")
        if self.kind == "expansion" and ladder is None:
            raise ConfigError("expansion runs need params.eps_ladder")
        if self.kind != "expansion" and "eps" not in prm:
            raise ConfigError("params.eps is required")
        for name, spec in self.data.items():
            self._check_function(name, spec)
        need = {"expansion": ("phi",), "dirichlet": ("u0", "g"), "whole_space": ("u0",),
                "game_value": ("u0", "g"), "property_suite": ()}[self.kind]
        for name in need:
            if name not in self.data:
                raise ConfigError(f"data.{name} is required for {self.kind} runs")
        if self.kind in ("dirichlet", "game_value", "property_suite"):
            self.domain()
        run = self.run
        if int(run["n_c"]) < 1:
            raise ConfigError("run.n_c must be positive")
        if run["h"] is not None and not float(run["h"]) > 0:
            raise ConfigError("run.h must be positive")
        if not float(run["T"]) > 0:
            raise ConfigError("run.T must be positive")
        if self.kind == "game_value":
            if int(run["n_episodes"]) < 100:
                raise ConfigError("run.n_episodes must be at least 100")
            if not float(run["t0"]) > 0:
                raise ConfigError("run.t0 must be positive")
            for role in ("I", "II"):
                if run["strategies"].get(role) not in STRATEGIES:
                    raise ConfigError(f"run.strategies.{role} must be one of {STRATEGIES}")
        if not float(run["eta"]) > 0:
            raise ConfigError("run.eta must be positive")

    def _check_function(self, name, spec):
        if not isinstance(spec, dict) or "name" not in spec:
            raise ConfigError(f"data.{name} must be a mapping with a 'name'")
        if spec["name"] not in testfuncs.REGISTRY:
            raise ConfigError(f"data.{name}: unknown test function {spec['name']!r}")
        try:
            self.function(name, self.params["d"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"data.{name}: {exc}") from None

    # -- builders ------------------------------------------------------------

    def eps_values(self) -> list:
        if self.params.get("eps_ladder") is not None:
            return [float(e) for e in self.params["eps_ladder"]]
        if "eps" in self.params:
            return [float(self.params["eps"])]
        return []

    def make_params(self, eps: float | None = None) -> Params:
        e = float(self.params["eps"]) if eps is None else eps
        return Params(int(self.params["d"]), float(self.params["p"]), e)

    def function(self, name: str, d: int):
        spec = self.data[name]
        return testfuncs.make(spec["name"], d, float(self.params["p"]), **(spec.get("args") or {}))

    def domain(self):
        geo = self.geometry
        d = int(self.params["d"])
        kind = geo.get("domain", "box")
        try:
            if kind == "box":
                lo = geo.get("lo", [-1.0] * d)
                hi = geo.get("hi", [1.0] * d)
                if len(lo) != d or len(hi) != d:
                    raise ConfigError("geometry bounds have the wrong dimension")
                return Box(tuple(float(v) for v in lo), tuple(float(v) for v in hi))
            if kind == "ball":
                c = geo.get("center", [0.0] * d)
                if len(c) != d:
                    raise ConfigError("geometry.center has the wrong dimension")
                return Ball(tuple(float(v) for v in c), float(geo.get("radius", 1.0)))
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"geometry: {exc}") from None
        raise ConfigError(f"geometry.domain must be 'box' or 'ball', got {kind!r}")

    def point(self, key: str) -> np.ndarray:
        d = int(self.params["d"])
        v = self.run.get(key)
        arr = np.zeros(d) if v is None else np.atleast_1d(np.asarray(v, dtype=float))
        if arr.size != d:
            raise ConfigError(f"run.{key} has the wrong dimension")
        return arr


def load_config(path, overrides=()) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    raw = copy.deepcopy(raw) if raw is not None else {}
    for item in overrides:
        apply_override(raw, item)
    return ExperimentConfig.from_dict(raw)


def apply_override(raw: dict, item: str) -> None:
    """Apply ``dotted.key=value``; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = yaml.safe_load(value)


# ---------------------------------------------------------------------------
# artifacts


def _versions() -> dict:
    return {"plapdpp": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def _write_csv(path, header, rows, config_hash) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        fh.write(f"# config_hash={config_hash}\n")


def output_dir(cfg: ExperimentConfig) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    out = cfg.run.get("output_dir") or f"{cfg.kind}-{cfg.hash()[:12]}"
    path = out if os.path.isabs(out) else os.path.join(root, out)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path!r}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path!r} is not writable")
    return path


# ---------------------------------------------------------------------------
# experiments


def _solve(cfg: ExperimentConfig, T: float):
    prm = cfg.make_params()
    d = prm.d
    h = cfg.run["h"]
    prob = DirichletProblem(cfg.domain(), cfg.function("u0", d), cfg.function("g", d), T, prm,
                            float(h) if h is not None else None, CGrid.for_params(prm, int(cfg.run["n_c"])))
    return prob, solve_bounded(prob)


def run_expansion(cfg, out, chash) -> dict:
    d = int(cfg.params["d"])
    phi = cfg.function("phi", d)
    x = cfg.point("x")
    rep = expansion_report(phi, x, d, float(cfg.params["p"]), cfg.eps_values(), int(cfg.run["n_c"]))
    path = os.path.join(out, "expansion_report.csv")
    rep.to_csv(path)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(f"# config_hash={chash}\n")
    _write_json(os.path.join(out, "expansion_report.json"), {**rep.as_dict(), "config_hash": chash})
    return {"artifacts": ["expansion_report.csv", "expansion_report.json"], "slope": rep.slope}


def _norm_rows(sol):
    return [[j, float(t), a, b] for j, (t, a, b) in
            enumerate(zip(sol.times, sol.sup_norms("interior"), sol.sup_norms()))]


def run_dirichlet(cfg, out, chash) -> dict:
    prob, sol = _solve(cfg, float(cfg.run["T"]))
    sol.export(os.path.join(out, "solution"), int(cfg.run["stride"]), {"config_hash": chash})
    _write_csv(os.path.join(out, "sup_norms.csv"), ["step", "t", "sup_interior", "sup_all"], _norm_rows(sol), chash)
    return {"artifacts": ["solution/", "sup_norms.csv"], "digest": sol.digest(), "steps": prob.steps}


def run_whole_space(cfg, out, chash) -> dict:
    prm = cfg.make_params()
    u0 = cfg.function("u0", prm.d)
    h = cfg.run["h"]
    sol = solve_whole_space(u0, float(cfg.run["T"]), prm, float(h) if h is not None else None,
                            cfg.run["K"], cfg.run.get("eta"), cgrid=CGrid.for_params(prm, int(cfg.run["n_c"])))
    sol.export(os.path.join(out, "solution"), int(cfg.run["stride"]), {"config_hash": chash})
    rep = regularity_report(sol, int(cfg.run["shift"]))
    _write_json(os.path.join(out, "regularity.json"), {**rep.as_dict(), "config_hash": chash})
    _write_csv(os.path.join(out, "sup_norms.csv"), ["step", "t", "sup_interior", "sup_all"], _norm_rows(sol), chash)
    return {"artifacts": ["solution/", "regularity.json", "sup_norms.csv"], "digest": sol.digest()}


def _strategy(name, role, sol, eta):
    if name == "greedy":
        return gm.DPPGreedyStrategy(sol, role, eta)
    if name == "worst_sampled_point":
        return gm.WorstSampledPointStrategy(sol, role)
    return {"uniform_random": gm.UniformRandomStrategy, "always_stay": gm.AlwaysStayStrategy,
            "center_stay": gm.CenterStayStrategy}[name](role)


def run_game_value(cfg, out, chash) -> dict:
    t0 = float(cfg.run["t0"])
    prob, sol = _solve(cfg, t0)
    prm = prob.params
    setup = gm.GameSetup(prm, prob.u0, prob.g, prob.domain, cgrid=prob.cgrid)
    x0 = cfg.point("x0")
    eta = float(cfg.run["eta"])
    S_I = _strategy(cfg.run["strategies"]["I"], "I", sol, eta)
    S_II = _strategy(cfg.run["strategies"]["II"], "II", sol, eta)
    est = gm.estimate_value(setup, x0, t0, S_I, S_II, int(cfg.run["n_episodes"]), int(cfg.run["seed"]))
    result = {**est.as_dict(), "dpp_value": float(sol.value(x0, t0)), "x0": x0.tolist(), "t0": t0,
              "strategies": cfg.run["strategies"], "config_hash": chash}
    _write_json(os.path.join(out, "value_estimate.json"), result)
    arts = ["value_estimate.json"]
    n_trace = int(cfg.run["trace_episodes"])
    if n_trace > 0:
        res = gm.simulate(setup, x0, t0, S_I, S_II, n_trace, int(cfg.run["seed"]), trace=True)
        gm.write_trace_csv(os.path.join(out, "trace.csv"), gm.episodes(res, setup))
        arts.append("trace.csv")
    return {"artifacts": arts, "mean": est.mean, "stderr": est.stderr}


def run_property_suite(cfg, out, chash) -> dict:
    """Quick structural checks on the configured parameters."""
    prm = cfg.make_params()
    d = prm.d
    rng = np.random.default_rng(int(cfg.run["seed"]))
    grid = CGrid.for_params(prm, int(cfg.run["n_c"]))
    checks = {}

    # operator identities on a random lattice field
    h = prm.band_width / 4
    n = int(math.ceil(2 * (prm.reach + 2 * h) / h)) + 3
    shape = (n,) * d if d <= 2 else (n,) * 2 + (1,) * (d - 2)
    if d <= 2:
        vals = rng.normal(size=shape)
        fld = LatticeField(vals, tuple([-(n - 1) * h / 2] * d), h)
        x = np.zeros(d)
        base = a_eps(fld, x, prm, grid)
        shift = a_eps(fld.with_values(vals + 3.25), x, prm, grid)
        odd = a_eps(fld.with_values(-vals), x, prm, grid)
        up = a_eps(fld.with_values(vals + np.abs(rng.normal(size=shape))), x, prm, grid)
        checks["shift_equivariance"] = abs(shift - base - 3.25) <= 1e-10 * max(1.0, abs(base))
        checks["odd_symmetry"] = abs(odd + base) <= 1e-10 * max(1.0, abs(base))
        checks["monotonicity"] = up >= base - 1e-12

    # constants are fixed points, ordered data stay ordered
    dom = cfg.domain() if cfg.geometry else Box((-1.0,) * d, (1.0,) * d)
    T = min(float(cfg.run["T"]), 4 * prm.tau)
    one = testfuncs.constant(d, value=1.0)
    zero = testfuncs.constant(d, value=0.0)
    s1 = solve_bounded(DirichletProblem(dom, one, one, T, prm, cgrid=grid))
    s0 = solve_bounded(DirichletProblem(dom, zero, one, T, prm, cgrid=grid))
    checks["constant_fixed_point"] = bool(np.all(np.abs(s1.sup_norms() - 1.0) == 0))
    rep = comparison_report(s1, s0)
    checks["comparison"] = rep.violations == 0
    checks["contraction"] = rep.step_contraction_violations == 0 and rep.total_bound_violations == 0
    bar = build_barrier("initial_lower", prm, domain=dom, u0=zero, g=one, anchor=dom.center
                        if isinstance(dom, Ball) else (np.array(dom.lo) + np.array(dom.hi)) / 2, eta=0.1)
    checks["initial_barrier"] = check_barrier_ordering(s0, bar, "below").ok
    result = {"checks": checks, "passed": all(checks.values()), "config_hash": chash}
    _write_json(os.path.join(out, "properties.json"), result)
    return {"artifacts": ["properties.json"], "passed": result["passed"]}


RUNNERS = {
    "expansion": run_expansion,
    "dirichlet": run_dirichlet,
    "whole_space": run_whole_space,
    "game_value": run_game_value,
    "property_suite": run_property_suite,
}


def execute(cfg: ExperimentConfig) -> dict:
    out = output_dir(cfg)
    chash = cfg.hash()
    start = time.perf_counter()
    summary = RUNNERS[cfg.kind](cfg, out, chash)
    manifest = {
        "kind": cfg.kind,
        "config": cfg.as_dict(),
        "config_hash": chash,
        "versions": _versions(),
        "wall_time_s": time.perf_counter() - start,
        "summary": summary,
    }
    _write_json(os.path.join(out, "run_manifest.json"), manifest)
    return {"output_dir": out, **manifest}


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="plapdpp", description="p-Laplacian DPP and game experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in (("run", "run an experiment"), ("validate", "validate a config without running")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. run.seed=3 (repeatable)")
        sp.add_argument("--eps", type=float, help="params.eps")
        sp.add_argument("--seed", type=int, help="run.seed")
        sp.add_argument("--n-episodes", type=int, help="run.n_episodes")
        sp.add_argument("--n-c", type=int, help="run.n_c")
        sp.add_argument("--h", type=float, help="run.h")
        sp.add_argument("--output-dir", help="run.output_dir")
        sp.add_argument("--threads", type=int, help="cap on numerical library threads")
    sub.add_parser("list-test-functions", help="list registered test functions")
    return ap


def _flag_overrides(args) -> list:
    mapping = {"eps": "params.eps", "seed": "run.seed", "n_episodes": "run.n_episodes", "n_c": "run.n_c",
               "h": "run.h", "output_dir": "run.output_dir", "threads": "run.threads"}
    out = list(args.set)
    for attr, key in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            out.append(f"{key}={json.dumps(val)}")
    return out


def _cap_threads(n) -> None:
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(int(n))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list-test-functions":
        for name, entry in sorted(testfuncs.REGISTRY.items()):
            print(f"{name:14s} {entry.description}")
        return EXIT_OK
    try:
        cfg = load_config(args.config, _flag_overrides(args))
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.command == "validate":
        print(f"ok {cfg.kind} {cfg.hash()}")
        return EXIT_OK
    _cap_threads(cfg.run.get("threads"))
    try:
        info = execute(cfg)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalAbort, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except ValueError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(json.dumps({"output_dir": info["output_dir"], "config_hash": info["config_hash"],
                      "wall_time_s": round(info["wall_time_s"], 3)}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
