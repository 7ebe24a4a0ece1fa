"""Command line front-end: ``mfgkit <command> --config run.json``.

Every run writes ``summary.json`` (validated against the shipped schema)
plus CSV curves and optional SVG plots into the output directory.  Exit
status is 0 on success, 2 when a verdict fails and 1 on errors.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import jsonschema
import numpy as np
import scipy

from . import __version__
from .errors import ConfigInvalid, MfgError, ParamOutOfRange, UnknownModel
from .flow import MeasureFlow
from .hamsys import consistency_check
from .hjb import SpaceTimeGrid, solve_hjb
from .measures import ParticleMeasure, from_samples, gaussian_measure, read_csv
from .mfg import SolveParams, pairing_tolerance, solve, stability_experiment
from .model import MfgProblem, builtin
from .monotone import CHECKERS, SamplerConfig
from .plots import line_plot

logger = logging.getLogger("mfgkit")

COMMANDS = ("solve", "check-monotone", "stability", "characteristics", "convergence")
EXIT_OK, EXIT_ERROR, EXIT_VERDICT = 0, 1, 2


def _schema(name: str) -> dict:
    return json.loads(resources.files("mfgkit").joinpath("schemas", name).read_text())


def config_schema() -> dict:
    return _schema("config.schema.json")


def summary_schema() -> dict:
    return _schema("summary.schema.json")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    command: str
    model_name: str
    model_params: dict
    numerics: dict
    initial: dict
    output_dir: Path
    seed: int = 0
    threads: int = 1
    plots: bool = True
    export: dict = field(default_factory=dict)
    sections: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def solve_params(self) -> SolveParams:
        kw = dict(self.numerics)
        if "bounds" in kw:
            kw["bounds"] = tuple(tuple(b) for b in kw["bounds"])
        kw["n_particles"] = int(self.initial.get("n", 1))
        kw["seed"] = self.seed
        kw["threads"] = self.threads
        try:
            return SolveParams(**kw)
        except ParamOutOfRange as exc:
            raise ConfigInvalid("numerics", str(exc)) from exc

    def section(self, name: str) -> dict:
        return dict(self.sections.get(name, {}))

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def _key_of(err: jsonschema.ValidationError) -> str:
    path = [str(p) for p in err.absolute_path]
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        path += extra[:1]
    elif err.validator == "required":
        missing = [r for r in err.validator_value if r not in err.instance]
        path += missing[:1]
    return ".".join(path) or "<root>"


def parse_config(raw: dict, command: str, base_dir: Path = Path("."),
                 output_dir: Optional[str] = None, seed: Optional[int] = None,
                 threads: Optional[int] = None) -> RunConfig:
    """Validate a raw JSON config and apply the command-line overlay."""
    if not isinstance(raw, dict):
        raise ConfigInvalid("<root>", "config must be a JSON object")
    validator = jsonschema.Draft202012Validator(config_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigInvalid(_key_of(err), err.message)
    if command not in COMMANDS:
        raise ConfigInvalid("command", f"unknown command {command!r}")
    if raw.get("command", command) != command:
        raise ConfigInvalid("command", f"config is for {raw['command']!r}, invoked as {command!r}")

    cfg_seed = int(raw.get("seed", 0)) if seed is None else int(seed)
    if cfg_seed < 0:
        raise ConfigInvalid("seed", "seed must be non-negative")
    if threads is None:
        env = os.environ.get("MFGKIT_THREADS")
        if env is not None:
            try:
                threads = int(env)
            except ValueError as exc:
                raise ConfigInvalid("MFGKIT_THREADS", f"not an integer: {env!r}") from exc
        else:
            threads = int(raw.get("threads", 1))
    if threads < 1:
        raise ConfigInvalid("threads", "threads must be >= 1")

    initial = dict(raw.get("initial", {"generator": "gaussian", "n": 1000, "mean": 0.0, "sd": 1.0}))
    initial.setdefault("seed", cfg_seed)
    out = output_dir or raw.get("output_dir") or "mfgkit_out"
    model = raw["model"]
    sections = {k: raw[k] for k in ("stability", "monotone", "characteristics", "convergence") if k in raw}
    cfg = RunConfig(
        command=command, model_name=model["name"], model_params=dict(model.get("params", {})),
        numerics=dict(raw.get("numerics", {})), initial=initial, output_dir=Path(out),
        seed=cfg_seed, threads=threads, plots=bool(raw.get("plots", True)),
        export=dict(raw.get("export", {})), sections=sections, base_dir=base_dir,
    )
    _check_files(cfg)
    cfg.solve_params()
    make_problem(cfg)
    return cfg


def _check_files(cfg: RunConfig) -> None:
    def need(spec: dict, key: str):
        gen = spec.get("generator")
        if gen == "csv":
            if "path" not in spec:
                raise ConfigInvalid(f"{key}.path", "csv generator needs a path")
            if not cfg.resolve(spec["path"]).is_file():
                raise ConfigInvalid(f"{key}.path", f"file not found: {spec['path']}")
        if gen == "points" and "points" not in spec:
            raise ConfigInvalid(f"{key}.points", "points generator needs a points list")
        if gen == "uniform" and spec.get("low", 0.0) >= spec.get("high", 1.0):
            raise ConfigInvalid(f"{key}.high", "need low < high")

    need(cfg.initial, "initial")
    stab = cfg.section("stability")
    if "initial2" in stab:
        need(stab["initial2"], "stability.initial2")
    sampler = cfg.section("monotone").get("sampler", {})
    for i, p in enumerate(sampler.get("csv_paths", [])):
        if not cfg.resolve(p).is_file():
            raise ConfigInvalid(f"monotone.sampler.csv_paths.{i}", f"file not found: {p}")


def make_problem(cfg: RunConfig) -> MfgProblem:
    try:
        return builtin(cfg.model_name, cfg.model_params)
    except UnknownModel as exc:
        raise ConfigInvalid("model.name", str(exc.args[0])) from exc
    except ParamOutOfRange as exc:
        raise ConfigInvalid("model.params", str(exc)) from exc


def make_measure(cfg: RunConfig, spec: dict, dim: int, key: str = "initial") -> ParticleMeasure:
    gen = spec["generator"]
    n = int(spec.get("n", 1000))
    seed = int(spec.get("seed", cfg.seed))
    if gen == "gaussian":
        mu = gaussian_measure(n, spec.get("mean", 0.0), float(spec.get("sd", 1.0)), seed,
                              dim=dim, recentre=bool(spec.get("recentre", True)))
    elif gen == "uniform":
        rng = np.random.default_rng(seed)
        mu = ParticleMeasure(rng.uniform(spec.get("low", 0.0), spec.get("high", 1.0), size=(n, dim)))
    elif gen == "csv":
        mu = read_csv(cfg.resolve(spec["path"]))
    else:
        mu = from_samples([np.atleast_1d(p) for p in spec["points"]])
    if mu.dim != dim:
        raise ConfigInvalid(key, f"measure has dimension {mu.dim}, model expects {dim}")
    return mu


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _write_table(path: Path, header: list, table) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in table:
            w.writerow([v if isinstance(v, (int, str)) else repr(float(v)) for v in row])
    return path


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


class Outputs:
    def __init__(self, directory: Path, plots: bool):
        self.dir = directory
        self.plots = plots
        self.files: list[str] = []
        directory.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.files.append(name)
        p = self.dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def table(self, name: str, header: list, rows) -> None:
        _write_table(self.path(name), header, rows)

    def plot(self, name: str, series: dict, **kw) -> None:
        if self.plots:
            line_plot(self.path(name), series, **kw)

    def tree(self, sub: str, writer) -> None:
        writer(self.dir / sub)
        self.files.append(f"{sub}/manifest.json")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _solution_outputs(out: Outputs, sol, cfg: RunConfig, stem: str = "") -> None:
    out.table(f"{stem}residuals.csv", ["iteration", "residual", "damping"],
              [(k + 1, r, lam) for k, (r, lam) in enumerate(zip(sol.residual_history, sol.damping_history))])
    m = sol.flow.mean_curve()
    m2 = sol.flow.moment2_curve()
    d = m.shape[1]
    out.table(f"{stem}moments.csv", ["t"] + [f"mean{i}" for i in range(d)] + ["M2"],
              [(t, *mi, s) for t, mi, s in zip(sol.flow.times, m, m2)])
    out.plot(f"{stem}residuals.svg", {"residual": (np.arange(1, sol.iterations + 1), sol.residual_history)},
             title="Picard residual", xlabel="iteration", ylabel="sup_t W1", logy=True)
    if cfg.export.get("flow"):
        out.tree(f"{stem}flow", sol.flow.write)
    if cfg.export.get("value"):
        out.tree(f"{stem}value", sol.value.write)


def cmd_solve(cfg: RunConfig, out: Outputs) -> tuple[dict, bool]:
    problem = make_problem(cfg)
    rho0 = make_measure(cfg, cfg.initial, problem.dim)
    params = cfg.solve_params()
    sol = solve(problem, rho0, params)
    _solution_outputs(out, sol, cfg)
    res = sol.summary()
    res["grid"] = {"bounds": [list(b) for b in sol.grid.bounds], "nx": sol.grid.nx, "nt": sol.grid.nt}
    res["convex_flag"] = sol.value.convex_flag
    res["clamped_velocity_evaluations"] = sol.value.diagnostics.get("clamped_velocity_evaluations", 0)
    return res, sol.converged


def cmd_check_monotone(cfg: RunConfig, out: Outputs) -> tuple[dict, bool]:
    problem = make_problem(cfg)
    sec = cfg.section("monotone")
    checks = sec.get("checks") or ["displacement_g", "lasry_lions"]
    trials = int(sec.get("trials", 200))
    seed = int(sec.get("seed", cfg.seed))
    skw = dict(sec.get("sampler", {}))
    skw.setdefault("dim", problem.dim)
    if "csv_paths" in skw:
        skw["csv_paths"] = tuple(str(cfg.resolve(p)) for p in skw["csv_paths"])
    for key in ("couplings", "tangent_modes"):
        if key in skw:
            skw[key] = tuple(skw[key])
    try:
        sampler = SamplerConfig(**skw)
    except ValueError as exc:
        raise ConfigInvalid("monotone.sampler", str(exc)) from exc
    targets = {
        "displacement_g": problem.terminal, "lasry_lions": problem.terminal,
        "displacement_L": problem.lagrangian, "displacement_H": problem.hamiltonian,
        "second_order": problem.hamiltonian,
    }
    reports = {}
    for kind in checks:
        rep = CHECKERS[kind](targets[kind], sampler, trials, seed, sec.get("tol"))
        summary = rep.write(out.dir, kind)
        out.files += [f"{kind}.json", f"{kind}_witness.csv"]
        reports[kind] = summary
    expect = sec.get("expect", {})
    mismatched = {k: {"expected": v, "got": reports[k]["verdict"]}
                  for k, v in expect.items() if k in reports and reports[k]["verdict"] != v}
    for k in expect:
        if k not in reports:
            raise ConfigInvalid(f"monotone.expect.{k}", "expectation for a check that was not run")
    return {"checks": reports, "expectation_mismatches": mismatched,
            "sampler": asdict(sampler), "trials": trials}, not mismatched


def _second_measure(cfg: RunConfig, rho1: ParticleMeasure, dim: int) -> ParticleMeasure:
    sec = cfg.section("stability")
    if "initial2" in sec:
        return make_measure(cfg, sec["initial2"], dim, "stability.initial2")
    shift = np.broadcast_to(np.atleast_1d(np.asarray(sec.get("shift", 1.0), dtype=float)), (dim,))
    return rho1.shifted(shift)


def cmd_stability(cfg: RunConfig, out: Outputs) -> tuple[dict, bool]:
    problem = make_problem(cfg)
    rho1 = make_measure(cfg, cfg.initial, problem.dim)
    rho2 = _second_measure(cfg, rho1, problem.dim)
    if rho2.n != rho1.n:
        raise ConfigInvalid("stability.initial2.n", "both initial measures need the same particle count")
    params = cfg.solve_params()
    rep = stability_experiment(problem, rho1, rho2, params, float(cfg.section("stability").get("sharp_tol", 1e-3)))
    s1, s2 = rep.solutions
    t = rep.times
    out.table("w2_curve.csv", ["t", "w2"], zip(t, rep.w2_curve))
    out.table("pairing_curve.csv", ["t", "pairing"], zip(t, rep.pairing_curve))
    out.table("grad_gap_curve.csv", ["t", "grad_gap"], zip(t, rep.grad_gap_curve))
    out.plot("w2_curve.svg", {"W2": (t, rep.w2_curve)}, title="W2 between the two flows", xlabel="t", ylabel="W2")
    out.plot("pairing_curve.svg", {"pairing": (t, rep.pairing_curve)}, title="Displacement pairing along flows",
             xlabel="t", ylabel="pairing")
    out.plot("residuals.svg", {"run 1": (np.arange(1, s1.iterations + 1), s1.residual_history),
                               "run 2": (np.arange(1, s2.iterations + 1), s2.residual_history)},
             title="Picard residuals", xlabel="iteration", ylabel="sup_t W1", logy=True)
    eps = pairing_tolerance(s1.grid, s1.flow.n)
    check = rep.pairing_check(eps)
    res = rep.summary()
    res.update({"pairing_check": check, "converged": [s1.converged, s2.converged],
                "iterations": [s1.iterations, s2.iterations]})
    ok = s1.converged and s2.converged and check["nonnegative"] and check["nonincreasing"]
    return res, ok


def cmd_characteristics(cfg: RunConfig, out: Outputs) -> tuple[dict, bool]:
    problem = make_problem(cfg)
    rho0 = make_measure(cfg, cfg.initial, problem.dim)
    sec = cfg.section("characteristics")
    sol = solve(problem, rho0, cfg.solve_params())
    _solution_outputs(out, sol, cfg)
    rep = consistency_check(problem, sol, int(sec.get("n_probe", 20)), cfg.seed, float(sec.get("tol", 1e-10)))
    out.table("probe_defects.csv", ["probe", "defect"], enumerate(rep.defects))
    if sec.get("export_paths") and rep.n_probe:
        from .hamsys import shoot_many
        rng = np.random.default_rng(cfg.seed)
        idx = np.sort(rng.choice(sol.flow.n, size=rep.n_probe, replace=False))
        for j, path in zip(idx, shoot_many(problem, sol.flow, sol.flow.positions[0][idx])):
            path.write(out.path(f"paths/path_{int(j):06d}.csv"))
    res = {"solve": sol.summary(), "consistency": rep.summary()}
    return res, sol.converged and rep.passed


def _closed_form(problem: MfgProblem, rho0: ParticleMeasure):
    """Exact value on the static flow of ``rho0`` for the quadratic families."""
    T = problem.horizon
    if problem.name == "quadratic":
        target = np.zeros(problem.dim)
    elif problem.name == "lq_mean":
        target = problem.params["a"] * rho0.mean()
    else:
        return None

    def u(t, x):
        return np.sum((x - target) ** 2, axis=-1) / (2.0 * (1.0 + T - t))

    return u


def cmd_convergence(cfg: RunConfig, out: Outputs) -> tuple[dict, bool]:
    """HJB refinement study on the static flow of the initial measure."""
    problem = make_problem(cfg)
    rho0 = make_measure(cfg, cfg.initial, problem.dim)
    levels = cfg.section("convergence").get("levels") or [[51, 50], [101, 100], [201, 200]]
    params = cfg.solve_params()
    bounds = params.make_grid(problem, rho0).bounds
    exact = _closed_form(problem, rho0)
    fields = []
    for nx, nt in levels:
        try:
            grid = SpaceTimeGrid(bounds, nx, nt, problem.horizon)
        except ValueError as exc:
            raise ConfigInvalid("convergence.levels", str(exc)) from exc
        fields.append(solve_hjb(problem, MeasureFlow.static(rho0, problem.horizon, nt), grid, A_max=params.A_max))
    # closed form: max over every node and time; otherwise t = 0 against the finest level
    errors = []
    ref = fields[-1]
    for f in fields[:-1] if exact is None else fields:
        nodes = f.grid.nodes()
        if exact is not None:
            err = np.abs(f.u.reshape(f.grid.nt + 1, -1) - exact(f.grid.times[:, None], nodes[None])).max()
        else:
            err = np.abs(f.u[0].reshape(-1) - ref.value_at(0, nodes)).max()
        errors.append(float(err))
    rates = [float(np.log2(a / b)) if a > 0 and b > 0 else None for a, b in zip(errors, errors[1:])]
    rows = [(nx, nt, e) for (nx, nt), e in zip(levels, errors)]
    out.table("convergence.csv", ["nx", "nt", "max_error"], rows)
    out.plot("convergence.svg", {"max error": (np.arange(len(errors)), errors)},
             title="HJB refinement study", xlabel="level", ylabel="max error", logy=True)
    decreasing = all(b <= a * (1 + 1e-9) for a, b in zip(errors, errors[1:]))
    bounds_ok = None
    if exact is not None:
        budget = [5 * (float(np.max(f.grid.dx)) ** 2 + f.grid.dt) for f in fields]
        bounds_ok = [bool(e <= b) for e, b in zip(errors, budget)]
    res = {"reference": "closed_form" if exact is not None else "finest_level",
           "levels": levels, "max_errors": errors, "observed_rates": rates,
           "errors_decrease": decreasing, "within_budget": bounds_ok}
    return res, decreasing and (bounds_ok is None or all(bounds_ok))


HANDLERS = {
    "solve": cmd_solve,
    "check-monotone": cmd_check_monotone,
    "stability": cmd_stability,
    "characteristics": cmd_characteristics,
    "convergence": cmd_convergence,
}


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------

def _versions() -> dict:
    return {"mfgkit": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _write_summary(directory: Path, payload: dict) -> Path:
    payload = _jsonable(payload)
    jsonschema.validate(payload, summary_schema())
    path = directory / "summary.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def run(cfg: RunConfig) -> int:
    out = Outputs(cfg.output_dir, cfg.plots)
    results, ok = HANDLERS[cfg.command](cfg, out)
    code = EXIT_OK if ok else EXIT_VERDICT
    payload = {
        "schema_version": 1, "command": cfg.command,
        "status": "ok" if ok else "verdict_failure", "exit_code": code,
        "verdict": "pass" if ok else "fail", "seed": cfg.seed, "threads": cfg.threads,
        "versions": _versions(),
        "model": {"name": cfg.model_name, "params": cfg.model_params},
        "numerics": cfg.numerics, "results": results, "files": sorted(set(out.files)),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    _write_summary(cfg.output_dir, payload)
    return code


def _error_summary(directory: Path, command: str, seed: int, exc: Exception) -> None:
    payload = {
        "schema_version": 1, "command": command if command in COMMANDS else "solve",
        "status": "error", "exit_code": EXIT_ERROR, "verdict": "error", "seed": seed,
        "versions": _versions(), "results": {}, "files": [],
        "error": {"type": type(exc).__name__, "message": str(exc), "key": getattr(exc, "key", None)},
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    try:
        directory.mkdir(parents=True, exist_ok=True)
        _write_summary(directory, payload)
    except OSError:
        pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfgkit", description="Deterministic mean field game experiments.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--output-dir", help="overrides output_dir from the config")
    parser.add_argument("--seed", type=int, help="overrides seed from the config")
    parser.add_argument("--threads", type=int, help="worker cap (fallback: MFGKIT_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out_dir = Path(args.output_dir or "mfgkit_out")
    seed = args.seed if args.seed is not None else 0
    try:
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigInvalid("--config", f"file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigInvalid("--config", f"not valid JSON: {exc}") from exc
        if isinstance(raw, dict):
            out_dir = Path(args.output_dir or raw.get("output_dir") or out_dir)
        cfg = parse_config(raw, args.command, path.parent, args.output_dir, args.seed, args.threads)
        out_dir, seed = cfg.output_dir, cfg.seed
        return run(cfg)
    except ConfigInvalid as exc:
        print(f"mfgkit: invalid config: {exc}", file=sys.stderr)
        _error_summary(out_dir, args.command, seed, exc)
        return EXIT_ERROR
    except (MfgError, ValueError, OSError) as exc:
        print(f"mfgkit: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        _error_summary(out_dir, args.command, seed, exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
