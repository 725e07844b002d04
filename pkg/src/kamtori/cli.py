"""Command line: kamtori {run,step,smooth-bench,measure,validate} --config FILE.

Exit codes: 0 success, 1 configuration error, 2 hypothesis failure,
3 divergence (or no convergence within max_steps).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .frequencies import resonant_measure
from .hamiltonian import TrigHamiltonian
from .kamstep import StepConditionError, kam_step
from .oracle import invariance_defect, isotropy_defect, write_defects_csv
from .scheme import (DivergenceError, SchemeConditionError, SchemeConfig, TorusEmbedding,
                     TorusError, check_smallness, initial_step, quadratic_hamiltonian, run)
from .smoothing import smoothing_benchmark, trig_function, write_smoothing_csv

EXIT_OK, EXIT_CONFIG, EXIT_CONDITION, EXIT_DIVERGED = 0, 1, 2, 3


class ConfigError(ValueError):
    """Unusable configuration; the message names the field."""


@dataclass
class RunConfig:
    hamiltonian: dict
    scheme: dict
    output_dir: Path
    seed: int = 0
    sections: dict = field(default_factory=dict)


@dataclass
class Problem:
    H: TrigHamiltonian
    K: object
    P: object
    config: SchemeConfig


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config: not valid TOML ({exc})") from None
    ham = raw.get("hamiltonian")
    if not isinstance(ham, dict):
        raise ConfigError("hamiltonian: section missing")
    if ("family" in ham) == ("table" in ham):
        raise ConfigError("hamiltonian: give exactly one of 'family' or 'table'")
    base = Path(path).resolve().parent
    if "table" in ham:
        ham = dict(ham, table=str((base / ham["table"]).resolve()))
    out = raw.get("output_dir", "out")
    sections = {k: v for k, v in raw.items() if k not in ("hamiltonian", "scheme", "output_dir", "seed")}
    return RunConfig(ham, dict(raw.get("scheme", {})), Path(out), int(raw.get("seed", 0)), sections)


def _read_terms_csv(path: str, d: int) -> list:
    terms = []
    try:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                k = [int(row[f"k{i + 1}"]) for i in range(d)]
                terms.append((k, float(row.get("cos", 0) or 0), float(row.get("sin", 0) or 0)))
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"hamiltonian.table: cannot read coefficient table ({exc})") from None
    return terms


def build_problem(rc: RunConfig, overrides: dict | None = None) -> Problem:
    h = rc.hamiltonian
    A = np.asarray(h.get("A", [[1.0, 0.0], [0.0, 1.0]]), dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ConfigError("hamiltonian.A: must be a square matrix")
    d = A.shape[0]
    b = np.asarray(h.get("b", [0.0] * d), dtype=float)
    l = float(h.get("l", 8.0))
    if "family" in h:
        if h["family"] != "quadratic_trig":
            raise ConfigError(f"hamiltonian.family: unknown family {h['family']!r}")
        terms = []
        for i, t in enumerate(h.get("terms", [])):
            try:
                terms.append((list(t["k"]), float(t.get("cos", 0.0)), float(t.get("sin", 0.0))))
            except (KeyError, TypeError, ValueError):
                raise ConfigError(f"hamiltonian.terms[{i}]: needs k and cos/sin") from None
    else:
        terms = _read_terms_csv(h["table"], d)
    for k, _, _ in terms:
        if len(k) != d:
            raise ConfigError("hamiltonian.terms: mode length differs from dimension")
    H = TrigHamiltonian.build(A, b, terms)
    coeffs = H.perturbation_terms()
    P = trig_function(coeffs, d, l)
    K = quadratic_hamiltonian(A, b, 0.0, l)
    sc = dict(rc.scheme)
    sc.update(overrides or {})
    if sc.get("eps", "auto") == "auto":
        sc["eps"] = float(P.cl_norm_estimate or 0.0)
    sc.setdefault("d", d)
    sc.setdefault("l", l)
    for key in ("omega", "label"):
        if key in sc:
            sc[key] = tuple(float(v) for v in sc[key])
    known = {f.name for f in fields(SchemeConfig)}
    for key in sc:
        if key not in known:
            raise ConfigError(f"scheme.{key}: unknown field")
    try:
        cfg = SchemeConfig(**sc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scheme: {exc}") from None
    if cfg.omega is None and cfg.label is None:
        raise ConfigError("scheme.omega: give omega or label")
    return Problem(H, K, P, cfg)


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "max_steps", None) is not None:
        out["max_steps"] = args.max_steps
    if getattr(args, "tol", None) is not None:
        out["tol"] = args.tol
    return out


def _out_dir(rc: RunConfig, args) -> Path:
    out = Path(args.out) if args.out else rc.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _header(args, rc) -> dict:
    return {"version": __version__, "seed": rc.seed if args.seed is None else args.seed,
            "force": bool(getattr(args, "force", False)),
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}


def cmd_run(args) -> int:
    rc = load_config(args.config)
    prob = build_problem(rc, _overrides(args))
    out = _out_dir(rc, args)
    header = _header(args, rc)
    if args.force:
        print("warning: --force bypasses the smallness gate; results are not certified",
              file=sys.stderr)
    try:
        res = run(prob.K, prob.P, prob.config, force=args.force)
    except SchemeConditionError as exc:
        if exc.result is not None:
            exc.result.write_json(out / "run_report.json", header)
            exc.result.write_convergence_csv(out / "convergence.csv")
        print(f"condition failure: ({exc.condition['name']}) at step {exc.step}: {exc}",
              file=sys.stderr)
        return EXIT_CONDITION
    except DivergenceError as exc:
        if exc.result is not None:
            exc.result.write_json(out / "run_report.json", header)
            exc.result.write_convergence_csv(out / "convergence.csv")
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    res.write_json(out / "run_report.json", header)
    res.write_convergence_csv(out / "convergence.csv")
    if res.torus is not None:
        _write_torus(res.torus, out, 0)
    print(f"{res.status}: {len(res.steps)} steps, terminal |P| = {res.history[-1]['P_norm']:.3e}")
    return EXIT_OK if res.converged else EXIT_DIVERGED


def _write_torus(torus: TorusEmbedding, out: Path, idx: int) -> None:
    torus.write_csv(out / f"torus_{idx}.csv")
    with open(out / f"torus_{idx}.json", "w") as fh:
        json.dump(torus.summary(), fh, indent=1)


def read_torus(csv_path) -> TorusEmbedding:
    """Rebuild a stored torus (samples only) from torus_<id>.csv and its .json."""
    csv_path = Path(csv_path)
    meta_path = csv_path.with_suffix(".json")
    if not csv_path.exists() or not meta_path.exists():
        raise ConfigError(f"validate.torus: missing {csv_path} or {meta_path}")
    meta = json.loads(meta_path.read_text())
    data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    d = len(meta["y_star"])
    n = int(meta["n_grid"])
    return TorusEmbedding(np.array(meta["y_star"]), np.array(meta["omega_star"]), n,
                          data[:, d:3 * d], data[:, 3 * d:4 * d], float(meta["K_star"]))


def cmd_step(args) -> int:
    rc = load_config(args.config)
    prob = build_problem(rc, _overrides(args))
    out = _out_dir(rc, args)
    c = prob.config
    if prob.P.is_zero() or c.eps == 0:
        rec = {"identity": True, "conditions": check_smallness(c).conditions,
               "norms": {"P": 0.0, "P_prime": 0.0}}
        (out / "step_report.json").write_text(json.dumps(rec, indent=1))
        print("zero perturbation: identity step")
        return EXIT_OK
    inp = initial_step(prob.K, prob.P, c)
    try:
        res = kam_step(inp.K, inp.P, inp.params, label=inp.label, out_halfwidth=inp.out_halfwidth,
                       out_nodes=c.n_nodes, oversample=c.oversample, force=args.force)
    except StepConditionError as exc:
        print(f"condition failure: ({exc.condition['name']}) {exc}", file=sys.stderr)
        return EXIT_CONDITION
    rec = res.report()
    rec["log"] = inp.log + rec["log"]
    (out / "step_report.json").write_text(json.dumps(rec, indent=1, default=float))
    print(f"step: |P| = {res.norms['P']:.3e} -> |P'| = {res.norms['P_prime']:.3e}")
    return EXIT_OK


def cmd_smooth_bench(args) -> int:
    rc = load_config(args.config)
    sec = rc.sections.get("smooth_bench", {})
    out = _out_dir(rc, args)
    names = tuple(sec.get("functions", ("abs_sin_7_2", "analytic_inv_cos")))
    s_list = sec.get("strips")
    try:
        rows = smoothing_benchmark(names, s_list)
    except KeyError as exc:
        raise ConfigError(f"smooth_bench.functions: unknown function {exc}") from None
    write_smoothing_csv(rows, out / "smooth_rates.csv")
    for name in names:
        slope = next(r["fitted_slope"] for r in rows if r["function"] == name)
        print(f"{name}: fitted slope {slope:.3f}")
    return EXIT_OK


def cmd_measure(args) -> int:
    rc = load_config(args.config)
    sec = rc.sections.get("measure", {})
    out = _out_dir(rc, args)
    try:
        tab = resonant_measure(sec.get("box", [[1.0, 2.0], [1.0, 2.0]]), sec["alphas"],
                               float(sec.get("tau", 1.2)), int(sec.get("cutoff", 200)),
                               int(sec.get("samples", 100_000)),
                               rc.seed if args.seed is None else args.seed)
    except KeyError as exc:
        raise ConfigError(f"measure.{exc.args[0]}: required") from None
    except ValueError as exc:
        raise ConfigError(f"measure: {exc}") from None
    tab.write_csv(out / "measure.csv")
    summary = {"slope": tab.slope} if tab.slope is not None else {}
    (out / "measure.json").write_text(json.dumps(summary))
    print("slope: " + ("absent" if tab.slope is None else f"{tab.slope:.3f}"))
    return EXIT_OK


def cmd_validate(args) -> int:
    rc = load_config(args.config)
    sec = rc.sections.get("validate", {})
    out = _out_dir(rc, args)
    prob = build_problem(rc, _overrides(args))
    torus_path = Path(sec["torus"]) if "torus" in sec else out / "torus_0.csv"
    torus = read_torus(torus_path)
    rep = invariance_defect(prob.H, torus, T=float(sec.get("T", 100.0)),
                            sample_count=int(sec.get("samples", 32)), dt=float(sec.get("dt", 1e-3)),
                            seed=rc.seed if args.seed is None else args.seed)
    write_defects_csv(rep.rows, out / "defects.csv")
    iso = isotropy_defect(torus)
    summary = {"invariance_defect": rep.max_defect, "energy_drift": rep.energy_drift,
               "isotropy_defect": iso}
    (out / "validate_report.json").write_text(json.dumps(summary, indent=1))
    print(f"invariance {rep.max_defect:.3e}, isotropy {iso:.3e}, energy drift {rep.energy_drift:.3e}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "step": cmd_step, "smooth-bench": cmd_smooth_bench,
            "measure": cmd_measure, "validate": cmd_validate}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kamtori", description="KAM iteration for nearly integrable "
                                "Hamiltonians with finitely differentiable perturbations.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="TOML configuration file")
        s.add_argument("--out", help="output directory (overrides output_dir)")
        s.add_argument("--seed", type=int, help="random seed (overrides seed)")
        s.add_argument("--force", action="store_true", help="bypass the smallness gate (logged)")
        s.add_argument("--max-steps", type=int, dest="max_steps")
        s.add_argument("--tol", type=float)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TorusError as exc:
        print(f"torus error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
