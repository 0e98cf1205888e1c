"""Command-line entry point: ``sepp <subcommand> --config file.json``.

Exit codes: 0 success, 1 runtime failure, 2 invalid invocation or config,
3 completed but flagged (e.g. too many unresolved basin runs).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, _io, analytic, ldp, mc
from .rate_fn import RateFunction, RateFunctionError, classify_growth, find_fixed_points
from .sim import SimConfig, simulate, trajectories_to_csv

log = logging.getLogger("sepp")

SUBCOMMANDS = ("simulate", "analyze", "ldp", "experiment", "fixed-points")
SCHEMA_VERSIONS = (1,)
EXIT_OK, EXIT_RUNTIME, EXIT_INVALID, EXIT_FLAGGED = 0, 1, 2, 3
ANALYSES = ("moments", "pmf", "tail", "flow")


class ValidationError(Exception):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class CliInvocation:
    subcommand: str
    config_path: Path
    output_dir: Path
    config: dict
    overrides: list = field(default_factory=list)
    verbosity: int = 0
    workers: int | None = None
    errors_json: bool = False
    # validated domain object for the subcommand
    target: object = None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sepp", description="Self-exciting point process toolkit.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="JSON config file")
        p.add_argument("--output-dir", type=Path, default=Path("out"))
        p.add_argument("--seed", type=int, help="override the seed (master_seed for experiments)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value; dotted keys reach nested fields")
        p.add_argument("--workers", type=int, help="worker threads (default: SEPP_THREADS or CPU count)")
        p.add_argument("--errors-json", action="store_true", help="print validation errors as JSON")
        p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


def _require_number(cfg, name, problems, *, minimum=None, strict=False, required=True, integer=False):
    if name not in cfg:
        if required:
            problems.append(f"{name}: missing required field")
        return
    v = cfg[name]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (isinstance(v, float) and not math.isfinite(v)):
        problems.append(f"{name}: must be a finite number (got {v!r})")
        return
    if integer and not isinstance(v, int):
        problems.append(f"{name}: must be an integer (got {v!r})")
    if minimum is not None and (v <= minimum if strict else v < minimum):
        problems.append(f"{name}: must be {'>' if strict else '>='} {minimum} (got {v!r})")


def _rate(cfg, problems):
    if "rate" not in cfg:
        problems.append("rate: missing required field")
        return None
    try:
        return RateFunction.from_config(cfg["rate"])
    except RateFunctionError as err:
        problems.extend(err.problems)
        return None


def _number_list(cfg, name, problems, *, minimum=0.0):
    v = cfg.get(name)
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        v = [v]
    if not (isinstance(v, list) and v and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)):
        problems.append(f"{name}: must be a number or a non-empty list of numbers")
        return None
    if any(x < minimum for x in v):
        problems.append(f"{name}: values must be >= {minimum}")
        return None
    return [float(x) for x in v]


def _validate_simulate(cfg):
    problems = []
    rf = _rate(cfg, problems)
    _require_number(cfg, "gamma", problems, minimum=0, required=False)
    _require_number(cfg, "horizon", problems, minimum=0, strict=True)
    _require_number(cfg, "seed", problems, minimum=0, integer=True, required=False)
    _require_number(cfg, "replications", problems, minimum=1, integer=True, required=False)
    _require_number(cfg, "max_events", problems, minimum=1, integer=True, required=False)
    known = {"schema_version", "rate", "gamma", "horizon", "seed", "replications", "max_events", "method"}
    problems += [f"{k}: unknown field" for k in sorted(set(cfg) - known)]
    if problems:
        raise ValidationError(problems)
    try:
        return SimConfig(
            rf,
            gamma=float(cfg.get("gamma", 0.0)),
            horizon=float(cfg["horizon"]),
            max_events=int(cfg.get("max_events", 10**7)),
            seed=int(cfg.get("seed", 0)),
            method=cfg.get("method", "auto"),
        )
    except ValueError as err:
        raise ValidationError([str(err)]) from None


def _validate_analyze(cfg):
    problems = []
    rf = _rate(cfg, problems)
    analysis = cfg.get("analysis")
    if analysis not in ANALYSES:
        problems.append(f"analysis: must be one of {list(ANALYSES)} (got {analysis!r})")
    _require_number(cfg, "gamma", problems, minimum=0, required=False)
    t = None
    if "t" in cfg:
        t = _number_list(cfg, "t", problems)
    else:
        problems.append("t: missing required field")
    if analysis in ("pmf", "tail"):
        _require_number(cfg, "k_max", problems, minimum=1, integer=True)
    if analysis == "flow":
        _require_number(cfg, "y0", problems, minimum=0, required=False)
    known = {"schema_version", "rate", "analysis", "gamma", "t", "k_max", "y0"}
    problems += [f"{k}: unknown field" for k in sorted(set(cfg) - known)]
    if rf is not None and analysis == "moments":
        if not rf.is_affine:
            problems.append("rate: moments need an affine or constant rate")
        if cfg.get("gamma", 0) != 0:
            problems.append("gamma: affine moments are for gamma = 0")
    if problems:
        raise ValidationError(problems)
    return {"rf": rf, "analysis": analysis, "t": t, "gamma": float(cfg.get("gamma", 0.0)),
            "k_max": cfg.get("k_max"), "y0": float(cfg.get("y0", 0.0))}


def _validate_ldp(cfg):
    problems = []
    rf = _rate(cfg, problems)
    x = cfg.get("x")
    xs = None
    if isinstance(x, dict):
        missing = [k for k in ("start", "stop", "step") if k not in x]
        problems += [f"x.{k}: missing required field" for k in missing]
        if not missing:
            if not all(isinstance(x[k], (int, float)) and not isinstance(x[k], bool) for k in ("start", "stop", "step")):
                problems.append("x: start, stop and step must be numbers")
            elif x["step"] <= 0 or x["start"] < 0 or x["stop"] < x["start"]:
                problems.append("x: need 0 <= start <= stop and step > 0")
            else:
                n = int(math.floor((x["stop"] - x["start"]) / x["step"] + 1e-9)) + 1
                xs = [round(x["start"] + i * x["step"], 12) for i in range(n)]
    elif "x" in cfg:
        xs = _number_list(cfg, "x", problems)
    else:
        problems.append("x: missing required field")
    _require_number(cfg, "n_grid", problems, minimum=2, integer=True, required=False)
    _require_number(cfg, "grading", problems, minimum=1, required=False)
    if not isinstance(cfg.get("write_paths", False), bool):
        problems.append("write_paths: must be true or false")
    known = {"schema_version", "rate", "x", "n_grid", "grading", "write_paths"}
    problems += [f"{k}: unknown field" for k in sorted(set(cfg) - known)]
    if problems:
        raise ValidationError(problems)
    return {
        "rf": rf,
        "x": xs,
        "n_grid": int(cfg.get("n_grid", 64)),
        "grading": float(cfg.get("grading", 3.0)),
        "write_paths": cfg.get("write_paths", False),
    }


def _validate_experiment(cfg):
    body = {k: v for k, v in cfg.items() if k != "schema_version"}
    try:
        return mc.ExperimentSpec.from_config(body)
    except mc.ExperimentError as err:
        raise ValidationError([p.removeprefix("experiment.") for p in err.problems]) from None


def _validate_fixed_points(cfg):
    problems = []
    rf = _rate(cfg, problems)
    _require_number(cfg, "search_hi", problems, minimum=0, strict=True, required=False)
    known = {"schema_version", "rate", "search_hi"}
    problems += [f"{k}: unknown field" for k in sorted(set(cfg) - known)]
    if problems:
        raise ValidationError(problems)
    return {"rf": rf, "search_hi": cfg.get("search_hi")}


VALIDATORS = {
    "simulate": _validate_simulate,
    "analyze": _validate_analyze,
    "ldp": _validate_ldp,
    "experiment": _validate_experiment,
    "fixed-points": _validate_fixed_points,
}


def parse_and_validate(argv) -> CliInvocation:
    """Parse argv, load and override the config, and validate it.

    Raises ValidationError listing every problem found.
    """
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code == 0:
            raise
        err = ValidationError(["invalid command line (see usage above)"])
        err.errors_json = "--errors-json" in list(argv)
        raise err from None
    problems = []
    path = ns.config
    cfg = None
    if not path.is_file():
        problems.append(f"config: file not found: {path}")
    else:
        try:
            cfg = json.loads(path.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as err:
            problems.append(f"config: not valid JSON ({err})")
        if cfg is not None and not isinstance(cfg, dict):
            problems.append("config: top level must be an object")
            cfg = None
    if cfg is not None:
        if "schema_version" not in cfg:
            problems.append("schema_version: missing required field")
        elif cfg["schema_version"] not in SCHEMA_VERSIONS:
            problems.append(f"schema_version: unsupported version {cfg['schema_version']!r}")
        for item in ns.overrides:
            key, sep, value = item.partition("=")
            if not sep or not key:
                problems.append(f"--set: expected KEY=VALUE (got {item!r})")
                continue
            apply_override(cfg, key, _parse_value(value))
        if ns.seed is not None:
            apply_override(cfg, "master_seed" if ns.subcommand == "experiment" else "seed", ns.seed)
    if ns.workers is not None and ns.workers < 1:
        problems.append("--workers: must be >= 1")
    target = None
    if cfg is not None:
        try:
            target = VALIDATORS[ns.subcommand](cfg)
        except ValidationError as err:
            problems += err.problems
    if problems:
        err = ValidationError(problems)
        err.errors_json = ns.errors_json
        raise err
    return CliInvocation(
        subcommand=ns.subcommand,
        config_path=path,
        output_dir=ns.output_dir,
        config=cfg,
        overrides=list(ns.overrides),
        verbosity=ns.verbose,
        workers=ns.workers,
        errors_json=ns.errors_json,
        target=target,
    )


# ---------------------------------------------------------------------------
# runners: each returns (files {name: text}, flagged)


def _run_simulate(inv):
    cfg: SimConfig = inv.target
    reps = int(inv.config.get("replications", 1))
    if reps == 1:
        trajs = [simulate(cfg)]
    else:
        trajs = [simulate(cfg, replication=i) for i in range(reps)]
    jsonl = "".join(t.to_json() + "\n" for t in trajs)
    exploded = sum(t.exploded for t in trajs)
    summary = {
        "replications": reps,
        "events": [t.n_events for t in trajs],
        "exploded": exploded,
    }
    log.info("simulated %d path(s), %d exploded", reps, exploded)
    files = {
        "trajectories.jsonl": jsonl,
        "trajectories.csv": trajectories_to_csv(trajs),
        "summary.json": _io.dumps(summary),
    }
    return files, False


def _analyze_report(a) -> str:
    g = classify_growth(a["rf"])
    report = {
        "analysis": a["analysis"],
        "rate": a["rf"].to_config(),
        "gamma": a["gamma"],
        "regime": {"regime": g.regime, "exponent": g.exponent, "coefficient": g.coefficient,
                   "bound": g.bound, "explosive": g.explosive},
    }
    if a["analysis"] == "moments":
        label, limit = analytic.variance_scaling(*a["rf"].affine_coefficients())
        report["variance_scaling"] = {"label": label, "limit": limit}
    if a["analysis"] == "tail":
        law = analytic.tail_asymptote(a["rf"], max(a["t"]))
        report["tail_law"] = {"kind": law.kind, "coefficient": law.coefficient}
    return _io.dumps(report)


def _run_analyze(inv):
    a = inv.target
    rf, ts = a["rf"], a["t"]
    files = {"report.json": _analyze_report(a)}
    if a["analysis"] == "moments":
        alpha, beta = rf.affine_coefficients()
        rows = []
        for t in ts:
            m = analytic.moments_affine(alpha, beta, t)
            rows.append([t, m.mean, m.variance, m.scaled_variance, m.scaling_label])
        files["moments.csv"] = _io.csv_text(("t", "mean", "var", "var_scaled", "scaling_label"), rows)
        return files, False
    if a["analysis"] == "flow":
        flow = analytic.deterministic_flow(rf, a["y0"], max(ts), t_eval=sorted(set([0.0] + ts)))
        files["flow.csv"] = _io.csv_text(("t", "y"), zip(flow.t, flow.y))
        return files, False
    k_max = int(a["k_max"])
    rows, flagged = [], False
    for t in ts:
        if a["analysis"] == "pmf":
            ladder = analytic.pmf_ladder(rf, a["gamma"], t, k_max)
            flagged |= ladder.warning is not None
            rows += [[t, k, p] for k, p in enumerate(ladder.probs)]
        else:
            ladder = analytic.log_pmf_ladder(rf, a["gamma"], t, k_max)
            rows += [[t, ell, ladder.log_tail(ell)] for ell in range(1, k_max + 1)]
    if a["analysis"] == "pmf":
        files["pmf.csv"] = _io.csv_text(("t", "k", "p"), rows)
    else:
        files["tail.csv"] = _io.csv_text(("t", "ell", "log_tail"), rows)
    return files, flagged


def _run_ldp(inv):
    a = inv.target
    rows, paths = [], []
    for x in a["x"]:
        r = ldp.scalar_rate(a["rf"], x, a["n_grid"], grading=a["grading"])
        rows.append([x, r.value, r.converged, r.n_grid])
        if a["write_paths"]:
            paths.append({"x": x, "path": np.column_stack([r.minimizer.grid, r.minimizer.values])})
        log.info("I(%g) = %.6g", x, r.value)
    files = {"rate.csv": _io.csv_text(("x", "I", "converged", "n_grid"), rows)}
    if a["write_paths"]:
        files["minimizers.json"] = _io.dumps(paths)
    return files, False


def _run_experiment(inv):
    rep = mc.run_experiment(inv.target, workers=inv.workers)
    for flag in rep.flags:
        log.warning("flag: %s", flag)
    return mc.report_files(rep), rep.flagged


def _run_fixed_points(inv):
    a = inv.target
    report = find_fixed_points(a["rf"], a["search_hi"])
    rows = [[p.location, p.slope, p.cls, p.lo, p.hi] for p in report.points]
    table = _io.csv_text(("location", "slope", "class", "lo", "hi"), rows)
    print(f"{'location':>16} {'slope':>10}  class")
    for p in report.points:
        print(f"{p.location:16.10f} {p.slope:10.4f}  {p.cls}")
    if not report.complete:
        print(f"search incomplete: lambda(x) > x at x = {report.search_hi:g}")
    return {"fixed_points.csv": table}, not report.complete


RUNNERS = {
    "simulate": _run_simulate,
    "analyze": _run_analyze,
    "ldp": _run_ldp,
    "experiment": _run_experiment,
    "fixed-points": _run_fixed_points,
}


def _versions() -> dict:
    import numba
    import scipy

    return {
        "sepp": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def dispatch(inv: CliInvocation) -> int:
    """Run the validated invocation and write outputs plus manifest.json."""
    start = time.perf_counter()
    try:
        files, flagged = RUNNERS[inv.subcommand](inv)
    except Exception as err:  # runtime failure surfaces as exit 1 with context
        log.error("%s failed: %s", inv.subcommand, err)
        return EXIT_RUNTIME
    wall = time.perf_counter() - start
    try:
        out = inv.output_dir
        out.mkdir(parents=True, exist_ok=True)
        listing = []
        for name in sorted(files):
            path = _io.write_text(out / name, files[name])
            listing.append({"name": name, "sha256": _io.sha256_file(path), "bytes": path.stat().st_size})
        config_text = _io.dumps(inv.config)
        manifest = {
            "subcommand": inv.subcommand,
            "config_path": str(inv.config_path),
            "config": inv.config,
            "config_sha256": _io.sha256_text(config_text),
            "overrides": inv.overrides,
            "versions": _versions(),
            "wall_time_s": wall,
            "flagged": flagged,
            "files": listing,
        }
        _io.write_text(out / "manifest.json", _io.dumps(manifest))
    except OSError as err:
        log.error("could not write outputs to %s: %s", inv.output_dir, err)
        return EXIT_RUNTIME
    log.info("wrote %d file(s) to %s in %.2f s", len(files), inv.output_dir, wall)
    return EXIT_FLAGGED if flagged else EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv or argv[0] in ("-h", "--help"):
        build_parser().print_help()
        return EXIT_OK if argv else EXIT_INVALID
    try:
        inv = parse_and_validate(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    except ValidationError as err:
        if getattr(err, "errors_json", False):
            print(json.dumps({"errors": err.problems}, indent=2))
        else:
            print("invalid invocation:", file=sys.stderr)
            for p in err.problems:
                print(f"  - {p}", file=sys.stderr)
        return EXIT_INVALID
    level = logging.WARNING - 10 * min(inv.verbosity, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return dispatch(inv)


if __name__ == "__main__":
    sys.exit(main())
