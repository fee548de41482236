"""Command-line front end: analyze, optimize, simulate, validate, sweep, report-conditions.

Data goes to ``--output`` (or stdout) as CSV; progress goes to stderr.
Exit codes: 0 ok, 2 configuration error, 3 infeasible parameters,
4 validation error above the threshold.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np

from . import analytic as an
from . import optimizer as opt
from . import simulator as sim
from .model import ConfigError, ControlParams, NetworkConfig, load_config

log = logging.getLogger("femtolb")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_VALIDATION = 0, 2, 3, 4

RESULT_COLUMNS = (
    "schema_version", "verb", "scheme", "sweep_axis", "sweep_value",
    "rho", "d_f", "beta", "theta", "x",
    "tput_fms", "tput_mms", "tput_oms", "se_fms", "se_mms", "se_oms", "outage_oms",
    "slack_fms", "slack_oms", "source",
    "hw_tput_fms", "hw_tput_mms", "hw_tput_oms",
    "feasible", "fms_limited", "prop3_sufficient", "prop4_condition", "convexity_verified",
    "binding", "d_max", "drops", "runtime_s",
)
VALIDATION_COLUMNS = ("schema_version", "d_f", "metric", "analytic", "simulated", "rel_error",
                      "std_error", "drops", "within")
SWEEP_AXES = {"M": "benefit_ratio", "N_f": "fbs_mean", "k_in": "indoor_density_factor",
              "N_max": None, "d_f": None}
VALIDATED = ("se_fms", "se_mms", "se_oms", "tput_fms", "tput_mms", "tput_oms")


class InfeasibleError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# CSV helpers

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_rows(rows: Iterable[dict], columns: Sequence[str], out) -> None:
    writer = csv.DictWriter(out, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k)) for k in columns})


def _parse_cell(text: str):
    if text == "":
        return None
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_rows(path) -> List[dict]:
    """Parse a CSV written by this tool back into typed values."""
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: _parse_cell(v) for k, v in row.items()} for row in csv.DictReader(fh)]


@contextmanager
def _output(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            yield fh


def _floats(text: str) -> List[float]:
    try:
        vals = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"not a number list: {text!r}") from exc
    if not vals or not all(math.isfinite(v) for v in vals):
        raise ConfigError(f"need a non-empty list of finite numbers, got {text!r}")
    return vals


# ---------------------------------------------------------------------------
# row builders

def _result_row(verb, scheme, params: ControlParams, report, cfg: NetworkConfig, **extra) -> dict:
    row = {"schema_version": SCHEMA_VERSION, "verb": verb, "scheme": scheme,
           "rho": params.rho, "d_f": params.d_f, "beta": params.beta, "theta": params.theta,
           "x": params.area(cfg)}
    row.update(report.as_dict())
    if report.half_widths:
        for k in ("tput_fms", "tput_mms", "tput_oms"):
            row["hw_" + k] = report.half_widths[k]
    row.update(extra)
    return row


def _control_grid(rest: dict) -> List[ControlParams]:
    if "rho" not in rest or "d_f" not in rest:
        raise ConfigError("analyze needs rho and d_f (config file or --set)")
    axes = [_floats(rest.get(k, default)) for k, default in
            (("rho", None), ("d_f", None), ("beta", "0"), ("theta", "1"))]
    try:
        return [ControlParams(*combo) for combo in itertools.product(*axes)]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _optimize_row(cfg: NetworkConfig, mode: str, thetas, verb="optimize", **extra) -> dict:
    t0 = time.perf_counter()
    res = opt.solve(mode, cfg, theta=1.0, thetas=thetas)
    return _result_row(verb, mode, res.params, res.report, cfg, feasible=res.feasible,
                       fms_limited=res.fms_limited, prop3_sufficient=res.prop3_sufficient,
                       prop4_condition=res.prop4_condition,
                       convexity_verified=res.convexity_verified, binding=res.binding,
                       d_max=res.d_max, runtime_s=time.perf_counter() - t0, **extra)


def _sweep_worker(job):
    cfg, mode, thetas, axis, value = job
    return _optimize_row(cfg, mode, thetas, verb="sweep", sweep_axis=axis, sweep_value=value)


# ---------------------------------------------------------------------------
# verbs

def cmd_analyze(args, cfg, rest) -> int:
    rows = []
    for params in _control_grid(rest):
        t0 = time.perf_counter()
        try:
            rep = an.analyze(params, cfg, strict=True)
        except an.DomainError as exc:
            raise InfeasibleError(str(exc)) from exc
        rows.append(_result_row("analyze", "analytic", params, rep, cfg,
                                d_max=an.find_dmax(cfg, params.theta), feasible=True,
                                runtime_s=time.perf_counter() - t0))
    with _output(args.output) as out:
        write_rows(rows, RESULT_COLUMNS, out)
    return EXIT_OK


def cmd_optimize(args, cfg, rest) -> int:
    row = _optimize_row(cfg, args.mode, _floats(args.thetas))
    with _output(args.output) as out:
        write_rows([row], RESULT_COLUMNS, out)
    if not row["feasible"]:
        log.warning("no feasible service area: outage at D_h exceeds O_max")
        return EXIT_INFEASIBLE
    return EXIT_OK


def _scheme_spec(args, rest, d_f=None) -> sim.SchemeSpec:
    scheme = args.scheme
    params = None
    if scheme in sim.PROPOSED:
        vals = {k: float(_floats(rest[k])[0]) for k in ("rho", "d_f", "beta", "theta") if k in rest}
        if d_f is not None:
            vals["d_f"] = d_f
        if "rho" not in vals or "d_f" not in vals:
            raise ConfigError(f"{scheme} needs rho and d_f")
        try:
            params = ControlParams(**vals)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    rho = float(_floats(rest["rho"])[0]) if scheme in ("DivRSSI", "DivCA") and "rho" in rest else None
    try:
        return sim.SchemeSpec(scheme, params=params, delta_db=args.delta_db, rho=rho,
                              n_max=args.n_max, k_in=None)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_simulate(args, cfg, rest) -> int:
    spec = _scheme_spec(args, rest)
    t0 = time.perf_counter()
    stream = open(args.stream, "w", encoding="utf-8") if args.stream else None
    try:
        est = sim.run_campaign(spec, cfg, args.drops, args.seed, workers=args.workers,
                               fading_samples=args.fading_samples, stream=stream)
    finally:
        if stream:
            stream.close()
    params = spec.params or ControlParams(rho=spec.split, d_f=0.0)
    row = _result_row("simulate", spec.scheme, params, est.report(), cfg, drops=est.drops,
                      runtime_s=time.perf_counter() - t0)
    with _output(args.output) as out:
        write_rows([row], RESULT_COLUMNS, out)
    return EXIT_OK


def validation_table(cfg: NetworkConfig, params: ControlParams, drops: int, seed: int, workers: int = 1,
                     fading_samples: int = 0) -> List[dict]:
    """Analytic vs simulated means for one parameter point."""
    rep = an.analyze(params, cfg, strict=False)
    est = sim.run_campaign(sim.SchemeSpec("OA" if params.beta == 0 else "HA", params=params), cfg,
                           drops, seed, workers=workers, fading_samples=fading_samples)
    metrics = est.metrics()
    rows = []
    for name in VALIDATED:
        a = getattr(rep, name)
        s, se = metrics[name]
        rel = (s - a) / a if a else (0.0 if s == 0 else math.inf)
        rows.append({"schema_version": SCHEMA_VERSION, "d_f": params.d_f, "metric": name, "analytic": a,
                     "simulated": s, "rel_error": rel, "std_error": se, "drops": drops})
    return rows


def cmd_validate(args, cfg, rest) -> int:
    rest = dict(rest)
    rest.setdefault("rho", "0.3")
    radii = _floats(args.d_f) if args.d_f else _floats(rest.get("d_f", "20,40,60"))
    rows = []
    for d_f in radii:
        log.info("validating d_f=%g m with %d drops", d_f, args.drops)
        params = ControlParams(rho=float(_floats(rest["rho"])[0]), d_f=d_f,
                               beta=float(_floats(rest.get("beta", "0"))[0]),
                               theta=float(_floats(rest.get("theta", "1"))[0]))
        rows += validation_table(cfg, params, args.drops, args.seed, args.workers, args.fading_samples)
    worst = 0.0
    for row in rows:
        if math.isnan(row["simulated"]):
            # class absent from every drop (e.g. no femtocells): nothing to compare
            row["within"] = None
            log.warning("d_f=%g: no simulated %s users; metric skipped", row["d_f"], row["metric"])
            continue
        err = abs(row["rel_error"])
        row["within"] = bool(err <= args.threshold)
        worst = max(worst, err if math.isfinite(err) else math.inf)
    with _output(args.output) as out:
        write_rows(rows, VALIDATION_COLUMNS, out)
    log.info("largest relative error %.4g (threshold %.4g)", worst, args.threshold)
    return EXIT_OK if worst <= args.threshold else EXIT_VALIDATION


def cmd_sweep(args, cfg, rest) -> int:
    axis = args.axis
    values = _floats(args.values)
    thetas = _floats(args.thetas)
    rows = []
    if axis in ("M", "N_f", "k_in"):
        field = SWEEP_AXES[axis]
        try:
            cfgs = [cfg.replace(**{field: v}) for v in values]
        except ConfigError:
            raise
        jobs = [(c, args.mode, thetas, axis, v) for c, v in zip(cfgs, values)]
        if args.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=args.workers) as pool:
                rows = list(pool.map(_sweep_worker, jobs))
        else:
            for i, job in enumerate(jobs):
                log.info("sweep %s=%g (%d/%d)", axis, job[-1], i + 1, len(jobs))
                rows.append(_sweep_worker(job))
    elif axis == "d_f":
        base = dict(rest)
        base.setdefault("rho", "0.3")
        for v in values:
            params = ControlParams(rho=float(_floats(base["rho"])[0]), d_f=v,
                                   beta=float(_floats(base.get("beta", "0"))[0]),
                                   theta=float(_floats(base.get("theta", "1"))[0]))
            try:
                rep = an.analyze(params, cfg, strict=True)
            except an.DomainError as exc:
                raise InfeasibleError(str(exc)) from exc
            rows.append(_result_row("sweep", "analytic", params, rep, cfg, sweep_axis=axis, sweep_value=v))
    else:  # N_max: simulated optimisation over a radius grid
        d_max = an.find_dmax(cfg)
        radii = np.linspace(cfg.home_radius, d_max, args.radii)
        mode = args.mode.replace("-Thin", "")
        for i, v in enumerate(values):
            cap = None if v <= 0 else int(v)
            log.info("sweep N_max=%s (%d/%d)", cap, i + 1, len(values))
            t0 = time.perf_counter()
            best = sim.optimize_simulated(cfg, radii, args.drops, args.seed, mode=mode, n_max=cap,
                                          workers=args.workers)
            est = best.estimate
            rows.append(_result_row("sweep", mode, est.spec.params, est.report(), cfg, sweep_axis=axis,
                                    sweep_value=v, drops=est.drops, runtime_s=time.perf_counter() - t0))
    with _output(args.output) as out:
        write_rows(rows, RESULT_COLUMNS, out)
    if args.series_dir:
        write_series(rows, Path(args.series_dir), axis)
    return EXIT_OK


def write_series(rows, directory: Path, axis: str,
                 metrics=("tput_mms", "tput_fms", "tput_oms", "rho", "d_f", "theta", "beta")) -> None:
    """One two-column whitespace file per metric, for gnuplot and friends."""
    directory.mkdir(parents=True, exist_ok=True)
    for m in metrics:
        with open(directory / f"{axis}_{m}.dat", "w", encoding="utf-8") as fh:
            fh.write(f"# {axis} {m}\n")
            for row in rows:
                fh.write(f"{_fmt(float(row['sweep_value']))} {_fmt(float(row[m]))}\n")


def conditions_report(cfg: NetworkConfig, theta: float = 1.0) -> str:
    limited = opt.fms_limited_check(cfg, theta)
    cond = opt.prop4_check(cfg, theta)
    x_lo, x_hi = an.area_bounds(cfg, theta)
    n_m, n_o = an.mean_counts(x_hi, cfg)
    search = an.dmax_search(cfg, theta)
    lines = [
        f"theta                                  {theta:g}",
        f"D_max [m]                              {search.radius:.3f}"
        + (" (saturated)" if search.saturated else ""),
        f"outage at D_h                          {search.outage_at_dh:.6g} (cap {cfg.outage_cap:g})",
        f"fMS-limited sufficient condition       {limited.ratio:.6g} <= M/K = {limited.bound:.6g}: "
        f"{'holds' if limited.sufficient else 'fails'}",
        f"fMS-limited on the x-grid              {'yes' if limited.direct else 'no'}",
        f"fms-limited                            {'true' if limited.limited else 'false'}",
        f"N_f B_f theta / (M B_m)                {cond.quantity:.6g} vs 1: "
        f"{'> 1' if cond.quantity > 1 else '<= 1'}",
        f"mean mMS users at X_max                {n_m:.6g}",
        f"mean oMS users per femtocell at X_max  {n_o:.6g}",
        f"largest-coverage prediction            {'x* = X_max' if cond.holds else 'not implied'}",
        f"spectral efficiency fMS / mMS          {an.avg_se_fms(cfg, theta):.6g} / {an.avg_se_mms(cfg):.6g}",
        "traffic load and coverage checklist    requires operator input",
    ]
    return "\n".join(lines) + "\n"


def cmd_report_conditions(args, cfg, rest) -> int:
    theta = float(_floats(rest.get("theta", "1"))[0])
    text = conditions_report(cfg, theta)
    with _output(args.output) as out:
        out.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="femtolb", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="flat key = value configuration file")
    common.add_argument("-s", "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration key (repeatable)")
    common.add_argument("-o", "--output", help="output file (default stdout)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--drops", type=int, default=2000)
    common.add_argument("--workers", type=int, default=sim.default_workers(),
                        help=f"worker processes (default ${sim.WORKERS_ENV} or 1)")
    common.add_argument("--fading-samples", type=int, default=0,
                        help="sample fading explicitly instead of the exact average")
    sub = p.add_subparsers(dest="verb", required=True)

    sub.add_parser("analyze", parents=[common], help="analytic report at given control parameters")

    o = sub.add_parser("optimize", parents=[common], help="optimal control parameters")
    o.add_argument("--mode", choices=opt.MODES, default="OA")
    o.add_argument("--thetas", default=",".join(str(t) for t in opt.DEFAULT_THETAS))

    s = sub.add_parser("simulate", parents=[common], help="Monte Carlo campaign for one scheme")
    s.add_argument("--scheme", choices=sim.SCHEMES, default="OA")
    s.add_argument("--delta-db", type=float, default=0.0)
    s.add_argument("--n-max", type=int, default=None)
    s.add_argument("--stream", help="write one JSON line per drop to this file")

    v = sub.add_parser("validate", parents=[common], help="compare analysis with simulation")
    v.add_argument("--d-f", help="comma list of service radii (default 20,40,60)")
    v.add_argument("--threshold", type=float, default=0.01)

    w = sub.add_parser("sweep", parents=[common], help="optimize or analyze along one axis")
    w.add_argument("--axis", choices=tuple(SWEEP_AXES), required=True)
    w.add_argument("--values", required=True, help="comma list (N_max: 0 means uncapped)")
    w.add_argument("--mode", choices=opt.MODES, default="OA")
    w.add_argument("--thetas", default=",".join(str(t) for t in opt.DEFAULT_THETAS))
    w.add_argument("--radii", type=int, default=7, help="radius grid size for the N_max axis")
    w.add_argument("--series-dir", help="also write two-column series files here")

    sub.add_parser("report-conditions", parents=[common], help="structural condition report")
    return p


VERBS = {"analyze": cmd_analyze, "optimize": cmd_optimize, "simulate": cmd_simulate,
         "validate": cmd_validate, "sweep": cmd_sweep, "report-conditions": cmd_report_conditions}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        if args.drops < 1:
            raise ConfigError("--drops must be >= 1")
        cfg, rest = load_config(args.config, args.overrides)
        return VERBS[args.verb](args, cfg, rest)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (InfeasibleError, an.DomainError) as exc:
        log.error("infeasible: %s", exc)
        return EXIT_INFEASIBLE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
