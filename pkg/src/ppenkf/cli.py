"""Command-line front end.

    ppenkf run        one twin experiment
    ppenkf suite      methods x ensemble sizes x correlation lengths x seeds
    ppenkf benchmark  large-ensemble EnKF reference (spread and correlations)
    ppenkf compare    correlation-field RMSEs against the reference
    ppenkf generate-fields   prior or truth parameter fields as CSV

Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError

from . import __version__
from .config import RunConfig, parse_config
from .core import ValidationError
from .experiment import (_truth_field, build_setup, correlation_rmse_report,
                         prior_fields, rank_methods, run_reference_benchmark,
                         run_synthetic_experiment)
from .forward import SolverError
from .geostat import export_field_csv
from .report import (AGGREGATE_COLUMNS, CORRELATION_COLUMNS, RANK_COLUMNS,
                     aggregate_records, emit_report, format_value)

log = logging.getLogger("ppenkf")

# experiment index of the reference runs, kept away from the seed range
REFERENCE_INDEX = 1_000_000


def _run_jobs(cfgs, jobs: int):
    if jobs <= 1 or len(cfgs) <= 1:
        return [run_synthetic_experiment(c) for c in cfgs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_synthetic_experiment, cfgs))


def _record(rep, timing: bool) -> dict:
    r = rep.record()
    if not timing:
        r["wall_time"] = float("nan")
    return r


def _write_manifest(out: Path, command: str, cfg: RunConfig, fmt: str) -> None:
    doc = {"command": command, "artifact_version": __version__, "master_seed": cfg.seed,
           "format": fmt, "config": cfg.model_dump(mode="json")}
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_field_table(path: Path, grid, columns: dict) -> None:
    names = list(columns)
    lines = ["cell_index,x,y," + ",".join(names)]
    for c, (x, y) in enumerate(grid.centers):
        vals = ",".join(format_value(float(columns[n][c])) for n in names)
        lines.append(f"{c},{format_value(float(x))},{format_value(float(y))},{vals}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ------------------------------------------------------------ commands

def cmd_generate_fields(cfg: RunConfig, out: Path, args) -> int:
    exp = cfg.experiment.build(cfg.seed)
    grid = build_setup(exp).scenario.grid
    if cfg.fields.which == "truth":
        fields = _truth_field(exp, grid)[None, :]
    else:
        fields = prior_fields(exp, grid, cfg.fields.n_fields)
    for k, f in enumerate(fields):
        export_field_csv(out / f"{cfg.fields.which}_{k:04d}.csv", grid, f)
    return 0


def cmd_run(cfg: RunConfig, out: Path, args) -> int:
    exp = cfg.experiment.build(cfg.seed)
    rep = run_synthetic_experiment(exp)
    emit_report([_record(rep, args.timing)], out / "records", args.format)
    if rep.status != "ok":
        log.error("experiment failed: %s", rep.cause)
        return 2
    hist = [{"observation": k + 1, "rmse": v} for k, v in enumerate(rep.rmse_history)]
    emit_report(hist, out / "rmse_history", args.format, ("observation", "rmse"), "rmse_history")
    grid = build_setup(exp).scenario.grid
    _write_field_table(out / "posterior_fields.csv", grid,
                       {"mean": rep.mean_field, "variance": rep.variance_field})
    _write_field_table(out / "correlation_fields.csv", grid,
                       {f"{rep.correlation_kind}_{c}": rep.correlation_fields[i]
                        for i, c in enumerate(rep.correlation_cells)})
    return 0


def _rank_rows(per_scenario: dict, benchmark: dict = None) -> list[dict]:
    rows = {}
    for scenario, results in per_scenario.items():
        bench = None if benchmark is None else benchmark[scenario]
        # methods without a successful run in a cell rank last
        clean = {m: {c: (v if np.isfinite(v) else np.inf) for c, v in cells.items()}
                 for m, cells in results.items()}
        for m, rank in rank_methods(clean, bench).items():
            rows.setdefault(m, {"method": m})[f"{scenario}_avg_rank"] = rank
    return list(rows.values())


def cmd_suite(cfg: RunConfig, out: Path, args) -> int:
    s = cfg.suite
    base = cfg.experiment
    rmse_cells, std_cells, bench_cells = {}, {}, {}
    n_ok = n_all = 0
    for scenario in s.scenarios:
        cfgs = []
        for cl in s.corr_lengths:
            length = cfg.corr_length(scenario, cl)
            for n_e in s.ensemble_sizes:
                for method in s.methods:
                    for j in range(s.n_seeds):
                        cfgs.append(base.build(cfg.seed, j, scenario=scenario, variant=method,
                                               n_e=n_e, prior_corr_length=length))
        reports = _run_jobs(cfgs, args.jobs)
        records = [_record(r, args.timing) for r in reports]
        n_ok += sum(r.status == "ok" for r in reports)
        n_all += len(reports)
        emit_report(records, out / f"records_{scenario}", args.format)
        agg = aggregate_records(records)
        emit_report(agg, out / f"aggregate_{scenario}", args.format, AGGREGATE_COLUMNS, "aggregate")
        rmse_cells[scenario] = {}
        std_cells[scenario] = {}
        for a in agg:
            cell = (a["corr_len"], a["n_e"])
            rmse_cells[scenario].setdefault(a["method"], {})[cell] = a["mean_rmse"]
            std_cells[scenario].setdefault(a["method"], {})[cell] = a["mean_std"]
        if s.benchmark:
            bench_cells[scenario] = {}
            for cl in s.corr_lengths:
                length = cfg.corr_length(scenario, cl)
                ref = base.build(cfg.seed, REFERENCE_INDEX, scenario=scenario,
                                 prior_corr_length=length)
                b = run_reference_benchmark(ref, s.n_ref)
                for n_e in s.ensemble_sizes:
                    bench_cells[scenario][(length, n_e)] = b.std
    for name, cells, bench in (("ranks_rmse", rmse_cells, None),
                               ("ranks_std", std_cells, bench_cells if s.benchmark else None)):
        if name == "ranks_std" and not s.benchmark:
            continue
        emit_report(_rank_rows(cells, bench), out / name, args.format, RANK_COLUMNS, name)
    if n_ok == 0:
        log.error("all %d experiments failed", n_all)
        return 2
    return 0


def cmd_benchmark(cfg: RunConfig, out: Path, args) -> int:
    exp = cfg.experiment.build(cfg.seed, REFERENCE_INDEX)
    b = run_reference_benchmark(exp, cfg.benchmark.n_ref)
    row = {"scenario": exp.scenario, "n_e": cfg.benchmark.n_ref, "std": b.std, "rmse": b.report.rmse}
    emit_report([row], out / "benchmark", args.format, ("scenario", "n_e", "rmse", "std"), "benchmark")
    grid = build_setup(exp).scenario.grid
    rep = b.report
    _write_field_table(out / "reference_correlation_fields.csv", grid,
                       {f"{rep.correlation_kind}_{c}": rep.correlation_fields[i]
                        for i, c in enumerate(rep.correlation_cells)})
    return 0


def cmd_compare(cfg: RunConfig, out: Path, args) -> int:
    c = cfg.compare
    ref_cfg = cfg.experiment.build(cfg.seed, REFERENCE_INDEX)
    ref = run_reference_benchmark(ref_cfg, c.n_ref).report
    cfgs = [cfg.experiment.build(cfg.seed, j, variant=m, n_e=c.n_e)
            for m in c.methods for j in range(c.n_seeds)]
    rows = []
    for rep in _run_jobs(cfgs, args.jobs):
        value = correlation_rmse_report(rep, ref) if rep.status == "ok" else float("nan")
        rows.append({"scenario": rep.config.scenario, "method": rep.config.variant,
                     "seed": rep.config.experiment_index, "correlation_rmse": value})
    emit_report(rows, out / "correlation_rmse", args.format, CORRELATION_COLUMNS, "correlation_rmse")
    means = []
    for m in c.methods:
        vals = [r["correlation_rmse"] for r in rows if r["method"] == m and np.isfinite(r["correlation_rmse"])]
        means.append({"scenario": ref_cfg.scenario, "method": m,
                      "correlation_rmse": float(np.mean(vals)) if vals else float("nan")})
    emit_report(means, out / "correlation_rmse_mean", args.format,
                ("scenario", "method", "correlation_rmse"), "correlation_rmse_mean")
    return 0


COMMANDS = {"generate-fields": cmd_generate_fields, "run": cmd_run, "suite": cmd_suite,
            "benchmark": cmd_benchmark, "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppenkf", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", help="YAML or JSON run configuration (defaults if omitted)")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                   help="parallel worker processes (default: available cores)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--timing", action="store_true",
                   help="record wall times (outputs are then no longer byte-reproducible)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            if args.seed < 0:
                raise ValidationError("--seed must be >= 0")
            cfg = cfg.model_copy(update={"seed": args.seed})
        if args.jobs < 1:
            raise ValidationError("--jobs must be >= 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_manifest(out, args.command, cfg, args.format)
        return COMMANDS[args.command](cfg, out, args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (SolverError, LinAlgError, OSError, RuntimeError) as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
