"""``robust-dta`` command-line front end.

Exit status: 0 on success, 1 for usage or input errors, 2 for numerical
failure (a report is still written when a fit does not converge). Every
option can also be set via an environment variable named
``ROBUST_DTA_<COMMAND>_<OPTION>``, e.g. ``ROBUST_DTA_FIT_ALPHA=hyvarinen``.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import reporting
from .core import CORRECTIONS, DataError, StudyData, read_counts_csv
from .simulation import (
    DEFAULT_METHODS,
    METHODS,
    RNG_ALGORITHM,
    SpecError,
    load_specs,
    metrics_csv,
    run_scenario,
    scenario_catalog,
    with_reps,
)
from .tuning import DEFAULT_GRID, parse_grid, select_alpha, write_trace_csv

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
ENV_PREFIX = "ROBUST_DTA"

logger = logging.getLogger(__name__)


class NumericalFailure(Exception):
    """Raised after the report is written when a fit did not converge."""


def _alpha_mode(ctx, param, value):
    v = str(value).strip().lower()
    if v in ("ges", "hyvarinen"):
        return v
    try:
        a = float(v)
    except ValueError:
        raise click.BadParameter("expected 'ges', 'hyvarinen' or a number in (0, 1)") from None
    if not 0 < a < 1:
        raise click.BadParameter(f"fixed alpha must lie in (0, 1), got {a}")
    return a


def _level(ctx, param, value):
    if not 0 < value < 1:
        raise click.BadParameter(f"confidence level must lie in (0, 1), got {value}")
    return value


def _grid(ctx, param, value):
    try:
        parse_grid(value)
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from None
    return value


def _ci_kinds(value: str) -> tuple:
    return ("wald", "hksj") if value == "both" else (value,)


def _load(path, correction) -> StudyData:
    counts = read_counts_csv(path)
    if len(counts) < 2:
        raise DataError(f"{path}: need at least two studies, found {len(counts)}")
    return StudyData.from_counts(counts, correction)


def _out_dir(out) -> Path | None:
    if out is None:
        return None
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _emit(out: Path | None, name: str, text: str) -> None:
    if out is None:
        click.echo(text, nl=False)
    else:
        (out / name).write_text(text, encoding="utf-8")


def _data_options(f):
    f = click.option("--correction", type=click.Choice(CORRECTIONS), default="zero-cell", show_default=True, help="Continuity correction for zero cells.")(f)
    f = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory (default: print to stdout).")(f)
    f = click.argument("data", type=click.Path(exists=True, dir_okay=False))(f)
    return f


def _analysis_options(f):
    f = click.option("--grid", default=DEFAULT_GRID, show_default=True, callback=_grid, help="Alpha grid lo:hi:step or comma list.")(f)
    f = click.option("--level", type=float, default=0.95, show_default=True, callback=_level)(f)
    f = click.option("--ci", "ci", type=click.Choice(["wald", "hksj", "both"]), default="both", show_default=True)(f)
    f = click.option("--alpha", "alpha", default="ges", show_default=True, callback=_alpha_mode, help="ges, hyvarinen or a fixed value in (0, 1).")(f)
    f = click.option("--baseline", "baseline", type=click.Choice(["ML", "REML"], case_sensitive=False), default="REML", show_default=True)(f)
    f = click.option("--seed", type=int, default=None, help="Accepted for interface uniformity; analyses are deterministic.")(f)
    return f


@click.group(context_settings={"auto_envvar_prefix": ENV_PREFIX, "help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def cli(verbose):
    """Robust bivariate meta-analysis of diagnostic test accuracy."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")


@cli.command("fit")
@_data_options
@_analysis_options
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json", show_default=True)
def fit_cmd(data, correction, out, alpha, ci, level, grid, baseline, seed, fmt):
    """Fit the baseline and DPD bivariate models to a CSV of 2x2 counts."""
    sd = _load(data, correction)
    report, fit, base = reporting.run_fit(sd, alpha, _ci_kinds(ci), level, grid, baseline)
    report["config"]["correction"] = correction
    outdir = _out_dir(out)
    if fmt == "json":
        _emit(outdir, "report.json", reporting.dumps(report))
    else:
        rows = reporting.fit_summary_rows(report)
        _emit(outdir, "report.csv", reporting.csv_text(["method", "estimand", "estimate", "ci_kind", "lower", "upper"], rows))
    if outdir is not None:
        click.echo(reporting.human_table(report), nl=False)
    if report["status"] != "ok":
        raise NumericalFailure("fit did not converge; report written")


@cli.command("diagnose")
@_data_options
@_analysis_options
def diagnose_cmd(data, correction, out, alpha, ci, level, grid, baseline, seed):
    """Per-study DPD weights, contribution rates and plot data."""
    sd = _load(data, correction)
    report, fit, base = reporting.run_fit(sd, alpha, _ci_kinds(ci), level, grid, baseline)
    report["command"] = "diagnose"
    report["config"]["correction"] = correction
    rows = reporting.diagnostics_section(sd, fit, base) if fit.converged else []
    report["studies"] = rows
    outdir = _out_dir(out)
    _emit(outdir, "diagnostics.json", reporting.dumps(report))
    if outdir is not None:
        forest = reporting.forest_rows(sd, level)
        (outdir / "forest.csv").write_text(
            reporting.csv_text(["study", "se", "se_lower", "se_upper", "sp", "sp_lower", "sp_upper"], forest), encoding="utf-8"
        )
        weights = [[r["study"], r["g_weight"], r["g_relative"], r["p_se"], r["p_sp"], *r["std_resid"]] for r in rows]
        (outdir / "weights.csv").write_text(
            reporting.csv_text(["study", "g_weight", "g_relative", "p_se", "p_sp", "resid_se", "resid_sp"], weights), encoding="utf-8"
        )
        click.echo(f"{'study':<16}{'g':>12}{'p_se':>12}{'p_sp':>12}")
        for r in rows:
            click.echo(f"{r['study']:<16}{r['g_weight']:>12.6g}{r['p_se']:>12.6g}{r['p_sp']:>12.6g}")
    if report["status"] != "ok":
        raise NumericalFailure("fit did not converge; report written")


@cli.command("tune")
@_data_options
@click.option("--grid", default=DEFAULT_GRID, show_default=True, callback=_grid, help="Alpha grid lo:hi:step or comma list.")
def tune_cmd(data, correction, out, grid):
    """Select alpha by minimising the Hyvarinen criterion over a grid."""
    sd = _load(data, correction)
    result = select_alpha(sd, grid)
    report = {
        "schema_version": reporting.SCHEMA_VERSION,
        "command": "tune",
        "n_studies": sd.n_studies,
        "config": {"grid": grid, "correction": correction},
        "tuning": reporting.tuning_section(result),
    }
    outdir = _out_dir(out)
    _emit(outdir, "tuning.json", reporting.dumps(report))
    if outdir is not None:
        write_trace_csv(outdir / "tuning_trace.csv", result)
        flag = " (grid boundary)" if result.boundary_flag else ""
        click.echo(f"selected alpha = {result.alpha_selected:.6g}{flag}")


@cli.command("simulate")
@click.argument("spec", default="paper")
@click.option("--reps", type=click.IntRange(min=1), default=None, help="Replicates per scenario (overrides the scenario file).")
@click.option("--seed", type=int, default=None, help="Base seed; scenario i uses seed + i.")
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--methods", default=",".join(DEFAULT_METHODS), show_default=True, help=f"Comma list from {', '.join(METHODS)}.")
@click.option("--scenarios", default=None, help="Restrict the preset, e.g. 'A-N8,B-N16' or letters 'ABC'.")
@click.option("--level", type=float, default=0.95, show_default=True, callback=_level)
@click.option("--grid", default=DEFAULT_GRID, show_default=True, callback=_grid)
def simulate_cmd(spec, reps, seed, jobs, out, methods, scenarios, level, grid):
    """Run a simulation study from a JSON scenario file or the 'paper' preset."""
    specs = scenario_catalog() if spec == "paper" else load_specs(spec)
    if scenarios:
        wanted = [s.strip() for s in scenarios.split(",") if s.strip()]
        if any("-" in w for w in wanted):
            specs = [s for s in specs if s.name in wanted]
        else:
            letters = set("".join(wanted).upper())
            specs = [s for s in specs if s.name.split("-")[0] in letters]
        if not specs:
            raise click.BadParameter(f"no scenario matches {scenarios!r}", param_hint="--scenarios")
    method_list = tuple(m.strip() for m in methods.split(",") if m.strip())
    unknown = [m for m in method_list if m not in METHODS]
    if unknown:
        raise click.BadParameter(f"unknown methods {unknown}", param_hint="--methods")
    specs = with_reps(specs, reps, seed)
    results = [run_scenario(s, method_list, jobs=jobs, level=level, grid=grid) for s in specs]
    text = metrics_csv(results)
    outdir = _out_dir(out)
    _emit(outdir, "metrics.csv", text)
    if outdir is not None:
        meta = {
            "schema_version": reporting.SCHEMA_VERSION,
            "command": "simulate",
            "rng": RNG_ALGORITHM,
            "methods": list(method_list),
            "level": level,
            "grid": grid,
            "numpy_version": np.__version__,
            "scenarios": [s.to_dict() for s in specs],
        }
        (outdir / "metadata.json").write_text(reporting.dumps(meta), encoding="utf-8")
        click.echo(f"wrote {len(specs)} scenario(s) to {outdir}")


def main(argv=None) -> int:
    """Entry point mapping failures onto the documented exit statuses."""
    try:
        cli.main(args=argv, prog_name="robust-dta", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except (DataError, SpecError, json.JSONDecodeError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    except NumericalFailure as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_NUMERIC
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
