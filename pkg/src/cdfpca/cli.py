"""Command line interface.

Subcommands: ``train`` (fit a model bundle from Phase I data), ``monitor``
(run a bundle over new data), ``simulate`` (generate synthetic data with a
ground-truth sidecar), and ``calibrate`` (recalibrate only the alarm limit of
an existing bundle). Exit codes: 0 ok, 1 validation error, 2 numerical
error, 3 I/O error.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from datetime import date

import click

from . import pipeline
from .config import coerce_bool, load_kv_config
from .dataset import load_profiles, save_profiles
from .errors import NumericalError, ValidationError
from .eigensystem import eigenfunctions_to_csv, eigenvalues_to_csv
from .mewma import calibrate_h4
from .synthetic import SynthSpec, generate_synthetic, save_truth

EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3

# config-file keys -> (CdFpcaMonitor parameter, coercion)
CONFIG_KEYS = {
    "lambda": ("lam", float),
    "arl0": ("arl0", float),
    "fve": ("fve", float),
    "block_length": ("block_length", int),
    "bootstrap_reps": ("bootstrap_reps", int),
    "time_grid_size": ("time_grid_size", int),
    "z_grid_size": ("z_grid_size", int),
    "cv_folds": ("cv_folds", int),
    "h_t": ("h_t", float),
    "h_z": ("h_z", float),
    "mean_time_nbasis": ("mean_time_nbasis", int),
    "mean_temp_nbasis": ("mean_temp_nbasis", int),
    "calib_nbasis": ("calib_nbasis", int),
    "baseline": ("baseline", coerce_bool),
    "limit_method": ("limit_method", str),
    "seed": ("seed", int),
    "cv_max_points": ("cv_max_points", int),
}


def _handle_errors(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ValidationError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)
        except NumericalError as exc:
            click.echo(f"numerical error: {exc}", err=True)
            sys.exit(EXIT_NUMERICAL)
        except OSError as exc:
            click.echo(f"i/o error: {exc}", err=True)
            sys.exit(EXIT_IO)

    return wrapper


def _monitor_params(config_path, overrides: dict) -> dict:
    params: dict = {}
    if config_path:
        for key, raw in load_kv_config(config_path).items():
            if key not in CONFIG_KEYS:
                raise ValidationError(f"unknown config key {key!r}")
            name, coerce = CONFIG_KEYS[key]
            params[name] = coerce(raw)
    for name, value in overrides.items():
        if value is not None:
            params[name] = value
    return params


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose):
    """Covariate-dependent functional PCA monitoring."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--baseline", is_flag=True, default=None, help="Covariate-independent chart mode.")
@click.option("--lambda", "lam", type=float, help="MEWMA smoothing weight.")
@click.option("--arl0", type=float, help="Target in-control average run length.")
@click.option("--fve", type=float, help="Fraction-of-variance-explained target.")
@click.option("--block-length", type=int, help="Bootstrap block length.")
@click.option("--reps", "bootstrap_reps", type=int, help="Bootstrap replicates.")
@click.option("--seed", type=int, help="Root seed.")
@click.option("--limit-method", type=click.Choice(["bootstrap", "gaussian"]))
@click.option("--report", "report_path", type=click.Path(dir_okay=False),
              help="Also write the training report JSON here.")
@click.option("--diagnostics", "diag_dir", type=click.Path(file_okay=False),
              help="Dump surface/eigensystem diagnostic CSVs into this directory.")
@_handle_errors
def train(input_path, config_path, out_path, baseline, lam, arl0, fve,
          block_length, bootstrap_reps, seed, limit_method, report_path, diag_dir):
    """Fit a model bundle from Phase I data."""
    params = _monitor_params(
        config_path,
        {
            "baseline": baseline,
            "lam": lam,
            "arl0": arl0,
            "fve": fve,
            "block_length": block_length,
            "bootstrap_reps": bootstrap_reps,
            "seed": seed,
            "limit_method": limit_method,
        },
    )
    dataset = load_profiles(input_path)
    monitor = pipeline.CdFpcaMonitor(**params).fit(dataset)
    pipeline.save_bundle(monitor, out_path)
    report = monitor.training_report_
    if report_path:
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if diag_dir:
        from pathlib import Path

        from .covsmooth import surface_to_csv

        diag = Path(diag_dir)
        diag.mkdir(parents=True, exist_ok=True)
        surface_to_csv(monitor.surface_, diag / "gamma.csv")
        eigenvalues_to_csv(monitor.eigensystem_, diag / "eigenvalues.csv")
        eigenfunctions_to_csv(monitor.eigensystem_, diag / "eigenfunctions.csv")
    click.echo(
        f"trained: m={report['m']} h4={report['h4']:.4f} "
        f"R2={report['r2']:.4f} phase1_alarms={report['phase1_alarms']}"
    )
    click.echo(f"bundle written to {out_path}")


@main.command()
@click.option("--bundle", "bundle_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--input", "input_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_handle_errors
def monitor(bundle_path, input_path, out_dir):
    """Monitor new data with a trained bundle."""
    fitted = pipeline.load_bundle(bundle_path)
    dataset = load_profiles(input_path)
    result = fitted.monitor(dataset)
    summary = pipeline.emit_report(result, out_dir)
    click.echo(
        f"monitored {summary['n_scored']} days "
        f"({summary['n_skipped']} skipped): {summary['n_alarms']} alarms"
    )
    for alarm_date in summary["alarm_dates"]:
        click.echo(f"alarm: {alarm_date}")


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--truth", "truth_path", type=click.Path(dir_okay=False))
@_handle_errors
def simulate(spec_path, out_path, truth_path):
    """Generate a synthetic dataset (and optional ground-truth sidecar)."""
    raw = load_kv_config(spec_path)
    spec = _spec_from_config(raw)
    dataset, truth = generate_synthetic(spec)
    save_profiles(dataset, out_path)
    if truth_path:
        save_truth(truth, truth_path)
    click.echo(f"simulated {len(dataset)} days to {out_path}")


_SPEC_COERCIONS = {
    "n_days": int,
    "times_per_day": int,
    "missingness": float,
    "sigma2": float,
    "seed": int,
    "z_low": float,
    "z_high": float,
    "z_ar1": float,
    "alpha0": float,
    "time_amplitude": float,
    "temp_effect": str,
    "phi_theta0": float,
    "phi_theta1": float,
    "temp_amp_low": float,
    "temp_amp_high": float,
    "coldest_hour": float,
    "mean_shift": float,
    "start_date": date.fromisoformat,
    "shift_start": date.fromisoformat,
    "shift_end": date.fromisoformat,
}


def _spec_from_config(raw: dict) -> SynthSpec:
    kwargs: dict = {}
    nu: dict[int, str] = {}
    for key, value in raw.items():
        if key.startswith("nu") and key[2:].isdigit():
            nu[int(key[2:])] = value
        elif key == "shift_sd":
            kwargs["shift_sd"] = tuple(float(v) for v in value.split(",") if v.strip())
        elif key in _SPEC_COERCIONS:
            kwargs[key] = _SPEC_COERCIONS[key](value)
        else:
            raise ValidationError(f"unknown simulation key {key!r}")
    if nu:
        kwargs["nu"] = tuple(nu[r] for r in sorted(nu))
    return SynthSpec(**kwargs)


@main.command()
@click.option("--bundle", "bundle_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--arl0", required=True, type=float)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--lambda", "lam", type=float)
@click.option("--block-length", type=int)
@click.option("--reps", type=int)
@click.option("--seed", type=int)
@_handle_errors
def calibrate(bundle_path, arl0, out_path, lam, block_length, reps, seed):
    """Recalibrate only the alarm limit of an existing bundle."""
    fitted = pipeline.load_bundle(bundle_path)
    lam = lam if lam is not None else fitted.lam
    block_length = block_length if block_length is not None else fitted.block_length
    reps = reps if reps is not None else fitted.bootstrap_reps
    seed = seed if seed is not None else fitted.seed
    method = fitted.limit_method or ("gaussian" if fitted.baseline else "bootstrap")
    if method == "gaussian":
        h4, report = calibrate_h4(
            None, lam=lam, b=1, arl0=arl0, reps=reps, seed=seed,
            source="gaussian", m=fitted.m_,
        )
    else:
        h4, report = calibrate_h4(
            fitted.phase1_X_, lam=lam, b=block_length, arl0=arl0, reps=reps, seed=seed
        )
    fitted.lam = lam
    fitted.arl0 = arl0
    fitted.block_length = block_length
    fitted.h4_ = h4
    fitted.calibration_report_ = report
    fitted.training_report_ = dict(fitted.training_report_)
    fitted.training_report_.update(h4=h4, calibration=report)
    pipeline.save_bundle(fitted, out_path)
    click.echo(f"h4={h4:.4f} (estimated ARL {report['arl_estimate']:.1f})")
    click.echo(f"bundle written to {out_path}")


if __name__ == "__main__":
    main()
