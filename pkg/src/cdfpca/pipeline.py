"""End-to-end training and monitoring pipeline.

:class:`CdFpcaMonitor` chains the full Phase I estimation sequence (mean
model, raw covariances, bandwidth selection, surface smoothing, noise
variance, eigensystem, Phase I scores, calibration, alarm-limit bootstrap)
behind a scikit-learn style fit/transform/predict interface, and replays the
frozen model over Phase II data day by day. Fitted monitors round-trip
through a versioned archive bundle; monitoring never mutates the bundle.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from datetime import date
from importlib.metadata import version as _pkg_version
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import covsmooth, mewma
from .archive import read_archive, write_archive
from .dataset import MonitoringDataset, ProfileDay, derive_covariate
from .eigensystem import EigenSystem, build_eigensystem
from .errors import CdfpcaError, ValidationError
from .meanmodel import TemperatureMeanModel, compute_residuals, fit_mean_model, predict_mean
from .mewma import ChartResult, ChartState, run_chart, update
from .scores import ScoreCalibration, ScoreRecord, estimate_scores, scores_to_csv, standardize

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
PERIOD = 24.0


def default_time_grid(size: int = 24) -> np.ndarray:
    """Equispaced within-day grid with end-of-interval labels, e.g. 1..24."""
    return PERIOD * np.arange(1, size + 1) / size


@dataclass
class MonitorResult:
    """Output of one monitoring pass."""

    chart: ChartResult
    records: list
    skipped: list  # (day_id, reason) pairs


class CdFpcaMonitor(BaseEstimator):
    """Covariate-dependent functional PCA monitor with a MEWMA chart.

    Parameters
    ----------
    lam : float, default=0.4
        MEWMA smoothing weight.
    arl0 : float, default=500.0
        Target in-control average run length for the alarm limit.
    fve : float, default=0.95
        Fraction-of-variance-explained target for the truncation order.
    block_length : int, default=3
        Moving-block bootstrap block length for limit calibration.
    bootstrap_reps : int, default=100000
        Bootstrap replicates for limit calibration.
    time_grid_size, z_grid_size : int, default=24 and 41
        Evaluation grid sizes for the covariance surface.
    cv_folds : int, default=5
        Day-wise folds for bandwidth cross-validation.
    bandwidth_candidates : list of (h_t, h_z), optional
        Candidate bandwidths; defaults to a 4x4 log-spaced grid.
    h_t, h_z : float, optional
        Fixed bandwidths, skipping cross-validation when both are given
        (baseline mode only needs ``h_t``).
    mean_time_nbasis, mean_temp_nbasis : int
        Basis sizes of the mean model components.
    calib_nbasis : int, default=10
        Basis size of the score calibration curves.
    baseline : bool, default=False
        Covariate-independent chart: pooled covariance, one eigensystem
        slice, constant score calibration.
    limit_method : {'bootstrap', 'gaussian'}, optional
        How to calibrate the limit. Defaults to 'bootstrap' for the
        covariate-dependent chart and 'gaussian' (i.i.d. standard normal
        scores) for the baseline chart.
    seed : int, default=0
        Root seed for every randomized stage.
    cv_max_points : int, default=1000
        Held-out evaluation budget per fold in bandwidth cross-validation.
    """

    def __init__(
        self,
        lam=0.4,
        arl0=500.0,
        fve=0.95,
        block_length=3,
        bootstrap_reps=100_000,
        time_grid_size=24,
        z_grid_size=41,
        cv_folds=5,
        bandwidth_candidates=None,
        h_t=None,
        h_z=None,
        mean_time_nbasis=10,
        mean_temp_nbasis=20,
        calib_nbasis=10,
        baseline=False,
        limit_method=None,
        seed=0,
        cv_max_points=1000,
    ):
        self.lam = lam
        self.arl0 = arl0
        self.fve = fve
        self.block_length = block_length
        self.bootstrap_reps = bootstrap_reps
        self.time_grid_size = time_grid_size
        self.z_grid_size = z_grid_size
        self.cv_folds = cv_folds
        self.bandwidth_candidates = bandwidth_candidates
        self.h_t = h_t
        self.h_z = h_z
        self.mean_time_nbasis = mean_time_nbasis
        self.mean_temp_nbasis = mean_temp_nbasis
        self.calib_nbasis = calib_nbasis
        self.baseline = baseline
        self.limit_method = limit_method
        self.seed = seed
        self.cv_max_points = cv_max_points

    # ------------------------------------------------------------------ fit

    def fit(self, phase1: MonitoringDataset):
        """Train every stage on Phase I data and calibrate the alarm limit."""
        logger.info("fitting mean model")
        self.mean_model_ = fit_mean_model(
            phase1,
            time_nbasis=self.mean_time_nbasis,
            temp_nbasis=self.mean_temp_nbasis,
        )
        residuals, skipped = compute_residuals(self.mean_model_, phase1)
        for day_id, reason in skipped.items():
            logger.warning("excluded from training: %s (%s)", day_id, reason)

        usable = [
            d for d in phase1.days
            if d.day_id in residuals and len(d.temp_values) > 0
        ]
        usable = [derive_covariate(d) if d.z is None else d for d in usable]
        if not usable:
            raise ValidationError("no usable Phase I days")

        logger.info("building raw covariances")
        points = covsmooth.raw_covariances(
            [d.day_id for d in usable],
            [d.times for d in usable],
            [residuals[d.day_id] for d in usable],
            [d.z for d in usable],
        )
        z_values = np.array([d.z for d in usable])
        z_lo, z_hi = float(z_values.min()), float(z_values.max())
        self.time_grid_ = default_time_grid(self.time_grid_size)

        if self.baseline:
            candidates = self.bandwidth_candidates
            if candidates is not None:
                candidates = [c[0] if isinstance(c, (tuple, list)) else c for c in candidates]
            h_t = self.h_t
            if h_t is None:
                logger.info("cross-validating the pooled bandwidth")
                h_t = covsmooth.select_baseline_bandwidth(
                    points, candidates, self.cv_folds, self.cv_max_points
                )
            self.bandwidths_ = (float(h_t), None)
            logger.info("smoothing the pooled covariance surface")
            surface = covsmooth.build_baseline_surface(points, self.time_grid_, h_t)
        else:
            if self.h_t is not None and self.h_z is not None:
                h_t, h_z = float(self.h_t), float(self.h_z)
            else:
                logger.info("cross-validating bandwidths")
                h_t, h_z = covsmooth.select_bandwidths(
                    points, self.bandwidth_candidates, self.cv_folds, self.cv_max_points
                )
            self.bandwidths_ = (h_t, h_z)
            self.z_grid_ = np.linspace(z_lo, z_hi, self.z_grid_size)
            logger.info("smoothing the covariance surface (h_t=%g, h_z=%g)", h_t, h_z)
            surface = covsmooth.evaluate_surface(
                points.off_diagonal(), self.time_grid_, self.z_grid_, (h_t, h_z)
            )
        surface.sigma2 = covsmooth.estimate_noise_variance(points.diagonal(), surface)
        self.surface_ = surface
        logger.info("noise variance sigma2=%g", surface.sigma2)

        self.eigensystem_ = build_eigensystem(
            surface, self.fve, z_range=(z_lo, z_hi), baseline=self.baseline
        )
        self.m_ = self.eigensystem_.m
        logger.info("truncation order m=%d", self.m_)

        logger.info("estimating Phase I scores")
        raw_records = []
        for day in usable:
            g, extrapolated = self.eigensystem_.lookup(day.z)
            xi, logdet = estimate_scores(
                day.times, residuals[day.day_id], self.eigensystem_, g
            )
            raw_records.append(
                ScoreRecord(day.day_id, day.z, xi, None, day.n_obs, extrapolated, logdet)
            )

        calibration_mode = "constant" if self.baseline else "spline"
        self.calibration_ = ScoreCalibration(
            nbasis=self.calib_nbasis, mode=calibration_mode
        ).fit(
            np.array([rec.z for rec in raw_records]),
            np.array([rec.xi for rec in raw_records]),
        )
        self.phase1_records_ = [standardize(rec, self.calibration_) for rec in raw_records]
        self.phase1_X_ = np.array([rec.X for rec in self.phase1_records_])
        self.phase1_dates_ = tuple(rec.day_id for rec in self.phase1_records_)

        method = self.limit_method or ("gaussian" if self.baseline else "bootstrap")
        logger.info("calibrating the alarm limit (%s, ARL0=%g)", method, self.arl0)
        if method == "bootstrap":
            self.h4_, self.calibration_report_ = mewma.calibrate_h4(
                self.phase1_X_,
                lam=self.lam,
                b=self.block_length,
                arl0=self.arl0,
                reps=self.bootstrap_reps,
                seed=self.seed,
            )
        elif method == "gaussian":
            self.h4_, self.calibration_report_ = mewma.calibrate_h4(
                None,
                lam=self.lam,
                b=1,
                arl0=self.arl0,
                reps=self.bootstrap_reps,
                seed=self.seed,
                source="gaussian",
                m=self.m_,
            )
        else:
            raise ValidationError(f"unknown limit_method {method!r}")
        logger.info("alarm limit h4=%.4f", self.h4_)

        phase1_chart = run_chart(
            self.phase1_X_, self.phase1_dates_, self.lam, self.h4_, self.arl0
        )
        self.training_report_ = {
            "n_days": len(phase1.days),
            "n_used": len(usable),
            "n_excluded": len(skipped),
            "r2": self.mean_model_.r2_,
            "residual_variance": self.mean_model_.resid_var_,
            "bandwidths": list(self.bandwidths_),
            "sigma2": surface.sigma2,
            "m": self.m_,
            "fve_attained": [float(v) for v in self.eigensystem_.fve],
            "h4": self.h4_,
            "limit_method": method,
            "phase1_alarms": len(phase1_chart.alarms),
            "phase1_alarm_dates": [d.isoformat() for d in phase1_chart.alarms],
            "calibration": self.calibration_report_,
            "baseline": self.baseline,
        }
        return self

    # ------------------------------------------------------------- scoring

    def _score_day(self, day: ProfileDay) -> ScoreRecord:
        if day.n_obs == 0:
            raise ValidationError(f"{day.day_id}: no frequency observations")
        if len(day.temp_values) == 0:
            raise ValidationError(f"{day.day_id}: no temperature observations")
        if day.z is None:
            day = derive_covariate(day)
        resid = day.freq_values - predict_mean(self.mean_model_, day)
        g, extrapolated = self.eigensystem_.lookup(day.z)
        xi, logdet = estimate_scores(day.times, resid, self.eigensystem_, g)
        rec = ScoreRecord(day.day_id, day.z, xi, None, day.n_obs, extrapolated, logdet)
        return standardize(rec, self.calibration_)

    def monitor(self, phase2: MonitoringDataset | None) -> MonitorResult:
        """Run the frozen model over new days in date order.

        Per-day failures are logged and skipped with the chart state frozen;
        the batch never aborts.
        """
        check_is_fitted(self, "h4_")
        records: list = []
        skipped: list = []
        dates: list = []
        t2s: list = []
        state = ChartState.initial(self.m_, self.lam)
        days = phase2.days if phase2 is not None else ()
        for day in days:
            try:
                rec = self._score_day(day)
                state, t2 = update(state, rec.X)
            except CdfpcaError as exc:
                logger.warning("skipping %s: %s", day.day_id, exc)
                skipped.append((day.day_id, str(exc)))
                continue
            records.append(rec)
            dates.append(day.day_id)
            t2s.append(t2)
        chart = ChartResult(
            tuple(dates), np.array(t2s), self.h4_, self.lam, self.m_, self.arl0
        )
        return MonitorResult(chart, records, skipped)

    def transform(self, ds: MonitoringDataset) -> np.ndarray:
        """Standardized score matrix of the dataset's scoreable days."""
        check_is_fitted(self, "h4_")
        return np.array(
            [rec.X for rec in self.monitor(ds).records], dtype=float
        ).reshape(-1, self.m_)

    def predict(self, ds: MonitoringDataset) -> np.ndarray:
        """Alarm flags (bool) for the dataset's scoreable days, in date order."""
        result = self.monitor(ds)
        return result.chart.t2 > result.chart.h4


# --------------------------------------------------------------- persistence


def save_bundle(monitor: CdFpcaMonitor, path, include_surface: bool = False) -> None:
    """Persist a fitted monitor as a versioned archive.

    The raw covariance surface is omitted by default; scoring only needs the
    PSD-repaired slices carried by the eigensystem. Content is deterministic
    for a given fitted model, so identical training runs produce
    byte-identical bundles.
    """
    check_is_fitted(monitor, "h4_")
    mm = monitor.mean_model_
    es = monitor.eigensystem_
    cal = monitor.calibration_
    try:
        pkg_version = _pkg_version("cdfpca")
    except Exception:
        pkg_version = "unknown"
    meta = {
        "kind": "cdfpca-bundle",
        "format_version": FORMAT_VERSION,
        "created_by": f"cdfpca {pkg_version}",
        "params": {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in monitor.get_params().items()
        },
        "h4": monitor.h4_,
        "m": monitor.m_,
        "bandwidths": list(monitor.bandwidths_),
        "baseline": monitor.baseline,
        "training_report": monitor.training_report_,
        "calibration_report": monitor.calibration_report_,
        "mean_model": {
            "alpha0": mm.alpha0_,
            "lambdas": list(mm.lambdas_),
            "x_range": list(mm.x_range_),
            "degenerate_temp": bool(mm.degenerate_temp_),
            "r2": mm.r2_,
            "resid_var": mm.resid_var_,
            "period": mm.period,
            "time_nbasis": mm.time_nbasis,
            "temp_nbasis": mm.temp_nbasis,
        },
        "eigensystem": {
            "sigma2": es.sigma2,
            "z_range": list(es.z_range),
            "baseline": es.baseline,
        },
        "calibration": {
            "mode": cal.mode,
            "nbasis": cal.nbasis,
            "kinds": list(cal.kind_),
            "z_range": list(cal.z_range_),
            "m": cal.m_,
        },
        "phase1_dates": [d.isoformat() for d in monitor.phase1_dates_],
    }
    arrays = {
        "mean_time_knots": mm.time_knots_,
        "mean_time_coef": mm.time_coef_,
        "es_time_grid": es.time_grid,
        "es_z_grid": es.z_grid,
        "es_quad_weights": es.quad_weights,
        "es_eigenvalues": es.eigenvalues,
        "es_eigenfunctions": es.eigenfunctions,
        "es_fve": es.fve,
        "es_cov_psd": es.cov_psd,
        "cal_mean_const": cal.mean_const_,
        "cal_var_const": cal.var_const_,
        "cal_degenerate": cal.degenerate_,
        "phase1_X": monitor.phase1_X_,
    }
    if not mm.degenerate_temp_:
        arrays["mean_temp_knots"] = mm.temp_knots_
        arrays["mean_temp_coef"] = mm.temp_coef_
    if hasattr(cal, "knots_"):
        arrays["cal_knots"] = cal.knots_
    for r, coef in enumerate(cal.mean_coef_):
        if coef is not None:
            arrays[f"cal_mean_coef_{r}"] = coef
    for r, coef in enumerate(cal.logvar_coef_):
        if coef is not None:
            arrays[f"cal_logvar_coef_{r}"] = coef
    if include_surface:
        arrays["surface_gamma"] = monitor.surface_.gamma
    write_archive(path, meta, arrays)


def load_bundle(path) -> CdFpcaMonitor:
    """Reconstruct a fitted monitor from a bundle archive."""
    meta, arrays = read_archive(path)
    if meta.get("kind") != "cdfpca-bundle":
        raise ValidationError(f"{path} is not a model bundle")
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"unsupported bundle format version {meta.get('format_version')!r}"
        )
    params = dict(meta["params"])
    if params.get("bandwidth_candidates") is not None:
        params["bandwidth_candidates"] = [tuple(c) for c in params["bandwidth_candidates"]]
    monitor = CdFpcaMonitor(**params)

    mm_meta = meta["mean_model"]
    mm = TemperatureMeanModel(
        time_nbasis=mm_meta["time_nbasis"],
        temp_nbasis=mm_meta["temp_nbasis"],
        period=mm_meta["period"],
    )
    mm.alpha0_ = mm_meta["alpha0"]
    mm.time_knots_ = arrays["mean_time_knots"]
    mm.time_coef_ = arrays["mean_time_coef"]
    mm.degenerate_temp_ = mm_meta["degenerate_temp"]
    mm.temp_knots_ = arrays.get("mean_temp_knots")
    mm.temp_coef_ = arrays.get("mean_temp_coef")
    mm.x_range_ = tuple(mm_meta["x_range"])
    mm.lambdas_ = tuple(mm_meta["lambdas"])
    mm.r2_ = mm_meta["r2"]
    mm.resid_var_ = mm_meta["resid_var"]
    monitor.mean_model_ = mm

    es_meta = meta["eigensystem"]
    monitor.eigensystem_ = EigenSystem(
        time_grid=arrays["es_time_grid"],
        z_grid=arrays["es_z_grid"],
        quad_weights=arrays["es_quad_weights"],
        m=int(meta["m"]),
        eigenvalues=arrays["es_eigenvalues"],
        eigenfunctions=arrays["es_eigenfunctions"],
        fve=arrays["es_fve"],
        sigma2=float(es_meta["sigma2"]),
        cov_psd=arrays["es_cov_psd"],
        z_range=tuple(es_meta["z_range"]),
        baseline=bool(es_meta["baseline"]),
    )

    cal_meta = meta["calibration"]
    cal = ScoreCalibration(nbasis=cal_meta["nbasis"], mode=cal_meta["mode"])
    cal.m_ = int(cal_meta["m"])
    cal.z_range_ = tuple(cal_meta["z_range"])
    cal.kind_ = list(cal_meta["kinds"])
    cal.mean_const_ = arrays["cal_mean_const"]
    cal.var_const_ = arrays["cal_var_const"]
    cal.degenerate_ = arrays["cal_degenerate"]
    if "cal_knots" in arrays:
        cal.knots_ = arrays["cal_knots"]
    cal.mean_coef_ = [
        arrays.get(f"cal_mean_coef_{r}") for r in range(cal.m_)
    ]
    cal.logvar_coef_ = [
        arrays.get(f"cal_logvar_coef_{r}") for r in range(cal.m_)
    ]
    monitor.calibration_ = cal

    monitor.m_ = int(meta["m"])
    monitor.h4_ = float(meta["h4"])
    monitor.bandwidths_ = tuple(meta["bandwidths"])
    monitor.time_grid_ = arrays["es_time_grid"]
    monitor.phase1_X_ = arrays["phase1_X"]
    monitor.phase1_dates_ = tuple(date.fromisoformat(d) for d in meta["phase1_dates"])
    monitor.training_report_ = meta["training_report"]
    monitor.calibration_report_ = meta["calibration_report"]
    return monitor


# ------------------------------------------------------------------ reports


def emit_report(result: MonitorResult, dest_dir) -> dict:
    """Write chart, alarm, and score CSVs plus a JSON summary.

    Returns the summary dictionary. Empty results still produce valid files
    with headers.
    """
    dest = Path(dest_dir)
    dest.mkdir(parents=True, exist_ok=True)
    chart = result.chart
    mewma.chart_to_csv(chart, dest / "chart.csv")
    z_by_date = {rec.day_id: rec.z for rec in result.records}
    with open(dest / "alarms.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "T2", "z"])
        for d, v in zip(chart.dates, chart.t2):
            if v > chart.h4:
                writer.writerow([d.isoformat(), repr(float(v)), repr(float(z_by_date[d]))])
    scores_to_csv(result.records, dest / "scores.csv")
    with open(dest / "skipped.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "reason"])
        for day_id, reason in result.skipped:
            writer.writerow([day_id.isoformat(), reason])

    summary = {
        "n_days": len(chart.dates) + len(result.skipped),
        "n_scored": len(chart.dates),
        "n_skipped": len(result.skipped),
        "n_alarms": len(chart.alarms),
        "alarm_dates": [d.isoformat() for d in chart.alarms],
        "alarm_temperatures": [z_by_date[d] for d in chart.alarms],
        "n_extrapolated": sum(1 for rec in result.records if rec.extrapolated),
        "h4": chart.h4,
        "lambda": chart.lam,
        "m": chart.m,
        "arl0_target": chart.arl0_target,
    }
    with open(dest / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary
