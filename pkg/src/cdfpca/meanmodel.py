"""Covariate-adjusted functional mean model.

Fits ``mu(t, x) = alpha0 + alpha_tilde(t) + f(x)`` to pooled observation
triples by penalized least squares: a cyclic cubic B-spline basis over the
daily period for the time effect, an open cubic B-spline basis with a
second-difference penalty for the temperature effect, smoothing parameters
chosen by generalized cross-validation. Both smooth components carry
sum-to-zero constraints (time: zero quadrature mean over the period;
temperature: zero mean over the training temperature distribution), applied
by null-space reparameterization so the intercept stays identifiable.
"""

from __future__ import annotations

import warnings

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import psplines as ps
from .dataset import MonitoringDataset, ProfileDay
from .errors import CovariateUnavailableError, InsufficientDataError, ValidationError

MIN_SCOREABLE_DAYS = 30
_QUAD_GRID = 2048


class TemperatureMeanModel(BaseEstimator):
    """Penalized additive mean model for daily functional profiles.

    Parameters
    ----------
    time_nbasis : int, default=10
        Number of cyclic B-spline basis functions for the time-of-day effect.
    temp_nbasis : int, default=20
        Number of B-spline basis functions for the temperature effect.
    lambda_grid : array-like, optional
        Candidate smoothing parameters searched by GCV (shared by both
        components). Defaults to a wide log-spaced grid.
    period : float, default=24.0
        Length of the daily period in hours.

    Attributes
    ----------
    alpha0_ : float
        Fitted intercept (Hz).
    time_knots_, time_coef_ : ndarray
        Knot vector and coefficients of the centered time effect.
    temp_knots_, temp_coef_ : ndarray or None
        Knot vector and coefficients of the centered temperature effect;
        None when the fit degenerated (constant temperature).
    x_range_ : tuple of float
        Training temperature range; predictions clamp to it.
    lambdas_ : tuple of float
        Selected smoothing parameters.
    r2_, resid_var_ : float
        Fit statistics on the training points.
    """

    def __init__(self, time_nbasis=10, temp_nbasis=20, lambda_grid=None, period=24.0):
        self.time_nbasis = time_nbasis
        self.temp_nbasis = temp_nbasis
        self.lambda_grid = lambda_grid
        self.period = period

    def fit(self, t, x, y):
        """Fit on pooled points (time of day, temperature, response)."""
        t = np.asarray(t, dtype=float).ravel()
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        if not (len(t) == len(x) == len(y)):
            raise ValidationError("t, x, y must have equal lengths")
        if len(y) < 10:
            raise InsufficientDataError(f"only {len(y)} pooled points")
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
            raise ValidationError("non-finite values in mean-model inputs")

        self.time_knots_ = ps.cyclic_knots(self.period, self.time_nbasis)
        ct = ps.cyclic_design(t, self.time_knots_, self.period)
        quad = ps.cyclic_design(
            np.linspace(0.0, self.period, _QUAD_GRID, endpoint=False),
            self.time_knots_,
            self.period,
        )
        zt = ps.centering_transform(quad.mean(axis=0))
        dt = ct @ zt
        st = zt.T @ ps.cyclic_difference_penalty(self.time_nbasis, 2) @ zt

        x_lo, x_hi = float(np.min(x)), float(np.max(x))
        self.degenerate_temp_ = x_hi - x_lo < 1e-10
        if self.degenerate_temp_:
            warnings.warn(
                "temperature is constant; dropping f(x) and fitting alpha0 + alpha_tilde(t)"
            )
            self.x_range_ = (x_lo, x_hi if x_hi > x_lo else x_lo + 1.0)
            design = np.hstack([np.ones((len(y), 1)), dt])
            blocks = [(slice(1, 1 + dt.shape[1]), st)]
        else:
            self.x_range_ = (x_lo, x_hi)
            self.temp_knots_ = ps.open_knots(x_lo, x_hi, self.temp_nbasis)
            bx = ps.open_design(x, self.temp_knots_)
            zx = ps.centering_transform(bx.mean(axis=0))
            dx = bx @ zx
            sx = zx.T @ ps.difference_penalty(self.temp_nbasis, 2) @ zx
            design = np.hstack([np.ones((len(y), 1)), dt, dx])
            blocks = [
                (slice(1, 1 + dt.shape[1]), st),
                (slice(1 + dt.shape[1], 1 + dt.shape[1] + dx.shape[1]), sx),
            ]

        res = ps.gcv_search(design, y, blocks, self.lambda_grid)
        self.alpha0_ = float(res.coef[0])
        nt = dt.shape[1]
        self.time_coef_ = zt @ res.coef[1 : 1 + nt]
        if self.degenerate_temp_:
            self.temp_knots_ = None
            self.temp_coef_ = None
        else:
            self.temp_coef_ = zx @ res.coef[1 + nt :]
        self.lambdas_ = res.lambdas
        self.edf_ = res.edf
        self.edf_blocks_ = res.edf_blocks
        fitted = design @ res.coef
        resid = y - fitted
        tss = float(np.sum((y - y.mean()) ** 2))
        self.r2_ = 1.0 - float(np.sum(resid**2)) / tss if tss > 0 else 1.0
        self.resid_var_ = float(np.sum(resid**2)) / max(len(y) - res.edf, 1.0)
        self.n_points_ = len(y)
        return self

    def time_component(self, t) -> np.ndarray:
        """Centered time-of-day effect alpha_tilde(t)."""
        check_is_fitted(self, "alpha0_")
        design = ps.cyclic_design(np.asarray(t, dtype=float), self.time_knots_, self.period)
        return design @ self.time_coef_

    def temp_component(self, x) -> np.ndarray:
        """Centered temperature effect f(x), clamped to the training range."""
        check_is_fitted(self, "alpha0_")
        x = np.asarray(x, dtype=float)
        if self.temp_coef_ is None:
            return np.zeros(x.shape)
        xc = np.clip(x, self.x_range_[0], self.x_range_[1])
        return ps.open_design(xc, self.temp_knots_) @ self.temp_coef_

    def predict(self, t, x) -> np.ndarray:
        """Mean frequency at (time of day, temperature)."""
        t = np.asarray(t, dtype=float)
        return self.alpha0_ + self.time_component(t) + self.temp_component(x)


def pooled_points(ds: MonitoringDataset):
    """Pooled (t, x, u) triples over all scoreable days, plus the day index."""
    ts, xs, us, idx = [], [], [], []
    for i, day in enumerate(ds.days):
        if not day.scoreable:
            continue
        ts.append(day.times)
        xs.append(day.temp_at(day.times))
        us.append(day.freq_values)
        idx.append(np.full(day.n_obs, i))
    if not ts:
        raise InsufficientDataError("no scoreable days")
    return (
        np.concatenate(ts),
        np.concatenate(xs),
        np.concatenate(us),
        np.concatenate(idx),
    )


def fit_mean_model(phase1: MonitoringDataset, **cfg) -> TemperatureMeanModel:
    """Fit the mean model on a Phase I dataset.

    Requires at least ``MIN_SCOREABLE_DAYS`` scoreable days. A constant
    temperature design degenerates to ``alpha0 + alpha_tilde(t)`` with a
    warning instead of failing.
    """
    n_scoreable = sum(1 for d in phase1.days if d.scoreable)
    if n_scoreable < MIN_SCOREABLE_DAYS:
        raise InsufficientDataError(
            f"{n_scoreable} scoreable days; need at least {MIN_SCOREABLE_DAYS}"
        )
    t, x, u, _ = pooled_points(phase1)
    return TemperatureMeanModel(**cfg).fit(t, x, u)


def predict_mean(model: TemperatureMeanModel, day: ProfileDay) -> np.ndarray:
    """Mean predictions at a day's frequency-observation times."""
    if day.n_obs == 0 or len(day.temp_values) == 0:
        raise CovariateUnavailableError(f"{day.day_id}: day is unscoreable")
    return model.predict(day.times, day.temp_at(day.times))


def compute_residuals(model: TemperatureMeanModel, ds: MonitoringDataset):
    """Per-day residual vectors u - mu_hat, skipping failing days.

    Returns
    -------
    residuals : dict
        day_id -> residual array aligned with the day's observation times.
    skipped : dict
        day_id -> reason, for days where prediction was impossible.
    """
    residuals: dict = {}
    skipped: dict = {}
    for day in ds.days:
        try:
            residuals[day.day_id] = day.freq_values - predict_mean(model, day)
        except CovariateUnavailableError as exc:
            skipped[day.day_id] = str(exc)
    return residuals, skipped
