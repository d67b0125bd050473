"""Conditional score estimation and covariate-dependent standardization.

Scores are best linear predictors of each day's component loadings given its
sparse observations: the day's covariance matrix is assembled from the
PSD-repaired surface slice nearest to the day's covariate (bilinear in time,
which preserves positive semidefiniteness) plus the noise variance on the
diagonal, and one symmetric solve produces all component scores.

Raw scores are not comparable across covariate levels, so a calibration step
fits, per component, a smooth mean curve in the covariate by penalized
splines and a positive variance curve by a gamma-type quasi-likelihood with
logarithmic link on the squared centered scores. Standardized scores are
(score - mean curve) / sqrt(variance curve), with clamped evaluation outside
the training covariate range.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace
from datetime import date

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import psplines as ps
from .eigensystem import EigenSystem
from .errors import InsufficientDataError, NumericalError, ValidationError

MIN_CALIBRATION_RECORDS = 50
MIN_DISTINCT_Z = 10


@dataclass(frozen=True)
class ScoreRecord:
    """Scores for one monitored day."""

    day_id: date
    z: float
    xi: np.ndarray
    X: np.ndarray | None
    n_obs: int
    extrapolated: bool
    logdet: float = float("nan")


def _interp_weight_matrix(grid: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row-stochastic linear interpolation weights from grid to points x.

    Points outside the grid clamp to the nearest endpoint. Interpolating a
    PSD matrix as W @ S @ W.T with these weights keeps it PSD.
    """
    x = np.clip(np.asarray(x, dtype=float), grid[0], grid[-1])
    idx = np.clip(np.searchsorted(grid, x, side="right") - 1, 0, len(grid) - 2)
    frac = (x - grid[idx]) / (grid[idx + 1] - grid[idx])
    weights = np.zeros((len(x), len(grid)))
    rows = np.arange(len(x))
    weights[rows, idx] = 1.0 - frac
    weights[rows, idx + 1] = frac
    return weights


def estimate_scores(times, residuals, es: EigenSystem, g: int):
    """Conditional scores of one day against slice g of the eigensystem.

    Parameters
    ----------
    times : array-like, shape (n_i,)
        The day's observation times (hours).
    residuals : array-like, shape (n_i,)
        Mean-adjusted observations at those times.
    es : EigenSystem
        Fitted eigensystem; supplies eigenfunctions, eigenvalues, the
        PSD-repaired covariance slice and the noise variance.
    g : int
        Covariate slice index (from ``es.lookup``).

    Returns
    -------
    xi : ndarray, shape (m,)
        Estimated component scores.
    logdet : float
        Log-determinant of the day's covariance matrix (conditioning
        diagnostic).
    """
    times = np.asarray(times, dtype=float)
    residuals = np.asarray(residuals, dtype=float)
    if times.shape != residuals.shape or times.ndim != 1 or len(times) == 0:
        raise ValidationError("times and residuals must be equal-length 1-D arrays")
    weights = _interp_weight_matrix(es.time_grid, times)
    phi_obs = es.eigenfunctions[:, :, g] @ weights.T  # (m, n_i)
    sigma = weights @ es.cov_psd[:, :, g] @ weights.T
    sigma[np.diag_indices_from(sigma)] += es.sigma2
    try:
        factor = cho_factor(sigma, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"day covariance not positive definite: {exc}") from exc
    alpha = cho_solve(factor, residuals)
    xi = es.eigenvalues[:, g] * (phi_obs @ alpha)
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    return xi, logdet


class ScoreCalibration(BaseEstimator):
    """Per-component mean and variance curves over the covariate.

    Parameters
    ----------
    nbasis : int, default=10
        B-spline basis size for both curves.
    max_iter : int, default=25
        Iteration cap for the variance-curve quasi-likelihood fit.
    tol : float, default=1e-6
        Relative coefficient-change convergence threshold.
    lambda_grid : array-like, optional
        Candidate smoothing parameters for GCV.
    mode : {'spline', 'constant'}, default='spline'
        'constant' skips the curves and standardizes by the per-component
        sample mean and variance (the covariate-blind baseline behavior).
    """

    def __init__(self, nbasis=10, max_iter=25, tol=1e-6, lambda_grid=None, mode="spline"):
        self.nbasis = nbasis
        self.max_iter = max_iter
        self.tol = tol
        self.lambda_grid = lambda_grid
        self.mode = mode

    def fit(self, z, xi):
        """Fit curves from Phase I scores (z: (n,), xi: (n, m))."""
        z = np.asarray(z, dtype=float).ravel()
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        if xi.shape[0] != len(z):
            raise ValidationError("z and xi disagree in length")
        if len(z) < MIN_CALIBRATION_RECORDS:
            raise InsufficientDataError(
                f"{len(z)} score records; need at least {MIN_CALIBRATION_RECORDS}"
            )
        self.m_ = xi.shape[1]
        self.z_range_ = (float(np.min(z)), float(np.max(z)))
        n_distinct = len(np.unique(z))
        self.kind_ = []
        self.mean_coef_ = []
        self.logvar_coef_ = []
        self.mean_const_ = np.zeros(self.m_)
        self.var_const_ = np.ones(self.m_)
        self.degenerate_ = np.zeros(self.m_, dtype=bool)

        if self.mode == "constant":
            for r in range(self.m_):
                self._fit_constant(r, z, xi[:, r])
            return self
        if self.mode != "spline":
            raise ValidationError(f"unknown calibration mode {self.mode!r}")
        if n_distinct < MIN_DISTINCT_Z:
            warnings.warn(
                f"only {n_distinct} distinct covariate values; "
                "falling back to constant calibration curves"
            )
            for r in range(self.m_):
                self._fit_constant(r, z, xi[:, r])
            return self

        self.knots_ = ps.open_knots(self.z_range_[0], self.z_range_[1], self.nbasis)
        design = ps.open_design(z, self.knots_)
        penalty = ps.difference_penalty(self.nbasis, 2)
        blocks = [(slice(0, self.nbasis), penalty)]
        for r in range(self.m_):
            res_mean = ps.gcv_search(design, xi[:, r], blocks, self.lambda_grid)
            centered_sq = (xi[:, r] - design @ res_mean.coef) ** 2
            scale = 1.0 + float(np.mean(xi[:, r] ** 2))
            if float(np.mean(centered_sq)) <= 1e-10 * scale:
                warnings.warn(
                    f"component {r + 1}: centered squares are degenerate; "
                    "using a constant variance"
                )
                self.kind_.append("spline_mean_const_var")
                self.mean_coef_.append(res_mean.coef)
                self.logvar_coef_.append(None)
                self.var_const_[r] = max(float(np.mean(centered_sq)), 1e-12 * scale)
                self.degenerate_[r] = True
                continue
            logvar_coef = self._fit_variance_curve(
                design, penalty, centered_sq, r
            )
            self.kind_.append("spline")
            self.mean_coef_.append(res_mean.coef)
            self.logvar_coef_.append(logvar_coef)
        return self

    def _fit_constant(self, r, z, xi_r):
        self.kind_.append("constant")
        self.mean_coef_.append(None)
        self.logvar_coef_.append(None)
        self.mean_const_[r] = float(np.mean(xi_r))
        scale = 1.0 + float(np.mean(xi_r**2))
        self.var_const_[r] = max(float(np.var(xi_r, ddof=1)), 1e-12 * scale)

    def _fit_variance_curve(self, design, penalty, centered_sq, r):
        # Gamma-type quasi-likelihood with log link: unit working weights, so
        # the penalized normal matrix is constant across iterations.
        eps0 = 1e-8 * float(np.mean(centered_sq))
        init = ps.gcv_search(
            design, np.log(centered_sq + eps0),
            [(slice(0, self.nbasis), penalty)], self.lambda_grid,
        )
        lam = init.lambdas[0]
        theta = init.coef
        factor = cho_factor(design.T @ design + lam * penalty)
        converged = False
        for _ in range(self.max_iter):
            eta = np.clip(design @ theta, -50.0, 50.0)
            mu = np.exp(eta)
            working = eta + (centered_sq - mu) / mu
            theta_new = cho_solve(factor, design.T @ working)
            delta = float(np.max(np.abs(theta_new - theta)))
            theta = theta_new
            if delta <= self.tol * max(1.0, float(np.max(np.abs(theta)))):
                converged = True
                break
        if not converged:
            warnings.warn(
                f"component {r + 1}: variance-curve fit did not converge; "
                "using the last iterate"
            )
        return theta

    def mean_curve(self, z) -> np.ndarray:
        """Per-component mean curves at z; shape (len(z), m)."""
        check_is_fitted(self, "kind_")
        z = np.atleast_1d(np.asarray(z, dtype=float))
        out = np.empty((len(z), self.m_))
        design = None
        for r in range(self.m_):
            if self.mean_coef_[r] is None:
                out[:, r] = self.mean_const_[r]
            else:
                if design is None:
                    zc = np.clip(z, self.z_range_[0], self.z_range_[1])
                    design = ps.open_design(zc, self.knots_)
                out[:, r] = design @ self.mean_coef_[r]
        return out

    def var_curve(self, z) -> np.ndarray:
        """Per-component variance curves at z; strictly positive."""
        check_is_fitted(self, "kind_")
        z = np.atleast_1d(np.asarray(z, dtype=float))
        out = np.empty((len(z), self.m_))
        design = None
        for r in range(self.m_):
            if self.logvar_coef_[r] is None:
                out[:, r] = self.var_const_[r]
            else:
                if design is None:
                    zc = np.clip(z, self.z_range_[0], self.z_range_[1])
                    design = ps.open_design(zc, self.knots_)
                out[:, r] = np.exp(np.clip(design @ self.logvar_coef_[r], -50.0, 50.0))
        return out

    def transform(self, z, xi) -> np.ndarray:
        """Standardized scores (xi - mean curve) / sqrt(variance curve)."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        return (xi - self.mean_curve(z)) / np.sqrt(self.var_curve(z))


Calibration = ScoreCalibration


def fit_calibration(records, **cfg) -> ScoreCalibration:
    """Fit a :class:`ScoreCalibration` from Phase I score records."""
    z = np.array([rec.z for rec in records], dtype=float)
    xi = np.array([rec.xi for rec in records], dtype=float)
    return ScoreCalibration(**cfg).fit(z, xi)


def standardize(record: ScoreRecord, cal: ScoreCalibration) -> ScoreRecord:
    """Attach standardized scores to a record (clamped outside the z range)."""
    x_std = cal.transform([record.z], record.xi[None, :])[0]
    outside = record.z < cal.z_range_[0] or record.z > cal.z_range_[1]
    return replace(record, X=x_std, extrapolated=bool(record.extrapolated or outside))


def scores_to_csv(records, dest) -> None:
    """Score export: one row per (day, component)."""
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "z", "component", "xi", "X", "extrapolated"])
        for rec in records:
            for r in range(len(rec.xi)):
                writer.writerow(
                    [
                        rec.day_id.isoformat(),
                        repr(float(rec.z)),
                        r + 1,
                        repr(float(rec.xi[r])),
                        repr(float(rec.X[r])) if rec.X is not None else "",
                        int(rec.extrapolated),
                    ]
                )
