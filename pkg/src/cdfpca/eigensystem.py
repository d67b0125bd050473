"""Slice-wise eigendecomposition of the covariance surface.

Each covariate slice of the smoothed surface is decomposed as a weighted
(integral-operator) eigenproblem using quadrature weights on the time grid.
Because the daily time domain is a circle, the trapezoid rule wraps around
the period, which on an equispaced grid reduces to uniform weights. Negative
eigenvalues are clipped to zero (minimal-distortion PSD repair), a single
truncation order is chosen from the mean fraction of variance explained
across the covariate grid, and eigenfunction signs are aligned from one
covariate slice to the next so scores vary continuously with the covariate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import covsmooth
from .covsmooth import CovSurface, RawCovPoints
from .errors import DegenerateCovarianceError, ValidationError

SYMMETRY_TOL = 1e-8


def periodic_trapezoid_weights(grid, period: float = 24.0) -> np.ndarray:
    """Trapezoid quadrature weights wrapped around the periodic time domain."""
    grid = np.asarray(grid, dtype=float)
    if len(grid) == 1:
        return np.array([period])
    prev = np.concatenate([[grid[-1] - period], grid[:-1]])
    nxt = np.concatenate([grid[1:], [grid[0] + period]])
    w = (nxt - prev) / 2.0
    if np.any(w <= 0):
        raise ValidationError("time grid spacing inconsistent with the period")
    return w


def eigendecompose_at(gamma_slice: np.ndarray, quad_weights: np.ndarray):
    """Weighted eigendecomposition of one symmetric covariance slice.

    Solves the discretized operator problem ``Gamma W phi = nu phi`` through
    the symmetric form ``W^1/2 Gamma W^1/2`` and back-transforms, so the
    returned eigenfunctions are orthonormal under the quadrature weights and
    the eigenvalues carry the quadrature scale. Negative eigenvalues are
    clipped to zero.

    Returns
    -------
    eigenvalues : ndarray, shape (T,)
        All eigenvalues in descending order, clipped at zero.
    eigenfunctions : ndarray, shape (T, T)
        Matching eigenfunctions in the columns.
    """
    gamma_slice = np.asarray(gamma_slice, dtype=float)
    w = np.asarray(quad_weights, dtype=float)
    if gamma_slice.shape != (len(w), len(w)):
        raise ValidationError("covariance slice and quadrature weights disagree in size")
    if np.any(w <= 0):
        raise ValidationError("quadrature weights must be positive")
    scale = max(1.0, float(np.max(np.abs(gamma_slice))))
    if float(np.max(np.abs(gamma_slice - gamma_slice.T))) > SYMMETRY_TOL * scale:
        raise ValidationError("covariance slice is not symmetric")
    s = np.sqrt(w)
    m = gamma_slice * np.outer(s, s)
    m = (m + m.T) / 2.0
    vals, vecs = np.linalg.eigh(m)
    vals = vals[::-1]
    vecs = vecs[:, ::-1]
    vals = np.clip(vals, 0.0, None)
    return vals, vecs / s[:, None]


@dataclass
class EigenSystem:
    """Truncated covariate-dependent eigensystem plus scoring ingredients."""

    time_grid: np.ndarray
    z_grid: np.ndarray
    quad_weights: np.ndarray
    m: int
    eigenvalues: np.ndarray  # (m, G)
    eigenfunctions: np.ndarray  # (m, T, G)
    fve: np.ndarray  # (G,)
    sigma2: float
    cov_psd: np.ndarray  # (T, T, G), full-rank PSD repair of the surface
    z_range: tuple
    baseline: bool = False

    def lookup(self, z: float):
        """Nearest covariate grid slice for z.

        Ties break toward the lower grid point; z outside the training
        covariate range clamps to the nearest endpoint with the extrapolation
        flag set.
        """
        g = int(np.argmin(np.abs(float(z) - self.z_grid)))
        extrapolated = bool(z < self.z_range[0] or z > self.z_range[1])
        return g, extrapolated

    def at(self, z: float):
        """(slice index, eigenvalues, eigenfunctions, extrapolated) at z."""
        g, extrapolated = self.lookup(z)
        return g, self.eigenvalues[:, g], self.eigenfunctions[:, :, g], extrapolated


def build_eigensystem(
    surface: CovSurface,
    fve_target: float = 0.95,
    quad_weights=None,
    z_range=None,
    baseline: bool = False,
) -> EigenSystem:
    """Decompose every covariate slice and truncate by mean FVE.

    The truncation order is the smallest m whose fraction of variance
    explained, averaged over the covariate grid, reaches `fve_target`.
    """
    if not 0.0 < fve_target < 1.0:
        raise ValidationError("fve_target must lie in (0, 1)")
    if surface.sigma2 is None:
        raise ValidationError("surface.sigma2 must be estimated before the eigensystem")
    time_grid = surface.time_grid
    z_grid = surface.z_grid
    if quad_weights is None:
        quad_weights = periodic_trapezoid_weights(time_grid)
    quad_weights = np.asarray(quad_weights, dtype=float)
    nt, nz = len(time_grid), len(z_grid)

    all_vals = np.empty((nt, nz))
    all_vecs = np.empty((nt, nt, nz))
    cov_psd = np.empty((nt, nt, nz))
    for g in range(nz):
        vals, vecs = eigendecompose_at(surface.gamma[:, :, g], quad_weights)
        all_vals[:, g] = vals
        all_vecs[:, :, g] = vecs
        cov_psd[:, :, g] = (vecs * vals) @ vecs.T

    totals = all_vals.sum(axis=0)
    if np.all(totals <= 0.0):
        raise DegenerateCovarianceError("covariance surface carries no variance")
    with np.errstate(divide="ignore", invalid="ignore"):
        fve_curves = np.where(
            totals > 0.0, np.cumsum(all_vals, axis=0) / totals, 1.0
        )
    mean_fve = fve_curves.mean(axis=1)
    reached = np.flatnonzero(mean_fve >= fve_target)
    m = int(reached[0]) + 1 if len(reached) else nt

    eigenvalues = all_vals[:m].copy()
    eigenfunctions = np.transpose(all_vecs[:, :m, :], (1, 0, 2)).copy()  # (m, T, G)
    _align_signs(eigenfunctions, quad_weights)

    if z_range is None:
        z_range = (float(z_grid[0]), float(z_grid[-1]))
    return EigenSystem(
        time_grid=time_grid,
        z_grid=z_grid,
        quad_weights=quad_weights,
        m=m,
        eigenvalues=eigenvalues,
        eigenfunctions=eigenfunctions,
        fve=fve_curves[m - 1].copy(),
        sigma2=float(surface.sigma2),
        cov_psd=cov_psd,
        z_range=(float(z_range[0]), float(z_range[1])),
        baseline=baseline,
    )


def _align_signs(eigenfunctions: np.ndarray, w: np.ndarray) -> None:
    """Flip signs in place: slice 0 by positive weighted integral (value at the
    first grid time breaks exact ties), later slices by positive weighted inner
    product with the previous slice."""
    m, _, nz = eigenfunctions.shape
    for r in range(m):
        integral = float(w @ eigenfunctions[r, :, 0])
        if integral < 0.0 or (integral == 0.0 and eigenfunctions[r, 0, 0] < 0.0):
            eigenfunctions[r, :, 0] *= -1.0
        for g in range(1, nz):
            inner = float(
                (w * eigenfunctions[r, :, g]) @ eigenfunctions[r, :, g - 1]
            )
            if inner < 0.0:
                eigenfunctions[r, :, g] *= -1.0


def build_baseline_eigensystem(
    points: RawCovPoints,
    time_grid,
    fve_target: float = 0.95,
    h_t: float | None = None,
    bandwidth_candidates=None,
    folds: int = 5,
    max_points_per_fold: int = 1000,
    sigma2_floor=None,
) -> EigenSystem:
    """Covariate-independent eigensystem from pooled raw covariances.

    Same machinery with the covariate dimension removed: 2-D local-linear
    smoothing of the pooled points over (t, s), one eigendecomposition, one
    covariate slice that every z maps to.
    """
    if h_t is None:
        h_t = covsmooth.select_baseline_bandwidth(
            points, bandwidth_candidates, folds, max_points_per_fold
        )
    surface = covsmooth.build_baseline_surface(points, time_grid, h_t)
    surface.sigma2 = covsmooth.estimate_noise_variance(
        points.diagonal(), surface, floor=sigma2_floor
    )
    z = points.z
    z_range = (float(np.min(z)), float(np.max(z))) if len(z) else (0.0, 0.0)
    return build_eigensystem(surface, fve_target, z_range=z_range, baseline=True)


def eigenvalues_to_csv(es: EigenSystem, dest) -> None:
    """Diagnostic dump of eigenvalues as (component, z, value) rows."""
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["component", "z", "value"])
        for r in range(es.m):
            for g, zg in enumerate(es.z_grid):
                writer.writerow([r + 1, repr(float(zg)), repr(float(es.eigenvalues[r, g]))])


def eigenfunctions_to_csv(es: EigenSystem, dest) -> None:
    """Diagnostic dump of eigenfunctions as (component, t, z, value) rows."""
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["component", "t", "z", "value"])
        for r in range(es.m):
            for g, zg in enumerate(es.z_grid):
                for a, ta in enumerate(es.time_grid):
                    writer.writerow(
                        [r + 1, repr(float(ta)), repr(float(zg)),
                         repr(float(es.eigenfunctions[r, a, g]))]
                    )
