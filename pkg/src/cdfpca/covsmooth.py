"""Raw covariances and covariate-dependent covariance surface smoothing.

Residual products from each day form a cloud of raw covariance points over
(time, time, covariate). A local-linear kernel smoother with a product
Epanechnikov kernel turns that cloud into a covariance surface on a
(time x time x covariate) grid, with k-fold cross-validation for the two
bandwidths and a separate diagonal smooth for the measurement-noise variance.

The compact kernel support allows window pruning: points are kept sorted by
one coordinate so each evaluation touches only a contiguous slab. Sparse
windows fall back to bandwidth escalation (both bandwidths times 1.5, up to
five times) before failing hard.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError, WindowEmptyError

logger = logging.getLogger(__name__)

MAX_ESCALATIONS = 5
ESCALATION_FACTOR = 1.5
COND_MAX = 1e10


@dataclass
class RawCovPoints:
    """Raw covariance points c = resid_j * resid_k at (t_j, t_k, z)."""

    t: np.ndarray
    s: np.ndarray
    z: np.ndarray
    c: np.ndarray
    day_idx: np.ndarray
    is_diagonal: np.ndarray
    day_ids: tuple

    def __len__(self):
        return len(self.c)

    def _subset(self, mask):
        return RawCovPoints(
            self.t[mask], self.s[mask], self.z[mask], self.c[mask],
            self.day_idx[mask], self.is_diagonal[mask], self.day_ids,
        )

    def off_diagonal(self) -> "RawCovPoints":
        return self._subset(~self.is_diagonal)

    def diagonal(self) -> "RawCovPoints":
        return self._subset(self.is_diagonal)


@dataclass
class CovSurface:
    """Smoothed covariance surface on a (time x time x covariate) grid."""

    time_grid: np.ndarray
    z_grid: np.ndarray
    gamma: np.ndarray  # (T, T, G)
    bandwidths: tuple
    sigma2: float | None = None
    escalations: np.ndarray | None = None


def raw_covariances(day_ids, times_list, residuals_list, z_list) -> RawCovPoints:
    """All n_i^2 residual products per day, diagonal entries flagged.

    Days with a single observation contribute only their diagonal point;
    empty days contribute nothing. For j != k both orderings (t_j, t_k) and
    (t_k, t_j) are emitted, so the point cloud is symmetric by construction.
    """
    ts, ss, zs, cs, di, dg = [], [], [], [], [], []
    kept_ids = []
    for tt, rr, zz, did in zip(times_list, residuals_list, z_list, day_ids):
        tt = np.asarray(tt, dtype=float)
        rr = np.asarray(rr, dtype=float)
        n = len(tt)
        kept_ids.append(did)
        if n == 0:
            continue
        i = len(kept_ids) - 1
        jj = np.repeat(np.arange(n), n)
        kk = np.tile(np.arange(n), n)
        ts.append(tt[jj])
        ss.append(tt[kk])
        cs.append(rr[jj] * rr[kk])
        zs.append(np.full(n * n, float(zz)))
        di.append(np.full(n * n, i, dtype=np.int64))
        dg.append(jj == kk)
    if not ts:
        empty = np.empty(0)
        return RawCovPoints(
            empty, empty, empty, empty,
            np.empty(0, dtype=np.int64), np.empty(0, dtype=bool), tuple(kept_ids),
        )
    return RawCovPoints(
        np.concatenate(ts), np.concatenate(ss), np.concatenate(zs),
        np.concatenate(cs), np.concatenate(di), np.concatenate(dg),
        tuple(kept_ids),
    )


def _wls_core(offsets, values, bw, min_pts, cond_max):
    """Weighted local-linear intercept from points strictly inside the window.

    `offsets` are point coordinates relative to the target, all with positive
    kernel weight. Returns None for too few points or an ill-conditioned
    normal matrix.
    """
    n_eff, d = offsets.shape
    if n_eff < min_pts:
        return None
    w = 0.75 * (1.0 - (offsets[:, 0] / bw[0]) ** 2)
    for j in range(1, d):
        w *= 0.75 * (1.0 - (offsets[:, j] / bw[j]) ** 2)
    design = np.empty((n_eff, d + 1))
    design[:, 0] = 1.0
    design[:, 1:] = offsets
    weighted = design * w[:, None]
    normal = weighted.T @ design
    if np.linalg.cond(normal) > cond_max:
        return None
    beta = np.linalg.solve(normal, weighted.T @ values)
    return float(beta[0])




class _KernelSmoother:
    """Local-linear smoother over a fixed point cloud.

    Keeps one lazily sorted copy of the cloud per coordinate and prunes each
    kernel window by binary search on whichever coordinate is most selective
    for the requested bandwidths, so a window touches roughly only the points
    it contains.
    """

    def __init__(self, coords: np.ndarray, values: np.ndarray):
        coords = np.ascontiguousarray(np.atleast_2d(coords), dtype=float)
        self.coords = coords
        self.values = np.asarray(values, dtype=float)
        self.n, self.d = coords.shape
        if self.n:
            self.spans = np.maximum(coords.max(axis=0) - coords.min(axis=0), 1e-300)
        else:
            self.spans = np.full(self.d, 1e-300)
        self._views: dict = {}

    def _view(self, key: int):
        if key not in self._views:
            order = np.argsort(self.coords[:, key], kind="stable")
            self._views[key] = (
                np.ascontiguousarray(self.coords[order]),
                np.ascontiguousarray(self.values[order]),
            )
        return self._views[key]

    def window(self, target, bw):
        """Offsets (relative to target) and values of the in-window points."""
        key = int(np.argmin(bw / self.spans))
        coords, values = self._view(key)
        lo = np.searchsorted(coords[:, key], target[key] - bw[key], side="left")
        hi = np.searchsorted(coords[:, key], target[key] + bw[key], side="right")
        diff = coords[lo:hi] - target
        if hi <= lo:
            return diff, values[lo:hi]
        inside = np.abs(diff[:, 0]) < bw[0]
        for j in range(1, self.d):
            inside &= np.abs(diff[:, j]) < bw[j]
        return diff[inside], values[lo:hi][inside]

    def solve_once(self, target, bw, min_pts, cond_max=COND_MAX):
        """One weighted local-linear solve; None when the window is unusable."""
        if self.n < min_pts:
            return None
        offsets, values = self.window(target, bw)
        return _wls_core(offsets, values, bw, min_pts, cond_max)

    def smooth(self, target, bw, min_pts, cond_max=COND_MAX,
               max_esc=MAX_ESCALATIONS, start_esc=0):
        """Local-linear value with bandwidth escalation; (value, escalations)."""
        target = np.asarray(target, dtype=float)
        bw = np.asarray(bw, dtype=float)
        for esc in range(start_esc, max_esc + 1):
            value = self.solve_once(target, bw * ESCALATION_FACTOR**esc, min_pts, cond_max)
            if value is not None:
                return value, esc
        raise WindowEmptyError(
            f"kernel window at {tuple(np.round(target, 4))} unusable after "
            f"{max_esc} bandwidth escalations; increase the bandwidths or coarsen the grid"
        )


def _offdiag_smoother(points: RawCovPoints) -> _KernelSmoother:
    if np.any(points.is_diagonal):
        raise ValidationError("surface smoothing expects off-diagonal points only")
    coords = np.column_stack([points.t, points.s, points.z])
    return _KernelSmoother(coords, points.c)


def local_linear_smooth(points: RawCovPoints, at, h) -> float:
    """Smoothed covariance at a single (t, s, z) target.

    Solves the four-parameter weighted least-squares problem with the product
    Epanechnikov kernel and bandwidths ``(h_t, h_t, h_z)`` and returns the
    fitted intercept. Windows with fewer than four positively weighted points
    or an ill-conditioned normal matrix escalate both bandwidths by 1.5 (at
    most five times) before raising :class:`WindowEmptyError`.
    """
    h_t, h_z = h
    value, _ = _offdiag_smoother(points).smooth(
        np.asarray(at, dtype=float), np.array([h_t, h_t, h_z]), min_pts=4
    )
    return value


def evaluate_surface(points: RawCovPoints, time_grid, z_grid, h) -> CovSurface:
    """Smooth the covariance surface on the full grid.

    Values are computed for the upper triangle of each covariate slice and
    mirrored, so every slice is exactly symmetric. Escalation counts are kept
    per grid cell; a cell that stays unusable raises with its coordinates.
    """
    time_grid = np.asarray(time_grid, dtype=float)
    z_grid = np.asarray(z_grid, dtype=float)
    _check_grid(time_grid, "time_grid")
    _check_grid(z_grid, "z_grid")
    h_t, h_z = h
    parent = _offdiag_smoother(points)
    coords = parent.coords
    bw = np.array([h_t, h_t, h_z])
    nt, nz = len(time_grid), len(z_grid)
    gamma = np.empty((nt, nt, nz))
    escalations = np.zeros((nt, nt, nz), dtype=np.int16)
    for g, zg in enumerate(z_grid):
        # All targets in a slice share the same z window; restricting to it
        # once lets every in-slice solve prune on the time axis instead.
        in_slab = np.abs(coords[:, 2] - zg) < h_z
        slab = _KernelSmoother(coords[in_slab], parent.values[in_slab])
        for a in range(nt):
            for b in range(a, nt):
                target = np.array([time_grid[a], time_grid[b], zg])
                value = slab.solve_once(target, bw, min_pts=4)
                esc = 0
                if value is None:
                    try:
                        value, esc = parent.smooth(target, bw, min_pts=4, start_esc=1)
                    except WindowEmptyError as exc:
                        raise WindowEmptyError(
                            f"surface cell (t={time_grid[a]:g}, s={time_grid[b]:g}, "
                            f"z={zg:g}) failed: {exc}"
                        ) from exc
                gamma[a, b, g] = value
                gamma[b, a, g] = value
                escalations[a, b, g] = esc
                escalations[b, a, g] = esc
    n_esc = int(np.count_nonzero(escalations[np.triu_indices(nt)]))
    if n_esc:
        logger.info("surface evaluation used bandwidth escalation at %d cells", n_esc)
    return CovSurface(time_grid, z_grid, gamma, (float(h_t), float(h_z)), None, escalations)


def _check_grid(grid, name):
    if grid.ndim != 1 or len(grid) == 0 or np.any(np.diff(grid) <= 0):
        raise ValidationError(f"{name} must be 1-D and strictly increasing")


def default_bandwidth_candidates() -> list:
    """4x4 log-spaced candidate grid, h_t in [2, 8] hours, h_z in [1.5, 8] degC."""
    hts = np.geomspace(2.0, 8.0, 4)
    hzs = np.geomspace(1.5, 8.0, 4)
    return [(float(ht), float(hz)) for ht in hts for hz in hzs]


def _fold_of_points(points: RawCovPoints, folds: int) -> np.ndarray:
    # Folds partition whole days; assignment cycles through days in date order.
    unique_days = np.unique(points.day_idx)
    fold_by_day = {int(d): i % folds for i, d in enumerate(unique_days)}
    return np.array([fold_by_day[int(d)] for d in points.day_idx])


def bandwidth_cv_errors(points: RawCovPoints, candidates, folds=5, max_points_per_fold=1000):
    """Out-of-fold squared prediction error of the raw covariances.

    Folds partition day-wise so a day's points never straddle the split. Each
    fold's held-out set is capped at `max_points_per_fold` evenly spaced
    points to bound the cost at scale. Candidates that hit an unusable window
    on any held-out point get an infinite error.

    Returns
    -------
    errors : ndarray
        Sum of squared out-of-fold errors per candidate (inf on failure).
    scale : float
        Sum of squared held-out responses; a tie-breaking scale reference.
    """
    offdiag = points.off_diagonal()
    if len(offdiag) == 0:
        raise ValidationError("no off-diagonal points for cross-validation")
    if folds < 2:
        raise ValidationError("need at least 2 folds")
    fold = _fold_of_points(offdiag, folds)
    coords = np.column_stack([offdiag.t, offdiag.s, offdiag.z])
    errors = np.zeros(len(candidates))
    failures = [None] * len(candidates)
    scale = 0.0
    for f in range(folds):
        test_mask = fold == f
        train = _KernelSmoother(coords[~test_mask], offdiag.c[~test_mask])
        test_idx = np.flatnonzero(test_mask)
        if len(test_idx) == 0:
            continue
        if len(test_idx) > max_points_per_fold:
            sel = np.linspace(0, len(test_idx) - 1, max_points_per_fold).astype(int)
            test_idx = test_idx[sel]
        test_coords = coords[test_idx]
        test_c = offdiag.c[test_idx]
        scale += float(test_c @ test_c)
        # One (t, s) window per distinct h_t serves all its h_z candidates,
        # which then only need a covariate mask.
        ht_groups: dict = {}
        for ci, (h_t, h_z) in enumerate(candidates):
            ht_groups.setdefault(float(h_t), []).append((ci, float(h_z)))
        max_hz = max(h_z for _, h_z in candidates)
        for target, cval in zip(test_coords, test_c):
            for h_t, group in ht_groups.items():
                offsets, sub_values = train.window(target, np.array([h_t, h_t, max_hz]))
                abs_dz = np.abs(offsets[:, 2])
                for ci, h_z in group:
                    if failures[ci] is not None:
                        continue
                    inside = abs_dz < h_z
                    bw = np.array([h_t, h_t, h_z])
                    pred = _wls_core(offsets[inside], sub_values[inside], bw, 4, COND_MAX)
                    if pred is None:
                        try:
                            pred, _ = train.smooth(target, bw, min_pts=4, start_esc=1)
                        except WindowEmptyError as exc:
                            failures[ci] = f"(h_t={h_t:g}, h_z={h_z:g}): {exc}"
                            errors[ci] = np.inf
                            continue
                    errors[ci] += (pred - cval) ** 2
    if np.all(~np.isfinite(errors)):
        raise NumericalError(
            "all bandwidth candidates failed cross-validation: "
            + "; ".join(fail for fail in failures if fail)
        )
    return errors, scale


def select_bandwidths(points: RawCovPoints, candidates=None, folds=5, max_points_per_fold=1000):
    """Pick the bandwidth pair minimizing the cross-validated error.

    Candidates whose errors agree with the minimum up to a tiny fraction of
    the held-out response scale count as tied; ties resolve toward larger
    (h_t, then h_z), the smoother choice.
    """
    if candidates is None:
        candidates = default_bandwidth_candidates()
    candidates = list(candidates)
    if len(candidates) == 1:
        return candidates[0]
    errors, scale = bandwidth_cv_errors(points, candidates, folds, max_points_per_fold)
    best = np.min(errors[np.isfinite(errors)])
    tol = 1e-9 * max(scale, 1e-300)
    tied = [cand for cand, err in zip(candidates, errors) if err <= best + tol]
    selected = max(tied)
    logger.info("bandwidth CV selected h_t=%g, h_z=%g", *selected)
    return selected


def noise_floor(diag_points: RawCovPoints) -> float:
    """Strictly positive lower bound for the noise variance estimate."""
    pooled = float(np.mean(diag_points.c)) if len(diag_points) else 0.0
    return 1e-10 * (pooled + 1.0)


def estimate_noise_variance(diag_points: RawCovPoints, surface: CovSurface, floor=None) -> float:
    """Measurement-noise variance from the diagonal raw variances.

    The diagonal points carry process-plus-noise variance; smoothing them over
    (t, z) with the same kernel family and subtracting the surface diagonal
    leaves the noise. The estimate averages over the central 80% of both grids
    and never drops below a strictly positive floor.
    """
    if not np.all(diag_points.is_diagonal):
        raise ValidationError("estimate_noise_variance expects diagonal points")
    if len(diag_points) == 0:
        raise ValidationError("no diagonal points")
    if floor is None:
        floor = noise_floor(diag_points)
    h_t, h_z = surface.bandwidths
    nt, nz = len(surface.time_grid), len(surface.z_grid)
    if nz > 1:
        smoother = _KernelSmoother(
            np.column_stack([diag_points.t, diag_points.z]), diag_points.c
        )
        bw = np.array([h_t, h_z])
        vhat = np.empty((nt, nz))
        for g, zg in enumerate(surface.z_grid):
            for a, tg in enumerate(surface.time_grid):
                vhat[a, g], _ = smoother.smooth(np.array([tg, zg]), bw, min_pts=3)
    else:
        smoother = _KernelSmoother(diag_points.t[:, None], diag_points.c)
        bw = np.array([h_t])
        vhat = np.empty((nt, 1))
        for a, tg in enumerate(surface.time_grid):
            vhat[a, 0], _ = smoother.smooth(np.array([tg]), bw, min_pts=2)
    gamma_diag = np.einsum("aag->ag", surface.gamma)
    t_int = _interior(nt)
    z_int = _interior(nz)
    sigma2 = float(np.mean((vhat - gamma_diag)[np.ix_(t_int, z_int)]))
    if sigma2 < floor:
        warnings.warn(
            f"noise variance estimate {sigma2:.3e} below floor; using {floor:.3e}"
        )
        return floor
    return sigma2


def _interior(n: int) -> np.ndarray:
    cut = int(round(0.1 * n))
    if n - 2 * cut <= 0:
        return np.arange(n)
    return np.arange(cut, n - cut)


def build_baseline_surface(points: RawCovPoints, time_grid, h_t) -> CovSurface:
    """Covariate-independent surface: 2-D smoothing of the pooled points.

    The covariate axis collapses to a single slice located at the pooled mean
    covariate; downstream consumers treat it as a one-point covariate grid.
    """
    offdiag = points.off_diagonal()
    if len(offdiag) == 0:
        raise ValidationError("no off-diagonal points")
    time_grid = np.asarray(time_grid, dtype=float)
    _check_grid(time_grid, "time_grid")
    smoother = _KernelSmoother(np.column_stack([offdiag.t, offdiag.s]), offdiag.c)
    bw = np.array([h_t, h_t])
    nt = len(time_grid)
    gamma = np.empty((nt, nt, 1))
    escalations = np.zeros((nt, nt, 1), dtype=np.int16)
    for a in range(nt):
        for b in range(a, nt):
            try:
                value, esc = smoother.smooth(
                    np.array([time_grid[a], time_grid[b]]), bw, min_pts=3
                )
            except WindowEmptyError as exc:
                raise WindowEmptyError(
                    f"baseline surface cell (t={time_grid[a]:g}, s={time_grid[b]:g}) "
                    f"failed: {exc}"
                ) from exc
            gamma[a, b, 0] = value
            gamma[b, a, 0] = value
            escalations[a, b, 0] = esc
            escalations[b, a, 0] = esc
    z_center = float(np.mean(offdiag.z))
    return CovSurface(
        time_grid, np.array([z_center]), gamma, (float(h_t), np.inf), None, escalations
    )


def baseline_cv_errors(points: RawCovPoints, candidates, folds=5, max_points_per_fold=1000):
    """Cross-validated errors for the pooled 2-D smoother (h_t candidates)."""
    offdiag = points.off_diagonal()
    fold = _fold_of_points(offdiag, folds)
    coords = np.column_stack([offdiag.t, offdiag.s])
    errors = np.zeros(len(candidates))
    failures = [None] * len(candidates)
    scale = 0.0
    for f in range(folds):
        test_mask = fold == f
        train = _KernelSmoother(coords[~test_mask], offdiag.c[~test_mask])
        test_idx = np.flatnonzero(test_mask)
        if len(test_idx) == 0:
            continue
        if len(test_idx) > max_points_per_fold:
            sel = np.linspace(0, len(test_idx) - 1, max_points_per_fold).astype(int)
            test_idx = test_idx[sel]
        test_coords = coords[test_idx]
        test_c = offdiag.c[test_idx]
        scale += float(test_c @ test_c)
        bws = [np.array([h_t, h_t]) for h_t in candidates]
        for target, cval in zip(test_coords, test_c):
            for ci, bw in enumerate(bws):
                if failures[ci] is not None:
                    continue
                offsets, sub_values = train.window(target, bw)
                pred = _wls_core(offsets, sub_values, bw, 3, COND_MAX)
                if pred is None:
                    try:
                        pred, _ = train.smooth(target, bw, min_pts=3, start_esc=1)
                    except WindowEmptyError as exc:
                        failures[ci] = f"(h_t={candidates[ci]:g}): {exc}"
                        errors[ci] = np.inf
                        continue
                errors[ci] += (pred - cval) ** 2
    if np.all(~np.isfinite(errors)):
        raise NumericalError(
            "all baseline bandwidth candidates failed cross-validation: "
            + "; ".join(fail for fail in failures if fail)
        )
    return errors, scale


def select_baseline_bandwidth(points, candidates=None, folds=5, max_points_per_fold=1000):
    """Bandwidth for the pooled 2-D smoother, same tie rule as the 3-D case."""
    if candidates is None:
        candidates = [float(h) for h in np.geomspace(2.0, 8.0, 4)]
    candidates = list(candidates)
    if len(candidates) == 1:
        return candidates[0]
    errors, scale = baseline_cv_errors(points, candidates, folds, max_points_per_fold)
    best = np.min(errors[np.isfinite(errors)])
    tol = 1e-9 * max(scale, 1e-300)
    tied = [cand for cand, err in zip(candidates, errors) if err <= best + tol]
    return max(tied)


def surface_to_csv(surface: CovSurface, dest) -> None:
    """Diagnostic dump of the surface as (t, s, z, gamma) rows."""
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "s", "z", "gamma"])
        for g, zg in enumerate(surface.z_grid):
            for a, ta in enumerate(surface.time_grid):
                for b, tb in enumerate(surface.time_grid):
                    writer.writerow([repr(float(ta)), repr(float(tb)), repr(float(zg)),
                                     repr(float(surface.gamma[a, b, g]))])
