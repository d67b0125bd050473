"""Penalized B-spline building blocks.

Open and cyclic cubic B-spline bases on equidistant knots, difference
penalties, sum-to-zero centering via null-space reparameterization, and a
generalized cross-validation search for penalized least squares with one or
more penalty blocks.
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import cho_factor, cho_solve

from .errors import NumericalError

DEGREE = 3


def open_knots(lo: float, hi: float, nbasis: int, degree: int = DEGREE) -> np.ndarray:
    """Equidistant knot vector giving `nbasis` B-splines on [lo, hi]."""
    if nbasis <= degree:
        raise ValueError(f"nbasis must exceed the degree ({degree})")
    if not hi > lo:
        raise ValueError("need hi > lo for the spline domain")
    n_intervals = nbasis - degree
    h = (hi - lo) / n_intervals
    return lo + h * np.arange(-degree, n_intervals + degree + 1)


def open_design(x, knots: np.ndarray, degree: int = DEGREE) -> np.ndarray:
    """Dense design matrix of the open B-spline basis, x clamped to the domain."""
    lo = knots[degree]
    hi = knots[-degree - 1]
    xc = np.clip(np.asarray(x, dtype=float), lo, hi)
    return BSpline.design_matrix(xc, knots, degree).toarray()


def cyclic_knots(period: float, nbasis: int, degree: int = DEGREE) -> np.ndarray:
    """Equidistant knot vector whose folded basis has `nbasis` functions."""
    if nbasis <= degree:
        raise ValueError(f"nbasis must exceed the degree ({degree})")
    h = period / nbasis
    return h * np.arange(-degree, nbasis + degree + 1)


def cyclic_design(x, knots: np.ndarray, period: float, degree: int = DEGREE) -> np.ndarray:
    """Design matrix of the cyclic basis obtained by folding the open one.

    The open basis on the extended knots has ``nbasis + degree`` functions on
    one period; the last `degree` are periodic images of the first `degree`
    and are folded back, leaving `nbasis` columns. The resulting functions
    are C^(degree-1)-smooth across the period seam.
    """
    nbasis = len(knots) - 2 * degree - 1
    xm = np.mod(np.asarray(x, dtype=float), period)
    full = BSpline.design_matrix(xm, knots, degree).toarray()
    out = full[:, :nbasis].copy()
    out[:, :degree] += full[:, nbasis:]
    return out


def difference_penalty(nbasis: int, order: int = 2) -> np.ndarray:
    """S = D'D for the order-th difference penalty on coefficients."""
    d = np.diff(np.eye(nbasis), n=order, axis=0)
    return d.T @ d


def cyclic_difference_penalty(nbasis: int, order: int = 2) -> np.ndarray:
    """S = D'D with wrap-around differences; null space is the constants."""
    d = np.zeros((nbasis, nbasis))
    for i in range(nbasis):
        row = np.zeros(nbasis)
        for j, coef in enumerate(_binomial_row(order)):
            row[(i + j) % nbasis] = coef
        d[i] = row
    return d.T @ d


def _binomial_row(order: int) -> np.ndarray:
    row = np.array([1.0])
    for _ in range(order):
        row = np.convolve(row, [1.0, -1.0])
    return row


def centering_transform(constraint: np.ndarray) -> np.ndarray:
    """Orthonormal basis Z of the null space of a single linear constraint.

    Reparameterizing a basis as B @ Z enforces constraint @ coef == 0 exactly
    in the reduced coordinates.
    """
    c = np.asarray(constraint, dtype=float).reshape(1, -1)
    _, _, vt = np.linalg.svd(c, full_matrices=True)
    return vt[1:].T


class PenalizedLSResult:
    """Container for one penalized least-squares solve."""

    def __init__(self, coef, lambdas, edf, edf_blocks, rss, gcv):
        self.coef = coef
        self.lambdas = lambdas
        self.edf = edf
        self.edf_blocks = edf_blocks
        self.rss = rss
        self.gcv = gcv


def fit_penalized(X: np.ndarray, y: np.ndarray, penalty_blocks, lambdas) -> PenalizedLSResult:
    """Solve (X'X + sum_k lambda_k S_k) coef = X'y and report EDF/GCV.

    Parameters
    ----------
    X : ndarray, shape (n, p)
        Full design matrix.
    y : ndarray, shape (n,)
        Response.
    penalty_blocks : sequence of (slice, ndarray)
        Column ranges of X and the penalty matrices acting on them.
    lambdas : sequence of float
        One smoothing parameter per block.
    """
    n, p = X.shape
    xtx = X.T @ X
    xty = X.T @ y
    return _fit_from_normal(xtx, xty, float(y @ y), n, penalty_blocks, lambdas)


def _fit_from_normal(xtx, xty, yty, n, penalty_blocks, lambdas):
    p = xtx.shape[0]
    a = xtx.copy()
    for (sl, s), lam in zip(penalty_blocks, lambdas):
        a[sl, sl] += lam * s
    try:
        factor = cho_factor(a)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular penalized system: {exc}") from exc
    coef = cho_solve(factor, xty)
    # EDF = tr(A^{-1} X'X); per-block traces give component-wise complexity.
    h = cho_solve(factor, xtx)
    edf_blocks = [float(np.trace(h[sl, sl])) for sl, _ in penalty_blocks]
    edf = float(np.trace(h))
    rss = float(yty - 2.0 * coef @ xty + coef @ (xtx @ coef))
    rss = max(rss, 0.0)
    denom = max(n - edf, 1e-8)
    gcv = n * rss / denom**2
    return PenalizedLSResult(coef, tuple(lambdas), edf, edf_blocks, rss, gcv)


def gcv_search(X, y, penalty_blocks, lambda_grid=None) -> PenalizedLSResult:
    """Grid-search smoothing parameters by GCV (one grid shared per block)."""
    if lambda_grid is None:
        lambda_grid = np.logspace(-6, 10, 13)
    n, _ = X.shape
    xtx = X.T @ X
    xty = X.T @ y
    yty = float(y @ y)
    n_blocks = len(penalty_blocks)
    best = None
    for combo in np.stack(
        np.meshgrid(*([np.asarray(lambda_grid)] * n_blocks), indexing="ij"), axis=-1
    ).reshape(-1, n_blocks):
        res = _fit_from_normal(xtx, xty, yty, n, penalty_blocks, combo)
        if best is None or res.gcv < best.gcv:
            best = res
    return best
