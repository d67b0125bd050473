"""Multivariate EWMA chart on standardized score vectors.

The chart state is Z_l = lambda X_l + (1 - lambda) Z_{l-1} from Z_0 = 0 and
the monitoring statistic is T2_l = (2 - lambda) / lambda * Z_l' Z_l. The
alarm limit is calibrated to a target in-control average run length by a
moving-block bootstrap of the Phase I score vectors: block starts are drawn
uniformly, blocks concatenate into synthetic monitoring streams, and the run
length is the first index whose T2 exceeds the candidate limit.

Calibration simulates all bootstrap replicates once, keeping each replicate's
running-maximum records of T2. The run length for ANY candidate limit is then
the time of the replicate's first record above that limit, so a single
simulation serves every bisection step. This is the common-random-numbers
scheme that makes the estimated ARL monotone in the limit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from datetime import date

import numpy as np

from .errors import NumericalError, ValidationError

H4_MAX = 1e4
CENSOR_WARN = 0.01
MAX_HORIZON_WIDENINGS = 3


@dataclass(frozen=True)
class ChartState:
    """Current EWMA state vector."""

    z: np.ndarray
    lam: float
    step: int = 0

    @classmethod
    def initial(cls, m: int, lam: float) -> "ChartState":
        if not 0.0 < lam <= 1.0:
            raise ValidationError("lambda must lie in (0, 1]")
        return cls(np.zeros(m), float(lam), 0)


def update(state: ChartState, x) -> tuple[ChartState, float]:
    """One chart update; returns the new state and its T2 statistic."""
    x = np.asarray(x, dtype=float)
    if x.shape != state.z.shape:
        raise ValidationError("score vector has wrong dimension")
    if not np.all(np.isfinite(x)):
        raise ValidationError("score vector contains non-finite entries")
    z_new = state.lam * x + (1.0 - state.lam) * state.z
    t2 = (2.0 - state.lam) / state.lam * float(z_new @ z_new)
    return ChartState(z_new, state.lam, state.step + 1), t2


@dataclass
class ChartResult:
    """T2 trajectory with its alarm limit and provenance."""

    dates: tuple
    t2: np.ndarray
    h4: float
    lam: float
    m: int
    arl0_target: float = float("nan")
    alarms: tuple = field(init=False)

    def __post_init__(self):
        self.t2 = np.asarray(self.t2, dtype=float)
        self.alarms = tuple(
            d for d, v in zip(self.dates, self.t2) if v > self.h4
        )


def run_chart(X, dates, lam: float, h4: float, arl0_target=float("nan")) -> ChartResult:
    """Run the chart over score vectors in date order.

    The chart keeps running after alarms; every exceedance is recorded.
    """
    if h4 <= 0:
        raise ValidationError("h4 must be positive")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.size == 0:
        return ChartResult(tuple(), np.empty(0), h4, lam, X.shape[1] if X.ndim == 2 else 0, arl0_target)
    dates = tuple(dates)
    if len(dates) != X.shape[0]:
        raise ValidationError("dates and score rows disagree in length")
    state = ChartState.initial(X.shape[1], lam)
    t2 = np.empty(X.shape[0])
    for i, x in enumerate(X):
        state, t2[i] = update(state, x)
    return ChartResult(dates, t2, h4, lam, X.shape[1], arl0_target)


def chart_to_csv(result: ChartResult, dest) -> None:
    """Chart export: (date, T2, h4, alarm) rows."""
    import csv

    with open(dest, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "T2", "h4", "alarm"])
        for d, v in zip(result.dates, result.t2):
            writer.writerow(
                [
                    d.isoformat() if isinstance(d, date) else d,
                    repr(float(v)),
                    repr(float(result.h4)),
                    int(v > result.h4),
                ]
            )


def bootstrap_run_length(phase1_X, h4: float, lam: float, b: int, horizon: int, rng) -> int:
    """Run length of one moving-block bootstrap replicate.

    Builds one synthetic stream by concatenating length-b blocks of
    consecutive Phase I score vectors with uniformly drawn start indices,
    runs the chart from the zero state, and returns the first index whose T2
    exceeds h4, or ``horizon + 1`` when censored.
    """
    X = np.atleast_2d(np.asarray(phase1_X, dtype=float))
    n = X.shape[0]
    if not 1 <= b <= n:
        raise ValidationError(f"block length {b} outside [1, {n}]")
    if horizon < 1:
        raise ValidationError("horizon must be at least 1")
    rng = np.random.default_rng(rng)
    n_blocks = math.ceil(horizon / b)
    starts = rng.integers(0, n - b + 1, size=n_blocks)
    lam = float(lam)
    c = (2.0 - lam) / lam
    z = np.zeros(X.shape[1])
    for t in range(1, horizon + 1):
        x = X[starts[(t - 1) // b] + (t - 1) % b]
        z = lam * x + (1.0 - lam) * z
        if c * float(z @ z) > h4:
            return t
    return horizon + 1


class _Records:
    """Running-maximum T2 records of all bootstrap replicates (CSR layout)."""

    def __init__(self, ptr, times, values, horizon, reps):
        self.ptr = ptr
        self.times = times
        self.values = values
        self.horizon = horizon
        self.reps = reps

    def run_lengths(self, h4: float) -> np.ndarray:
        sel = np.where(self.values > h4, self.times, self.horizon + 1)
        rl = np.full(self.reps, self.horizon + 1, dtype=np.int64)
        counts = np.diff(self.ptr)
        nonempty = np.flatnonzero(counts > 0)
        if len(nonempty):
            rl[nonempty] = np.minimum.reduceat(sel, self.ptr[:-1][nonempty])
        return rl

    def arl(self, h4: float) -> tuple[float, float]:
        rl = self.run_lengths(h4)
        return float(rl.mean()), float(np.mean(rl == self.horizon + 1))


def _simulate_records(lam, horizon, reps, rng, X=None, b=None, m=None) -> _Records:
    """Vectorized chart over all replicates, recording running maxima.

    With X given, streams are moving-block bootstrap resamples of its rows
    (block starts drawn per block index across all replicates); without X,
    streams are i.i.d. standard normal vectors of dimension m.
    """
    lam = float(lam)
    if X is not None:
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=float)))
        n, m = X.shape
        if not 1 <= b <= n:
            raise ValidationError(f"block length {b} outside [1, {n}]")
        n_starts = n - b + 1
    c = (2.0 - lam) / lam
    z = np.zeros((reps, m))
    run_max = np.zeros(reps)
    rec_rep, rec_time, rec_val = [], [], []
    starts = None
    for t in range(1, horizon + 1):
        if X is not None:
            off = (t - 1) % b
            if off == 0:
                starts = rng.integers(0, n_starts, size=reps)
            xt = X[starts + off]
        else:
            xt = rng.standard_normal((reps, m))
        z *= 1.0 - lam
        z += lam * xt
        t2 = c * np.einsum("ij,ij->i", z, z)
        new = t2 > run_max
        if new.any():
            idx = np.flatnonzero(new)
            run_max[idx] = t2[idx]
            rec_rep.append(idx.astype(np.int64))
            rec_time.append(np.full(len(idx), t, dtype=np.int64))
            rec_val.append(t2[idx])
    if rec_rep:
        rep = np.concatenate(rec_rep)
        times = np.concatenate(rec_time)
        values = np.concatenate(rec_val)
        order = np.argsort(rep, kind="stable")
        rep, times, values = rep[order], times[order], values[order]
    else:
        rep = np.empty(0, dtype=np.int64)
        times = np.empty(0, dtype=np.int64)
        values = np.empty(0)
    ptr = np.zeros(reps + 1, dtype=np.int64)
    np.cumsum(np.bincount(rep, minlength=reps), out=ptr[1:])
    return _Records(ptr, times, values, horizon, reps)


def estimate_arl(
    phase1_X, h4, lam, b, horizon, reps, seed, source: str = "bootstrap", m=None
):
    """Monte Carlo in-control ARL at a fixed limit; (ARL, censoring fraction).

    Censored replicates (no exceedance within the horizon) count at
    horizon + 1.
    """
    rng = np.random.default_rng(seed)
    if source == "bootstrap":
        rec = _simulate_records(lam, horizon, reps, rng, X=phase1_X, b=b)
    elif source == "gaussian":
        rec = _simulate_records(lam, horizon, reps, rng, m=m)
    else:
        raise ValidationError(f"unknown source {source!r}")
    return rec.arl(h4)


def calibrate_h4(
    phase1_X,
    lam: float = 0.4,
    b: int = 3,
    arl0: float = 500.0,
    reps: int = 100_000,
    seed: int = 0,
    horizon: int | None = None,
    tol: float = 0.02,
    source: str = "bootstrap",
    m: int | None = None,
):
    """Calibrate the alarm limit to the target in-control ARL.

    Bisection on the limit against the monotone common-random-numbers ARL
    estimate, terminating when the estimate lands within ``tol * arl0``. The
    simulation horizon defaults to ``20 * arl0``; if more than 1% of
    replicates are censored at the calibrated limit, the horizon is doubled
    (with a warning) and calibration reruns.

    Returns
    -------
    h4 : float
        Calibrated limit.
    report : dict
        Estimated ARL, censoring fraction, horizon, and the search inputs.
    """
    if arl0 <= 1:
        raise ValidationError("arl0 must exceed 1")
    if reps < 1000:
        raise ValidationError("need at least 1000 bootstrap replicates")
    if not 0.0 < lam <= 1.0:
        raise ValidationError("lambda must lie in (0, 1]")
    if source == "bootstrap" and phase1_X is None:
        raise ValidationError("bootstrap calibration needs Phase I scores")
    if source == "gaussian" and m is None:
        if phase1_X is None:
            raise ValidationError("gaussian calibration needs the score dimension m")
        m = np.atleast_2d(np.asarray(phase1_X)).shape[1]
    if horizon is None:
        horizon = int(20 * arl0)

    seed_seq = np.random.SeedSequence(seed)
    h4 = None
    report = None
    for attempt in range(MAX_HORIZON_WIDENINGS + 1):
        rng = np.random.default_rng(seed_seq.spawn(1)[0])
        if source == "bootstrap":
            rec = _simulate_records(lam, horizon, reps, rng, X=phase1_X, b=b)
        else:
            rec = _simulate_records(lam, horizon, reps, rng, m=m)

        hi = 1.0
        while rec.arl(hi)[0] < arl0:
            if hi >= H4_MAX:
                raise NumericalError(
                    f"no h4 in (0, {H4_MAX:g}] reaches ARL {arl0:g} "
                    f"(ARL at {H4_MAX:g} is {rec.arl(H4_MAX)[0]:.1f})"
                )
            hi = min(hi * 2.0, H4_MAX)
        lo = 0.0
        h4 = None
        for _ in range(256):
            mid = (lo + hi) / 2.0
            arl_mid = rec.arl(mid)[0]
            if abs(arl_mid - arl0) <= tol * arl0:
                h4 = mid
                break
            if arl_mid < arl0:
                lo = mid
            else:
                hi = mid
        if h4 is None:
            raise NumericalError(
                "bisection could not match the target ARL within tolerance; "
                "increase reps"
            )
        arl_hat, censor = rec.arl(h4)
        report = {
            "h4": float(h4),
            "arl_estimate": arl_hat,
            "arl0": float(arl0),
            "censoring_fraction": censor,
            "horizon": int(horizon),
            "reps": int(reps),
            "lambda": float(lam),
            "block_length": int(b) if source == "bootstrap" else None,
            "source": source,
            "seed": int(seed),
            "tolerance": float(tol),
        }
        if censor < CENSOR_WARN:
            return float(h4), report
        warnings.warn(
            f"censoring fraction {censor:.2%} at horizon {horizon}; widening horizon"
        )
        horizon *= 2
    return float(h4), report
