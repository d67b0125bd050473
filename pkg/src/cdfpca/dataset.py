"""Ingestion and canonical representation of daily monitoring profiles.

A day of monitoring data consists of sparse within-day frequency observations,
a (possibly different) set of within-day temperature observations, and a
scalar daily covariate (the minimum observed temperature). The canonical CSV
schema is::

    date (ISO-8601), hour (in (0, 24], end-of-interval label),
    frequency (Hz, blank = missing), temperature (degC, blank = missing)

Dates are UTC calendar dates. Gzip-compressed files are accepted by ``.gz``
extension. The CSV carries no explicit covariate column; the covariate is
re-derived on load as the day's minimum observed temperature.
"""

from __future__ import annotations

import csv
import gzip
import io
from dataclasses import dataclass, field, replace
from datetime import date

import numpy as np

from .errors import (
    CovariateUnavailableError,
    EmptyPhaseError,
    ParseError,
    ValidationError,
)

DEFAULT_SCHEMA = {
    "date": "date",
    "hour": "hour",
    "frequency": "frequency",
    "temperature": "temperature",
}

DAY_HOURS = 24.0


@dataclass(frozen=True)
class ProfileDay:
    """One day of sparse functional observations.

    Parameters
    ----------
    day_id : datetime.date
        Calendar date of the profile.
    times : ndarray
        Strictly increasing frequency-observation times in (0, 24] hours.
    freq_values : ndarray
        Frequencies (Hz) aligned with `times`.
    temp_times : ndarray
        Strictly increasing temperature-observation times in (0, 24] hours.
    temp_values : ndarray
        Temperatures (degC) aligned with `temp_times`.
    z : float or None
        Daily covariate (minimum temperature, degC). None until derived.
    """

    day_id: date
    times: np.ndarray
    freq_values: np.ndarray
    temp_times: np.ndarray
    temp_values: np.ndarray
    z: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "times", _as_time_array(self.times, self.day_id))
        object.__setattr__(self, "freq_values", np.asarray(self.freq_values, dtype=float))
        object.__setattr__(self, "temp_times", _as_time_array(self.temp_times, self.day_id))
        object.__setattr__(self, "temp_values", np.asarray(self.temp_values, dtype=float))
        if self.times.shape != self.freq_values.shape:
            raise ValidationError(
                f"{self.day_id}: times and freq_values have different lengths"
            )
        if self.temp_times.shape != self.temp_values.shape:
            raise ValidationError(
                f"{self.day_id}: temp_times and temp_values have different lengths"
            )

    @property
    def n_obs(self) -> int:
        """Number of frequency observations on this day."""
        return len(self.times)

    @property
    def scoreable(self) -> bool:
        """True when the day can produce a score vector."""
        return self.n_obs >= 1 and len(self.temp_values) >= 1

    def temp_at(self, t) -> np.ndarray:
        """Temperature at times `t`, linearly interpolated within the day.

        Times outside the day's temperature support use the nearest observed
        value. Raises when the day has no temperatures at all.
        """
        if len(self.temp_values) == 0:
            raise CovariateUnavailableError(
                f"{self.day_id}: no temperature observations"
            )
        return np.interp(np.asarray(t, dtype=float), self.temp_times, self.temp_values)


def _as_time_array(values, day_id) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise ValidationError(f"{day_id}: time points must form a 1-D sequence")
    if arr.size:
        if np.any(~np.isfinite(arr)) or np.any(arr <= 0.0) or np.any(arr > DAY_HOURS):
            raise ValidationError(f"{day_id}: time points must lie in (0, {DAY_HOURS}]")
        if np.any(np.diff(arr) <= 0.0):
            raise ValidationError(f"{day_id}: time points must be strictly increasing")
    return arr


@dataclass(frozen=True)
class MonitoringDataset:
    """Ordered collection of profile days plus grid/provenance metadata."""

    days: tuple[ProfileDay, ...]
    canonical_time_grid: np.ndarray = field(default=None)
    provenance: str = ""

    def __post_init__(self):
        days = tuple(self.days)
        if len(days) == 0:
            raise ValidationError("dataset must contain at least one day")
        ids = [d.day_id for d in days]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate day_id in dataset")
        if any(b <= a for a, b in zip(ids, ids[1:])):
            days = tuple(sorted(days, key=lambda d: d.day_id))
        object.__setattr__(self, "days", days)
        grid = self.canonical_time_grid
        if grid is None:
            grid = np.unique(np.concatenate([d.times for d in days] or [np.empty(0)]))
        object.__setattr__(self, "canonical_time_grid", np.asarray(grid, dtype=float))

    def __len__(self) -> int:
        return len(self.days)

    def __iter__(self):
        return iter(self.days)

    @property
    def date_range(self) -> tuple[date, date]:
        return self.days[0].day_id, self.days[-1].day_id


def derive_covariate(day: ProfileDay) -> ProfileDay:
    """Set the day's covariate to its minimum observed temperature.

    Idempotent; raises :class:`CovariateUnavailableError` when the day has no
    temperature observations.
    """
    if len(day.temp_values) == 0:
        raise CovariateUnavailableError(f"{day.day_id}: no temperature observations")
    return replace(day, z=float(np.min(day.temp_values)))


def split_phases(ds: MonitoringDataset, cut: date) -> tuple[MonitoringDataset, MonitoringDataset]:
    """Split a dataset into (day_id <= cut, day_id > cut).

    Raises :class:`EmptyPhaseError` when either side would be empty, which
    also covers cuts outside the dataset's date range.
    """
    first = [d for d in ds.days if d.day_id <= cut]
    second = [d for d in ds.days if d.day_id > cut]
    if not first:
        raise EmptyPhaseError(f"cut {cut} leaves Phase I empty")
    if not second:
        raise EmptyPhaseError(f"cut {cut} leaves Phase II empty")
    grid = ds.canonical_time_grid
    return (
        MonitoringDataset(tuple(first), grid, ds.provenance),
        MonitoringDataset(tuple(second), grid, ds.provenance),
    )


def _open_source(source, mode="rt"):
    if hasattr(source, "read"):
        return source, False
    path = str(source)
    if path.endswith(".gz"):
        return gzip.open(path, mode, encoding="utf-8", newline=""), True
    return open(path, mode, encoding="utf-8", newline=""), True


def load_profiles(csv_source, schema: dict | None = None) -> MonitoringDataset:
    """Load a dataset from canonical CSV.

    Parameters
    ----------
    csv_source : path or file-like
        CSV stream with at least the schema's date and hour columns. A path
        ending in ``.gz`` is transparently decompressed.
    schema : dict, optional
        Maps the canonical column names (``date``, ``hour``, ``frequency``,
        ``temperature``) to the actual column names in the file.

    Returns
    -------
    MonitoringDataset
        One :class:`ProfileDay` per distinct date, covariates derived where
        temperatures exist. Days without frequency observations are retained
        (they are unscoreable but still carry temperature information).
    """
    colmap = dict(DEFAULT_SCHEMA)
    if schema:
        colmap.update(schema)

    stream, owned = _open_source(csv_source)
    try:
        reader = csv.DictReader(stream)
        if reader.fieldnames is None:
            raise ParseError("empty input: no header row")
        for canonical in ("date", "hour"):
            if colmap[canonical] not in reader.fieldnames:
                raise ParseError(f"missing required column '{colmap[canonical]}'")
        has_freq = colmap["frequency"] in reader.fieldnames
        has_temp = colmap["temperature"] in reader.fieldnames

        freqs: dict[date, dict[float, float]] = {}
        temps: dict[date, dict[float, float]] = {}
        n_rows = 0
        for row_no, row in enumerate(reader, start=2):
            n_rows += 1
            raw_date = (row.get(colmap["date"]) or "").strip()
            raw_hour = (row.get(colmap["hour"]) or "").strip()
            try:
                day_id = date.fromisoformat(raw_date)
            except ValueError:
                raise ParseError(f"invalid date {raw_date!r}", row=row_no) from None
            try:
                hour = float(raw_hour)
            except ValueError:
                raise ParseError(f"invalid hour {raw_hour!r}", row=row_no) from None
            if not (0.0 < hour <= DAY_HOURS):
                raise ParseError(f"hour {hour} outside (0, {DAY_HOURS}]", row=row_no)

            for canonical, store in (("frequency", freqs), ("temperature", temps)):
                if canonical == "frequency" and not has_freq:
                    continue
                if canonical == "temperature" and not has_temp:
                    continue
                raw = (row.get(colmap[canonical]) or "").strip()
                if raw == "":
                    continue
                try:
                    value = float(raw)
                except ValueError:
                    raise ParseError(
                        f"invalid {canonical} {raw!r}", row=row_no
                    ) from None
                per_day = store.setdefault(day_id, {})
                if hour in per_day:
                    raise ValidationError(
                        f"duplicate ({day_id}, {hour:g}, {canonical}) entry"
                    )
                per_day[hour] = value
        if n_rows == 0:
            raise ParseError("no data rows")
    finally:
        if owned:
            stream.close()

    days = []
    for day_id in sorted(set(freqs) | set(temps)):
        f = freqs.get(day_id, {})
        x = temps.get(day_id, {})
        f_hours = sorted(f)
        x_hours = sorted(x)
        day = ProfileDay(
            day_id=day_id,
            times=np.array(f_hours, dtype=float),
            freq_values=np.array([f[h] for h in f_hours], dtype=float),
            temp_times=np.array(x_hours, dtype=float),
            temp_values=np.array([x[h] for h in x_hours], dtype=float),
        )
        if len(day.temp_values):
            day = derive_covariate(day)
        days.append(day)

    name = getattr(csv_source, "name", None) or str(csv_source)
    return MonitoringDataset(tuple(days), provenance=f"loaded from {name}")


def _fmt(value: float) -> str:
    return repr(float(value))


def save_profiles(ds: MonitoringDataset, dest) -> None:
    """Write a dataset to canonical CSV (gzip by ``.gz`` extension).

    Loading the result back yields a dataset equal field-by-field (the
    covariate is re-derived as the minimum temperature).
    """
    if hasattr(dest, "write"):
        stream, owned = dest, False
    elif str(dest).endswith(".gz"):
        stream, owned = gzip.open(str(dest), "wt", encoding="utf-8", newline=""), True
    else:
        stream, owned = open(str(dest), "w", encoding="utf-8", newline=""), True
    try:
        writer = csv.writer(stream)
        writer.writerow(["date", "hour", "frequency", "temperature"])
        for day in ds.days:
            f = dict(zip(day.times.tolist(), day.freq_values.tolist()))
            x = dict(zip(day.temp_times.tolist(), day.temp_values.tolist()))
            for hour in sorted(set(f) | set(x)):
                writer.writerow(
                    [
                        day.day_id.isoformat(),
                        _fmt(hour),
                        _fmt(f[hour]) if hour in f else "",
                        _fmt(x[hour]) if hour in x else "",
                    ]
                )
    finally:
        if owned:
            stream.close()


def dataset_to_csv_text(ds: MonitoringDataset) -> str:
    """Canonical CSV serialization as a string (mainly for tests)."""
    buf = io.StringIO()
    save_profiles(ds, buf)
    return buf.getvalue()
