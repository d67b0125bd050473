"""Synthetic profile generator with known ground truth.

Realizes the truncated component model exactly: each day draws a covariate
from a serially correlated uniform sequence, builds a diurnal temperature
profile whose minimum equals the covariate, draws independent component
scores with covariate-dependent variances, and observes the mean plus score
expansion plus white noise on a within-day grid with Bernoulli missingness.

Eigen-structure is parameterized so it stays exactly orthonormal at every
covariate value: a fixed orthonormal trio (constant, cosine, sine, each unit
norm over the daily period) mixed by a covariate-dependent rotation. All
randomness flows from one seed in a fixed order, so a spec generates a
bit-identical dataset on every run.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from datetime import date, timedelta

import numpy as np
from scipy.special import ndtr

from . import archive
from .dataset import MonitoringDataset, ProfileDay
from .errors import ValidationError

PERIOD = 24.0


def _parse_curve(spec: str):
    """Parse 'const:a' | 'linear:a:b' | 'exp:a:tau' into a vectorized callable."""
    parts = str(spec).split(":")
    kind, args = parts[0], [float(v) for v in parts[1:]]
    if kind == "const" and len(args) == 1:
        return lambda z: np.full_like(np.asarray(z, dtype=float), args[0])
    if kind == "linear" and len(args) == 2:
        return lambda z: args[0] + args[1] * np.asarray(z, dtype=float)
    if kind == "exp" and len(args) == 2:
        return lambda z: args[0] * np.exp(-np.asarray(z, dtype=float) / args[1])
    raise ValidationError(f"cannot parse curve spec {spec!r}")


def _parse_temp_effect(spec: str):
    parts = str(spec).split(":")
    kind, args = parts[0], [float(v) for v in parts[1:]]
    if kind == "none":
        return lambda x: np.zeros_like(np.asarray(x, dtype=float))
    if kind == "linear" and len(args) == 1:
        return lambda x: args[0] * np.asarray(x, dtype=float)
    if kind == "frost" and len(args) == 3:
        scale, knee, width = args
        return lambda x: scale * width * np.logaddexp(
            0.0, (knee - np.asarray(x, dtype=float)) / width
        )
    raise ValidationError(f"cannot parse temperature effect {spec!r}")


@dataclass(frozen=True)
class SynthSpec:
    """Declarative description of a synthetic monitoring stream."""

    n_days: int = 500
    start_date: date = date(2019, 5, 27)
    times_per_day: int = 24
    missingness: float = 0.312
    sigma2: float = 0.05
    seed: int = 0
    z_low: float = 0.0
    z_high: float = 20.0
    z_ar1: float = 0.6
    alpha0: float = 6.93
    time_amplitude: float = 0.0
    temp_effect: str = "none"
    nu: tuple = ("linear:2.0:0.1", "const:1.0")
    phi_theta0: float = 0.2
    phi_theta1: float = 0.03
    temp_amp_low: float = 3.0
    temp_amp_high: float = 8.0
    coldest_hour: float = 4.0
    shift_start: date | None = None
    shift_end: date | None = None
    shift_sd: tuple = ()
    mean_shift: float = 0.0

    def __post_init__(self):
        if self.n_days < 1:
            raise ValidationError("n_days must be positive")
        if not 0.0 <= self.missingness < 1.0:
            raise ValidationError("missingness must lie in [0, 1)")
        if self.sigma2 < 0:
            raise ValidationError("sigma2 must be non-negative")
        if not self.z_high > self.z_low:
            raise ValidationError("need z_high > z_low")
        if not 0.0 <= self.z_ar1 < 1.0:
            raise ValidationError("z_ar1 must lie in [0, 1)")
        if len(self.nu) > 3:
            raise ValidationError("at most 3 components are supported")
        object.__setattr__(self, "nu", tuple(self.nu))
        object.__setattr__(self, "shift_sd", tuple(float(v) for v in self.shift_sd))
        # Variance curves must be non-negative and ordered at every covariate.
        zg = np.linspace(self.z_low, self.z_high, 101)
        curves = [_parse_curve(s)(zg) for s in self.nu]
        for r, vals in enumerate(curves):
            if np.any(vals < 0):
                raise ValidationError(f"nu[{r}] is negative somewhere on the z range")
            if r > 0 and np.any(vals > curves[r - 1] + 1e-12):
                raise ValidationError("nu curves must be nonincreasing in the component index")

    @property
    def m_true(self) -> int:
        return len(self.nu)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("start_date", "shift_start", "shift_end"):
            if d[key] is not None:
                d[key] = d[key].isoformat()
        d["nu"] = list(d["nu"])
        d["shift_sd"] = list(d["shift_sd"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        for key in ("start_date", "shift_start", "shift_end"):
            if d.get(key):
                d[key] = date.fromisoformat(d[key])
            elif key in d:
                d[key] = None
        if "nu" in d:
            d["nu"] = tuple(d["nu"])
        if "shift_sd" in d:
            d["shift_sd"] = tuple(d["shift_sd"])
        return cls(**d)


@dataclass
class SynthTruth:
    """Ground truth backing a generated dataset."""

    spec: SynthSpec
    dates: tuple
    z: np.ndarray
    xi: np.ndarray
    shift: np.ndarray
    _nu_fns: list = field(default_factory=list, repr=False)
    _temp_fn: object = field(default=None, repr=False)

    def __post_init__(self):
        self._nu_fns = [_parse_curve(s) for s in self.spec.nu]
        self._temp_fn = _parse_temp_effect(self.spec.temp_effect)

    def nu(self, r: int, z) -> np.ndarray:
        """True variance curve of component r (1-based) at z."""
        return self._nu_fns[r - 1](z)

    def phi(self, r: int, t, z) -> np.ndarray:
        """True eigenfunction of component r (1-based) at (t, z)."""
        return _phi_matrix(self.spec, np.asarray(t, dtype=float), float(z))[r - 1]

    def mu(self, t, x) -> np.ndarray:
        """True mean at (time of day, temperature)."""
        t = np.asarray(t, dtype=float)
        return (
            self.spec.alpha0
            + self.spec.time_amplitude * np.sin(2.0 * np.pi * t / PERIOD)
            + self._temp_fn(x)
        )

    def gamma(self, t, s, z) -> float:
        """True covariance surface value at (t, s, z)."""
        phis = _phi_matrix(
            self.spec, np.array([float(t), float(s)]), float(z)
        )
        nus = np.array([fn(float(z)) for fn in self._nu_fns])
        return float(np.sum(nus * phis[:, 0] * phis[:, 1]))


def _phi_matrix(spec: SynthSpec, t: np.ndarray, z: float) -> np.ndarray:
    """Eigenfunction values, shape (m_true, len(t)); orthonormal per z."""
    psi1 = np.full_like(t, np.sqrt(1.0 / PERIOD))
    psi2 = np.sqrt(1.0 / 12.0) * np.cos(2.0 * np.pi * t / PERIOD)
    psi3 = np.sqrt(1.0 / 12.0) * np.sin(2.0 * np.pi * t / PERIOD)
    theta = spec.phi_theta0 + spec.phi_theta1 * z
    ct, st = np.cos(theta), np.sin(theta)
    rows = [ct * psi1 + st * psi2]
    if spec.m_true >= 2:
        rows.append(-st * psi1 + ct * psi2)
    if spec.m_true >= 3:
        rows.append(psi3)
    return np.stack(rows[: spec.m_true])


def generate_synthetic(spec: SynthSpec):
    """Generate a dataset plus its ground truth from a spec.

    Returns
    -------
    dataset : MonitoringDataset
        One day per calendar date starting at ``spec.start_date``.
    truth : SynthTruth
        True covariate, (possibly shifted) scores, and curve callables.
    """
    rng = np.random.default_rng(spec.seed)
    t_grid = PERIOD * np.arange(1, spec.times_per_day + 1) / spec.times_per_day
    nu_fns = [_parse_curve(s) for s in spec.nu]
    temp_fn = _parse_temp_effect(spec.temp_effect)
    m = spec.m_true

    days = []
    dates = []
    z_all = np.empty(spec.n_days)
    xi_all = np.zeros((spec.n_days, m))
    shift_all = np.zeros((spec.n_days, m))
    latent = 0.0
    rho = spec.z_ar1
    for i in range(spec.n_days):
        day_id = spec.start_date + timedelta(days=i)
        eps_latent = rng.standard_normal()
        latent = rho * latent + np.sqrt(1.0 - rho * rho) * eps_latent if i else eps_latent
        amp = rng.uniform(spec.temp_amp_low, spec.temp_amp_high)
        shape = 0.5 * (1.0 - np.cos(2.0 * np.pi * (t_grid - spec.coldest_hour) / PERIOD))
        z_base = spec.z_low + (spec.z_high - spec.z_low) * float(ndtr(latent))
        temps = z_base + amp * shape
        z = float(np.min(temps))  # exact covariate, equals z_base on-grid

        nus = np.array([max(float(fn(z)), 0.0) for fn in nu_fns])
        xi = rng.standard_normal(m) * np.sqrt(nus) if m else np.zeros(0)
        in_window = (
            spec.shift_start is not None
            and spec.shift_end is not None
            and spec.shift_start <= day_id <= spec.shift_end
        )
        if in_window and spec.shift_sd:
            shift = np.zeros(m)
            for r, s_sd in enumerate(spec.shift_sd[:m]):
                shift[r] = s_sd * np.sqrt(nus[r])
            xi = xi + shift
            shift_all[i] = shift

        mu = (
            spec.alpha0
            + spec.time_amplitude * np.sin(2.0 * np.pi * t_grid / PERIOD)
            + temp_fn(temps)
        )
        u = mu.copy()
        if m:
            u += xi @ _phi_matrix(spec, t_grid, z)
        u += np.sqrt(spec.sigma2) * rng.standard_normal(spec.times_per_day)
        if in_window:
            u += spec.mean_shift

        keep = rng.random(spec.times_per_day) >= spec.missingness
        days.append(
            ProfileDay(
                day_id=day_id,
                times=t_grid[keep],
                freq_values=u[keep],
                temp_times=t_grid,
                temp_values=temps,
                z=z,
            )
        )
        dates.append(day_id)
        z_all[i] = z
        xi_all[i] = xi

    dataset = MonitoringDataset(
        tuple(days), canonical_time_grid=t_grid,
        provenance=f"synthetic seed={spec.seed}",
    )
    truth = SynthTruth(spec, tuple(dates), z_all, xi_all, shift_all)
    return dataset, truth


def save_truth(truth: SynthTruth, path) -> None:
    """Persist the ground-truth sidecar (spec + per-day arrays)."""
    meta = {
        "kind": "cdfpca-synth-truth",
        "version": 1,
        "spec": truth.spec.to_dict(),
        "dates": [d.isoformat() for d in truth.dates],
    }
    archive.write_archive(
        path, meta, {"z": truth.z, "xi": truth.xi, "shift": truth.shift}
    )


def load_truth(path) -> SynthTruth:
    meta, arrays = archive.read_archive(path)
    if meta.get("kind") != "cdfpca-synth-truth":
        raise ValidationError(f"{path} is not a truth sidecar")
    spec = SynthSpec.from_dict(meta["spec"])
    dates = tuple(date.fromisoformat(d) for d in meta["dates"])
    return SynthTruth(spec, dates, arrays["z"], arrays["xi"], arrays["shift"])
