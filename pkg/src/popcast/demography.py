"""Demographic building blocks: age-time lattice, fertility with policy
perturbations, parametric mortality, and the newborn boundary integral.

Densities are in millions of persons per year of age; rates are per year.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

FEMALE_FRACTION = 0.48

_TOL = 1e-9


class ContractError(ValueError):
    """Raised when an input violates a documented precondition."""


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgeTimeGrid:
    age_min: float = 0.0
    age_max: float = 100.0
    age_step: float = 1.0
    t_min: float = 2024.0
    t_max: float = 2054.0
    t_step: float = 1.0

    def __post_init__(self):
        if not self.age_min < self.age_max:
            raise ContractError("age_min must be < age_max")
        if not self.t_min < self.t_max:
            raise ContractError("t_min must be < t_max")
        if self.age_step <= 0 or self.t_step <= 0:
            raise ContractError("grid steps must be positive")
        for span, step, name in (
            (self.age_max - self.age_min, self.age_step, "age"),
            (self.t_max - self.t_min, self.t_step, "time"),
        ):
            k = span / step
            if abs(k - round(k)) > 1e-9 * max(1.0, k):
                raise ContractError(f"{name} span is not a multiple of its step")

    @property
    def n_ages(self) -> int:
        return int(round((self.age_max - self.age_min) / self.age_step)) + 1

    @property
    def n_times(self) -> int:
        return int(round((self.t_max - self.t_min) / self.t_step)) + 1

    @property
    def ages(self) -> np.ndarray:
        return self.age_min + self.age_step * np.arange(self.n_ages)

    @property
    def years(self) -> np.ndarray:
        return self.t_min + self.t_step * np.arange(self.n_times)


@dataclass
class PopulationGrid:
    """Density n(a, t) stored as ``density[time_index, age_index]``."""

    grid: AgeTimeGrid
    density: np.ndarray

    def __post_init__(self):
        self.density = np.asarray(self.density, dtype=float)
        if self.density.shape != (self.grid.n_times, self.grid.n_ages):
            raise ContractError(
                f"density shape {self.density.shape} does not match grid "
                f"({self.grid.n_times}, {self.grid.n_ages})"
            )
        if np.any(self.density < 0):
            raise ContractError("population densities must be nonnegative")

    def slice_at(self, year: float) -> np.ndarray:
        idx = int(round((year - self.grid.t_min) / self.grid.t_step))
        if not 0 <= idx < self.grid.n_times:
            raise KeyError(year)
        return self.density[idx]


# -- fertility ---------------------------------------------------------------


@dataclass(frozen=True)
class FertilityWindow:
    mu: float = 28.0
    sigma: float = 6.0
    a_lo: float = 15.0
    a_hi: float = 49.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ContractError("sigma must be positive")
        if not self.a_lo < self.a_hi:
            raise ContractError("a_lo must be < a_hi")


def fertility_window_value(a, w: FertilityWindow):
    """Gaussian fertility schedule truncated to ``[w.a_lo, w.a_hi]``."""
    a = np.asarray(a, dtype=float)
    peak = 1.0 / (w.sigma * math.sqrt(2.0 * math.pi))
    g = peak * np.exp(-((a - w.mu) ** 2) / (2.0 * w.sigma**2))
    inside = (a >= w.a_lo) & (a <= w.a_hi)
    out = np.where(inside, g, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Logistic:
    gamma: float

    def __post_init__(self):
        if self.gamma <= 0:
            raise ContractError("logistic gamma must be positive")

    def __call__(self, x):
        # 0.5 * (1 + tanh(x/2)) is the overflow-safe logistic
        return 0.5 * (1.0 + np.tanh(0.5 * self.gamma * np.asarray(x, dtype=float)))


@dataclass(frozen=True)
class ExpDecay:
    rate: float

    def __post_init__(self):
        if self.rate <= 0:
            raise ContractError("decay rate must be positive")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x >= 0, np.exp(-self.rate * np.maximum(x, 0.0)), 0.0)


@dataclass(frozen=True)
class PolicyEvent:
    t_k: float
    alpha_k: float
    kernel: Logistic | ExpDecay


def policy_signal(t, policies: Sequence[PolicyEvent]):
    """Sum of signed policy responses ``alpha_k * h_k(t - t_k)``."""
    t = np.asarray(t, dtype=float)
    total = np.zeros_like(t)
    for ev in policies:
        total = total + ev.alpha_k * ev.kernel(t - ev.t_k)
    return float(total) if total.ndim == 0 else total


def default_theta(window: FertilityWindow = FertilityWindow()) -> tuple[np.ndarray, np.ndarray]:
    """Trapezoidal age weighting: 0 at the window edges and a plateau over
    ages 20-30 equal to the window's peak value, so ``P(t)`` acts as a
    fractional change in peak-age fertility."""
    ages = np.array([window.a_lo, 20.0, 30.0, window.a_hi])
    peak = float(fertility_window_value(window.mu, window))
    return ages, np.array([0.0, peak, peak, 0.0])


@dataclass
class FertilityModel:
    beta_years: np.ndarray
    beta_values: np.ndarray
    window: FertilityWindow = field(default_factory=FertilityWindow)
    theta_ages: np.ndarray | None = None
    theta_values: np.ndarray | None = None
    policies: tuple[PolicyEvent, ...] = ()

    def __post_init__(self):
        self.beta_years = np.atleast_1d(np.asarray(self.beta_years, dtype=float))
        self.beta_values = np.atleast_1d(np.asarray(self.beta_values, dtype=float))
        if self.beta_years.shape != self.beta_values.shape:
            raise ContractError("beta table years/values length mismatch")
        if np.any(self.beta_values < 0):
            raise ContractError("beta must be nonnegative")
        if self.theta_ages is None:
            self.theta_ages, self.theta_values = default_theta(self.window)
        self.theta_ages = np.asarray(self.theta_ages, dtype=float)
        self.theta_values = np.asarray(self.theta_values, dtype=float)
        if np.any(self.theta_values < 0):
            raise ContractError("theta must be nonnegative")
        self.policies = tuple(self.policies)

    @classmethod
    def constant(cls, beta: float, years, **kw) -> "FertilityModel":
        years = np.asarray(years, dtype=float)
        return cls(years, np.full(years.shape, float(beta)), **kw)

    def beta(self, t):
        return np.interp(t, self.beta_years, self.beta_values)

    def theta(self, a):
        a = np.asarray(a, dtype=float)
        w = self.window
        val = np.interp(a, self.theta_ages, self.theta_values, left=0.0, right=0.0)
        return np.where((a >= w.a_lo) & (a <= w.a_hi), val, 0.0)

    def without_policies(self) -> "FertilityModel":
        return replace(self, policies=())


def fertility(a, t: float, m: FertilityModel):
    """Policy-aware fertility ``max(0, beta(t) g(a) + theta(a) P(t))``."""
    base = m.beta(t) * fertility_window_value(a, m.window)
    f = np.maximum(0.0, base + m.theta(a) * policy_signal(t, m.policies))
    return float(f) if np.ndim(f) == 0 else f


def _window_nodes(ages: np.ndarray, w: FertilityWindow) -> np.ndarray:
    return (ages >= w.a_lo - _TOL) & (ages <= w.a_hi + _TOL)


def total_fertility_rate(t: float, m: FertilityModel, grid: AgeTimeGrid) -> float:
    ages = grid.ages[_window_nodes(grid.ages, m.window)]
    if ages.size < 2:
        return 0.0
    return float(np.trapezoid(fertility(ages, t, m), ages))


def calibrate_beta(target_tfr, m: FertilityModel, grid: AgeTimeGrid) -> FertilityModel:
    """Return a copy of ``m`` whose beta path reproduces ``target_tfr``.

    ``target_tfr`` is one value per grid year. Without policies the rate is
    linear in beta, so each year is solved by a single division against the
    quadrature mass of the fertility window; policies are reattached after.
    """
    target = np.asarray(target_tfr, dtype=float)
    years = grid.years
    if target.shape != years.shape:
        raise ContractError("target TFR path must give one value per grid year")
    if np.any(target < 0):
        raise ContractError("target TFR must be nonnegative")
    unit = replace(m.without_policies(), beta_years=years, beta_values=np.ones_like(years))
    mass = np.array([total_fertility_rate(t, unit, grid) for t in years])
    if np.any(mass <= 0):
        raise CalibrationError("fertility window has zero quadrature mass on this grid")
    return replace(m, beta_years=years.copy(), beta_values=target / mass)


def birth_inflow(n_col, ages, t: float, m: FertilityModel,
                 female_fraction: float = FEMALE_FRACTION) -> float:
    """Newborns per year (millions) produced by the age slice ``n_col``."""
    n_col = np.asarray(n_col, dtype=float)
    ages = np.asarray(ages, dtype=float)
    if n_col.shape != ages.shape:
        raise ContractError("age slice length does not match age grid")
    if np.any(n_col < 0):
        raise ContractError("negative density in age slice")
    mask = _window_nodes(ages, m.window)
    if mask.sum() < 2:
        return 0.0
    a = ages[mask]
    return female_fraction * float(np.trapezoid(fertility(a, t, m) * n_col[mask], a))


# -- mortality ---------------------------------------------------------------


@dataclass(frozen=True)
class MortalityModel:
    """Infant exponential + Makeham constant + Gompertz term, improving by
    ``drift`` per year after ``t_ref``."""

    c_infant: float = 0.027430598543203812
    d_infant: float = 1.4035013506020042
    c_base: float = 0.0005055564953113334
    c_old: float = 6.673213619174089e-05
    d_old: float = 0.08837296676013656
    drift: float = 0.01
    t_ref: float = 2024.0

    def rate(self, a, t):
        a = np.asarray(a, dtype=float)
        shape = (
            self.c_infant * np.exp(-self.d_infant * a)
            + self.c_base
            + self.c_old * np.exp(self.d_old * a)
        )
        return shape * (1.0 - self.drift) ** (np.asarray(t, dtype=float) - self.t_ref)


def mortality_rate(a, t, m) -> float:
    r = m.rate(a, t)
    return float(r) if np.ndim(r) == 0 else r


# Abridged life table (age band start, central death rate) in the shape of
# a recent South Asian national schedule; the default MortalityModel
# constants come from fit_mortality() on this table.
ABRIDGED_LIFE_TABLE = (
    (0, 1, 0.0280), (1, 5, 0.0010), (5, 10, 0.0006), (10, 15, 0.0006),
    (15, 20, 0.0009), (20, 25, 0.0012), (25, 30, 0.0014), (30, 35, 0.0017),
    (35, 40, 0.0022), (40, 45, 0.0031), (45, 50, 0.0046), (50, 55, 0.0072),
    (55, 60, 0.0110), (60, 65, 0.0170), (65, 70, 0.0265), (70, 75, 0.0420),
    (75, 80, 0.0660), (80, 85, 0.1050), (85, 90, 0.1600), (90, 95, 0.2400),
    (95, 100, 0.3400),
)


def fit_mortality(table=ABRIDGED_LIFE_TABLE, drift: float = 0.01,
                  t_ref: float = 2024.0) -> MortalityModel:
    """Least-squares fit of the parametric schedule to an abridged table in
    log space. Age 0 is matched at exact age 0, other bands at midpoints."""
    from scipy.optimize import least_squares

    lo = np.array([r[0] for r in table], dtype=float)
    hi = np.array([r[1] for r in table], dtype=float)
    target = np.log(np.array([r[2] for r in table], dtype=float))
    ages = np.where(lo == 0, 0.0, 0.5 * (lo + hi))

    def resid(p):
        ci, di, cb, co, do = np.exp(p)
        return np.log(ci * np.exp(-di * ages) + cb + co * np.exp(do * ages)) - target

    x0 = np.log([0.027, 1.3, 0.001, 1e-4, 0.08])
    sol = least_squares(resid, x0, xtol=1e-14, ftol=1e-14, gtol=1e-14)
    ci, di, cb, co, do = np.exp(sol.x)
    return MortalityModel(ci, di, cb, co, do, drift=drift, t_ref=t_ref)


@dataclass(frozen=True)
class TabulatedRates:
    """Rates on an (age, year) table with bilinear interpolation, clamped
    to the table edges."""

    ages: np.ndarray
    years: np.ndarray
    values: np.ndarray  # shape (len(years), len(ages))

    def rate(self, a, t):
        a = np.asarray(a, dtype=float)
        t = float(t)
        j = np.searchsorted(self.years, t)
        if j <= 0:
            return np.interp(a, self.ages, self.values[0])
        if j >= len(self.years):
            return np.interp(a, self.ages, self.values[-1])
        t0, t1 = self.years[j - 1], self.years[j]
        w = (t - t0) / (t1 - t0)
        r0 = np.interp(a, self.ages, self.values[j - 1])
        r1 = np.interp(a, self.ages, self.values[j])
        return (1 - w) * r0 + w * r1


def read_schedule_csv(path) -> TabulatedRates:
    rows: dict[tuple[int, int], float] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["age", "year", "rate"]:
            raise ContractError(f"{path}: expected header age,year,rate")
        for rec in reader:
            rate = float(rec["rate"])
            if not math.isfinite(rate) or rate < 0:
                raise ContractError(f"{path}: invalid rate {rec['rate']!r}")
            rows[int(rec["age"]), int(rec["year"])] = rate
    if not rows:
        raise ContractError(f"{path}: empty schedule")
    ages = sorted({a for a, _ in rows})
    years = sorted({y for _, y in rows})
    values = np.empty((len(years), len(ages)))
    for i, y in enumerate(years):
        for k, a in enumerate(ages):
            try:
                values[i, k] = rows[a, y]
            except KeyError:
                raise ContractError(f"{path}: missing entry age={a} year={y}") from None
    return TabulatedRates(np.array(ages, float), np.array(years, float), values)


def write_schedule_csv(path, rates, ages, years) -> Path:
    """Tabulate ``rates.rate(a, t)`` at integer ages/years and write CSV."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["age", "year", "rate"])
        for y in years:
            vals = np.atleast_1d(rates.rate(np.asarray(ages, float), y))
            for a, v in zip(ages, vals):
                w.writerow([int(a), int(y), repr(float(v))])
    return path


def migration_source(n_col, per_capita_rate: float = 0.0):
    """Exogenous net migration as a constant per-capita rate."""
    return per_capita_rate * np.asarray(n_col, dtype=float)
