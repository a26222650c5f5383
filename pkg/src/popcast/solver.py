"""Finite-difference reference solver for the age-structured transport
equation ``n_t + n_a = -mu n + S`` with the newborn boundary ``n(0, t) = B(t)``.

Node 0 of every age slice holds the newborn density; nodes 1..N are
advanced by first-order upwind differencing in age with explicit Euler in
time. Mass carried past ``age_max`` leaves the domain.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from .demography import (
    FEMALE_FRACTION,
    AgeTimeGrid,
    ContractError,
    FertilityModel,
    PopulationGrid,
    birth_inflow,
)


class ConfigurationError(ValueError):
    pass


class Scheme(str, Enum):
    UPWIND = "upwind"
    CHARACTERISTICS = "characteristics"


@dataclass(frozen=True)
class SolverConfig:
    grid: AgeTimeGrid
    scheme: Scheme = Scheme.UPWIND
    substeps: int = 4

    def __post_init__(self):
        if self.substeps < 1:
            raise ConfigurationError("substeps must be >= 1")
        if self.dt > self.grid.age_step * (1 + 1e-12):
            raise ConfigurationError(
                f"CFL violated: internal dt={self.dt} exceeds age step {self.grid.age_step}"
            )
        if self.scheme is Scheme.CHARACTERISTICS and abs(self.dt - self.grid.age_step) > 1e-12:
            raise ConfigurationError("characteristics scheme needs internal dt equal to the age step")

    @property
    def dt(self) -> float:
        return self.grid.t_step / self.substeps


def _zeros(a, t):
    return np.zeros_like(np.asarray(a, dtype=float))


@dataclass(frozen=True)
class VitalRateField:
    """Mortality ``mu_eval(ages, t)`` and interior source ``birth_eval(ages, t)``.

    Newborns normally enter through the boundary; ``birth_eval`` is an
    additional distributed source and defaults to zero. ``migration_rate``
    is a constant per-capita net migration rate.
    """

    mu_eval: Callable
    birth_eval: Callable = _zeros
    migration_rate: float = 0.0
    female_fraction: float = FEMALE_FRACTION

    @classmethod
    def from_mortality(cls, mortality, **kw) -> "VitalRateField":
        return cls(mortality.rate, **kw)

    @classmethod
    def constant(cls, mu0: float, **kw) -> "VitalRateField":
        return cls(lambda a, t: np.full(np.shape(a), float(mu0)), **kw)


@dataclass(frozen=True)
class StepBalance:
    """Per-step flows for the interior nodes, all in millions."""

    t: float
    total_before: float
    total_after: float
    births: float
    deaths: float
    outflow: float
    source: float

    @property
    def residual(self) -> float:
        return (self.total_after - self.total_before) - (
            self.births - self.deaths - self.outflow + self.source
        )


def _births(n, ages, t, fert, rates) -> float:
    if fert is None:
        return 0.0
    return birth_inflow(n, ages, t, fert, rates.female_fraction)


def _advance(n, ages, t, dt, rates, fert, scheme=Scheme.UPWIND):
    da = ages[1] - ages[0]
    mu = np.asarray(rates.mu_eval(ages, t), dtype=float)
    if np.any(mu < 0):
        raise ContractError("mortality must be nonnegative")
    src = np.asarray(rates.birth_eval(ages, t), dtype=float)
    if np.any(src < 0):
        raise ContractError("interior birth source must be nonnegative")
    net = mu - rates.migration_rate
    inflow = _births(n, ages, t, fert, rates)
    interior = n[1:]
    left = np.concatenate(([inflow], n[1:-1]))
    new = np.empty_like(n)
    if scheme is Scheme.UPWIND:
        if dt * float(np.max(np.abs(net[1:]))) > 1.0:
            raise ConfigurationError("dt * mortality exceeds 1; raise substeps")
        # reaction acts on the transported value, keeping every node >= 0
        moved = interior - (dt / da) * (interior - left)
        loss = dt * net[1:] * moved
        new[1:] = moved - loss + dt * src[1:]
        deaths = da * float(np.sum(loss))
        outflow = dt * float(n[-1])
    else:
        # exact shift along characteristics, trapezoid hazard along the path
        mu_next = np.asarray(rates.mu_eval(ages, t + dt), dtype=float) - rates.migration_rate
        surv = np.exp(-0.5 * dt * (net[:-1] + mu_next[1:]))
        new[1:] = left * surv + dt * src[1:]
        deaths = da * float(np.sum(left * (1.0 - surv)))
        outflow = da * float(n[-1])
        loss = None
    new[0] = _births(np.maximum(new, 0.0), ages, t + dt, fert, rates) if fert is not None else 0.0
    if scheme is Scheme.UPWIND:
        births_in = dt * inflow
    else:
        births_in = da * inflow
    bal = StepBalance(
        t=t,
        total_before=da * float(np.sum(interior)),
        total_after=da * float(np.sum(new[1:])),
        births=births_in,
        deaths=deaths,
        outflow=outflow,
        source=dt * da * float(np.sum(src[1:])),
    )
    return new, bal


def step_upwind(n_col, t, dt, rates: VitalRateField, fert: FertilityModel | None, ages):
    """Advance one age slice by ``dt``; returns the new slice."""
    n_col = np.asarray(n_col, dtype=float)
    ages = np.asarray(ages, dtype=float)
    if n_col.shape != ages.shape:
        raise ContractError("age slice length does not match age grid")
    if np.any(n_col < 0):
        raise ContractError("negative density in age slice")
    if dt > (ages[1] - ages[0]) * (1 + 1e-12):
        raise ConfigurationError("CFL violated: dt exceeds the age step")
    return _advance(n_col, ages, t, dt, rates, fert)[0]


def solve(initial, cfg: SolverConfig, rates: VitalRateField, fert: FertilityModel | None,
          balances: list | None = None) -> PopulationGrid:
    """Integrate from ``grid.t_min``; stored rows are the grid years.

    If ``balances`` is a list, one ``StepBalance`` per internal step is
    appended to it.
    """
    grid = cfg.grid
    ages = grid.ages
    n = np.asarray(initial, dtype=float).copy()
    if n.shape != ages.shape:
        raise ContractError("initial slice length does not match age grid")
    if np.any(n < 0):
        raise ContractError("initial density must be nonnegative")
    out = np.empty((grid.n_times, grid.n_ages))
    out[0] = n
    dt = cfg.dt
    for k in range(1, grid.n_times):
        t0 = grid.t_min + (k - 1) * grid.t_step
        for j in range(cfg.substeps):
            n, bal = _advance(n, ages, t0 + j * dt, dt, rates, fert, cfg.scheme)
            if balances is not None:
                balances.append(bal)
        out[k] = n
    return PopulationGrid(grid, out)


def closed_form_decay(initial_fn, mu0, a, t_elapsed):
    """Characteristics solution for constant mortality and no births:
    ``n0(a - t) exp(-mu0 t)`` for ``a >= t``, zero below the first cohort."""
    if mu0 < 0:
        raise ContractError("mu0 must be nonnegative")
    a = np.asarray(a, dtype=float)
    t = np.asarray(t_elapsed, dtype=float)
    shifted = a - t
    val = np.where(shifted >= 0, initial_fn(np.maximum(shifted, 0.0)) * np.exp(-mu0 * t), 0.0)
    return float(val) if val.ndim == 0 else val


# -- summaries ---------------------------------------------------------------


def band_totals(n_col, ages, lo, hi) -> float:
    """Population (millions) at nodes with ``lo <= age < hi``."""
    ages = np.asarray(ages, dtype=float)
    da = ages[1] - ages[0]
    mask = (ages >= lo - 1e-9) & (ages < hi - 1e-9)
    return float(da * np.sum(np.asarray(n_col, dtype=float)[mask]))


def age_shares(n_col, ages) -> tuple[float, float, float]:
    """Fractions aged 0-14, 15-64 and 65+."""
    young = band_totals(n_col, ages, -np.inf, 15)
    work = band_totals(n_col, ages, 15, 65)
    old = band_totals(n_col, ages, 65, np.inf)
    total = young + work + old
    return young / total, work / total, old / total


def dependency_ratio(n_col, ages) -> float:
    work = band_totals(n_col, ages, 15, 65)
    if work <= 0:
        raise ZeroDivisionError("no working-age population")
    young = band_totals(n_col, ages, -np.inf, 15)
    old = band_totals(n_col, ages, 65, np.inf)
    return (young + old) / work


def population_pyramid(n_col, ages, bucket: float, female_fraction: float = FEMALE_FRACTION):
    """Rows ``(band_lo, band_hi, male, female)`` in millions.

    Bands are ``[lo, lo + bucket)``; the top age node joins the last band so
    the bands partition the slice.
    """
    ages = np.asarray(ages, dtype=float)
    n_col = np.asarray(n_col, dtype=float)
    span = ages[-1] - ages[0]
    k = span / bucket
    if bucket <= 0 or abs(k - round(k)) > 1e-9:
        raise ContractError("bucket must divide the age span")
    da = ages[1] - ages[0]
    idx = np.minimum(np.floor((ages - ages[0]) / bucket + 1e-9).astype(int), int(round(k)) - 1)
    totals = np.bincount(idx, weights=n_col * da, minlength=int(round(k)))
    rows = []
    for b, tot in enumerate(totals):
        lo = ages[0] + b * bucket
        rows.append((lo, lo + bucket, tot * (1.0 - female_fraction), tot * female_fraction))
    return rows


# -- CSV exports -------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_grid_csv(path, pop: PopulationGrid) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["age", "year", "density"])
        for i, year in enumerate(pop.grid.years):
            for k, age in enumerate(pop.grid.ages):
                w.writerow([_fmt(age), _fmt(year), _fmt(pop.density[i, k])])
    return path


def read_grid_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(ages, years, density[year, age])``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader) != ["age", "year", "density"]:
            raise ContractError(f"{path}: expected header age,year,density")
        recs = [(float(a), float(y), float(d)) for a, y, d in reader]
    ages = np.array(sorted({r[0] for r in recs}))
    years = np.array(sorted({r[1] for r in recs}))
    dens = np.full((len(years), len(ages)), np.nan)
    ai = {a: k for k, a in enumerate(ages)}
    yi = {y: k for k, y in enumerate(years)}
    for a, y, d in recs:
        dens[yi[y], ai[a]] = d
    if np.isnan(dens).any():
        raise ContractError(f"{path}: incomplete grid")
    return ages, years, dens


def write_pyramid_csv(path, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["band_lo", "band_hi", "male", "female"])
        for lo, hi, male, female in rows:
            w.writerow([_fmt(lo), _fmt(hi), _fmt(male), _fmt(female)])
    return path


def read_pyramid_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader) != ["band_lo", "band_hi", "male", "female"]:
            raise ContractError(f"{path}: expected header band_lo,band_hi,male,female")
        return [tuple(float(v) for v in row) for row in reader]
