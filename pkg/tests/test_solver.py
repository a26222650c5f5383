import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popcast.demography import AgeTimeGrid, ContractError, FertilityModel, Logistic, PolicyEvent
from popcast.solver import (
    ConfigurationError,
    Scheme,
    SolverConfig,
    VitalRateField,
    age_shares,
    band_totals,
    closed_form_decay,
    dependency_ratio,
    population_pyramid,
    read_grid_csv,
    read_pyramid_csv,
    solve,
    step_upwind,
    write_grid_csv,
    write_pyramid_csv,
)


def gaussian_ic(a):
    return 10.0 * np.exp(-0.5 * ((np.asarray(a) - 40.0) / 10.0) ** 2)


def decay_error(step, scheme=Scheme.UPWIND):
    g = AgeTimeGrid(age_step=step, t_step=step)
    cfg = SolverConfig(g, scheme, substeps=1)
    pop = solve(gaussian_ic(g.ages), cfg, VitalRateField.constant(0.02), None)
    A, T = np.meshgrid(g.ages, g.years - g.t_min)
    exact = closed_form_decay(gaussian_ic, 0.02, A, T)
    return np.linalg.norm(pop.density - exact) / np.linalg.norm(exact)


# -- single step -------------------------------------------------------------


def test_constant_state_preserved():
    ages = np.arange(0.0, 11.0)
    n = np.full(ages.shape, 3.0)
    new = step_upwind(n, 2024.0, 0.5, VitalRateField.constant(0.0), None, ages)
    # node 0 is the newborn boundary, zero without fertility
    assert np.allclose(new[2:], 3.0)


def test_one_step_decay_hand_value():
    ages = np.arange(0.0, 11.0)
    n = np.ones(ages.shape)
    n[0] = 1.0
    rates = VitalRateField.constant(0.5)
    new = step_upwind(n, 2024.0, 0.1, rates, None, ages)
    # interior nodes whose upwind neighbour is also 1: 1 - 0.1*0.5 = 0.95
    assert np.allclose(new[2:], 0.95, rtol=1e-14)


def test_births_only_from_empty_population():
    g = AgeTimeGrid()
    new = step_upwind(np.zeros(g.n_ages), 2024.0, 0.25, VitalRateField.constant(0.0),
                      FertilityModel.constant(2.0, g.years), g.ages)
    assert np.all(new == 0.0)


def test_cfl_violation():
    g = AgeTimeGrid()
    with pytest.raises(ConfigurationError):
        SolverConfig(AgeTimeGrid(age_step=0.5), substeps=1)
    with pytest.raises(ConfigurationError):
        step_upwind(np.ones(g.n_ages), 2024.0, 1.5, VitalRateField.constant(0.0), None, g.ages)


def test_characteristics_needs_matching_dt():
    with pytest.raises(ConfigurationError):
        SolverConfig(AgeTimeGrid(), Scheme.CHARACTERISTICS, substeps=4)


def test_negative_slice_rejected():
    g = AgeTimeGrid()
    n = np.ones(g.n_ages)
    n[3] = -1.0
    with pytest.raises(ContractError):
        step_upwind(n, 2024.0, 0.25, VitalRateField.constant(0.0), None, g.ages)


# -- full solve --------------------------------------------------------------


def test_zero_initial_stays_zero():
    g = AgeTimeGrid()
    pop = solve(np.zeros(g.n_ages), SolverConfig(g), VitalRateField.constant(0.02), None)
    assert np.all(pop.density == 0)


def test_matches_closed_form_at_quarter_step():
    assert decay_error(0.25) < 1e-3


def test_first_order_convergence():
    e1, e2 = decay_error(0.5), decay_error(0.25)
    assert e1 / e2 == pytest.approx(2.0, rel=0.2)


def test_characteristics_scheme_is_accurate():
    assert decay_error(1.0, Scheme.CHARACTERISTICS) < 1e-4


def test_closed_form_values():
    one = lambda a: np.ones_like(np.asarray(a, dtype=float))
    assert closed_form_decay(one, 0.1, 7.0, 5.0) == pytest.approx(math.exp(-0.5))
    assert closed_form_decay(one, 0.1, 7.0, 5.0) == pytest.approx(0.606531, abs=5e-7)
    assert closed_form_decay(gaussian_ic, 0.3, 12.0, 0.0) == pytest.approx(gaussian_ic(12.0))
    assert closed_form_decay(gaussian_ic, 0.0, 50.0, 8.0) == pytest.approx(gaussian_ic(42.0))
    assert closed_form_decay(one, 0.1, 3.0, 5.0) == 0.0
    with pytest.raises(ContractError):
        closed_form_decay(one, -0.1, 1.0, 1.0)


def test_conservation_every_step():
    g = AgeTimeGrid()
    fert = FertilityModel.constant(2.0, g.years, policies=(PolicyEvent(2024, -0.15, Logistic(0.5)),))
    ic = 20.0 * np.exp(-g.ages / 40.0)
    bal = []
    solve(ic, SolverConfig(g), VitalRateField.constant(0.01), fert, bal)
    assert len(bal) == 4 * (g.n_times - 1)
    for b in bal:
        assert abs(b.residual) <= 1e-8 * b.total_before


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 0.2), st.floats(0.0, 5.0), st.integers(1, 4))
def test_nonnegativity_preserved(mu0, beta, substeps):
    g = AgeTimeGrid(age_max=60, t_max=2034)
    ic = np.abs(np.sin(g.ages / 7.0)) * 5.0
    pop = solve(ic, SolverConfig(g, substeps=substeps), VitalRateField.constant(mu0),
                FertilityModel.constant(beta, g.years))
    assert np.all(pop.density >= 0)


def test_builtin_runtime():
    g = AgeTimeGrid()
    t = time.perf_counter()
    solve(np.ones(g.n_ages), SolverConfig(g), VitalRateField.constant(0.01),
          FertilityModel.constant(2.0, g.years))
    assert time.perf_counter() - t < 2.0


# -- summaries ---------------------------------------------------------------


def test_uniform_dependency_ratio():
    ages = np.arange(0.0, 101.0)
    assert dependency_ratio(np.ones(101), ages) == pytest.approx(51 / 50)


def test_working_age_only():
    ages = np.arange(0.0, 101.0)
    n = np.where((ages >= 15) & (ages < 65), 1.0, 0.0)
    assert dependency_ratio(n, ages) == 0.0
    assert age_shares(n, ages) == (0.0, 1.0, 0.0)


def test_no_working_age():
    ages = np.arange(0.0, 101.0)
    with pytest.raises(ZeroDivisionError):
        dependency_ratio(np.where(ages < 15, 1.0, 0.0), ages)


def test_pyramid_uniform():
    ages = np.arange(0.0, 101.0)
    rows = population_pyramid(np.ones(101), ages, 5.0, 0.5)
    assert len(rows) == 20
    for lo, hi, male, female in rows[:-1]:
        assert male + female == pytest.approx(5.0)
        assert male == female
    # the top node folds into the last band
    assert rows[-1][2] + rows[-1][3] == pytest.approx(6.0)


def test_pyramid_bad_bucket():
    with pytest.raises(ContractError):
        population_pyramid(np.ones(101), np.arange(0.0, 101.0), 7.0)


@given(st.lists(st.floats(0, 50), min_size=101, max_size=101), st.sampled_from([1.0, 5.0, 10.0, 20.0]))
def test_pyramid_partitions_slice(vals, bucket):
    ages = np.arange(0.0, 101.0)
    n = np.array(vals)
    rows = population_pyramid(n, ages, bucket)
    assert sum(r[2] + r[3] for r in rows) == pytest.approx(n.sum(), rel=1e-12, abs=1e-12)


def test_band_totals_step_weighted():
    ages = np.arange(0.0, 10.5, 0.5)
    assert band_totals(np.ones(ages.size), ages, 0, 5) == pytest.approx(5.0)


# -- CSV ---------------------------------------------------------------------


def test_grid_csv_round_trip(tmp_path):
    g = AgeTimeGrid(age_max=20, t_max=2030)
    pop = solve(np.linspace(1, 2, g.n_ages), SolverConfig(g), VitalRateField.constant(0.03),
                FertilityModel.constant(2.0, g.years))
    path = write_grid_csv(tmp_path / "grid.csv", pop)
    ages, years, dens = read_grid_csv(path)
    assert np.array_equal(ages, g.ages) and np.array_equal(years, g.years)
    assert np.array_equal(dens, pop.density)
    assert len(path.read_text().splitlines()) == 1 + g.n_ages * g.n_times


def test_pyramid_csv_round_trip(tmp_path):
    ages = np.arange(0.0, 101.0)
    n = np.linspace(30, 0, 101)
    rows = population_pyramid(n, ages, 5.0)
    back = read_pyramid_csv(write_pyramid_csv(tmp_path / "p.csv", rows))
    assert back == [tuple(map(float, r)) for r in rows]
    assert sum(r[2] + r[3] for r in back) == pytest.approx(n.sum(), abs=1e-9)


def test_grid_csv_rejects_bad_header(tmp_path):
    p = tmp_path / "g.csv"
    p.write_text("a,b,c\n")
    with pytest.raises(ContractError):
        read_grid_csv(p)
