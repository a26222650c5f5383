import csv
import json
import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popcast import scenarios as sc
from popcast.demography import AgeTimeGrid, policy_signal, total_fertility_rate
from popcast.explain import Explanation
from popcast.nn import Checkpoint, zero_mlp
from popcast.pinn import LossHistory, TrainingDiverged
from popcast.solver import age_shares, dependency_ratio, read_grid_csv, read_pyramid_csv

TINY_TRAIN = "[train]\nepochs_adam = 3\nn_interior = 32\nn_ic = 8\nn_bc = 4\nn_data = 8\nwidths = 2, 8, 1\n"


@pytest.fixture(scope="module")
def solver_reports():
    return {c.name: sc.run_scenario(c, "solver") for c in sc.builtin_scenarios()}


# -- config ------------------------------------------------------------------


def test_default_parse_is_baseline():
    assert sc.parse_config("") == sc.ScenarioConfig()


@pytest.mark.parametrize("cfg", sc.builtin_scenarios(), ids=lambda c: c.name)
def test_round_trip_builtins(cfg):
    text = sc.dump_config(cfg)
    back = sc.parse_config(text)
    assert back == cfg
    assert sc.dump_config(back) == text


@settings(max_examples=30, deadline=None)
@given(
    st.floats(0.5, 3.0), st.floats(0.5, 3.0), st.integers(2030, 2060),
    st.lists(st.tuples(st.integers(2024, 2054), st.floats(-0.5, 0.5), st.sampled_from(["logistic", "expdecay"]),
                       st.floats(0.05, 2.0)), max_size=3),
    st.integers(1, 8), st.integers(0, 2**32 - 1),
)
def test_round_trip_property(start, end, end_year, events, substeps, seed):
    pol = "; ".join(f"{y} {a!r} {k} {p!r}" for y, a, k, p in events)
    text = (f"[fertility]\ntfr = linear {start!r} {end!r} {end_year}\npolicies = {pol}\n"
            f"[grid]\nsubsteps = {substeps}\n[train]\nseed = {seed}\n")
    cfg = sc.parse_config(text)
    assert sc.parse_config(sc.dump_config(cfg)) == cfg


@pytest.mark.parametrize("text", [
    "[scenario]\ncolour = red\n",
    "[bogus]\nx = 1\n",
    "[fertility]\ntfr = cubic 1 2\n",
    "[fertility]\npolicies = 2024 -0.1 gaussian 1\n",
    "[grid]\nscheme = spectral\n",
    "[grid]\nsubsteps = 0\n",
    "[grid]\nsubsteps = 1\nage_step = 0.5\n",
    "[train]\nepochs_adam = many\n",
    "[initial]\nspec = census\n",
    "[initial]\nshares = 1, 2\n",
    "[outputs]\nheatmap = maybe\n",
    "[mortality]\nschedule = x.csv\ndrift = 0.0\n",
])
def test_rejects_bad_config(text):
    with pytest.raises(sc.ConfigError):
        sc.parse_config(text)


def test_env_override():
    cfg = sc.parse_config("[train]\nseed = 1\n", env={"POPCAST_TRAIN_SEED": "42", "OTHER": "x"})
    assert cfg.train.seed == 42


def test_env_override_with_underscored_key():
    cfg = sc.parse_config("", env={"POPCAST_SCENARIO_MIGRATION_RATE": "-0.0004"})
    assert cfg.migration_rate == -0.0004


def test_env_override_unknown_key():
    with pytest.raises(sc.ConfigError):
        sc.parse_config("", env={"POPCAST_TRAIN_SPEED": "9"})


def test_load_config_file(tmp_path):
    p = tmp_path / "s.ini"
    p.write_text(sc.dump_config(sc.get_builtin("declining")))
    assert sc.load_config(p) == sc.get_builtin("declining")


# -- built-ins ---------------------------------------------------------------


def test_builtin_names():
    assert [c.name for c in sc.builtin_scenarios()] == [
        "baseline", "declining", "boost", "two-child", "enhanced-planning"]
    with pytest.raises(KeyError):
        sc.get_builtin("nope")


def test_baseline_tfr_2040():
    cfg = sc.get_builtin("baseline")
    assert total_fertility_rate(2040.0, sc.fertility_model(cfg), cfg.grid) == pytest.approx(2.0, abs=1e-12)


def test_declining_tfr_2054():
    cfg = sc.get_builtin("declining")
    assert total_fertility_rate(2054.0, sc.fertility_model(cfg), cfg.grid) == pytest.approx(1.6, abs=1e-6)


def test_boost_holds_after_2034():
    cfg = sc.get_builtin("boost")
    m = sc.fertility_model(cfg)
    assert total_fertility_rate(2029.0, m, cfg.grid) == pytest.approx(2.1, abs=1e-9)
    assert total_fertility_rate(2045.0, m, cfg.grid) == pytest.approx(2.2, abs=1e-9)


def test_two_child_signal_at_start():
    m = sc.fertility_model(sc.get_builtin("two-child"))
    assert policy_signal(2024.0, m.policies) == pytest.approx(-0.075, abs=1e-15)


def test_policy_scenarios_keep_fertility_positive():
    for name in ("two-child", "enhanced-planning"):
        cfg = sc.get_builtin(name)
        m = sc.fertility_model(cfg)
        tfr = [total_fertility_rate(t, m, cfg.grid) for t in cfg.grid.years]
        assert min(tfr) > 1.0


def test_tfr_table(tmp_path):
    p = tmp_path / "tfr.csv"
    p.write_text("year,tfr\n2024,2.0\n2054,1.4\n")
    cfg = sc.parse_config(f"[fertility]\ntfr = table {p}\n")
    assert total_fertility_rate(2039.0, sc.fertility_model(cfg), cfg.grid) == pytest.approx(1.7, abs=1e-9)
    p.write_text("year,tfr\n2024,-1\n")
    with pytest.raises(sc.IngestionError):
        sc.fertility_model(cfg)


# -- initial condition -------------------------------------------------------


def test_parametric_shares():
    g = AgeTimeGrid()
    n = sc.build_initial_condition("parametric", g)
    shares = np.array(age_shares(n, g.ages)) * 100
    assert np.all(np.abs(shares - np.array([24.3, 68.0, 7.2])) < 0.5)
    assert np.sum(n) * g.age_step == pytest.approx(1440.0, rel=1e-12)
    assert np.all(n >= 0)


def test_initial_table(tmp_path):
    g = AgeTimeGrid(age_max=4)
    p = tmp_path / "ic.csv"
    p.write_text("age,density\n" + "".join(f"{a},{10 - a}\n" for a in range(5)))
    assert np.array_equal(sc.build_initial_condition(f"table {p}", g), [10, 9, 8, 7, 6])


@pytest.mark.parametrize("body", ["0,0\n1,0\n2,0\n3,0\n4,0\n", "0,1\n1,-1\n2,1\n3,1\n4,1\n", "0,1\n1,1\n"])
def test_initial_table_rejects(tmp_path, body):
    p = tmp_path / "ic.csv"
    p.write_text("age,density\n" + body)
    with pytest.raises(sc.IngestionError):
        sc.build_initial_condition(f"table {p}", AgeTimeGrid(age_max=4))


# -- running -----------------------------------------------------------------


def test_all_builtins_solver_under_ten_seconds():
    t = time.perf_counter()
    for cfg in sc.builtin_scenarios():
        sc.run_scenario(cfg, "solver")
    assert time.perf_counter() - t < 10.0


def test_baseline_2024_dependency(solver_reports):
    path = solver_reports["baseline"].dependency_path
    assert path[0][0] == 2024.0
    assert path[0][1] == pytest.approx(0.463, abs=0.02)


@pytest.mark.xfail(strict=True, reason="solver gives the opposite order; analysed in the decisions ledger")
def test_declining_dependency_above_baseline(solver_reports):
    assert solver_reports["declining"].dependency_final > solver_reports["baseline"].dependency_final


def test_declining_old_age_dependency_above_baseline(solver_reports):
    r = solver_reports
    assert r["declining"].old_age_dependency_final > r["baseline"].old_age_dependency_final


def test_youth_ordering(solver_reports):
    r = solver_reports
    assert r["declining"].shares_final[0] < r["baseline"].shares_final[0] < r["boost"].shares_final[0]


def test_reports_deterministic(tmp_path):
    cfg = sc.parse_config(TINY_TRAIN)
    a = sc.run_scenario(cfg, "pinn", tmp_path / "a", seed=5)
    b = sc.run_scenario(cfg, "pinn", tmp_path / "b", seed=5)
    assert a.content() == b.content()
    for key, path in a.artifacts.items():
        if key == "report":
            continue
        assert path.read_bytes() == b.artifacts[key].read_bytes(), key


def test_pinn_zero_epochs_smoke(tmp_path):
    cfg = sc.parse_config(TINY_TRAIN)
    r = sc.run_scenario(cfg, "pinn", tmp_path, epochs=0)
    assert r.final_losses == {} and not r.failed
    assert r.population.density.shape == (31, 101)
    assert (tmp_path / "baseline_pinn_report.json").exists()


def test_hybrid_mode_runs(tmp_path):
    cfg = sc.parse_config(TINY_TRAIN)
    r = sc.run_scenario(cfg, "hybrid", tmp_path)
    ck = Checkpoint.load(r.artifacts["checkpoint"])
    assert ck.lstm is not None and set(r.final_losses) == {"total", "pde", "ic", "bc", "data"}


def test_training_abort_flags_failure(tmp_path, monkeypatch):
    def boom(cfg, problem):
        raise TrainingDiverged(7, LossHistory(), zero_mlp((2, 8, 1)))

    monkeypatch.setattr(sc, "train_pinn", boom)
    r = sc.run_scenario(sc.parse_config(TINY_TRAIN), "pinn", tmp_path)
    assert r.failed and "epoch 7" in r.message
    assert r.artifacts["checkpoint"].exists()
    assert json.loads(r.artifacts["report"].read_text())["failed"] is True


def test_unknown_mode():
    with pytest.raises(sc.ConfigError):
        sc.run_scenario(sc.ScenarioConfig(), "oracle")


def test_emitted_csvs_reparse(tmp_path):
    cfg = sc.parse_config(TINY_TRAIN)
    r = sc.run_scenario(cfg, "pinn", tmp_path)
    ages, years, dens = read_grid_csv(r.artifacts["heatmap"])
    assert np.array_equal(dens, r.population.density)
    rows = read_pyramid_csv(r.artifacts["pyramid_2054"])
    assert sum(m + f for _, _, m, f in rows) == pytest.approx(r.population.density[-1].sum(), abs=1e-9)
    assert LossHistory.from_csv(r.artifacts["losses"]) == r.history
    with open(r.artifacts["dependency"]) as fh:
        dep = list(csv.DictReader(fh))
    assert float(dep[-1]["dependency_ratio"]) == r.dependency_final
    Explanation(**json.loads(r.artifacts["explain_30_2039_json"].read_text()))


# -- comparison and exports --------------------------------------------------


def test_compare_identical_reports(solver_reports):
    r = solver_reports["baseline"]
    table = sc.compare_scenarios([r, r])
    deltas = table.rows[1][2 + len(sc.COMPARE_COLUMNS):]
    assert all(d == 0 for d in deltas)


def test_compare_needs_two(solver_reports):
    with pytest.raises(sc.ComparisonError):
        sc.compare_scenarios([solver_reports["baseline"]])


def test_compare_grid_mismatch(solver_reports):
    other = sc.run_scenario(replace(sc.ScenarioConfig(), grid=AgeTimeGrid(t_max=2044)), "solver")
    with pytest.raises(sc.ComparisonError):
        sc.compare_scenarios([solver_reports["baseline"], other])


def test_compare_checks_and_csv(solver_reports, tmp_path):
    table = sc.compare_scenarios(list(solver_reports.values()))
    assert table.checks["young_pop_final: declining < baseline < boost"]
    assert table.checks["young_share_final: two-child strictly between baseline and enhanced-planning"]
    path = table.to_csv(tmp_path / "cmp.csv")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["scenario"] for r in rows] == list(solver_reports)
    checks = (tmp_path / "cmp_checks.csv").read_text().splitlines()
    assert checks[0] == "check,holds" and len(checks) == 1 + len(table.checks)


def test_heatmap_row_count(solver_reports, tmp_path):
    path = sc.export_heatmap_grid(solver_reports["baseline"], tmp_path / "h.csv")
    assert len(path.read_text().splitlines()) == 1 + 101 * 31


def test_empty_loss_history_export(tmp_path):
    path = sc.export_loss_curves(LossHistory(), tmp_path / "l.csv")
    assert path.read_text() == "epoch,total,pde,ic,bc,data\n"


def test_missing_artifacts(solver_reports, tmp_path):
    with pytest.raises(sc.ExportError):
        sc.export_loss_curves(solver_reports["baseline"], tmp_path / "l.csv")
    with pytest.raises(sc.ExportError):
        sc.export_heatmap_grid(object(), tmp_path / "h.csv")
    with pytest.raises(sc.ExportError):
        sc.export_pyramid(solver_reports["baseline"], tmp_path / "p.csv", 2100)


def test_pyramid_export_resums(solver_reports, tmp_path):
    pop = solver_reports["baseline"].population
    rows = read_pyramid_csv(sc.export_pyramid(pop, tmp_path / "p.csv", 2040))
    assert sum(m + f for _, _, m, f in rows) == pytest.approx(pop.slice_at(2040).sum(), abs=1e-9)


def test_dependency_export_matches(solver_reports, tmp_path):
    pop = solver_reports["boost"].population
    path = sc.export_dependency(pop, tmp_path / "d.csv")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 31
    assert float(rows[10]["dependency_ratio"]) == dependency_ratio(pop.density[10], pop.grid.ages)
