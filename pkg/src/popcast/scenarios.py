"""Scenario configuration, the built-in fertility-policy cases, and the
end-to-end runner that writes grids, pyramids, dependency paths, loss
curves and explanations.

Config files are INI-style (sections of ``key = value``); every key must be
known. Environment variables ``POPCAST_<SECTION>_<KEY>`` override file
values before validation.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .demography import (
    FEMALE_FRACTION,
    AgeTimeGrid,
    ContractError,
    ExpDecay,
    FertilityModel,
    FertilityWindow,
    Logistic,
    MortalityModel,
    PolicyEvent,
    PopulationGrid,
    calibrate_beta,
    default_theta,
    read_schedule_csv,
)
from .explain import Explanation, lime_explain, surrogate_model
from .nn import Checkpoint
from .pinn import LossHistory, LossWeights, PinnProblem, TrainConfig, TrainingDiverged, forecast
from .pinn import train_hybrid, train_pinn
from .solver import (
    Scheme,
    SolverConfig,
    VitalRateField,
    age_shares,
    band_totals,
    dependency_ratio,
    population_pyramid,
    solve,
    write_grid_csv,
    write_pyramid_csv,
)

ENV_PREFIX = "POPCAST_"
MODES = ("solver", "pinn", "hybrid")

# Table 1 shares for 0-14 / 15-64 / 65+ (they sum to 99.5%; normalised on use)
TABLE1_SHARES = (24.3, 68.0, 7.2)
TOTAL_POPULATION_2024 = 1440.0

# Piecewise-linear template of the 2024 single-year age profile (millions
# per year of age); build_initial_condition() adjusts it to the shares.
IC_TEMPLATE = (
    (0, 22.0), (5, 23.4), (10, 25.0), (15, 24.9), (20, 24.7), (25, 24.3),
    (30, 23.7), (35, 22.5), (40, 20.6), (45, 18.3), (50, 15.9), (55, 13.5),
    (60, 11.1), (65, 8.8), (70, 6.5), (75, 4.4), (80, 2.7), (85, 1.4),
    (90, 0.6), (95, 0.2), (100, 0.04),
)
_IC_HATS = ((3.0, 4.0), (52.0, 12.0), (76.0, 10.0))


class ConfigError(ValueError):
    pass


class IngestionError(ValueError):
    pass


class ComparisonError(ValueError):
    pass


class ExportError(RuntimeError):
    pass


# -- config model ------------------------------------------------------------


@dataclass(frozen=True)
class TfrSpec:
    """``constant v`` | ``linear start end end_year`` | ``table path``.

    Linear paths run from the grid's first year to ``end_year`` and hold
    the end value afterwards.
    """

    kind: str = "constant"
    start: float = 2.0
    end: float = 2.0
    end_year: float = 2054.0
    path: str = ""

    @classmethod
    def parse(cls, text: str) -> "TfrSpec":
        parts = text.split()
        if not parts:
            raise ConfigError("empty tfr spec")
        kind, args = parts[0], parts[1:]
        try:
            if kind == "constant" and len(args) == 1:
                v = float(args[0])
                return cls("constant", v, v)
            if kind == "linear" and len(args) == 3:
                return cls("linear", float(args[0]), float(args[1]), float(args[2]))
            if kind == "table" and len(args) == 1:
                return cls("table", path=args[0])
        except ValueError as exc:
            raise ConfigError(f"bad tfr spec {text!r}: {exc}") from None
        raise ConfigError(f"bad tfr spec {text!r}")

    def format(self) -> str:
        if self.kind == "constant":
            return f"constant {self.start!r}"
        if self.kind == "linear":
            return f"linear {self.start!r} {self.end!r} {self.end_year!r}"
        return f"table {self.path}"

    def values(self, years) -> np.ndarray:
        years = np.asarray(years, dtype=float)
        if self.kind == "constant":
            return np.full(years.shape, self.start)
        if self.kind == "linear":
            t0 = years[0]
            frac = np.clip((years - t0) / (self.end_year - t0), 0.0, 1.0)
            return self.start + (self.end - self.start) * frac
        ys, vs = _read_tfr_table(self.path)
        return np.interp(years, ys, vs)


def _read_tfr_table(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader) != ["year", "tfr"]:
            raise IngestionError(f"{path}: expected header year,tfr")
        rows = [(float(y), float(v)) for y, v in reader]
    if not rows or any(v < 0 for _, v in rows):
        raise IngestionError(f"{path}: TFR table must be nonempty and nonnegative")
    rows.sort()
    return np.array([r[0] for r in rows]), np.array([r[1] for r in rows])


def parse_policies(text: str) -> tuple[PolicyEvent, ...]:
    """``year alpha logistic|expdecay param`` entries separated by ``;``."""
    events = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split()
        if len(parts) != 4:
            raise ConfigError(f"bad policy entry {chunk!r}")
        year, alpha, kind, param = parts
        try:
            if kind == "logistic":
                kernel = Logistic(float(param))
            elif kind == "expdecay":
                kernel = ExpDecay(float(param))
            else:
                raise ConfigError(f"unknown policy kernel {kind!r}")
            events.append(PolicyEvent(float(year), float(alpha), kernel))
        except (ValueError, ContractError) as exc:
            raise ConfigError(f"bad policy entry {chunk!r}: {exc}") from None
    return tuple(events)


def format_policies(events) -> str:
    out = []
    for ev in events:
        if isinstance(ev.kernel, Logistic):
            out.append(f"{ev.t_k!r} {ev.alpha_k!r} logistic {ev.kernel.gamma!r}")
        else:
            out.append(f"{ev.t_k!r} {ev.alpha_k!r} expdecay {ev.kernel.rate!r}")
    return "; ".join(out)


@dataclass(frozen=True)
class OutputSpec:
    heatmap: bool = True
    pyramid: bool = True
    dependency: bool = True
    losses: bool = True
    explain: bool = True
    checkpoint: bool = True
    pyramid_bucket: float = 5.0
    pyramid_years: tuple = ()  # empty: first and last grid year
    explain_points: tuple = ((30.0, 2039.0), (50.0, 2045.0))


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "baseline"
    grid: AgeTimeGrid = field(default_factory=AgeTimeGrid)
    substeps: int = 4
    scheme: str = "upwind"
    tfr: TfrSpec = field(default_factory=TfrSpec)
    window: FertilityWindow = field(default_factory=FertilityWindow)
    theta_peak: float | None = None
    policies: tuple = ()
    mortality: MortalityModel = field(default_factory=MortalityModel)
    mortality_csv: str = ""
    initial: str = "parametric"
    shares: tuple = TABLE1_SHARES
    total_population: float = TOTAL_POPULATION_2024
    female_fraction: float = FEMALE_FRACTION
    migration_rate: float = 0.0
    train: TrainConfig = field(default_factory=TrainConfig)
    outputs: OutputSpec = field(default_factory=OutputSpec)


def _floats(text):
    return tuple(float(x) for x in text.replace(",", " ").split())


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _points(text):
    pts = []
    for chunk in text.replace(",", " ").split():
        a, y = chunk.split(":")
        pts.append((float(a), float(y)))
    return tuple(pts)


def _fmt_points(pts):
    return " ".join(f"{a!r}:{y!r}" for a, y in pts)


def _fmt_floats(vals):
    return ", ".join(repr(float(v)) for v in vals)


# section -> key -> (parse, format); the single source for parse/serialize
_SCHEMA = {
    "scenario": {
        "name": (str, str),
        "female_fraction": (float, repr),
        "migration_rate": (float, repr),
    },
    "grid": {k: (float, repr) for k in ("age_min", "age_max", "age_step", "t_min", "t_max", "t_step")}
    | {"substeps": (int, str), "scheme": (str, str)},
    "fertility": {
        "tfr": (TfrSpec.parse, TfrSpec.format),
        "mu": (float, repr), "sigma": (float, repr), "a_lo": (float, repr), "a_hi": (float, repr),
        "theta_peak": (float, repr),
        "policies": (parse_policies, format_policies),
    },
    "mortality": {
        k: (float, repr) for k in ("c_infant", "d_infant", "c_base", "c_old", "d_old", "drift")
    } | {"schedule": (str, str)},
    "initial": {
        "spec": (str, str), "shares": (_floats, _fmt_floats), "total": (float, repr),
    },
    "train": {
        k: (int, str) for k in ("epochs_adam", "epochs_lbfgs", "lr_interval", "n_interior", "n_ic",
                                "n_bc", "n_data", "resample_every", "seed", "hidden_size",
                                "lbfgs_history")
    } | {
        k: (float, repr) for k in ("lr", "lr_decay", "lambda_ic", "lambda_bc", "lambda_data",
                                   "eps_mu", "eps_b")
    } | {"widths": (lambda s: tuple(int(x) for x in _floats(s)), lambda w: ", ".join(map(str, w)))},
    "outputs": {
        k: (_bool, lambda b: "true" if b else "false")
        for k in ("heatmap", "pyramid", "dependency", "losses", "explain", "checkpoint")
    } | {
        "pyramid_bucket": (float, repr), "pyramid_years": (_floats, _fmt_floats),
        "explain_points": (_points, _fmt_points),
    },
}


def _to_sections(cfg: ScenarioConfig) -> dict:
    g, w, m, t, o = cfg.grid, cfg.window, cfg.mortality, cfg.train, cfg.outputs
    fert = {"tfr": cfg.tfr, "mu": w.mu, "sigma": w.sigma, "a_lo": w.a_lo, "a_hi": w.a_hi,
            "policies": cfg.policies}
    if cfg.theta_peak is not None:
        fert["theta_peak"] = cfg.theta_peak
    mort = {k: getattr(m, k) for k in ("c_infant", "d_infant", "c_base", "c_old", "d_old", "drift")}
    if cfg.mortality_csv:
        mort = {"schedule": cfg.mortality_csv}
    train = {k: getattr(t, k) for k in _SCHEMA["train"] if hasattr(t, k)}
    train.update(lambda_ic=t.weights.lambda_ic, lambda_bc=t.weights.lambda_bc,
                 lambda_data=t.weights.lambda_data)
    return {
        "scenario": {"name": cfg.name, "female_fraction": cfg.female_fraction,
                     "migration_rate": cfg.migration_rate},
        "grid": {k: getattr(g, k) for k in ("age_min", "age_max", "age_step", "t_min", "t_max", "t_step")}
        | {"substeps": cfg.substeps, "scheme": cfg.scheme},
        "fertility": fert,
        "mortality": mort,
        "initial": {"spec": cfg.initial, "shares": cfg.shares, "total": cfg.total_population},
        "train": train,
        "outputs": {f.name: getattr(o, f.name) for f in fields(o)},
    }


def dump_config(cfg: ScenarioConfig) -> str:
    out = io.StringIO()
    for section, values in _to_sections(cfg).items():
        out.write(f"[{section}]\n")
        for key, val in values.items():
            out.write(f"{key} = {_SCHEMA[section][key][1](val)}\n")
        out.write("\n")
    return out.getvalue()


def _apply_env(parser: configparser.ConfigParser, env) -> None:
    for var, value in env.items():
        if not var.startswith(ENV_PREFIX):
            continue
        rest = var[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"environment override {var} names no config key")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value)


def parse_config(text: str, env=None) -> ScenarioConfig:
    """Parse INI text into a validated ``ScenarioConfig``.

    ``env`` (default: no overrides) is a mapping searched for
    ``POPCAST_<SECTION>_<KEY>`` entries.
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    if env:
        _apply_env(parser, env)
    raw: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        raw[section] = {}
        for key, value in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                raw[section][key] = _SCHEMA[section][key][0](value)
            except ConfigError:
                raise
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
    return _build_config(raw)


def _build_config(raw: dict) -> ScenarioConfig:
    base = ScenarioConfig()
    sc, gr, fe = raw.get("scenario", {}), raw.get("grid", {}), raw.get("fertility", {})
    mo, ini, tr, ou = (raw.get(k, {}) for k in ("mortality", "initial", "train", "outputs"))
    try:
        grid = AgeTimeGrid(**{k: gr[k] for k in gr if k not in ("substeps", "scheme")})
        window = FertilityWindow(
            fe.get("mu", 28.0), fe.get("sigma", 6.0), fe.get("a_lo", 15.0), fe.get("a_hi", 49.0)
        )
        mort_params = {k: v for k, v in mo.items() if k != "schedule"}
        if "schedule" in mo and mort_params:
            raise ConfigError("[mortality] takes either schedule or parametric constants")
        mortality = replace(MortalityModel(), **mort_params)
        weights = LossWeights(
            tr.get("lambda_ic", 10.0), tr.get("lambda_bc", 10.0), tr.get("lambda_data", 1.0)
        )
        train = TrainConfig(
            **{k: v for k, v in tr.items() if not k.startswith("lambda_")}, weights=weights
        )
        outputs = OutputSpec(**ou)
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    scheme = gr.get("scheme", "upwind")
    if scheme not in ("upwind", "characteristics"):
        raise ConfigError(f"unknown scheme {scheme!r}")
    spec = ini.get("spec", "parametric")
    if spec != "parametric" and not spec.startswith("table "):
        raise ConfigError("initial spec must be 'parametric' or 'table <path>'")
    shares = tuple(ini.get("shares", TABLE1_SHARES))
    if len(shares) != 3 or any(s < 0 for s in shares):
        raise ConfigError("initial shares need three nonnegative values")
    cfg = ScenarioConfig(
        name=sc.get("name", base.name),
        grid=grid,
        substeps=gr.get("substeps", 4),
        scheme=scheme,
        tfr=fe.get("tfr", TfrSpec()),
        window=window,
        theta_peak=fe.get("theta_peak"),
        policies=fe.get("policies", ()),
        mortality=mortality,
        mortality_csv=mo.get("schedule", ""),
        initial=spec,
        shares=shares,
        total_population=ini.get("total", TOTAL_POPULATION_2024),
        female_fraction=sc.get("female_fraction", FEMALE_FRACTION),
        migration_rate=sc.get("migration_rate", 0.0),
        train=train,
        outputs=outputs,
    )
    try:
        SolverConfig(cfg.grid, Scheme(cfg.scheme), cfg.substeps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path, env=None) -> ScenarioConfig:
    return parse_config(Path(path).read_text(), env=env)


# -- built-in scenarios ------------------------------------------------------


def builtin_scenarios() -> list[ScenarioConfig]:
    """Baseline, declining, boost, two-child and enhanced-planning cases."""
    base = ScenarioConfig(name="baseline", tfr=TfrSpec("constant", 2.0, 2.0))
    return [
        base,
        replace(base, name="declining", tfr=TfrSpec("linear", 2.0, 1.6, 2054.0)),
        replace(base, name="boost", tfr=TfrSpec("linear", 2.0, 2.2, 2034.0)),
        replace(base, name="two-child",
                policies=(PolicyEvent(2024.0, -0.15, Logistic(0.5)),)),
        replace(base, name="enhanced-planning",
                policies=(PolicyEvent(2024.0, -0.30, Logistic(0.8)),)),
    ]


def get_builtin(name: str) -> ScenarioConfig:
    for cfg in builtin_scenarios():
        if cfg.name == name:
            return cfg
    raise KeyError(f"no built-in scenario {name!r}")


# -- initial condition -------------------------------------------------------


def build_initial_condition(spec: str, grid: AgeTimeGrid, shares=TABLE1_SHARES,
                            total: float = TOTAL_POPULATION_2024) -> np.ndarray:
    """Age slice at ``grid.t_min``.

    ``parametric``: the template profile plus three broad hat corrections
    solved so the 0-14 / 15-64 / 65+ totals equal the normalised shares of
    ``total``. ``table <path>``: CSV ``age,density`` on the grid ages.
    """
    ages = grid.ages
    if spec.startswith("table"):
        path = spec.split(None, 1)[1] if " " in spec else ""
        return _read_initial_table(path, ages)
    if spec != "parametric":
        raise ConfigError(f"unknown initial spec {spec!r}")
    knots = np.array([k for k, _ in IC_TEMPLATE], dtype=float)
    vals = np.array([v for _, v in IC_TEMPLATE], dtype=float)
    n = np.interp(ages, knots, vals)
    bands = ((-np.inf, 15.0), (15.0, 65.0), (65.0, np.inf))
    hats = [np.maximum(0.0, 1.0 - np.abs(ages - c) / w) for c, w in _IC_HATS]
    M = np.array([[band_totals(h, ages, lo, hi) for h in hats] for lo, hi in bands])
    current = np.array([band_totals(n, ages, lo, hi) for lo, hi in bands])
    target = np.asarray(shares, dtype=float)
    target = target / target.sum() * total
    x = np.linalg.solve(M, target - current)
    n = n + sum(xi * h for xi, h in zip(x, hats))
    if np.any(n < 0):
        raise ConfigError("requested shares cannot be met with a nonnegative profile")
    return n


def _read_initial_table(path, ages) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            if next(reader) != ["age", "density"]:
                raise IngestionError(f"{path}: expected header age,density")
            rows = [(float(a), float(d)) for a, d in reader]
    except OSError as exc:
        raise IngestionError(str(exc)) from None
    got = np.array([a for a, _ in rows])
    dens = np.array([d for _, d in rows])
    if got.shape != ages.shape or not np.allclose(got, ages):
        raise IngestionError(f"{path}: ages do not match the grid")
    if np.any(~np.isfinite(dens)) or np.any(dens < 0):
        raise IngestionError(f"{path}: densities must be finite and nonnegative")
    if not np.any(dens > 0):
        raise IngestionError(f"{path}: degenerate (all-zero) population")
    return dens


# -- model assembly ----------------------------------------------------------


def fertility_model(cfg: ScenarioConfig) -> FertilityModel:
    grid = cfg.grid
    theta_ages, theta_vals = default_theta(cfg.window)
    if cfg.theta_peak is not None:
        theta_vals = np.where(theta_vals > 0, cfg.theta_peak, 0.0)
    start = FertilityModel.constant(1.0, grid.years, window=cfg.window, theta_ages=theta_ages,
                                    theta_values=theta_vals)
    calibrated = calibrate_beta(cfg.tfr.values(grid.years), start, grid)
    return replace(calibrated, policies=tuple(cfg.policies))


def mortality_source(cfg: ScenarioConfig):
    if cfg.mortality_csv:
        return read_schedule_csv(cfg.mortality_csv)
    return replace(cfg.mortality, t_ref=cfg.grid.t_min)


def vital_rates(cfg: ScenarioConfig) -> VitalRateField:
    return VitalRateField(mortality_source(cfg).rate, migration_rate=cfg.migration_rate,
                          female_fraction=cfg.female_fraction)


def solver_config(cfg: ScenarioConfig) -> SolverConfig:
    return SolverConfig(cfg.grid, Scheme(cfg.scheme), cfg.substeps)


def initial_condition(cfg: ScenarioConfig) -> np.ndarray:
    return build_initial_condition(cfg.initial, cfg.grid, cfg.shares, cfg.total_population)


def reference_solution(cfg: ScenarioConfig, balances=None) -> PopulationGrid:
    return solve(initial_condition(cfg), solver_config(cfg), vital_rates(cfg),
                 fertility_model(cfg), balances)


def pinn_problem(cfg: ScenarioConfig, reference: PopulationGrid | None = None) -> PinnProblem:
    if reference is None:
        reference = reference_solution(cfg)
    return PinnProblem(cfg.grid, initial_condition(cfg), _vectorised_mu(cfg, cfg.migration_rate),
                       fertility_model(cfg), cfg.female_fraction, reference)


def _vectorised_mu(cfg, migration):
    src = mortality_source(cfg)
    if isinstance(src, MortalityModel):
        return lambda a, t: src.rate(a, t) - migration

    def mu(a, t):
        a, t = np.broadcast_arrays(np.asarray(a, float), np.asarray(t, float))
        out = np.empty(a.shape)
        for year in np.unique(t):
            sel = t == year
            out[sel] = src.rate(a[sel], float(year)) - migration
        return out

    return mu


# -- running -----------------------------------------------------------------


@dataclass
class ScenarioReport:
    name: str
    mode: str
    seed: int
    final_losses: dict
    shares_final: tuple
    young_final: float
    dependency_path: list  # (year, ratio)
    old_age_dependency_final: float
    artifacts: dict
    failed: bool = False
    message: str = ""
    population: PopulationGrid | None = field(default=None, repr=False, compare=False)
    history: LossHistory | None = field(default=None, repr=False, compare=False)
    checkpoint: Checkpoint | None = field(default=None, repr=False, compare=False)

    @property
    def dependency_final(self) -> float:
        return self.dependency_path[-1][1]

    def content(self) -> dict:
        """Report fields without file paths."""
        d = {k: v for k, v in asdict(self).items()
             if k not in ("population", "history", "checkpoint", "artifacts")}
        d["artifacts"] = sorted(self.artifacts)
        return d

    def to_json(self, path) -> Path:
        path = Path(path)
        d = self.content()
        d["artifacts"] = {k: str(v) for k, v in sorted(self.artifacts.items())}
        path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        return path


def _summaries(pop: PopulationGrid):
    ages = pop.grid.ages
    last = pop.density[-1]
    dep = [(float(y), dependency_ratio(row, ages)) for y, row in zip(pop.grid.years, pop.density)]
    old_dep = band_totals(last, ages, 65, np.inf) / band_totals(last, ages, 15, 65)
    shares = tuple(float(x) for x in age_shares(last, ages))
    return shares, band_totals(last, ages, -np.inf, 15), dep, float(old_dep)


def run_scenario(cfg: ScenarioConfig, mode: str = "solver", out_dir=None,
                 seed: int | None = None, epochs: int | None = None) -> ScenarioReport:
    """Run one scenario end to end and write the requested artifacts.

    ``seed``/``epochs`` override the config's training seed and Adam epochs.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    train_cfg = cfg.train
    if seed is not None:
        train_cfg = replace(train_cfg, seed=seed)
    if epochs is not None:
        train_cfg = replace(train_cfg, epochs_adam=epochs)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, Path] = {}
    stem = f"{cfg.name}_{mode}"

    reference = reference_solution(cfg)
    history, ckpt, failed, message = None, None, False, ""
    if mode == "solver":
        pop = reference
        final_losses = {}
    else:
        problem = pinn_problem(cfg, reference)
        try:
            if mode == "pinn":
                mlp, history = train_pinn(train_cfg, problem)
                lstm = None
            else:
                mlp, lstm, history = train_hybrid(train_cfg, problem)
        except TrainingDiverged as exc:
            failed, message = True, str(exc)
            mlp, lstm, history = exc.mlp, exc.lstm, exc.history
        ckpt = Checkpoint(mlp, lstm, {"scenario": cfg.name, "mode": mode, "seed": train_cfg.seed})
        pop = forecast(mlp, cfg.grid)
        final_losses = {}
        if len(history):
            final_losses = {k: getattr(history, k)[-1] for k in ("total", "pde", "ic", "bc", "data")}

    shares, young, dep, old_dep = _summaries(pop)
    report = ScenarioReport(cfg.name, mode, train_cfg.seed, final_losses, shares, young, dep,
                            old_dep, artifacts, failed, message, pop, history, ckpt)
    if out is not None:
        _write_artifacts(report, cfg, out, stem)
    return report


def _write_artifacts(report: ScenarioReport, cfg: ScenarioConfig, out: Path, stem: str):
    o = cfg.outputs
    a = report.artifacts
    if o.heatmap:
        a["heatmap"] = export_heatmap_grid(report, out / f"{stem}_grid.csv")
    if o.pyramid:
        for year in o.pyramid_years or (cfg.grid.t_min, cfg.grid.t_max):
            a[f"pyramid_{int(year)}"] = export_pyramid(
                report, out / f"{stem}_pyramid_{int(year)}.csv", year, o.pyramid_bucket,
                cfg.female_fraction,
            )
    if o.dependency:
        a["dependency"] = export_dependency(report, out / f"{stem}_dependency.csv")
    if report.history is not None and o.losses:
        a["losses"] = export_loss_curves(report, out / f"{stem}_losses.csv")
    if report.checkpoint is not None and o.checkpoint:
        a["checkpoint"] = report.checkpoint.save(out / f"{stem}_checkpoint.csv")
    if o.explain:
        model = surrogate_model(report.checkpoint.mlp) if report.checkpoint else grid_model(report.population)
        for age, year in o.explain_points:
            key = f"explain_{int(age)}_{int(year)}"
            exp = lime_explain(model, (age, year), seed=report.seed)
            a[key] = exp.to_csv(out / f"{stem}_{key}.csv")
            a[key + "_json"] = exp.to_json(out / f"{stem}_{key}.json")
    a["report"] = out / f"{stem}_report.json"
    report.to_json(a["report"])


def grid_model(pop: PopulationGrid):
    """Bilinear interpolant of a solved grid as a callable of (ages, years)."""
    from scipy.interpolate import RegularGridInterpolator

    interp = RegularGridInterpolator((pop.grid.years, pop.grid.ages), pop.density,
                                     bounds_error=False, fill_value=None)

    def model(ages, years):
        pts = np.column_stack([np.asarray(years, float).ravel(), np.asarray(ages, float).ravel()])
        return interp(pts)

    return model


# -- comparison --------------------------------------------------------------


COMPARE_COLUMNS = ("young_share", "working_share", "old_share", "young_pop",
                   "dependency_ratio", "old_age_dependency", "final_loss")


@dataclass
class Comparison:
    rows: list  # (name, mode, values..., deltas...)
    checks: dict  # description -> bool

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "mode"] + list(COMPARE_COLUMNS)
                       + [f"delta_{c}" for c in COMPARE_COLUMNS])
            for row in self.rows:
                w.writerow(list(row[:2]) + [repr(float(v)) for v in row[2:]])
        checks = path.with_name(path.stem + "_checks.csv")
        with open(checks, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["check", "holds"])
            for desc, ok in self.checks.items():
                w.writerow([desc, "true" if ok else "false"])
        return path


def _row_values(r: ScenarioReport):
    loss = r.final_losses.get("total", math.nan)
    return (r.shares_final[0], r.shares_final[1], r.shares_final[2], r.young_final,
            r.dependency_final, r.old_age_dependency_final, loss)


def compare_scenarios(reports) -> Comparison:
    """Side-by-side 2054 summaries with deltas against the first report,
    plus the scenario-ordering checks that apply to the names present."""
    reports = list(reports)
    if len(reports) < 2:
        raise ComparisonError("need at least two reports to compare")
    g0 = reports[0].population.grid
    for r in reports[1:]:
        if r.population.grid != g0:
            raise ComparisonError(f"grid of {r.name!r} differs from {reports[0].name!r}")
    ref = _row_values(reports[0])
    rows = []
    for r in reports:
        vals = _row_values(r)
        deltas = tuple(0.0 if (math.isnan(v) and math.isnan(b)) else v - b for v, b in zip(vals, ref))
        rows.append((r.name, r.mode) + vals + deltas)
    by = {r.name: r for r in reports}
    checks = {}
    if {"declining", "baseline", "boost"} <= set(by):
        d, b, u = by["declining"], by["baseline"], by["boost"]
        checks["young_pop_final: declining < baseline < boost"] = bool(
            d.young_final < b.young_final < u.young_final)
        checks["dependency_final: declining > baseline > boost"] = bool(
            d.dependency_final > b.dependency_final > u.dependency_final)
        checks["old_age_dependency_final: declining > baseline > boost"] = bool(
            d.old_age_dependency_final > b.old_age_dependency_final > u.old_age_dependency_final)
    if {"baseline", "two-child", "enhanced-planning"} <= set(by):
        b, t, e = by["baseline"], by["two-child"], by["enhanced-planning"]
        lo, hi = sorted((b.shares_final[0], e.shares_final[0]))
        checks["young_share_final: two-child strictly between baseline and enhanced-planning"] = bool(
            lo < t.shares_final[0] < hi)
    return Comparison(rows, checks)


# -- exports -----------------------------------------------------------------


def _population(report_or_grid) -> PopulationGrid:
    pop = getattr(report_or_grid, "population", report_or_grid)
    if not isinstance(pop, PopulationGrid):
        raise ExportError("no population grid to export")
    return pop


def export_heatmap_grid(report, path) -> Path:
    return write_grid_csv(path, _population(report))


def export_pyramid(report, path, year, bucket=5.0, female_fraction=FEMALE_FRACTION) -> Path:
    pop = _population(report)
    try:
        col = pop.slice_at(year)
    except KeyError:
        raise ExportError(f"year {year} is not on the grid") from None
    return write_pyramid_csv(path, population_pyramid(col, pop.grid.ages, bucket, female_fraction))


def export_dependency(report, path) -> Path:
    pop = _population(report)
    path = Path(path)
    ages = pop.grid.ages
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["year", "young_share", "working_share", "old_share", "dependency_ratio"])
        for year, row in zip(pop.grid.years, pop.density):
            y, wk, o = age_shares(row, ages)
            w.writerow([repr(float(year)), repr(y), repr(wk), repr(o),
                        repr(dependency_ratio(row, ages))])
    return path


def export_loss_curves(report, path) -> Path:
    history = getattr(report, "history", report)
    if not isinstance(history, LossHistory):
        raise ExportError("no loss history to export")
    return history.to_csv(path)


def environment_overrides() -> dict:
    return {k: v for k, v in os.environ.items() if k.startswith(ENV_PREFIX)}
