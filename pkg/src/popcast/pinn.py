"""Physics-informed training of the density surrogate.

The plain model fits ``n_hat(a, t)`` to the transport equation residual,
the initial age profile, the newborn boundary integral and a set of
reference-solution anchors. The hybrid model additionally unrolls an LSTM
over the calendar years and feeds its bounded outputs into the mortality
and source terms of the residual.

Residuals are computed in physical units (millions per year of age, per
year) and divided by the problem's density scale before squaring, so the
reported losses are dimensionless.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .demography import (
    FEMALE_FRACTION,
    AgeTimeGrid,
    FertilityModel,
    PopulationGrid,
    _window_nodes,
    fertility,
    policy_signal,
    total_fertility_rate,
)
from .nn import (
    AGE_SCALE,
    YEAR_SCALE,
    LstmParams,
    MlpParams,
    as_nodes,
    init_lstm,
    init_mlp,
    mlp_forward,
    mlp_with_input_derivatives,
    scale_inputs,
    unroll,
)
from .optim import LBFGS, AdamState, adam_step

log = logging.getLogger(__name__)

TFR_SCALE = 2.1  # replacement-level fertility
COMPONENTS = ("pde", "ic", "bc", "data")


class NumericalError(ArithmeticError):
    pass


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last finite state."""

    def __init__(self, epoch, history, mlp, lstm=None):
        super().__init__(f"non-finite loss at epoch {epoch}; last finite epoch {epoch - 1}")
        self.epoch = epoch
        self.history = history
        self.mlp = mlp
        self.lstm = lstm


# -- problem and configuration ----------------------------------------------


@dataclass
class PinnProblem:
    """Everything the residuals need about one scenario."""

    grid: AgeTimeGrid
    initial: np.ndarray
    mu_eval: Callable
    fert: FertilityModel | None = None
    female_fraction: float = FEMALE_FRACTION
    reference: PopulationGrid | None = None
    density_scale: float | None = None

    def __post_init__(self):
        self.initial = np.asarray(self.initial, dtype=float)
        if self.initial.shape != self.grid.ages.shape:
            raise ValueError("initial profile must match the age grid")
        if self.density_scale is None:
            self.density_scale = float(max(self.initial.max(), 1e-12))


@dataclass(frozen=True)
class LossWeights:
    lambda_ic: float = 10.0
    lambda_bc: float = 10.0
    lambda_data: float = 1.0

    def __post_init__(self):
        for v in (self.lambda_ic, self.lambda_bc, self.lambda_data):
            if not (math.isfinite(v) and v >= 0):
                raise ValueError("loss weights must be finite and nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    epochs_adam: int = 10000
    epochs_lbfgs: int = 0
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_interval: int = 2500
    n_interior: int = 4096
    n_ic: int = 128
    n_bc: int = 128
    n_data: int = 256
    resample_every: int = 500
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    hybrid: bool = False
    hidden_size: int = 16
    widths: tuple = (2, 64, 64, 64, 64, 1)
    eps_mu: float = 0.05
    eps_b: float = 2.0
    freeze_heads: bool = False
    zero_heads: bool = False
    lbfgs_history: int = 10

    def __post_init__(self):
        if self.epochs_adam < 0 or self.epochs_lbfgs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if min(self.n_interior, self.n_ic, self.n_bc) <= 0:
            raise ValueError("collocation counts must be positive")


@dataclass
class LossHistory:
    epoch: list = field(default_factory=list)
    total: list = field(default_factory=list)
    pde: list = field(default_factory=list)
    ic: list = field(default_factory=list)
    bc: list = field(default_factory=list)
    data: list = field(default_factory=list)

    def append(self, epoch, parts):
        self.epoch.append(epoch)
        self.total.append(parts["total"])
        for k in COMPONENTS:
            getattr(self, k).append(parts[k])

    def __len__(self):
        return len(self.epoch)

    def rows(self):
        return zip(self.epoch, self.total, self.pde, self.ic, self.bc, self.data)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "total", "pde", "ic", "bc", "data"])
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return path

    @classmethod
    def from_csv(cls, path) -> "LossHistory":
        h = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            if next(reader) != ["epoch", "total", "pde", "ic", "bc", "data"]:
                raise ValueError(f"{path}: unexpected loss-history header")
            for row in reader:
                vals = [float(v) for v in row[1:]]
                h.append(int(row[0]), dict(zip(("total",) + COMPONENTS, vals)))
        return h


# -- collocation -------------------------------------------------------------


@dataclass
class CollocationSet:
    interior_a: np.ndarray
    interior_t: np.ndarray
    ic_ages: np.ndarray
    bc_times: np.ndarray
    quad_ages: np.ndarray
    seed: int


def sample_collocation(grid: AgeTimeGrid, counts=(4096, 128, 128), seed=0) -> CollocationSet:
    """Uniform interior points, lattice ages for the initial condition and
    uniform boundary times. Same ``(grid, counts, seed)`` gives the same set.

    ``seed`` may be an int or a sequence of ints (hashed by SeedSequence).
    """
    n_int, n_ic, n_bc = counts
    if min(counts) <= 0:
        raise ValueError("collocation counts must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    a = rng.uniform(grid.age_min, grid.age_max, n_int)
    t = rng.uniform(grid.t_min, grid.t_max, n_int)
    lattice = grid.ages
    if n_ic >= lattice.size:
        extra = rng.choice(lattice, n_ic - lattice.size, replace=True)
        ic = np.concatenate([lattice, extra])
    else:
        ic = rng.choice(lattice, n_ic, replace=False)
    bc = rng.uniform(grid.t_min, grid.t_max, n_bc)
    return CollocationSet(a, t, ic, bc, lattice.copy(), seed)


# -- residuals ---------------------------------------------------------------


def pde_residual(a, t, surrogate: MlpParams, mu_field, b_field=0.0, d_mu=0.0, d_b=0.0):
    """``n_t + n_a + (mu + d_mu) n - (B + d_b)`` at physical ``(a, t)``.

    ``mu_field`` and ``b_field`` are arrays (or callables of ``(a, t)``)
    matching the points; ``d_mu``/``d_b`` are the hybrid refinements and
    are zero for the plain model.
    """
    a_s, t_s = scale_inputs(a, t)
    n, dn_da, dn_dt = mlp_with_input_derivatives(a_s, t_s, surrogate)
    mu = mu_field(a, t) if callable(mu_field) else mu_field
    b = b_field(a, t) if callable(b_field) else b_field
    r = dn_dt * (1.0 / YEAR_SCALE) + dn_da * (1.0 / AGE_SCALE) + (mu + d_mu) * n - (b + d_b)
    if not np.all(np.isfinite(ad.value_of(r))):
        raise NumericalError("non-finite PDE residual")
    return r


def ic_residual(a, surrogate: MlpParams, initial_data, t0: float = 2024.0):
    """``n_hat(a, t0) - n_data(a)``."""
    a_s, t_s = scale_inputs(a, np.full(np.shape(a), t0))
    return mlp_forward(a_s, t_s, surrogate) - initial_data


def _bc_weights(quad_ages, fert: FertilityModel, t):
    """Trapezoid weights times fertility over the window nodes; shape
    ``(len(t), n_window)`` plus the window ages."""
    quad_ages = np.asarray(quad_ages, dtype=float)
    a = quad_ages[_window_nodes(quad_ages, fert.window)]
    w = np.empty_like(a)
    w[1:-1] = 0.5 * (a[2:] - a[:-2])
    w[0] = 0.5 * (a[1] - a[0])
    w[-1] = 0.5 * (a[-1] - a[-2])
    f = np.stack([fertility(a, float(tk), fert) for tk in np.atleast_1d(t)])
    return f * w, a


def bc_residual(t, surrogate: MlpParams, fert: FertilityModel | None, quad_ages,
                female_fraction: float = FEMALE_FRACTION):
    """``n_hat(0, t) - female_fraction * integral f(a,t) n_hat(a,t) da``.

    ``t`` may be a scalar or 1-D array of years; the integral is the
    trapezoid rule over the quadrature ages inside the fertility window.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    a0 = np.zeros_like(t_arr)
    a_s, t_s = scale_inputs(a0, t_arr)
    newborn = mlp_forward(a_s, t_s, surrogate)
    if fert is None:
        r = newborn
    else:
        fw, a = _bc_weights(quad_ages, fert, t_arr)
        A = np.broadcast_to(a, fw.shape).ravel()
        T = np.repeat(t_arr, a.size)
        a_s, t_s = scale_inputs(A, T)
        n = ad.reshape(mlp_forward(a_s, t_s, surrogate), fw.shape)
        births = ad.sum(n * (fw * female_fraction), axis=1)
        r = newborn - births
    if np.ndim(t) == 0:
        return ad.reshape(r, ())
    return r


def data_residual(a, t, surrogate: MlpParams, values):
    a_s, t_s = scale_inputs(a, t)
    return mlp_forward(a_s, t_s, surrogate) - values


def _mse(r):
    if r is None:
        return 0.0
    size = np.size(ad.value_of(r))
    if size == 0:
        return 0.0
    return ad.sum(r * r) * (1.0 / size)


def total_loss(residuals: dict, weights: LossWeights = LossWeights()):
    """Weighted sum of mean-squared residuals.

    ``residuals`` maps component names (pde, ic, bc, data) to residual
    arrays or nodes; missing or empty components count as zero. Returns
    ``(loss, breakdown)`` with the unweighted component means and total.
    """
    unknown = set(residuals) - set(COMPONENTS)
    if unknown:
        raise KeyError(f"unknown loss components {sorted(unknown)}")
    parts = {k: _mse(residuals.get(k)) for k in COMPONENTS}
    loss = (parts["pde"] + weights.lambda_ic * parts["ic"]
            + weights.lambda_bc * parts["bc"] + weights.lambda_data * parts["data"])
    breakdown = {k: float(ad.value_of(v)) for k, v in parts.items()}
    breakdown["total"] = float(ad.value_of(loss))
    return loss, breakdown


# -- features for the recurrent refinement -----------------------------------


def lstm_features(problem: PinnProblem) -> np.ndarray:
    """Rows ``[TFR(t)/2.1, P(t), (t - 2024)/30]`` for each grid year."""
    years = problem.grid.years
    rows = []
    for t in years:
        if problem.fert is None:
            tfr, sig = 0.0, 0.0
        else:
            tfr = total_fertility_rate(t, problem.fert, problem.grid)
            sig = policy_signal(t, problem.fert.policies)
        rows.append([tfr / TFR_SCALE, sig, (t - 2024.0) / YEAR_SCALE])
    return np.array(rows)


def _year_index(t, grid: AgeTimeGrid):
    k = np.floor((np.asarray(t) - grid.t_min) / grid.t_step + 1e-9).astype(int)
    return np.clip(k, 0, grid.n_times - 1)


# -- training ----------------------------------------------------------------


@dataclass
class _Batch:
    colloc: CollocationSet
    mu_int: np.ndarray
    year_idx: np.ndarray
    ic_data: np.ndarray
    anchor_a: np.ndarray
    anchor_t: np.ndarray
    anchor_v: np.ndarray


def _anchors(problem: PinnProblem, n: int, seed):
    if problem.reference is None or n == 0:
        e = np.empty(0)
        return e, e, e
    rng = np.random.default_rng(seed)
    g = problem.reference.grid
    ti = rng.integers(0, g.n_times, n)
    ai = rng.integers(0, g.n_ages, n)
    return g.ages[ai], g.years[ti], problem.reference.density[ti, ai]


def _make_batch(problem, cfg, colloc, anchors):
    ages = problem.grid.ages
    ic_data = np.interp(colloc.ic_ages, ages, problem.initial)
    return _Batch(
        colloc,
        np.asarray(problem.mu_eval(colloc.interior_a, colloc.interior_t), dtype=float),
        _year_index(colloc.interior_t, problem.grid),
        ic_data,
        *anchors,
    )


def _residual_sets(problem, batch, mlp, lstm, features):
    c = batch.colloc
    s = 1.0 / problem.density_scale
    if lstm is None:
        d_mu, d_b = 0.0, 0.0
    else:
        mus, bs = unroll(features, lstm)
        d_mu = ad.take(ad.stack(mus), batch.year_idx)
        d_b = ad.take(ad.stack(bs), batch.year_idx)
    r_pde = pde_residual(c.interior_a, c.interior_t, mlp, batch.mu_int, 0.0, d_mu, d_b) * s
    r_ic = ic_residual(c.ic_ages, mlp, batch.ic_data, problem.grid.t_min) * s
    r_bc = bc_residual(c.bc_times, mlp, problem.fert, c.quad_ages, problem.female_fraction) * s
    out = {"pde": r_pde, "ic": r_ic, "bc": r_bc}
    if batch.anchor_a.size:
        out["data"] = data_residual(batch.anchor_a, batch.anchor_t, mlp, batch.anchor_v) * s
    return out


def _evaluate(arrays, n_mlp, template_mlp, template_lstm, problem, batch, cfg, features,
              frozen):
    tape = ad.Tape()
    nodes = as_nodes(tape, arrays)
    mlp = template_mlp.with_arrays(nodes[:n_mlp])
    lstm = template_lstm.with_arrays(nodes[n_mlp:]) if template_lstm is not None else None
    res = _residual_sets(problem, batch, mlp, lstm, features)
    loss, parts = total_loss(res, cfg.weights)
    tape.backward(loss)
    grads = []
    for k, node in enumerate(nodes):
        if node.grad is None or k in frozen:
            grads.append(np.zeros_like(np.asarray(arrays[k], dtype=float)))
        else:
            grads.append(np.asarray(node.grad, dtype=float))
    return parts["total"], grads, parts


def _seeds(seed):
    ss = np.random.SeedSequence(seed)
    mlp_ss, lstm_ss, col_ss, anc_ss = ss.spawn(4)
    return mlp_ss, lstm_ss, col_ss, anc_ss


def _collocation_seed(col_ss, round_):
    return [int(x) for x in col_ss.generate_state(2)] + [round_]


def _train(cfg: TrainConfig, problem: PinnProblem, hybrid: bool):
    mlp_ss, lstm_ss, col_ss, anc_ss = _seeds(cfg.seed)
    mlp = init_mlp(cfg.widths, np.random.default_rng(mlp_ss), scale=problem.density_scale)
    features = lstm_features(problem)
    lstm = None
    if hybrid:
        lstm = init_lstm(features.shape[1], cfg.hidden_size, np.random.default_rng(lstm_ss),
                         eps_mu=cfg.eps_mu, eps_b=cfg.eps_b)
        if cfg.zero_heads:
            lstm = lstm.with_zero_heads()
    history = LossHistory()
    n_epochs = cfg.epochs_adam + cfg.epochs_lbfgs
    if n_epochs == 0:
        return mlp, lstm, history

    arrays = [np.asarray(a, dtype=float) for a in mlp.arrays()]
    n_mlp = len(arrays)
    frozen = set()
    if lstm is not None:
        arrays += [np.asarray(a, dtype=float) for a in lstm.arrays()]
        if cfg.freeze_heads:
            frozen = set(range(len(arrays) - 4, len(arrays)))

    counts = (cfg.n_interior, cfg.n_ic, cfg.n_bc)
    anchors = _anchors(problem, cfg.n_data, anc_ss)

    def batch_for(round_):
        colloc = sample_collocation(problem.grid, counts, _collocation_seed(col_ss, round_))
        return _make_batch(problem, cfg, colloc, anchors)

    def unpack(arrs):
        m = mlp.with_arrays(arrs[:n_mlp])
        ls = lstm.with_arrays(arrs[n_mlp:]) if lstm is not None else None
        return m, ls

    batch = batch_for(0)
    state = AdamState.zeros_like(arrays)
    last_good = list(arrays)
    for epoch in range(cfg.epochs_adam):
        if epoch and cfg.resample_every and epoch % cfg.resample_every == 0:
            batch = batch_for(epoch // cfg.resample_every)
        lr = cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_interval) if cfg.lr_interval else cfg.lr
        try:
            total, grads, parts = _evaluate(arrays, n_mlp, mlp, lstm, problem, batch, cfg,
                                            features, frozen)
        except NumericalError:
            total = float("nan")
        if not math.isfinite(total):
            raise TrainingDiverged(epoch, history, *unpack(last_good))
        history.append(epoch, parts)
        last_good = arrays
        arrays, state = adam_step(arrays, grads, state, lr=lr)
        if epoch % 1000 == 0:
            log.info("adam epoch %d loss %.4e", epoch, total)

    if cfg.epochs_lbfgs:
        opt = LBFGS(history_size=cfg.lbfgs_history)

        last_parts = {}

        def fn(arrs):
            try:
                total, grads, parts = _evaluate(arrs, n_mlp, mlp, lstm, problem, batch, cfg,
                                                features, frozen)
            except NumericalError:
                return float("nan"), [np.zeros_like(a) for a in arrs]
            last_parts["parts"] = parts
            return total, grads

        epoch = cfg.epochs_adam
        for k in range(cfg.epochs_lbfgs):
            res = opt.step(arrays, fn)
            if not math.isfinite(res.loss):
                raise TrainingDiverged(epoch + k, history, *unpack(last_good))
            if res.stalled:
                log.info("L-BFGS stalled at iteration %d", k)
                break
            arrays = res.params
            last_good = arrays
            # the accepted trial is always the last point evaluated
            history.append(epoch + k, last_parts["parts"])

    m, ls = unpack(arrays)
    return m, ls, history


def train_pinn(cfg: TrainConfig, problem: PinnProblem):
    """Plain PINN: Adam with step decay, then optional L-BFGS.

    Returns ``(MlpParams, LossHistory)``.
    """
    mlp, _, history = _train(cfg, problem, hybrid=False)
    return mlp, history


def train_hybrid(cfg: TrainConfig, problem: PinnProblem):
    """Joint training of the surrogate and the LSTM refinement.

    Returns ``(MlpParams, LstmParams, LossHistory)``.
    """
    return _train(cfg, problem, hybrid=True)


def forecast(params: MlpParams, grid: AgeTimeGrid) -> PopulationGrid:
    """Evaluate the surrogate on every lattice point."""
    A, T = np.meshgrid(grid.ages, grid.years)
    a_s, t_s = scale_inputs(A.ravel(), T.ravel())
    vals = mlp_forward(a_s, t_s, params)
    return PopulationGrid(grid, np.asarray(vals).reshape(A.shape))
