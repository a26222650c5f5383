"""Adam and L-BFGS over lists of NumPy arrays.

``loss_fn(params) -> (loss, grads)`` is the contract for L-BFGS; grads is a
list aligned with params. Inner products are accumulated block by block in
parameter order so that appending parameters with identically zero
gradient leaves every earlier quantity bit-for-bit unchanged.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p, dtype=float) for p in params],
                   [np.zeros_like(p, dtype=float) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


def _dot(xs, ys) -> float:
    total = 0.0
    for x, y in zip(xs, ys):
        total += float(np.vdot(x, y))
    return total


def _axpy(alpha, xs, ys):
    return [y + alpha * x for x, y in zip(xs, ys)]


@dataclass
class LbfgsResult:
    params: list
    loss: float
    grads: list
    stalled: bool
    evaluations: int


@dataclass
class LBFGS:
    """Limited-memory BFGS with two-loop recursion and backtracking Armijo
    line search. Keeps curvature pairs between ``step`` calls."""

    history_size: int = 10
    max_line_search: int = 25
    c1: float = 1e-4
    shrink: float = 0.5
    max_first_step: float = 1.0
    s_hist: deque = field(default_factory=deque)
    y_hist: deque = field(default_factory=deque)
    _cache: tuple | None = None

    def __post_init__(self):
        if self.history_size < 1:
            raise ValueError("history_size must be >= 1")

    def reset(self):
        self.s_hist.clear()
        self.y_hist.clear()
        self._cache = None

    def _direction(self, g):
        q = [-x for x in g]
        alphas = []
        for s, y in zip(reversed(self.s_hist), reversed(self.y_hist)):
            rho = 1.0 / _dot(y, s)
            a = rho * _dot(s, q)
            q = _axpy(-a, y, q)
            alphas.append((rho, a))
        if self.s_hist:
            s, y = self.s_hist[-1], self.y_hist[-1]
            gamma = _dot(s, y) / _dot(y, y)
            q = [gamma * x for x in q]
        else:
            gnorm = np.sqrt(_dot(g, g))
            q = [x * min(1.0, self.max_first_step / gnorm) for x in q]
        for (s, y), (rho, a) in zip(zip(self.s_hist, self.y_hist), reversed(alphas)):
            b = rho * _dot(y, q)
            q = _axpy(a - b, s, q)
        return q

    def step(self, params, loss_fn) -> LbfgsResult:
        params = [np.asarray(p, dtype=float) for p in params]
        evals = 0
        if self._cache is not None and all(a is b for a, b in zip(self._cache[0], params)):
            _, f0, g0 = self._cache
        else:
            f0, g0 = loss_fn(params)
            evals += 1
        if not np.isfinite(f0) or _dot(g0, g0) == 0.0:
            return LbfgsResult(params, f0, g0, True, evals)
        d = self._direction(g0)
        slope = _dot(g0, d)
        if slope >= 0:
            # not a descent direction: drop the memory and use steepest descent
            self.reset()
            d = self._direction(g0)
            slope = _dot(g0, d)
        step = 1.0
        for _ in range(self.max_line_search):
            trial = _axpy(step, d, params)
            f1, g1 = loss_fn(trial)
            evals += 1
            if np.isfinite(f1) and f1 <= f0 + self.c1 * step * slope:
                s = [step * x for x in d]
                y = [b - a for a, b in zip(g0, g1)]
                sy = _dot(s, y)
                if sy > 1e-12 * np.sqrt(_dot(s, s) * _dot(y, y)):
                    self.s_hist.append(s)
                    self.y_hist.append(y)
                    if len(self.s_hist) > self.history_size:
                        self.s_hist.popleft()
                        self.y_hist.popleft()
                self._cache = (trial, f1, g1)
                return LbfgsResult(trial, f1, g1, False, evals)
            step *= self.shrink
        self._cache = (params, f0, g0)
        return LbfgsResult(params, f0, g0, True, evals)


def lbfgs_step(params, loss_fn, optimizer: LBFGS | None = None,
               history_size: int = 10, max_line_search: int = 25) -> LbfgsResult:
    """Single L-BFGS iteration; pass the same ``optimizer`` to keep history."""
    if optimizer is None:
        optimizer = LBFGS(history_size=history_size, max_line_search=max_line_search)
    return optimizer.step(params, loss_fn)


def lbfgs_minimize(params, loss_fn, max_iter=100, tol=0.0, **kw):
    """Iterate until ``max_iter``, a stall, or loss below ``tol``.

    Returns ``(params, losses)`` where losses has one entry per accepted step.
    """
    opt = LBFGS(**kw)
    losses = []
    for _ in range(max_iter):
        res = opt.step(params, loss_fn)
        if res.stalled:
            break
        params = res.params
        losses.append(res.loss)
        if res.loss <= tol:
            break
    return params, losses
