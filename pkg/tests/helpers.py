"""Finite-difference oracles and small fixtures shared by the test modules."""

import numpy as np

from popcast import autodiff as ad
from popcast.nn import as_nodes, init_lstm, init_mlp, mlp_forward, unroll


def central_diff(f, arrays, h=1e-6):
    """Full coordinate-wise central differences of scalar ``f(list_of_arrays)``."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=float)
        for idx in np.ndindex(np.shape(a)):
            plus = [np.array(x, dtype=float, copy=True) for x in arrays]
            minus = [np.array(x, dtype=float, copy=True) for x in arrays]
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (f(plus) - f(minus)) / (2 * h)
        grads.append(g)
    return grads


def rel_error(got, want):
    got = np.concatenate([np.ravel(g) for g in got])
    want = np.concatenate([np.ravel(w) for w in want])
    denom = max(np.linalg.norm(got), np.linalg.norm(want), 1e-12)
    return float(np.linalg.norm(got - want) / denom)


def tape_grad(f, arrays):
    tape = ad.Tape()
    nodes = as_nodes(tape, arrays)
    out = f(nodes)
    tape.backward(out)
    return [np.zeros_like(np.asarray(a, float)) if n.grad is None else n.grad
            for a, n in zip(arrays, nodes)]


def mlp_case(seed, widths=(2, 8, 8, 1), n_points=6):
    """Random MLP, random points and a random linear readout of its outputs.

    Returns ``(f, arrays)`` where ``arrays = [a_s, t_s, W0, b0, ...]`` and
    ``f`` works on both plain arrays and tape nodes.
    """
    rng = np.random.default_rng(seed)
    p = init_mlp(widths, rng, scale=rng.uniform(0.5, 3.0))
    for k, b in enumerate(p.biases):
        p.biases[k] = rng.normal(0, 0.3, b.shape)
    a_s = rng.uniform(0, 1, n_points)
    t_s = rng.uniform(0, 1, n_points)
    c = rng.normal(size=n_points)

    def f(arrs):
        q = p.with_arrays(arrs[2:])
        return ad.sum(mlp_forward(arrs[0], arrs[1], q) * c)

    return f, [a_s, t_s] + [np.asarray(x, float) for x in p.arrays()]


def lstm_case(seed, input_size=3, hidden_size=4, steps=5):
    rng = np.random.default_rng(seed)
    p = init_lstm(input_size, hidden_size, rng, eps_mu=0.05, eps_b=2.0, init_range=0.5)
    xs = rng.normal(size=(steps, input_size))
    u = rng.normal(size=steps)
    v = rng.normal(size=steps)

    def f(arrs):
        q = p.with_arrays(arrs)
        mus, bs = unroll(xs, q)
        total = 0.0
        for k in range(steps):
            total = total + mus[k] * u[k] + bs[k] * v[k]
        return total

    return f, [np.asarray(x, float) for x in p.arrays()]


def directional_check(f, arrays, seed, h=1e-6):
    """Compare the tape gradient against a central difference along a random
    unit direction. Returns the relative error of the directional derivative."""
    rng = np.random.default_rng(seed)
    dirs = [rng.normal(size=np.shape(a)) for a in arrays]
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs))
    dirs = [d / norm for d in dirs]
    g = tape_grad(f, arrays)
    ad_dir = sum(float(np.sum(gi * di)) for gi, di in zip(g, dirs))
    plus = [a + h * d for a, d in zip(arrays, dirs)]
    minus = [a - h * d for a, d in zip(arrays, dirs)]
    fd_dir = (float(ad.value_of(f(plus))) - float(ad.value_of(f(minus)))) / (2 * h)
    return abs(ad_dir - fd_dir) / max(abs(ad_dir), abs(fd_dir), 1e-12)
