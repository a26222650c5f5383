"""Network pieces for the surrogates: a tanh MLP with softplus output, an
LSTM cell, and the bounded affine heads that turn the LSTM state into
mortality and birth refinements.

Parameters are plain NumPy arrays; to differentiate, wrap them as tape
variables with ``as_nodes`` and pass the wrapped copy to the same
functions.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad

AGE_SCALE = 100.0
YEAR_ORIGIN = 2024.0
YEAR_SCALE = 30.0

GATES = ("i", "f", "o", "c")


class ConfigurationError(ValueError):
    pass


def scale_inputs(a, t):
    """Map physical (age, year) to the unit square used by the networks."""
    return np.asarray(a, float) / AGE_SCALE, (np.asarray(t, float) - YEAR_ORIGIN) / YEAR_SCALE


# -- MLP ---------------------------------------------------------------------


@dataclass
class MlpParams:
    weights: list  # each (fan_out, fan_in)
    biases: list  # each (fan_out,)
    scale: float = 1.0  # fixed output scale, not trained

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigurationError("need one bias per weight matrix")
        if ad.value_of(self.weights[0]).shape[1] != 2:
            raise ConfigurationError("first layer must take (age, year)")
        if ad.value_of(self.weights[-1]).shape[0] != 1:
            raise ConfigurationError("last layer must have one output")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            wv, bv = ad.value_of(w), ad.value_of(b)
            if wv.shape[0] != bv.shape[0]:
                raise ConfigurationError(f"layer {k}: bias length {bv.shape[0]} != {wv.shape[0]}")
            if k and wv.shape[1] != ad.value_of(self.weights[k - 1]).shape[0]:
                raise ConfigurationError(f"layer {k}: fan_in mismatch")

    @property
    def widths(self) -> list[int]:
        ws = [ad.value_of(w) for w in self.weights]
        return [ws[0].shape[1]] + [w.shape[0] for w in ws]

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def names(self) -> list[str]:
        out = []
        for k in range(len(self.weights)):
            out += [f"mlp.W{k}", f"mlp.b{k}"]
        return out

    def with_arrays(self, arrays) -> "MlpParams":
        return replace(self, weights=list(arrays[0::2]), biases=list(arrays[1::2]))

    def copy(self) -> "MlpParams":
        return self.with_arrays([np.array(a, copy=True) for a in self.arrays()])


def init_mlp(widths=(2, 64, 64, 64, 64, 1), rng=None, scale: float = 1.0) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(rng)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, scale)


def zero_mlp(widths=(2, 64, 64, 64, 64, 1), scale: float = 1.0) -> MlpParams:
    return MlpParams(
        [np.zeros((o, i)) for i, o in zip(widths[:-1], widths[1:])],
        [np.zeros(o) for o in widths[1:]],
        scale,
    )


def _as_column(x):
    return ad.reshape(x, (-1, 1))


def _first_layer(a_s, t_s, w, b):
    # (N,1)*(1,H) products instead of stacking the inputs into a matrix
    return _as_column(a_s) * ad.reshape(w[:, 0], (1, -1)) + _as_column(t_s) * ad.reshape(
        w[:, 1], (1, -1)
    ) + ad.reshape(b, (1, -1))


def _squeeze_like(out, a_s):
    if np.ndim(ad.value_of(a_s)) == 0:
        return ad.reshape(out, ())
    return ad.reshape(out, (-1,))


def mlp_forward(a_scaled, t_scaled, p: MlpParams):
    """Surrogate density ``scale * softplus(net(a, t))`` on scaled inputs.

    Inputs may be scalars or 1-D arrays (or nodes holding them). The result
    is a node when any input or parameter is a node.
    """
    h = _first_layer(a_scaled, t_scaled, p.weights[0], p.biases[0])
    for w, b in zip(p.weights[1:], p.biases[1:]):
        h = ad.tanh(h)
        h = ad.matmul(h, _transpose(w)) + ad.reshape(b, (1, -1))
    out = ad.softplus(h) * p.scale
    return _squeeze_like(out, a_scaled)


def mlp_with_input_derivatives(a_scaled, t_scaled, p: MlpParams):
    """Return ``(n, dn/da_scaled, dn/dt_scaled)``.

    Input derivatives are propagated forward as tangents through each layer,
    so all three outputs stay differentiable in the parameters on a tape.
    """
    w0, b0 = p.weights[0], p.biases[0]
    z = _first_layer(a_scaled, t_scaled, w0, b0)
    za = ad.reshape(w0[:, 0], (1, -1))
    zt = ad.reshape(w0[:, 1], (1, -1))
    for w, b in zip(p.weights[1:], p.biases[1:]):
        h = ad.tanh(z)
        d = 1.0 - h * h
        wt = _transpose(w)
        z = ad.matmul(h, wt) + ad.reshape(b, (1, -1))
        za = ad.matmul(d * za, wt)
        zt = ad.matmul(d * zt, wt)
    n = ad.softplus(z) * p.scale
    s = ad.sigmoid(z) * p.scale
    return (
        _squeeze_like(n, a_scaled),
        _squeeze_like(s * za, a_scaled),
        _squeeze_like(s * zt, a_scaled),
    )


def _transpose(w):
    if isinstance(w, ad.AdNode):
        v = w.value
        return w.tape._record(v.T, ((w, lambda g: g.T),))
    return w.T


# -- LSTM --------------------------------------------------------------------


@dataclass
class LstmParams:
    wx: dict  # gate -> (H, D)
    wh: dict  # gate -> (H, H)
    b: dict  # gate -> (H,)
    w_mu: object
    b_mu: object
    w_b: object
    b_b: object
    eps_mu: float = 0.05
    eps_b: float = 2.0

    def __post_init__(self):
        if set(self.wx) != set(GATES) or set(self.wh) != set(GATES) or set(self.b) != set(GATES):
            raise ConfigurationError("LSTM needs input/forget/output/candidate gate parameters")
        H, D = ad.value_of(self.wx["i"]).shape
        for g in GATES:
            if ad.value_of(self.wx[g]).shape != (H, D):
                raise ConfigurationError(f"gate {g}: input weights must be {(H, D)}")
            if ad.value_of(self.wh[g]).shape != (H, H):
                raise ConfigurationError(f"gate {g}: recurrent weights must be {(H, H)}")
            if ad.value_of(self.b[g]).shape != (H,):
                raise ConfigurationError(f"gate {g}: bias must be ({H},)")
        for w in (self.w_mu, self.w_b):
            if ad.value_of(w).shape != (H,):
                raise ConfigurationError(f"head weights must be ({H},)")

    @property
    def hidden_size(self) -> int:
        return ad.value_of(self.wx["i"]).shape[0]

    @property
    def input_size(self) -> int:
        return ad.value_of(self.wx["i"]).shape[1]

    def arrays(self) -> list:
        out = []
        for g in GATES:
            out += [self.wx[g], self.wh[g], self.b[g]]
        return out + [self.w_mu, self.b_mu, self.w_b, self.b_b]

    def names(self) -> list[str]:
        out = []
        for g in GATES:
            out += [f"lstm.Wx_{g}", f"lstm.Wh_{g}", f"lstm.b_{g}"]
        return out + ["head.W_mu", "head.b_mu", "head.W_B", "head.b_B"]

    def with_arrays(self, arrays) -> "LstmParams":
        arrays = list(arrays)
        wx, wh, b = {}, {}, {}
        for k, g in enumerate(GATES):
            wx[g], wh[g], b[g] = arrays[3 * k: 3 * k + 3]
        w_mu, b_mu, w_b, b_b = arrays[12:16]
        return replace(self, wx=wx, wh=wh, b=b, w_mu=w_mu, b_mu=b_mu, w_b=w_b, b_b=b_b)

    def copy(self) -> "LstmParams":
        return self.with_arrays([np.array(a, copy=True) for a in self.arrays()])

    def with_zero_heads(self) -> "LstmParams":
        H = self.hidden_size
        return replace(self, w_mu=np.zeros(H), b_mu=np.float64(0.0),
                       w_b=np.zeros(H), b_b=np.float64(0.0))


def init_lstm(input_size: int, hidden_size: int = 16, rng=None,
              eps_mu: float = 0.05, eps_b: float = 2.0, init_range: float = 0.08) -> LstmParams:
    rng = np.random.default_rng(rng)
    u = lambda *shape: rng.uniform(-init_range, init_range, size=shape)  # noqa: E731
    wx = {g: u(hidden_size, input_size) for g in GATES}
    wh = {g: u(hidden_size, hidden_size) for g in GATES}
    b = {g: u(hidden_size) for g in GATES}
    return LstmParams(wx, wh, b, u(hidden_size), np.float64(u(1)[0]),
                      u(hidden_size), np.float64(u(1)[0]), eps_mu, eps_b)


def zero_lstm(input_size: int, hidden_size: int = 16, **kw) -> LstmParams:
    H, D = hidden_size, input_size
    return LstmParams(
        {g: np.zeros((H, D)) for g in GATES}, {g: np.zeros((H, H)) for g in GATES},
        {g: np.zeros(H) for g in GATES}, np.zeros(H), np.float64(0.0),
        np.zeros(H), np.float64(0.0), **kw,
    )


def lstm_cell(x_t, h_prev, c_prev, p: LstmParams):
    """One gated update; returns ``(h_t, c_t)``."""
    H, D = p.hidden_size, p.input_size
    if np.shape(ad.value_of(x_t)) != (D,):
        raise ConfigurationError(f"x_t must have length {D}")
    if np.shape(ad.value_of(h_prev)) != (H,) or np.shape(ad.value_of(c_prev)) != (H,):
        raise ConfigurationError(f"hidden and cell state must have length {H}")

    def pre(g):
        return ad.matmul(p.wx[g], x_t) + ad.matmul(p.wh[g], h_prev) + p.b[g]

    i = ad.sigmoid(pre("i"))
    f = ad.sigmoid(pre("f"))
    o = ad.sigmoid(pre("o"))
    cand = ad.tanh(pre("c"))
    c_t = f * c_prev + i * cand
    h_t = o * ad.tanh(c_t)
    return h_t, c_t


def refinement_heads(h_t, p: LstmParams):
    """Mortality and birth refinements, each squashed to ``|.| < eps``."""
    raw_mu = ad.matmul(p.w_mu, h_t) + p.b_mu
    raw_b = ad.matmul(p.w_b, h_t) + p.b_b
    d_mu = ad.tanh(raw_mu * (1.0 / p.eps_mu)) * p.eps_mu
    d_b = ad.tanh(raw_b * (1.0 / p.eps_b)) * p.eps_b
    return d_mu, d_b


def unroll(xs, p: LstmParams):
    """Run the cell over the feature sequence from zero state and return the
    per-step refinements as two length-T sequences."""
    H = p.hidden_size
    h, c = np.zeros(H), np.zeros(H)
    d_mu, d_b = [], []
    for x in xs:
        h, c = lstm_cell(x, h, c, p)
        dm, db = refinement_heads(h, p)
        d_mu.append(dm)
        d_b.append(db)
    return d_mu, d_b


# -- parameter wrapping and checkpoints -------------------------------------


def as_nodes(tape: ad.Tape, arrays):
    return [tape.var(a) for a in arrays]


def save_checkpoint(path, names, arrays, meta=None) -> Path:
    """Write ``name,shape,values...`` rows plus a JSON sidecar with ``meta``.

    Values are written with ``repr`` so floats round-trip exactly.
    """
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for name, arr in zip(names, arrays):
            arr = np.asarray(arr, dtype=float)
            shape = "x".join(str(s) for s in arr.shape)
            w.writerow([name, shape] + [repr(float(v)) for v in arr.ravel()])
    sidecar = path.with_suffix(".json")
    with open(sidecar, "w") as fh:
        json.dump({"names": list(names), "meta": meta or {}}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``: returns ``(names, arrays, meta)``."""
    path = Path(path)
    names, arrays = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            name, shape = row[0], row[1]
            dims = tuple(int(s) for s in shape.split("x")) if shape else ()
            vals = np.array([float(v) for v in row[2:]], dtype=float)
            names.append(name)
            arrays.append(vals.reshape(dims) if dims else np.float64(vals[0]))
    meta = {}
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text()).get("meta", {})
    return names, arrays, meta


@dataclass
class Checkpoint:
    mlp: MlpParams
    lstm: LstmParams | None = None
    meta: dict = field(default_factory=dict)

    def save(self, path) -> Path:
        names, arrays = self.mlp.names(), self.mlp.arrays()
        meta = dict(self.meta, widths=self.mlp.widths, scale=float(self.mlp.scale))
        if self.lstm is not None:
            names += self.lstm.names()
            arrays += self.lstm.arrays()
            meta.update(hidden_size=self.lstm.hidden_size, input_size=self.lstm.input_size,
                        eps_mu=self.lstm.eps_mu, eps_b=self.lstm.eps_b)
        return save_checkpoint(path, names, arrays, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        names, arrays, meta = load_checkpoint(path)
        n_mlp = sum(1 for n in names if n.startswith("mlp."))
        mlp = MlpParams(list(arrays[0:n_mlp:2]), list(arrays[1:n_mlp:2]), float(meta.get("scale", 1.0)))
        lstm = None
        if n_mlp < len(arrays):
            tmpl = zero_lstm(int(meta["input_size"]), int(meta["hidden_size"]),
                             eps_mu=float(meta["eps_mu"]), eps_b=float(meta["eps_b"]))
            lstm = tmpl.with_arrays(arrays[n_mlp:])
        return cls(mlp, lstm, meta)
