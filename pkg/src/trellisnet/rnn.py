"""Plain numpy vanilla-RNN and LSTM stacks, full and M-truncated.

These are oracles for the trellis embedding, written for clarity rather
than speed.  Sequences are channels-first ``[channels, T]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

LSTM_GATES = ("f", "i", "g", "o")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


NONLINEARITIES = {"tanh": np.tanh, "sigmoid": _sigmoid}


@dataclass
class VanillaRnnParams:
    """``h[i]_t = g(W_hx[i] h[i-1]_t + W_hh[i] h[i]_{t-1})`` with ``h[0]_t = x_t``."""

    W_hx: List[np.ndarray]
    W_hh: List[np.ndarray]
    nonlinearity: str = "tanh"

    def __post_init__(self):
        if len(self.W_hx) != len(self.W_hh) or not self.W_hx:
            raise ValueError("need the same positive number of W_hx and W_hh matrices")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        d = self.W_hh[0].shape[1]
        for i, (wx, wh) in enumerate(zip(self.W_hx, self.W_hh)):
            if wh.shape != (d, d):
                raise ValueError(f"layer {i}: W_hh shape {wh.shape}, expected {(d, d)}")
            fan_in = self.p if i == 0 else d
            if wx.shape != (d, fan_in):
                raise ValueError(f"layer {i}: W_hx shape {wx.shape}, expected {(d, fan_in)}")

    @property
    def L(self) -> int:
        return len(self.W_hh)

    @property
    def d(self) -> int:
        return self.W_hh[0].shape[0]

    @property
    def p(self) -> int:
        return self.W_hx[0].shape[1]

    @classmethod
    def random(cls, L, d, p, rng, low=-0.5, high=0.5, nonlinearity="tanh"):
        W_hx = [rng.uniform(low, high, size=(d, p if i == 0 else d)) for i in range(L)]
        W_hh = [rng.uniform(low, high, size=(d, d)) for _ in range(L)]
        return cls(W_hx, W_hh, nonlinearity)

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for i in range(self.L):
            out[f"layer{i}.W_hx"] = self.W_hx[i]
            out[f"layer{i}.W_hh"] = self.W_hh[i]
        return out

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], nonlinearity="tanh"):
        L = len([k for k in arrays if k.endswith(".W_hh")])
        return cls([arrays[f"layer{i}.W_hx"] for i in range(L)],
                   [arrays[f"layer{i}.W_hh"] for i in range(L)], nonlinearity)


@dataclass
class LstmParams:
    """Per-layer dicts with ``W_<gate>``, ``U_<gate>``, ``b_<gate>`` for gates f, i, g, o."""

    layers: List[Dict[str, np.ndarray]]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("LSTM needs at least one layer")
        d = self.d
        for i, layer in enumerate(self.layers):
            fan_in = self.p if i == 0 else d
            for gate in LSTM_GATES:
                expect = {f"W_{gate}": (d, fan_in), f"U_{gate}": (d, d), f"b_{gate}": (d,)}
                for key, shape in expect.items():
                    if key not in layer:
                        raise ValueError(f"layer {i} is missing {key}")
                    if layer[key].shape != shape:
                        raise ValueError(f"layer {i}: {key} shape {layer[key].shape}, expected {shape}")

    @property
    def L(self) -> int:
        return len(self.layers)

    @property
    def d(self) -> int:
        return self.layers[0]["U_f"].shape[0]

    @property
    def p(self) -> int:
        return self.layers[0]["W_f"].shape[1]

    @classmethod
    def random(cls, L, d, p, rng, low=-0.5, high=0.5, candidate_bias=True):
        layers = []
        for i in range(L):
            layer = {}
            for gate in LSTM_GATES:
                layer[f"W_{gate}"] = rng.uniform(low, high, size=(d, p if i == 0 else d))
                layer[f"U_{gate}"] = rng.uniform(low, high, size=(d, d))
                layer[f"b_{gate}"] = rng.uniform(low, high, size=d)
            if not candidate_bias:
                layer["b_g"] = np.zeros(d)
            layers.append(layer)
        return cls(layers)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {f"layer{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.items()}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]):
        L = len([k for k in arrays if k.endswith(".U_f")])
        return cls([{k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith(f"layer{i}.")}
                    for i in range(L)])


def vanilla_step(h_prev: List[np.ndarray], x_t: np.ndarray, params: VanillaRnnParams) -> List[np.ndarray]:
    """One time step of every layer, bottom to top."""
    g = NONLINEARITIES[params.nonlinearity]
    below = np.asarray(x_t, dtype=np.float64)
    if below.shape != (params.p,):
        raise ValueError(f"x_t shape {below.shape}, expected ({params.p},)")
    out = []
    for i in range(params.L):
        h = g(params.W_hx[i] @ below + params.W_hh[i] @ h_prev[i])
        out.append(h)
        below = h
    return out


def lstm_step(h_prev: List[np.ndarray], c_prev: List[np.ndarray], x_t: np.ndarray,
              params: LstmParams) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    below = np.asarray(x_t, dtype=np.float64)
    if below.shape != (params.p,):
        raise ValueError(f"x_t shape {below.shape}, expected ({params.p},)")
    hs, cs = [], []
    for i, P in enumerate(params.layers):
        pre = {gate: P[f"W_{gate}"] @ below + P[f"U_{gate}"] @ h_prev[i] + P[f"b_{gate}"]
               for gate in LSTM_GATES}
        f, inp, o = _sigmoid(pre["f"]), _sigmoid(pre["i"]), _sigmoid(pre["o"])
        g = np.tanh(pre["g"])
        c = f * c_prev[i] + inp * g
        h = o * np.tanh(c)
        hs.append(h)
        cs.append(c)
        below = h
    return hs, cs


def zero_state(params) -> dict:
    z = [np.zeros(params.d) for _ in range(params.L)]
    if isinstance(params, LstmParams):
        return {"h": z, "c": [np.zeros(params.d) for _ in range(params.L)]}
    return {"h": z}


def run_full(x: np.ndarray, params, state: Optional[dict] = None, return_all: bool = False):
    """Unroll over ``x[p, T]`` from ``state`` (zero by default).

    Returns ``(y, final_state)`` where ``y[d, T]`` is the top layer's output.
    With ``return_all`` the first element is a list over time of per-layer
    hidden lists (and cells for LSTM) instead.
    """
    x = np.asarray(x, dtype=np.float64)
    state = zero_state(params) if state is None else {k: list(v) for k, v in state.items()}
    lstm = isinstance(params, LstmParams)
    ys, trace = [], []
    for t in range(x.shape[1]):
        if lstm:
            state["h"], state["c"] = lstm_step(state["h"], state["c"], x[:, t], params)
        else:
            state["h"] = vanilla_step(state["h"], x[:, t], params)
        ys.append(state["h"][-1])
        if return_all:
            trace.append({k: list(v) for k, v in state.items()})
    if return_all:
        return trace, state
    y = np.stack(ys, axis=1) if ys else np.zeros((params.d, 0))
    return y, state


def run_truncated(x: np.ndarray, M: int, params, zero_fill: bool = False) -> np.ndarray:
    """M-truncated outputs: ``y[:, t]`` is a fresh run over the last M inputs.

    Windows reaching before the first element start from the zero state at
    the sequence start (the trellis convention).  ``zero_fill=True`` instead
    feeds explicit zero vectors for those positions; the two agree for
    bias-free tanh networks.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    p, T = x.shape
    out = np.zeros((params.d, T))
    for t in range(T):
        lo = t - M + 1
        if lo >= 0:
            window = x[:, lo:t + 1]
        elif zero_fill:
            window = np.concatenate([np.zeros((p, -lo)), x[:, :t + 1]], axis=1)
        else:
            window = x[:, :t + 1]
        y, _ = run_full(window, params)
        out[:, t] = y[:, -1]
    return out


def history_table(x: np.ndarray, params) -> np.ndarray:
    """``H[s, t, i]``: layer-``i`` hidden at time ``t`` of a run started at ``s``.

    0-based; entries with ``s > t`` are zero (no history yet).  Used to check
    per-layer trellis states.
    """
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[1]
    H = np.zeros((T, T, params.L, params.d))
    for s in range(T):
        trace, _ = run_full(x[:, s:], params, return_all=True)
        for k, st in enumerate(trace):
            H[s, s + k] = np.stack(st["h"])
    return H
