"""Embedding truncated RNN/LSTM stacks into sparse-kernel trellis networks.

An L-layer RNN of width d becomes a trellis of width L*d whose channel
groups hold the RNN layers.  Group ``i`` at layer ``j`` and time ``t`` is the
state of RNN layer ``i`` at ``t`` for a run started at ``t - j + i`` (1-based);
after ``M + L - 1`` layers the last group is the M-truncated output.

Two conventions make the construction exact:

* the state before the first element is zero (see ``rnn.run_truncated``);
* "future-start" groups must stay exactly zero, so the elementwise
  nonlinearity needs ``g(0) == 0`` when L > 1, and an LSTM with L > 1 needs
  a zero candidate (``g``) gate bias.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .rnn import (LSTM_GATES, LstmParams, VanillaRnnParams, history_table, run_truncated)
from .trellis import TrellisConfig, forward_numpy, network_forward

VANILLA_TOL = 1e-9
LSTM_TOL = 1e-8
TRELLIS_GATE_ORDER = ("f", "i", "g", "o")  # forget, input, candidate, output


@dataclass
class SparseKernelPair:
    """``W1`` reads time ``t-1`` and ``W2`` reads time ``t``; columns are ``[x | z]``."""

    W1: np.ndarray
    W2: np.ndarray

    @classmethod
    def from_trellis(cls, params: Dict[str, np.ndarray]) -> "SparseKernelPair":
        W1 = np.concatenate([params["Wx"][:, :, 0], params["Wz"][:, :, 0]], axis=1)
        W2 = np.concatenate([params["Wx"][:, :, 1], params["Wz"][:, :, 1]], axis=1)
        return cls(W1, W2)


def vanilla_block_mask(L: int, d: int, p: int):
    """Boolean masks of entries of (W1, W2) that may be nonzero."""
    W1 = np.zeros((L * d, p + L * d), dtype=bool)
    W2 = np.zeros_like(W1)
    for i in range(L):
        rows = slice(i * d, (i + 1) * d)
        W1[rows, p + i * d:p + (i + 1) * d] = True
        if i == 0:
            W2[rows, :p] = True
        else:
            W2[rows, p + (i - 1) * d:p + i * d] = True
    return W1, W2


@dataclass
class EmbeddedTrellis:
    config: TrellisConfig
    params: Dict[str, np.ndarray]
    cell: str
    L: int
    d: int
    M: int

    @property
    def kernels(self) -> SparseKernelPair:
        return SparseKernelPair.from_trellis(self.params)

    def outputs(self, x: np.ndarray) -> np.ndarray:
        """The truncated-RNN output: last ``d`` channels of the final layer."""
        z2 = forward_numpy(x, self.params, self.config).z2.data
        return z2[-self.d:]


def _check_widths(params):
    if isinstance(params, VanillaRnnParams):
        shapes = [w.shape[0] for w in params.W_hh] + [w.shape[0] for w in params.W_hx]
    else:
        shapes = [layer[k].shape[0] for layer in params.layers for k in layer]
    if len(set(shapes)) != 1:
        raise ValueError("embedding requires every RNN layer to have the same width")


def embed_vanilla(params: VanillaRnnParams, M: int) -> EmbeddedTrellis:
    """Sparse trellis of depth ``M + L - 1`` reproducing the M-truncated RNN."""
    if M < 1:
        raise ValueError("M must be >= 1")
    _check_widths(params)
    L, d, p = params.L, params.d, params.p
    if L > 1 and params.nonlinearity != "tanh":
        raise ValueError("exact embedding with L > 1 needs g(0) == 0; use tanh")
    q = L * d
    Wz = np.zeros((q, q, 2))
    Wx = np.zeros((q, p, 2))
    for i in range(L):
        rows = slice(i * d, (i + 1) * d)
        Wz[rows, i * d:(i + 1) * d, 0] = params.W_hh[i]
        if i == 0:
            Wx[rows, :, 1] = params.W_hx[0]
        else:
            Wz[rows, (i - 1) * d:i * d, 1] = params.W_hx[i]
    config = TrellisConfig(p=p, q=q, depth=M + L - 1, activation=params.nonlinearity)
    return EmbeddedTrellis(config, {"Wz": Wz, "Wx": Wx, "bias": np.zeros(q)}, "vanilla", L, d, M)


def embed_lstm(params: LstmParams, M: int) -> EmbeddedTrellis:
    """LSTM stack as a gated trellis with ``4*L*d`` gate rows.

    Gate block ``k`` (forget, input, candidate, output) holds one ``d``-row
    group per RNN layer; cell states ride in the ``z1`` channels.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    _check_widths(params)
    L, d, p = params.L, params.d, params.p
    if L > 1 and any(np.any(layer["b_g"] != 0) for layer in params.layers):
        raise ValueError("exact embedding with L > 1 needs a zero candidate-gate bias b_g")
    q = L * d
    Wz = np.zeros((4 * q, q, 2))
    Wx = np.zeros((4 * q, p, 2))
    bias = np.zeros(4 * q)
    for k, gate in enumerate(TRELLIS_GATE_ORDER):
        for i, P in enumerate(params.layers):
            rows = slice(k * q + i * d, k * q + (i + 1) * d)
            Wz[rows, i * d:(i + 1) * d, 0] = P[f"U_{gate}"]
            if i == 0:
                Wx[rows, :, 1] = P[f"W_{gate}"]
            else:
                Wz[rows, (i - 1) * d:i * d, 1] = P[f"W_{gate}"]
            bias[rows] = P[f"b_{gate}"]
    config = TrellisConfig(p=p, q=q, depth=M + L - 1, activation="lstm_gate")
    return EmbeddedTrellis(config, {"Wz": Wz, "Wx": Wx, "bias": bias}, "lstm", L, d, M)


def rnn_gradients(embedded: EmbeddedTrellis, grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Map trellis kernel gradients back onto the RNN weights they copy.

    Each RNN weight occupies exactly one kernel block, so its gradient is
    that block of the kernel gradient.
    """
    L, d, q = embedded.L, embedded.d, embedded.L * embedded.d
    gz, gx = grads["Wz"], grads["Wx"]
    out = {}
    if embedded.cell == "vanilla":
        for i in range(L):
            rows = slice(i * d, (i + 1) * d)
            out[f"layer{i}.W_hh"] = gz[rows, i * d:(i + 1) * d, 0]
            out[f"layer{i}.W_hx"] = gx[rows, :, 1] if i == 0 else gz[rows, (i - 1) * d:i * d, 1]
        return out
    gb = grads["bias"]
    for k, gate in enumerate(TRELLIS_GATE_ORDER):
        for i in range(L):
            rows = slice(k * q + i * d, k * q + (i + 1) * d)
            out[f"layer{i}.U_{gate}"] = gz[rows, i * d:(i + 1) * d, 0]
            out[f"layer{i}.W_{gate}"] = gx[rows, :, 1] if i == 0 else gz[rows, (i - 1) * d:i * d, 1]
            out[f"layer{i}.b_{gate}"] = gb[rows]
    return out


@dataclass
class StateTrace:
    """Hidden groups of one trellis layer with the run start each one encodes.

    ``groups[i, :, t]`` is RNN layer ``i`` at time ``t`` for a run started at
    ``starts[i, t]`` (0-based; negative means before the sequence).
    """

    layer: int
    groups: np.ndarray
    starts: np.ndarray


def state_trace(embedded: EmbeddedTrellis, x: np.ndarray, j: int) -> StateTrace:
    if not 0 <= j <= embedded.config.depth:
        raise ValueError(f"layer {j} outside [0, {embedded.config.depth}]")
    res = forward_numpy(x, embedded.params, embedded.config, keep_layers=True)
    z2 = res.layers[j].z2.data
    L, d, T = embedded.L, embedded.d, x.shape[1]
    groups = z2.reshape(L, d, T)
    t = np.arange(T)
    starts = np.stack([t - j + i + 1 for i in range(L)])
    return StateTrace(j, groups, starts)


def expected_trace(table: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Oracle values for a trace from ``rnn.history_table`` output."""
    T, _, L, d = table.shape
    out = np.zeros((L, d, T))
    for i in range(L):
        for t in range(T):
            s = starts[i, t]
            if s <= t:
                out[i, :, t] = table[max(s, 0), t, i]
    return out


@dataclass
class EquivalenceReport:
    cell: str
    dims: Dict[str, int]
    seed: int
    trials: int
    tolerance: float
    max_abs_err: float = 0.0
    layer_errors: List[float] = field(default_factory=list)
    trial_errors: List[float] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_abs_err <= self.tolerance

    def to_dict(self) -> dict:
        out = asdict(self)
        out["passed"] = self.passed
        return out


def random_rnn(cell: str, L: int, d: int, p: int, rng: np.random.Generator):
    if cell == "vanilla":
        return VanillaRnnParams.random(L, d, p, rng)
    if cell == "lstm":
        return LstmParams.random(L, d, p, rng, candidate_bias=(L == 1))
    raise ValueError(f"unknown cell {cell!r}")


def embed(params, M: int) -> EmbeddedTrellis:
    if isinstance(params, LstmParams):
        return embed_lstm(params, M)
    return embed_vanilla(params, M)


def verify_equivalence(cell: str, L: int, d: int, p: int, M: int, T: int,
                       trials: int = 1, seed: int = 0, trace_layers: bool = True) -> EquivalenceReport:
    """Compare embedded trellis outputs with ``run_truncated`` on random nets.

    Weights are uniform in [-0.5, 0.5]; inputs uniform in [-1, 1].  With
    ``trace_layers`` every intermediate layer is also checked against the
    windowed-run oracle.
    """
    for name, v in dict(L=L, d=d, p=p, M=M, T=T, trials=trials).items():
        if v < 1:
            raise ValueError(f"{name} must be >= 1")
    tol = VANILLA_TOL if cell == "vanilla" else LSTM_TOL
    report = EquivalenceReport(cell, dict(L=L, d=d, p=p, M=M, T=T), seed, trials, tol)
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    depth = M + L - 1
    layer_err = np.zeros(depth + 1)
    for _ in range(trials):
        params = random_rnn(cell, L, d, p, rng)
        x = rng.uniform(-1.0, 1.0, size=(p, T))
        emb = embed(params, M)
        err = float(np.abs(emb.outputs(x) - run_truncated(x, M, params)).max())
        report.trial_errors.append(err)
        if trace_layers:
            table = history_table(x, params)
            res = forward_numpy(x, emb.params, emb.config, keep_layers=True)
            t = np.arange(T)
            for j in range(depth + 1):
                starts = np.stack([t - j + i + 1 for i in range(L)])
                got = res.layers[j].z2.data.reshape(L, d, T)
                layer_err[j] = max(layer_err[j], float(np.abs(got - expected_trace(table, starts)).max()))
    report.max_abs_err = max(report.trial_errors)
    report.layer_errors = layer_err.tolist() if trace_layers else []
    report.seconds = time.perf_counter() - start
    return report


def trellis_loss_and_rnn_grads(embedded: EmbeddedTrellis, x: np.ndarray, weights: np.ndarray):
    """``sum(weights * output)`` through the trellis and its RNN-weight gradient."""
    tape = ad.Tape()
    leaves = {k: tape.param(v, k) for k, v in embedded.params.items()}
    res = network_forward(ad.constant(x), leaves, embedded.config)
    out = ad.slice_channels(res.z2, embedded.config.q - embedded.d, embedded.config.q)
    loss = ad.sum(ad.hadamard(out, ad.constant(weights)))
    grads = ad.backprop(tape, loss)
    return loss.item(), rnn_gradients(embedded, {k: grads[t] for k, t in leaves.items()})
