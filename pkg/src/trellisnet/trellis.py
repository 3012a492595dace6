"""Trellis network layers: one tied kernel applied at every depth, with the
input re-injected into each layer.

Parameters are plain dicts of arrays (or :class:`Tensor` leaves during a
forward pass):

``Wz``      ``[r, q, 2]`` kernel over the hidden channels
``Wx``      ``[r, p, 2]`` injection kernel over the input channels
``bias``    ``[r]``
``Wz_v``, ``Wz_g``  weight-normalized replacement for ``Wz`` (direction, row gains)

``r == 4 * q`` for the LSTM gate and ``r == q`` for elementwise activations.
Only two kernel taps are supported: tap 0 reads ``t - dilation``, tap 1 reads ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ELEMENTWISE = {"tanh": ad.tanh, "sigmoid": ad.sigmoid}
ACTIVATIONS = ("lstm_gate",) + tuple(ELEMENTWISE)
KERNEL_SIZE = 2


@dataclass
class TrellisConfig:
    p: int
    q: int
    depth: int
    dilations: Optional[Sequence[int]] = None
    activation: str = "lstm_gate"
    aux_every: int = 0
    inject_every: int = 1
    weight_norm: bool = False

    def __post_init__(self):
        if self.dilations is None:
            self.dilations = [1] * self.depth
        self.dilations = [int(d) for d in self.dilations]
        if self.p < 1 or self.q < 1 or self.depth < 1:
            raise ValueError("p, q and depth must be positive")
        if len(self.dilations) != self.depth:
            raise ValueError(f"{len(self.dilations)} dilations given for depth {self.depth}")
        if any(d < 1 for d in self.dilations):
            raise ValueError("dilations must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if self.aux_every < 0:
            raise ValueError("aux_every must be >= 0")
        if self.inject_every < 1:
            raise ValueError("inject_every must be >= 1")

    @property
    def gated(self) -> bool:
        return self.activation == "lstm_gate"

    @property
    def r(self) -> int:
        return 4 * self.q if self.gated else self.q

    def aux_layers(self) -> List[int]:
        """Layers tapped for auxiliary losses: D-l, D-2l, ... (> 0)."""
        if self.aux_every <= 0:
            return []
        return list(range(self.depth - self.aux_every, 0, -self.aux_every))

    def injected(self, layer: int) -> bool:
        """Whether 1-based ``layer`` receives the input injection."""
        return (layer - 1) % self.inject_every == 0


def doubling_dilations(depth: int, cap: Optional[int] = None) -> List[int]:
    """1, 2, 4, ... per layer, optionally restarting once ``cap`` is exceeded."""
    out, d = [], 1
    for _ in range(depth):
        out.append(d)
        d *= 2
        if cap is not None and d > cap:
            d = 1
    return out


def receptive_field(dilations: Sequence[int]) -> int:
    """Largest lag ``L`` such that the output at ``t`` depends on ``x[t - L]``.

    Layer 1 convolves the all-zero ``z^(0)`` so its dilation never reaches
    the input; the injection contributes ``x[t-1]``.  Equals ``sum(dilations)``
    whenever the first dilation is 1.
    """
    return 1 + int(np.sum(dilations[1:]))


@dataclass
class LayerState:
    z2: Tensor
    z1: Optional[Tensor] = None


@dataclass
class HistoryPad:
    """Boundary values carried into the next subsequence (plain arrays).

    Shapes are ``[q]``/``[p]`` for a single sequence or ``[q, B]``/``[p, B]``
    for a batch.  The same final-layer vector pads every layer.
    """

    z2_pad: np.ndarray
    x_pad: np.ndarray
    z1_pad: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, config: TrellisConfig, batch: Optional[int] = None) -> "HistoryPad":
        tail = () if batch is None else (batch,)
        return cls(
            z2_pad=np.zeros((config.q,) + tail),
            x_pad=np.zeros((config.p,) + tail),
            z1_pad=np.zeros((config.q,) + tail) if config.gated else None,
        )


@dataclass
class ForwardResult:
    z2: Tensor
    aux_taps: List[Tensor]
    new_pad: HistoryPad
    final_state: LayerState
    layers: List[LayerState] = field(default_factory=list)


def init_params(config: TrellisConfig, rng: np.random.Generator,
                init_scale: Optional[float] = None) -> Dict[str, np.ndarray]:
    """Random tied parameters; gate biases start at zero except the forget
    gate, which starts at 1 so cell channels initially persist."""
    r, p, q = config.r, config.p, config.q
    s = init_scale if init_scale is not None else 1.0 / np.sqrt(KERNEL_SIZE * (p + q))
    Wz = rng.uniform(-s, s, size=(r, q, KERNEL_SIZE))
    params = {
        "Wx": rng.uniform(-s, s, size=(r, p, KERNEL_SIZE)),
        "bias": np.zeros(r),
    }
    if config.gated:
        params["bias"][:q] = 1.0
    if config.weight_norm:
        params["Wz_v"] = Wz
        params["Wz_g"] = np.sqrt((Wz.reshape(r, -1) ** 2).sum(axis=1))
    else:
        params["Wz"] = Wz
    return params


def param_count(params: Dict[str, np.ndarray]) -> int:
    return int(np.sum([np.size(v) for v in params.values()]))


def apply_weight_norm(V, gains) -> Tensor:
    """Effective kernel whose row ``i`` is ``gains[i] * V[i] / ||V[i]||``."""
    g = gains.data if isinstance(gains, Tensor) else np.asarray(gains, dtype=np.float64)
    if np.any(g <= 0):
        raise ValueError("weight-norm gains must be strictly positive")
    return ad.weight_norm(V, gains)


def effective_kernel(params: Dict[str, Tensor], kernel_mask: Optional[np.ndarray] = None) -> Tensor:
    if "Wz_v" in params:
        Wz = ad.weight_norm(params["Wz_v"], params["Wz_g"])
    else:
        Wz = params["Wz"]
    if kernel_mask is not None:
        Wz = ad.hadamard(Wz, ad.constant(kernel_mask))
    return Wz


def precompute_injection(x: Tensor, Wx: Tensor, bias: Tensor,
                         x_pad: Optional[np.ndarray] = None) -> Tensor:
    """``Wx[:,:,0] x[t-1] + Wx[:,:,1] x[t] + bias`` for every t (x[-1] = x_pad)."""
    x = ad._as_tensor(x)
    pad = None
    if x_pad is not None:
        pad = ad.constant(np.broadcast_to(np.asarray(x_pad)[..., None], x.shape[:-1] + (1,)))
    return ad.add(ad.causal_conv1d(x, Wx, 1, pad), bias)


def gated_activation(zhat: Tensor, z1_prev: Tensor) -> Tuple[Tensor, Tensor]:
    """LSTM-style gate on a ``[4q, ...]`` pre-activation.

    Row blocks are (forget, input, candidate, output)::

        z1 = sigmoid(f) * z1_prev + sigmoid(i) * tanh(c)
        z2 = sigmoid(o) * tanh(z1)
    """
    rows = zhat.shape[0]
    if rows % 4:
        raise ValueError(f"gated activation needs 4q rows, got {rows}")
    q = rows // 4
    f, i, c, o = (ad.slice_channels(zhat, k * q, (k + 1) * q) for k in range(4))
    z1 = ad.add(ad.hadamard(ad.sigmoid(f), z1_prev),
                ad.hadamard(ad.sigmoid(i), ad.tanh(c)))
    z2 = ad.hadamard(ad.sigmoid(o), ad.tanh(z1))
    return z1, z2


def _pad_block(vec: Optional[np.ndarray], width: int, like: Tensor) -> Optional[Tensor]:
    if vec is None:
        return None
    block = np.broadcast_to(np.asarray(vec, dtype=np.float64)[..., None], like.shape[:-1] + (width,))
    return ad.constant(block)


def layer_forward(state: LayerState, x_tilde: Tensor, Wz: Tensor, dilation: int,
                  config: TrellisConfig, pad: Optional[HistoryPad] = None,
                  vd_mask: Optional[np.ndarray] = None) -> LayerState:
    """One trellis layer: causal conv of ``z2`` plus injection, then activation.

    ``x_tilde`` is the precomputed injection ``[r, ...]``, or just the ``[r]``
    bias for layers that skip injection.  ``vd_mask`` scales ``z2`` by channel, identically at
    every time step.
    """
    z2_pad = _pad_block(pad.z2_pad if pad else None, dilation, state.z2)
    zhat = ad.add(ad.causal_conv1d(state.z2, Wz, dilation, z2_pad), x_tilde)
    if config.gated:
        z1_pad = _pad_block(pad.z1_pad if pad else None, dilation, state.z1)
        z1_prev = ad.time_shift(state.z1, dilation, z1_pad)
        z1, z2 = gated_activation(zhat, z1_prev)
    else:
        z1, z2 = None, ELEMENTWISE[config.activation](zhat)
    if vd_mask is not None:
        z2 = ad.hadamard(z2, ad.constant(vd_mask))
    return LayerState(z2=z2, z1=z1)


def repackage(final_state: LayerState, x: Tensor) -> HistoryPad:
    """Detached last-step values of the final layer (and input) for the next
    subsequence; gradients stop here."""
    return HistoryPad(
        z2_pad=final_state.z2.data[..., -1].copy(),
        x_pad=ad._as_tensor(x).data[..., -1].copy(),
        z1_pad=None if final_state.z1 is None else final_state.z1.data[..., -1].copy(),
    )


def network_forward(x: Tensor, params: Dict[str, Tensor], config: TrellisConfig,
                    pad: Optional[HistoryPad] = None, vd_mask: Optional[np.ndarray] = None,
                    kernel_mask: Optional[np.ndarray] = None,
                    mask_hook: Optional[Callable[[int, np.ndarray], None]] = None,
                    keep_layers: bool = False) -> ForwardResult:
    """Run all ``config.depth`` layers with the same parameters.

    ``x`` is ``[p, T]`` or ``[p, B, T]``.  Layer 0 is all zeros.  Returns the
    final ``z2``, the ``z2`` of each auxiliary layer (deepest first), and the
    history pad for the next subsequence.  ``mask_hook(layer, mask)`` is
    called whenever the variational-dropout mask is applied.
    """
    x = ad._as_tensor(x)
    if x.shape[0] != config.p:
        raise ValueError(f"input has {x.shape[0]} channels, config expects p={config.p}")
    if vd_mask is not None and np.shape(vd_mask) != (config.q,):
        raise ValueError(f"vd_mask must have shape ({config.q},)")
    Wz = effective_kernel(params, kernel_mask)
    if Wz.shape != (config.r, config.q, KERNEL_SIZE) or params["Wx"].shape != (config.r, config.p, KERNEL_SIZE):
        raise ValueError("parameter shapes do not match config")
    x_tilde = precompute_injection(x, params["Wx"], params["bias"], pad.x_pad if pad else None)
    hidden_shape = (config.q,) + x.shape[1:]
    zero = ad.constant(np.zeros(hidden_shape))
    state = LayerState(z2=zero, z1=zero if config.gated else None)
    layers = [state] if keep_layers else []
    aux_at = set(config.aux_layers())
    taps = {}
    for i, d in enumerate(config.dilations, start=1):
        # layers that skip injection still get the bias
        inj = x_tilde if config.injected(i) else params["bias"]
        state = layer_forward(state, inj, Wz, d, config, pad, vd_mask)
        if vd_mask is not None and mask_hook is not None:
            mask_hook(i, vd_mask)
        if keep_layers:
            layers.append(state)
        if i in aux_at:
            taps[i] = state.z2
    aux = [taps[i] for i in sorted(taps, reverse=True)]
    return ForwardResult(z2=state.z2, aux_taps=aux, new_pad=repackage(state, x),
                         final_state=state, layers=layers)


def as_constants(params: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    return {k: ad.constant(v) for k, v in params.items()}


def forward_numpy(x: np.ndarray, params: Dict[str, np.ndarray], config: TrellisConfig,
                  pad: Optional[HistoryPad] = None, keep_layers: bool = False) -> ForwardResult:
    """Tape-free forward pass on plain arrays."""
    return network_forward(ad.constant(x), as_constants(params), config, pad, keep_layers=keep_layers)
