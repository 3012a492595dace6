"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Shape conventions
-----------------
Sequence tensors are channels-first: ``[C, T]`` for one sequence or
``[C, B, T]`` for a batch (batch lanes sit between channels and time so
that every channel mixing step is a single matrix product).  Channel ops
(``concat_channels``, ``slice_channels``, channel broadcasting in ``add`` and
``hadamard``) always act on axis 0; time ops act on the last axis.

Every primitive checks its output for NaN/Inf and raises
:class:`NonFiniteError` instead of propagating garbage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's shape rule."""


class TapeError(RuntimeError):
    """Operands live on different tapes, or the loss is not on the tape."""


@dataclass
class _Node:
    op: str
    parents: Tuple[int, ...]
    # backward(grad_out, needs) -> tuple of parent grads (None where not needed)
    backward: Optional[Callable]
    operand_slots: Tuple[int, ...] = ()


class Tape:
    """Append-only record of primitive applications.

    Nodes are appended in execution order, so parents always precede their
    children and a single reverse sweep visits each node once.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self.leaves: List["Tensor"] = []

    def __len__(self):
        return len(self.nodes)

    def param(self, value: ArrayLike, name: Optional[str] = None) -> "Tensor":
        """Register a differentiable leaf."""
        data = np.array(value, dtype=np.float64)
        self.nodes.append(_Node("leaf", (), None))
        t = Tensor(data, tape=self, node=len(self.nodes) - 1, name=name)
        self.leaves.append(t)
        return t

    def _record(self, op, data, operands, backward) -> "Tensor":
        slots = tuple(i for i, o in enumerate(operands) if o.node is not None)
        parents = tuple(operands[i].node for i in slots)
        self.nodes.append(_Node(op, parents, backward, slots))
        return Tensor(data, tape=self, node=len(self.nodes) - 1)

    def free(self):
        self.nodes = []
        self.leaves = []


class Tensor:
    """A float64 array, optionally attached to a :class:`Tape` node.

    Equality is identity, so tensors can key gradient dictionaries.
    """

    __slots__ = ("data", "tape", "node", "name")

    def __init__(self, data: ArrayLike, tape: Optional[Tape] = None,
                 node: Optional[int] = None, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = f" node={self.node}" if self.node is not None else ""
        name = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}{name})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def constant(value: ArrayLike) -> Tensor:
    """Wrap a value as a tape-free constant."""
    return Tensor(np.array(value, dtype=np.float64))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _common_tape(operands: Iterable[Tensor]) -> Optional[Tape]:
    tape = None
    for o in operands:
        if o.tape is None:
            continue
        if tape is None:
            tape = o.tape
        elif o.tape is not tape:
            raise TapeError("operands are recorded on different tapes")
    return tape


def _check_finite(op: str, data: np.ndarray):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _emit(op: str, data: np.ndarray, operands: Sequence[Tensor], backward) -> Tensor:
    _check_finite(op, data)
    tape = _common_tape(operands)
    if tape is None:
        return Tensor(data)
    return tape._record(op, data, operands, backward)


def _channel_view(vec: np.ndarray, ndim: int) -> np.ndarray:
    return vec.reshape(vec.shape + (1,) * (ndim - 1))


def _broadcast_rule(op: str, a: Tensor, b: Tensor) -> str:
    # "same": identical shapes; "channel": b is [C] broadcast over a's trailing axes
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 2 and b.shape[0] == a.shape[0]:
        return "channel"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_channel(g: np.ndarray) -> np.ndarray:
    return g.reshape(g.shape[0], -1).sum(axis=1)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Sum of two tensors; ``b`` may be a ``[C]`` channel vector."""
    a, b = _as_tensor(a), _as_tensor(b)
    rule = _broadcast_rule("add", a, b)
    if rule == "same":
        out = a.data + b.data
    else:
        out = a.data + _channel_view(b.data, a.ndim)

    def backward(g, needs):
        gb = None
        if needs[1]:
            gb = g if rule == "same" else _reduce_channel(g)
        return g if needs[0] else None, gb

    return _emit("add", out, (a, b), backward)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be a ``[C]`` channel vector."""
    a, b = _as_tensor(a), _as_tensor(b)
    rule = _broadcast_rule("hadamard", a, b)
    bd = b.data if rule == "same" else _channel_view(b.data, a.ndim)
    ad = a.data
    out = ad * bd

    def backward(g, needs):
        ga = g * bd if needs[0] else None
        gb = None
        if needs[1]:
            gb = g * ad
            if rule == "channel":
                gb = _reduce_channel(gb)
        return ga, gb

    return _emit("hadamard", out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _emit("scale", x.data * c, (x,), lambda g, needs: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    # tanh form is overflow-free and gives sigmoid(0) == 0.5 exactly
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", s, (x,), lambda g, needs: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g, needs: (g * (1.0 - y * y),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the primitive's name
    """Sum of all entries as a scalar tensor."""
    x = _as_tensor(x)
    shape = x.shape
    return _emit("sum", np.array(x.data.sum()), (x,),
                 lambda g, needs: (np.full(shape, float(g)),))


# ---------------------------------------------------------------------------
# structural primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Contract the last axis of 2-D ``a`` with the first axis of ``b``.

    ``a[m, k] @ b[k, ...] -> [m, ...]``; with channels-first sequences this
    applies a channel-mixing matrix at every (batch, time) position.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim < 1 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot contract {a.shape} with {b.shape}")
    ad, bd = a.data, b.data
    out = np.tensordot(ad, bd, axes=1)

    def backward(g, needs):
        ga = gb = None
        if needs[0]:
            rest = list(range(1, g.ndim))
            ga = np.tensordot(g, bd, axes=(rest, rest)) if rest else np.outer(g, bd)
        if needs[1]:
            gb = np.tensordot(ad.T, g, axes=1)
        return ga, gb

    return _emit("matmul", out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _emit("transpose", a.data.T.copy(), (a,), lambda g, needs: (g.T,))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_channels needs at least one operand")
    tail = tensors[0].shape[1:]
    for t in tensors:
        if t.ndim == 0 or t.shape[1:] != tail:
            raise ShapeError(f"concat_channels: trailing shapes differ ({t.shape} vs {tail})")
    sizes = [t.shape[0] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=0)
    bounds = np.cumsum([0] + sizes)

    def backward(g, needs):
        return tuple(g[bounds[i]:bounds[i + 1]] if needs[i] else None
                     for i in range(len(sizes)))

    return _emit("concat_channels", out, tensors, backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    c = x.shape[0] if x.ndim else 0
    if not 0 <= start < stop <= c:
        raise ShapeError(f"slice_channels: [{start}:{stop}] out of range for {c} channels")
    shape = x.shape

    def backward(g, needs):
        gx = np.zeros(shape)
        gx[start:stop] = g
        return (gx,)

    return _emit("slice_channels", x.data[start:stop], (x,), backward)


def slice_time(x: Tensor, start: int, stop: Optional[int] = None) -> Tensor:
    x = _as_tensor(x)
    T = x.shape[-1]
    stop = T if stop is None else stop
    if not 0 <= start < stop <= T:
        raise ShapeError(f"slice_time: [{start}:{stop}] out of range for length {T}")
    shape = x.shape

    def backward(g, needs):
        gx = np.zeros(shape)
        gx[..., start:stop] = g
        return (gx,)

    return _emit("slice_time", x.data[..., start:stop], (x,), backward)


def _check_pad(op, x, pad, width):
    expect = x.shape[:-1] + (width,)
    if pad.shape != expect:
        raise ShapeError(f"{op}: pad shape {pad.shape}, expected {expect}")


def time_shift(x: Tensor, shift: int, pad: Optional[Tensor] = None) -> Tensor:
    """``out[..., t] = x[..., t - shift]``, reading ``pad`` for negative times.

    ``pad`` has shape ``x.shape[:-1] + (shift,)`` and defaults to zeros.
    """
    x = _as_tensor(x)
    if shift < 1:
        raise ShapeError("time_shift: shift must be >= 1")
    T = x.shape[-1]
    if pad is None:
        pad = Tensor(np.zeros(x.shape[:-1] + (shift,)))
    pad = _as_tensor(pad)
    _check_pad("time_shift", x, pad, shift)
    full = np.concatenate([pad.data, x.data], axis=-1)
    out = full[..., :T]

    def backward(g, needs):
        gfull = np.zeros(full.shape)
        gfull[..., :T] = g
        return (gfull[..., shift:] if needs[0] else None,
                gfull[..., :shift] if needs[1] else None)

    return _emit("time_shift", out, (x, pad), backward)


def causal_conv1d(x: Tensor, kernel: Tensor, dilation: int = 1,
                  left_pad: Optional[Tensor] = None) -> Tensor:
    """Causal dilated 1-D convolution.

    ``x`` is ``[q, T]`` or ``[q, B, T]``, ``kernel`` is ``[r, q, k]``.
    ``out[:, t] = sum_j kernel[:, :, j] @ x[:, t - (k-1-j)*dilation]``; times
    before 0 read ``left_pad`` (shape ``x.shape[:-1] + ((k-1)*dilation,)``,
    zeros by default), so history padding plugs straight in.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if dilation < 1 or int(dilation) != dilation:
        raise ShapeError(f"causal_conv1d: dilation must be a positive int, got {dilation}")
    if kernel.ndim != 3 or x.ndim < 2 or kernel.shape[1] != x.shape[0]:
        raise ShapeError(f"causal_conv1d: kernel {kernel.shape} does not match input {x.shape}")
    r, q, k = kernel.shape
    T = x.shape[-1]
    n = (k - 1) * dilation
    operands = [x, kernel]
    if n > 0:
        if left_pad is None:
            left_pad = Tensor(np.zeros(x.shape[:-1] + (n,)))
        left_pad = _as_tensor(left_pad)
        _check_pad("causal_conv1d", x, left_pad, n)
        operands.append(left_pad)
        xp = np.concatenate([left_pad.data, x.data], axis=-1)
    else:
        xp = x.data
    # im2col over the k taps, stacked tap-major along channels
    cols = np.concatenate([xp[..., j * dilation:j * dilation + T] for j in range(k)], axis=0)
    kflat = kernel.data.transpose(0, 2, 1).reshape(r, k * q)
    out = np.tensordot(kflat, cols, axes=1)

    def backward(g, needs):
        gk = gx = gp = None
        if needs[1]:
            rest = list(range(1, g.ndim))
            gk = np.tensordot(g, cols, axes=(rest, rest)).reshape(r, k, q).transpose(0, 2, 1)
        if needs[0] or (n > 0 and needs[2]):
            gcols = np.tensordot(kflat.T, g, axes=1)
            gxp = np.zeros(xp.shape)
            for j in range(k):
                gxp[..., j * dilation:j * dilation + T] += gcols[j * q:(j + 1) * q]
            gx = gxp[..., n:]
            gp = gxp[..., :n]
        if n > 0:
            return gx, gk, gp
        return gx, gk

    return _emit("causal_conv1d", out, operands, backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Column lookup: ``table[p, V]`` and integer ``ids[...]`` give ``[p, ...]``."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError("embedding table must be [p, V]")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[1]):
        raise ShapeError("embedding: token id out of range")
    shape = table.shape

    def backward(g, needs):
        gt = np.zeros(shape)
        flat = g.reshape(shape[0], -1)
        np.add.at(gt.T, ids.reshape(-1), flat.T)
        return (gt,)

    return _emit("embedding", table.data[:, ids], (table,), backward)


def weight_norm(v: Tensor, g: Tensor) -> Tensor:
    """Rows rescaled to the given gains: ``g[i] * v[i] / ||v[i]||``."""
    v, g = _as_tensor(v), _as_tensor(g)
    if g.ndim != 1 or g.shape[0] != v.shape[0]:
        raise ShapeError(f"weight_norm: gains {g.shape} do not match rows of {v.shape}")
    flat = v.data.reshape(v.shape[0], -1)
    norms = np.sqrt(np.einsum("ij,ij->i", flat, flat))
    if np.any(norms == 0.0):
        raise ShapeError("weight_norm: direction has a zero-norm row")
    unit = flat / norms[:, None]
    out = (g.data[:, None] * unit).reshape(v.shape)
    vshape = v.shape

    def backward(grad, needs):
        gf = grad.reshape(vshape[0], -1)
        proj = np.einsum("ij,ij->i", gf, unit)
        gg = proj if needs[1] else None
        gv = None
        if needs[0]:
            gv = ((g.data / norms)[:, None] * (gf - proj[:, None] * unit)).reshape(vshape)
        return gv, gg

    return _emit("weight_norm", out, (v, g), backward)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean cross-entropy over positions.

    ``logits`` is ``[V, ...]`` (classes on axis 0), ``targets`` holds integer
    classes with shape ``logits.shape[1:]``.  Positions whose target equals
    ``ignore_index`` are excluded from the mean.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim < 1 or targets.shape != logits.shape[1:]:
        raise ShapeError(f"softmax_cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    keep = targets != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ShapeError("softmax_cross_entropy: no positions to score")
    V = logits.shape[0]
    safe = np.where(keep, targets, 0)
    if safe.size and (safe.min() < 0 or safe.max() >= V):
        raise ShapeError("softmax_cross_entropy: target out of range")
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=0))
    picked = np.take_along_axis(z, safe[None], axis=0)[0]
    nll = (logsumexp - picked) * keep
    out = np.array(nll.sum() / count)

    def backward(g, needs):
        p = np.exp(z - logsumexp[None])
        np.put_along_axis(p, safe[None], np.take_along_axis(p, safe[None], axis=0) - 1.0, axis=0)
        return (p * (keep[None] * (float(g) / count)),)

    return _emit("softmax_cross_entropy", out, (logits,), backward)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "hadamard": hadamard,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "concat_channels": lambda *ts: concat_channels(ts),
    "slice_channels": slice_channels,
    "softmax_cross_entropy": softmax_cross_entropy,
    "scale": scale,
    "sum": sum,
    "causal_conv1d": causal_conv1d,
    "time_shift": time_shift,
    "slice_time": slice_time,
    "embedding": embedding,
    "weight_norm": weight_norm,
    "transpose": transpose,
}


def primitive_forward(kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*operands, **kwargs)


# ---------------------------------------------------------------------------
# gradients


def backprop(tape: Tape, loss: Tensor, free: bool = True) -> Dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns ``{leaf: gradient}``.

    Leaves that do not influence the loss get zero gradients.  The tape is
    cleared afterwards unless ``free=False``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if loss.tape is not tape or loss.node is None:
        raise TapeError("loss is not recorded on this tape")
    grads: List[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[loss.node] = np.ones_like(loss.data)
    for idx in range(loss.node, -1, -1):
        g = grads[idx]
        node = tape.nodes[idx]
        if g is None or node.backward is None:
            continue
        needs = [False] * (max(node.operand_slots, default=-1) + 1)
        for s in node.operand_slots:
            needs[s] = True
        parent_grads = node.backward(g, _Needs(needs))
        for slot, parent in zip(node.operand_slots, node.parents):
            pg = parent_grads[slot]
            if pg is None:
                continue
            if grads[parent] is None:
                grads[parent] = np.asarray(pg, dtype=np.float64)
            else:
                grads[parent] = grads[parent] + pg
    out = {}
    for leaf in tape.leaves:
        g = grads[leaf.node]
        out[leaf] = np.zeros_like(leaf.data) if g is None else g.reshape(leaf.shape)
    if free:
        tape.free()
    return out


class _Needs(list):
    # out-of-range slots (trailing constants) read as False
    def __getitem__(self, i):
        return i < len(self) and list.__getitem__(self, i)


class NonDeterministicError(RuntimeError):
    pass


def finite_diff_gradient(loss_fn: Callable[[Dict[str, np.ndarray]], float],
                         params: Dict[str, np.ndarray],
                         epsilon: float = 1e-5) -> Dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn`` at ``params``.

    ``loss_fn`` receives a dict of arrays and must be deterministic; two
    evaluations at the base point are compared before differencing.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    base = float(loss_fn(work))
    if float(loss_fn(work)) != base:
        raise NonDeterministicError("loss_fn returned different values for identical inputs")
    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(loss_fn(work))
            flat[i] = orig - epsilon
            fm = float(loss_fn(work))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * epsilon)
        grads[name] = g
    return grads


def max_relative_error(analytic: Dict[str, np.ndarray], numeric: Dict[str, np.ndarray],
                       floor: float = 1e-6) -> Tuple[float, Optional[str]]:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` and the parameter holding it."""
    worst, worst_name = 0.0, None
    for name, a in analytic.items():
        n = numeric[name]
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        m = float(err.max()) if err.size else 0.0
        if worst_name is None or m > worst:
            worst, worst_name = m, name
    return worst, worst_name
