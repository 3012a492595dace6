"""Heads, losses, regularizers, optimizers and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import COPY_SYMBOLS, batch_iterator, copy_targets, copy_task_arrays
from .trellis import HistoryPad, TrellisConfig, init_params, network_forward

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
METRICS_HEADER = ("epoch", "split", "loss", "metric", "lr", "wall_seconds")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


# ---------------------------------------------------------------------------
# model = embedding/identity input head + trellis + shared decoder


@dataclass
class ModelSpec:
    trellis: TrellisConfig
    n_out: int
    n_in: int = 0                 # vocabulary size for token inputs
    input_kind: str = "tokens"    # "tokens" or "real"
    readout: str = "all"          # "all" positions or only the "last" one
    tie_weights: bool = False

    def __post_init__(self):
        if self.input_kind not in ("tokens", "real"):
            raise ValueError(f"unknown input kind {self.input_kind!r}")
        if self.readout not in ("all", "last"):
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.input_kind == "tokens" and self.n_in < 1:
            raise ValueError("token inputs need n_in (vocabulary size)")
        if self.tie_weights and (self.input_kind != "tokens" or self.trellis.p != self.trellis.q
                                 or self.n_in != self.n_out):
            raise ValueError("weight tying needs token inputs, p == q and n_in == n_out")


def init_model(spec: ModelSpec, seed: int) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = init_params(spec.trellis, rng)
    q, p = spec.trellis.q, spec.trellis.p
    if spec.input_kind == "tokens":
        params["emb"] = rng.uniform(-0.1, 0.1, size=(p, spec.n_in))
    if not spec.tie_weights:
        s = 1.0 / math.sqrt(q)
        params["dec_W"] = rng.uniform(-s, s, size=(spec.n_out, q))
    params["dec_b"] = np.zeros(spec.n_out)
    return params


@dataclass
class ModelOutput:
    logits: Tensor
    aux_logits: List[Tensor]
    new_pad: HistoryPad
    inputs: Tensor


def model_forward(params: Dict[str, Tensor], inputs: np.ndarray, spec: ModelSpec,
                  pad: Optional[HistoryPad] = None, vd_mask: Optional[np.ndarray] = None,
                  kernel_mask: Optional[np.ndarray] = None, emb_mask: Optional[np.ndarray] = None,
                  mask_hook=None) -> ModelOutput:
    """Logits ``[n_out, B, T]`` (``T == 1`` for ``readout="last"``).

    ``inputs`` is ``[B, T]`` token ids or ``[C, B, T]`` real values.
    """
    if spec.input_kind == "tokens":
        table = params["emb"]
        if emb_mask is not None:
            table = ad.hadamard(table, ad.constant(np.broadcast_to(emb_mask, table.shape)))
        x = ad.embedding(table, inputs)
    else:
        x = ad.constant(inputs)
    res = network_forward(x, params, spec.trellis, pad, vd_mask, kernel_mask, mask_hook)
    dec_W = ad.transpose(params["emb"]) if spec.tie_weights else params["dec_W"]

    def decode(z):
        if spec.readout == "last":
            z = ad.slice_time(z, z.shape[-1] - 1)
        return ad.add(ad.matmul(dec_W, z), params["dec_b"])

    return ModelOutput(decode(res.z2), [decode(z) for z in res.aux_taps], res.new_pad, x)


# ---------------------------------------------------------------------------
# losses and regularizers


def total_loss(main_logits: Tensor, aux_logits: Sequence[Tensor], targets: np.ndarray,
               lam: float, chop: int = 0, ignore_index: int = -1) -> Tensor:
    """``L_orig + lam * mean(L_aux)``, each a mean cross-entropy.

    The first ``chop`` time steps are excluded from every term.
    """
    targets = np.asarray(targets)
    if targets.shape != main_logits.shape[1:]:
        raise ValueError(f"targets {targets.shape} do not match logits {main_logits.shape}")
    T = targets.shape[-1]
    if not 0 <= chop < T:
        raise ValueError(f"chop={chop} must be in [0, {T})")

    def ce(logits):
        if chop:
            logits = ad.slice_time(logits, chop)
        return ad.softmax_cross_entropy(logits, targets[..., chop:], ignore_index)

    main = ce(main_logits)
    if lam == 0 or not aux_logits:
        return main
    aux = ce(aux_logits[0])
    for a in aux_logits[1:]:
        aux = ad.add(aux, ce(a))
    return ad.add(main, ad.scale(aux, lam / len(aux_logits)))


def _check_rate(p_drop):
    if not 0 <= p_drop < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {p_drop}")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def bernoulli_mask(shape, p_drop: float, seed) -> np.ndarray:
    """Keep-mask scaled by ``1/(1-p_drop)`` so the expectation is 1."""
    _check_rate(p_drop)
    if p_drop == 0:
        return np.ones(shape)
    keep = _rng(seed).random(shape) >= p_drop
    return keep / (1.0 - p_drop)


def sample_vd_mask(q: int, p_drop: float, seed) -> np.ndarray:
    """One channel mask, reused at every layer and time step of a forward pass."""
    return bernoulli_mask((q,), p_drop, seed)


def dropconnect_kernel(Wz: np.ndarray, p_drop: float, seed) -> np.ndarray:
    return np.asarray(Wz) * bernoulli_mask(np.shape(Wz), p_drop, seed)


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(float(np.sum([np.vdot(g, g) for g in grads.values()])))


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        s = max_norm / norm
        grads = {k: g * s for k, g in grads.items()}
    return grads, norm


@dataclass
class OptimizerState:
    kind: str = "adam"           # "sgd" or "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                   state: OptimizerState) -> Dict[str, np.ndarray]:
    """One update; weight decay is added to the gradient (L2) for both kinds.

    Adam uses fixed constants beta1=0.9, beta2=0.999, eps=1e-8.
    """
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} does not match {k} {params[k].shape}")
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for {k}")
    state.step += 1
    out = dict(params)
    for k, g in grads.items():
        theta = params[k]
        if state.weight_decay:
            g = g + state.weight_decay * theta
        if state.kind == "sgd":
            out[k] = theta - state.lr * g
            continue
        m = state.m.get(k, np.zeros_like(theta))
        v = state.v.get(k, np.zeros_like(theta))
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1 - ADAM_BETA1 ** state.step)
        v_hat = v / (1 - ADAM_BETA2 ** state.step)
        out[k] = theta - state.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return out


def lr_plateau_decay(val_history: Sequence[float], factor: float, patience: int, lr: float) -> float:
    """Learning rate after replaying ``val_history`` from ``lr``.

    Every ``patience`` consecutive evaluations without a new best multiply the
    rate by ``factor``; a new best resets the count, and so does a decay.
    """
    if not 0 < factor < 1:
        raise ValueError("factor must be in (0, 1)")
    if patience < 1:
        raise ValueError("patience must be >= 1")
    best, stale = math.inf, 0
    for v in val_history:
        if v < best:
            best, stale = v, 0
            continue
        stale += 1
        if stale >= patience:
            lr *= factor
            stale = 0
    return lr


# ---------------------------------------------------------------------------
# tasks


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    reset: bool = True


class Task:
    """Supplies batches and evaluation for one dataset kind."""

    metric_name = "acc"
    chop_applies = False

    def spec_fields(self) -> dict:
        raise NotImplementedError

    def train_batches(self, epoch: int) -> Iterator[Batch]:
        raise NotImplementedError

    def eval_batches(self, split: str) -> Iterator[Batch]:
        raise NotImplementedError

    def metric(self, logits: np.ndarray, targets: np.ndarray) -> Tuple[float, int]:
        """(sum of correct predictions, count) over scored positions."""
        keep = targets != -1
        pred = logits.argmax(axis=0)
        return float(((pred == targets) & keep).sum()), int(keep.sum())

    def finish_metric(self, loss: float, correct: float, count: int) -> float:
        return correct / max(count, 1)


class LanguageModelTask(Task):
    metric_name = "bpc"
    chop_applies = True

    def __init__(self, corpus, batch: int, bptt_len: int, eval_batch: int = 1):
        self.corpus = corpus
        self.batch = batch
        self.bptt_len = bptt_len
        self.eval_batch = eval_batch

    def spec_fields(self):
        V = len(self.corpus.vocab)
        return dict(n_in=V, n_out=V, input_kind="tokens", readout="all")

    def _windows(self, ids, batch):
        for w in batch_iterator(ids, batch, self.bptt_len):
            yield Batch(w.inputs, w.targets, w.is_boundary)

    def train_batches(self, epoch):
        return self._windows(self.corpus.split("train"), self.batch)

    def eval_batches(self, split):
        return self._windows(self.corpus.split(split), self.eval_batch)

    def finish_metric(self, loss, correct, count):
        return loss / math.log(2)


class CopyMemoryTask(Task):
    def __init__(self, delay: int, n_train: int, n_val: int, batch: int, seed: int):
        self.delay, self.n_train, self.batch, self.seed = delay, n_train, batch, seed
        self.val = copy_task_arrays(n_val, delay, seed + 1_000_003)

    def spec_fields(self):
        return dict(n_in=COPY_SYMBOLS, n_out=COPY_SYMBOLS, input_kind="tokens", readout="all")

    def _batches(self, inputs, payload):
        targets = copy_targets(inputs, payload)
        for s in range(0, len(inputs), self.batch):
            yield Batch(inputs[s:s + self.batch], targets[s:s + self.batch])

    def train_batches(self, epoch):
        # fresh samples every epoch
        return self._batches(*copy_task_arrays(self.n_train, self.delay, self.seed * 7919 + epoch))

    def eval_batches(self, split):
        return self._batches(*self.val)


class SequenceClassificationTask(Task):
    def __init__(self, train, test, batch: int, seed: int, n_classes: int = 10):
        self.train, self.test = train, test
        self.batch, self.seed, self.n_classes = batch, seed, n_classes

    def spec_fields(self):
        return dict(n_out=self.n_classes, input_kind="real", readout="last")

    def _batches(self, ds, order):
        for s in range(0, len(order), self.batch):
            idx = order[s:s + self.batch]
            # [N, C, T] -> [C, B, T]
            yield Batch(np.ascontiguousarray(ds.sequences[idx].transpose(1, 0, 2)), ds.labels[idx][:, None])

    def train_batches(self, epoch):
        order = np.random.default_rng([self.seed, epoch]).permutation(len(self.train))
        return self._batches(self.train, order)

    def eval_batches(self, split):
        ds = self.train if split == "train" else self.test
        return self._batches(ds, np.arange(len(ds)))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class RegularizerConfig:
    vd_p: float = 0.0
    dropconnect_p: float = 0.0
    emb_dropout: float = 0.0
    weight_decay: float = 0.0
    clip_norm: Optional[float] = None
    aux_lambda: float = 0.0
    loss_chop: int = 0

    def __post_init__(self):
        for name in ("vd_p", "dropconnect_p", "emb_dropout"):
            _check_rate(getattr(self, name))
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive (or None to disable)")
        if self.loss_chop < 0:
            raise ValueError("loss_chop must be >= 0")


@dataclass
class TrainResult:
    params: Dict[str, np.ndarray]
    rows: List[tuple]
    steps: int
    steps_to_target: Optional[int] = None
    val_history: List[float] = field(default_factory=list)


def evaluate(params: Dict[str, np.ndarray], spec: ModelSpec, task: Task, split: str = "val") -> Tuple[float, float]:
    """(mean cross-entropy, metric) over a split, carrying history across windows."""
    consts = {k: ad.constant(v) for k, v in params.items()}
    total, count, correct, scored = 0.0, 0, 0.0, 0
    pad = None
    for b in task.eval_batches(split):
        if b.reset:
            pad = None
        out = model_forward(consts, b.inputs, spec, pad)
        pad = out.new_pad
        n = int((b.targets != -1).sum())
        total += ad.softmax_cross_entropy(out.logits, b.targets).item() * n
        count += n
        c, k = task.metric(out.logits.data, b.targets)
        correct += c
        scored += k
    loss = total / count
    return loss, task.finish_metric(loss, correct, scored)


def train_loop(spec: ModelSpec, params: Dict[str, np.ndarray], task: Task, reg: RegularizerConfig,
               opt: OptimizerState, epochs: int, seed: int = 0, metrics_path=None,
               plateau_factor: float = 0.5, patience: int = 5, target_metric: Optional[float] = None,
               stop_at_target: bool = True, target_split: str = "val", max_steps: Optional[int] = None,
               log_wall_time: bool = True, mask_hook=None,
               step_hook: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Minibatch training with carried history, clipping and plateau decay.

    Each optimization step samples one variational-dropout mask and one
    DropConnect mask and reuses them for the whole forward/backward.  After
    every epoch the validation split is evaluated and one train and one val
    row are written as ``(epoch, split, loss, metric, lr, wall_seconds)``.
    ``target_metric`` (accuracy, or bpc for language models) records the
    first step count at which the ``target_split`` metric reaches it.
    """
    if target_split not in ("train", "val"):
        raise ValueError("target_split must be 'train' or 'val'")
    rng = np.random.default_rng(seed)
    base_lr = opt.lr
    t0 = time.perf_counter()
    rows, val_history = [], []
    steps, steps_to_target = 0, None
    lower_better = task.metric_name == "bpc"
    fh = open(metrics_path, "w", newline="") if metrics_path else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(METRICS_HEADER)

    def emit(row):
        rows.append(row)
        if writer:
            writer.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4]), f"{row[5]:.3f}"])
            fh.flush()

    try:
        for epoch in range(1, epochs + 1):
            pad = None
            run_loss, run_count, correct, scored = 0.0, 0, 0.0, 0
            for batch in task.train_batches(epoch):
                if batch.reset:
                    pad = None
                vd = sample_vd_mask(spec.trellis.q, reg.vd_p, rng) if reg.vd_p else None
                kmask = None
                if reg.dropconnect_p:
                    kmask = bernoulli_mask((spec.trellis.r, spec.trellis.q, 2), reg.dropconnect_p, rng)
                emask = bernoulli_mask((spec.n_in,), reg.emb_dropout, rng) if reg.emb_dropout else None
                tape = ad.Tape()
                leaves = {k: tape.param(v, k) for k, v in params.items()}
                try:
                    out = model_forward(leaves, batch.inputs, spec, pad, vd, kmask, emask, mask_hook)
                    chop = reg.loss_chop if task.chop_applies else 0
                    loss = total_loss(out.logits, out.aux_logits, batch.targets, reg.aux_lambda, chop)
                    main_ce = ad.softmax_cross_entropy(out.logits, batch.targets).item()
                    grads = ad.backprop(tape, loss)
                except ad.NonFiniteError as exc:
                    raise DivergenceError(f"epoch {epoch} step {steps + 1}: {exc}") from exc
                if not math.isfinite(loss.item()):
                    raise DivergenceError(f"epoch {epoch} step {steps + 1}: loss is {loss.item()}")
                grads = {k: grads[t] for k, t in leaves.items()}
                if reg.clip_norm:
                    grads, _ = clip_gradients(grads, reg.clip_norm)
                opt.weight_decay = reg.weight_decay
                params = optimizer_step(params, grads, opt)
                pad = out.new_pad
                steps += 1
                n = int((batch.targets != -1).sum())
                run_loss += main_ce * n
                run_count += n
                c, k = task.metric(out.logits.data, batch.targets)
                correct += c
                scored += k
                if step_hook:
                    step_hook(steps, loss.item())
                if max_steps and steps >= max_steps:
                    break
            train_loss = run_loss / max(run_count, 1)
            wall = time.perf_counter() - t0 if log_wall_time else 0.0
            train_metric = task.finish_metric(train_loss, correct, scored)
            emit((epoch, "train", train_loss, train_metric, opt.lr, wall))
            val_loss, val_metric = evaluate(params, spec, task, "val")
            val_history.append(val_loss)
            wall = time.perf_counter() - t0 if log_wall_time else 0.0
            emit((epoch, "val", val_loss, val_metric, opt.lr, wall))
            logger.info("epoch %d step %d train %.4f val %.4f %s %.4f", epoch, steps,
                        train_loss, val_loss, task.metric_name, val_metric)
            opt.lr = lr_plateau_decay(val_history, plateau_factor, patience, base_lr)
            if target_metric is not None and steps_to_target is None:
                watched = train_metric if target_split == "train" else val_metric
                hit = watched <= target_metric if lower_better else watched >= target_metric
                if hit:
                    steps_to_target = steps
                    if stop_at_target:
                        break
            if max_steps and steps >= max_steps:
                break
    finally:
        if fh:
            fh.close()
    return TrainResult(params, rows, steps, steps_to_target, val_history)


# ---------------------------------------------------------------------------
# finite-difference check of the full model


@dataclass
class GradCheckReport:
    seed: int
    dims: Dict[str, int]
    max_rel_err: float
    worst_param: Optional[str]
    per_param: Dict[str, float]
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def to_dict(self) -> dict:
        return dict(seed=self.seed, dims=self.dims, max_rel_err=self.max_rel_err,
                    worst_param=self.worst_param, per_param=self.per_param,
                    tolerance=self.tolerance, passed=self.passed)


def gradient_check(seed: int = 0, q: int = 8, depth: int = 3, vocab: int = 5, T: int = 7,
                   p: int = 4, batch: int = 2, epsilon: float = 1e-5,
                   corrupt: Optional[str] = None) -> GradCheckReport:
    """Backprop vs central differences over every parameter of a small gated LM.

    The model uses dilations (1, 2, 1), one auxiliary tap, weight
    normalization and a non-zero history pad so each code path is exercised.
    ``corrupt`` names a parameter whose analytic gradient is perturbed (a
    negative control).
    """
    rng = np.random.default_rng(seed)
    dilations = [1 + (i % 2) for i in range(depth)]
    cfg = TrellisConfig(p=p, q=q, depth=depth, dilations=dilations, activation="lstm_gate",
                        aux_every=1 if depth > 1 else 0, weight_norm=True)
    spec = ModelSpec(cfg, n_out=vocab, n_in=vocab)
    params = init_model(spec, seed)
    # move off the symmetric init so no gradient is structurally tiny
    params = {k: v + rng.normal(0, 0.1, v.shape) if k != "Wz_g" else v for k, v in params.items()}
    ids = rng.integers(0, vocab, size=(batch, T + 1))
    inputs, targets = ids[:, :-1], ids[:, 1:]
    pad = HistoryPad(rng.normal(0, 0.5, (q, batch)), rng.normal(0, 0.5, (p, batch)),
                     rng.normal(0, 0.5, (q, batch)))
    lam = 0.05

    def loss_of(arrays, tape=None):
        leaves = {k: (tape.param(v, k) if tape is not None else ad.constant(v)) for k, v in arrays.items()}
        out = model_forward(leaves, inputs, spec, pad)
        return total_loss(out.logits, out.aux_logits, targets, lam), leaves

    tape = ad.Tape()
    loss, leaves = loss_of(params, tape)
    g = ad.backprop(tape, loss)
    analytic = {k: g[t] for k, t in leaves.items()}
    if corrupt is not None:
        if corrupt not in analytic:
            raise KeyError(f"no parameter named {corrupt!r}")
        analytic[corrupt] = analytic[corrupt] * 1.01 + 1e-3
    numeric = ad.finite_diff_gradient(lambda a: loss_of(a)[0].item(), params, epsilon)
    per = {k: ad.max_relative_error({k: analytic[k]}, {k: numeric[k]})[0] for k in analytic}
    worst, name = ad.max_relative_error(analytic, numeric)
    dims = dict(q=q, depth=depth, vocab=vocab, T=T, p=p, batch=batch)
    return GradCheckReport(seed, dims, worst, name, per)
