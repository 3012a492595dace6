import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trellisnet import autodiff as ad
from trellisnet.data import corpus_from_text
from trellisnet.trellis import TrellisConfig
from trellisnet.training import (CopyMemoryTask, DivergenceError, LanguageModelTask, ModelSpec,
                                 OptimizerState, RegularizerConfig, bernoulli_mask, clip_gradients,
                                 dropconnect_kernel, evaluate, global_norm, gradient_check, init_model,
                                 lr_plateau_decay, model_forward, optimizer_step, sample_vd_mask,
                                 total_loss, train_loop)

SMOKE_TEXT = ("a small boat drifts past the pier while gulls argue over bread. " * 160)[:10240]


def tiny_lm(text=SMOKE_TEXT, q=16, depth=3, aux_every=0, batch=4, bptt=32):
    corpus = corpus_from_text(text)
    task = LanguageModelTask(corpus, batch, bptt)
    spec = ModelSpec(TrellisConfig(p=8, q=q, depth=depth, dilations=[1, 2, 4][:depth], aux_every=aux_every),
                     **task.spec_fields())
    return spec, task


# --- losses -------------------------------------------------------------------------

def test_zero_lambda_is_plain_cross_entropy():
    rng = np.random.default_rng(0)
    main, aux = ad.constant(rng.normal(size=(5, 2, 6))), [ad.constant(rng.normal(size=(5, 2, 6)))]
    targets = rng.integers(0, 5, size=(2, 6))
    plain = ad.softmax_cross_entropy(main, targets).item()
    assert total_loss(main, aux, targets, 0.0).item() == plain
    assert total_loss(main, [], targets, 0.05).item() == plain


def test_aux_weighting_example():
    # one-class logits make every cross-entropy a chosen constant
    def const_ce(value):
        return ad.constant(np.array([[[0.0]], [[np.log(np.exp(value) - 1.0)]]]))

    targets = np.zeros((1, 1), dtype=int)
    got = total_loss(const_ce(2.0), [const_ce(1.0), const_ce(1.0)], targets, 0.05).item()
    assert got == pytest.approx(2.05, abs=1e-12)


def test_chop_keeps_only_last_position():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(4, 3, 5))
    targets = rng.integers(0, 4, size=(3, 5))
    got = total_loss(ad.constant(logits), [], targets, 0.0, chop=4).item()
    last = logits[:, :, 4]
    ref = np.mean([np.log(np.exp(last[:, b]).sum()) - last[targets[b, 4], b] for b in range(3)])
    assert got == pytest.approx(ref, abs=1e-14)


def test_loss_errors():
    logits = ad.constant(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        total_loss(logits, [], np.zeros(5, dtype=int), 0.0)
    with pytest.raises(ValueError):
        total_loss(logits, [], np.zeros(4, dtype=int), 0.0, chop=4)


# --- masks ----------------------------------------------------------------------------

def test_vd_mask_examples():
    assert (sample_vd_mask(7, 0.0, 0) == 1).all()
    np.testing.assert_array_equal(sample_vd_mask(50, 0.3, 9), sample_vd_mask(50, 0.3, 9))
    assert 0.99 <= sample_vd_mask(100_000, 0.28, 1).mean() <= 1.01
    vals = set(np.unique(sample_vd_mask(1000, 0.28, 2)))
    assert vals == {0.0, 1 / 0.72}
    with pytest.raises(ValueError):
        sample_vd_mask(3, 1.0, 0)


def test_dropconnect_examples():
    W = np.random.default_rng(0).normal(size=(8, 4, 2))
    np.testing.assert_array_equal(dropconnect_kernel(W, 0.0, 1), W)
    np.testing.assert_array_equal(dropconnect_kernel(W, 0.5, 3), dropconnect_kernel(W, 0.5, 3))
    rng = np.random.default_rng(4)
    mean = np.mean([dropconnect_kernel(W, 0.5, rng) for _ in range(10_000)], axis=0)
    # entries with |W| small relative to the Monte Carlo noise are compared in absolute terms
    assert np.all(np.abs(mean - W) <= 0.02 * np.maximum(np.abs(W), 1.0))
    with pytest.raises(ValueError):
        dropconnect_kernel(W, -0.1, 0)


@settings(max_examples=10, deadline=None)
@given(p=st.floats(0.05, 0.7), seed=st.integers(0, 2**16))
def test_masks_preserve_expectation(p, seed):
    m = bernoulli_mask((200_000,), p, seed)
    assert abs(m.mean() - 1.0) <= 0.02


# --- clipping and optimizers ------------------------------------------------------------

def test_clip_examples():
    g = {"a": np.array([0.06, 0.08])}
    out, norm = clip_gradients(g, 0.225)
    np.testing.assert_array_equal(out["a"], g["a"])
    assert norm == pytest.approx(0.1)
    big = {"a": np.array([3.0, 4.0]), "b": np.array([[0.0]])}
    out, _ = clip_gradients(big, 2.5)
    np.testing.assert_allclose(out["a"], [1.5, 2.0])
    with pytest.raises(ValueError):
        clip_gradients(g, 0.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), c=st.floats(1e-3, 10))
def test_clipped_norm_never_exceeds_limit(seed, c):
    rng = np.random.default_rng(seed)
    g = {k: rng.normal(size=rng.integers(1, 5, size=2)) * rng.uniform(0, 20) for k in "abc"}
    out, _ = clip_gradients(g, c)
    assert global_norm(out) <= c + 1e-12


def test_sgd_examples():
    st_ = OptimizerState("sgd", lr=0.1)
    assert optimizer_step({"t": np.array([1.0])}, {"t": np.array([1.0])}, st_)["t"][0] == pytest.approx(0.9)
    p = {"t": np.array([0.3, -2.0])}
    assert np.array_equal(optimizer_step(p, {"t": np.zeros(2)}, OptimizerState("sgd", 0.5))["t"], p["t"])
    wd = OptimizerState("sgd", lr=0.1, weight_decay=0.5)
    assert optimizer_step({"t": np.array([2.0])}, {"t": np.array([1.0])}, wd)["t"][0] == pytest.approx(2 - 0.1 * 2)


def test_adam_first_step_is_signed_lr():
    g = np.array([3.0, -0.02, 1e-3, -50.0])
    st_ = OptimizerState("adam", lr=0.01)
    out = optimizer_step({"t": np.zeros(4)}, {"t": g}, st_)
    np.testing.assert_allclose(out["t"], -0.01 * np.sign(g), atol=1e-6)
    assert st_.m["t"].shape == (4,) and st_.v["t"].shape == (4,) and st_.step == 1


def test_optimizer_errors():
    with pytest.raises(DivergenceError):
        optimizer_step({"t": np.zeros(2)}, {"t": np.array([np.nan, 0.0])}, OptimizerState("sgd", 0.1))
    with pytest.raises(ValueError):
        optimizer_step({"t": np.zeros(2)}, {"t": np.zeros(3)}, OptimizerState("sgd", 0.1))
    with pytest.raises(ValueError):
        OptimizerState("rmsprop")


def test_plateau_examples():
    assert lr_plateau_decay([5, 4, 3, 2, 1], 0.5, 2, 1.0) == 1.0
    # a first evaluation followed by `patience` evaluations without improvement
    assert lr_plateau_decay([3.0, 3.0, 3.0], 0.5, 2, 1.0) == 0.5
    assert lr_plateau_decay([3.0, 3.0], 0.5, 2, 1.0) == 1.0
    assert lr_plateau_decay([3.0, 3.0, 3.0, 2.9, 2.9, 2.9], 0.5, 2, 1.0) == 0.25
    with pytest.raises(ValueError):
        lr_plateau_decay([1.0], 1.0, 2, 1.0)
    with pytest.raises(ValueError):
        lr_plateau_decay([1.0], 0.5, 0, 1.0)


def test_regularizer_validation():
    with pytest.raises(ValueError):
        RegularizerConfig(vd_p=1.0)
    with pytest.raises(ValueError):
        RegularizerConfig(clip_norm=-1.0)


# --- model heads ------------------------------------------------------------------------

def test_heads_shapes_and_tying():
    spec = ModelSpec(TrellisConfig(p=6, q=6, depth=2, aux_every=1), n_in=9, n_out=9, tie_weights=True)
    params = init_model(spec, 0)
    assert "dec_W" not in params and params["emb"].shape == (6, 9)
    out = model_forward({k: ad.constant(v) for k, v in params.items()}, np.zeros((3, 5), dtype=int), spec)
    assert out.logits.shape == (9, 3, 5) and len(out.aux_logits) == 1
    with pytest.raises(ValueError):
        ModelSpec(TrellisConfig(p=6, q=5, depth=2), n_in=9, n_out=9, tie_weights=True)


def test_real_inputs_last_step_readout():
    spec = ModelSpec(TrellisConfig(p=1, q=4, depth=2, aux_every=1), n_out=10, input_kind="real", readout="last")
    params = init_model(spec, 0)
    assert "emb" not in params
    out = model_forward({k: ad.constant(v) for k, v in params.items()}, np.zeros((1, 3, 7)), spec)
    assert out.logits.shape == (10, 3, 1) and out.aux_logits[0].shape == (10, 3, 1)


def test_uniform_model_loss_is_log_k():
    spec, task = tiny_lm()
    params = init_model(spec, 0)
    params["dec_W"][:] = 0.0
    loss, bpc = evaluate(params, spec, task, "val")
    k = len(task.corpus.vocab)
    assert loss == pytest.approx(math.log(k), abs=1e-12)
    assert bpc == pytest.approx(loss / math.log(2), abs=1e-12)


# --- training loop -------------------------------------------------------------------------

def test_zero_learning_rate_keeps_parameters():
    spec, task = tiny_lm()
    params = init_model(spec, 1)
    res = train_loop(spec, params, task, RegularizerConfig(), OptimizerState("sgd", 0.0), epochs=1)
    assert all(res.params[k].tobytes() == params[k].tobytes() for k in params)


def test_training_loss_strictly_decreases_on_repeating_text():
    spec, task = tiny_lm()
    res = train_loop(spec, init_model(spec, 0), task, RegularizerConfig(clip_norm=1.0),
                     OptimizerState("adam", 3e-3), epochs=5)
    train = [r[2] for r in res.rows if r[1] == "train"]
    assert all(b < a for a, b in zip(train, train[1:])), train


def test_runs_are_deterministic_without_dropout(tmp_path):
    spec, task = tiny_lm()
    for name in ("a.csv", "b.csv"):
        train_loop(spec, init_model(spec, 3), task, RegularizerConfig(clip_norm=0.5),
                   OptimizerState("adam", 1e-3), epochs=2, metrics_path=tmp_path / name, log_wall_time=False)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert rows[0] == ["epoch", "split", "loss", "metric", "lr", "wall_seconds"]
    assert [r[1] for r in rows[1:]] == ["train", "val", "train", "val"]


def test_one_vd_mask_per_step():
    spec, task = tiny_lm()
    per_step = {}
    calls = []

    def hook(layer, mask):
        calls.append(mask.tobytes())

    def on_step(step, loss):
        per_step[step] = set(calls)
        calls.clear()

    train_loop(spec, init_model(spec, 0), task, RegularizerConfig(vd_p=0.3), OptimizerState("adam", 1e-3),
               epochs=1, mask_hook=hook, step_hook=on_step)
    assert per_step and all(len(v) == 1 for v in per_step.values())
    assert len({next(iter(v)) for v in per_step.values()}) > 1


def test_divergence_raises():
    spec, task = tiny_lm()
    with pytest.raises(DivergenceError):
        train_loop(spec, init_model(spec, 0), task, RegularizerConfig(), OptimizerState("sgd", 1e300), epochs=2)


def test_copy_task_beats_chance_quickly():
    task = CopyMemoryTask(delay=5, n_train=320, n_val=200, batch=32, seed=0)
    spec = ModelSpec(TrellisConfig(p=8, q=24, depth=4, dilations=[1, 2, 4, 8]), **task.spec_fields())
    res = train_loop(spec, init_model(spec, 0), task, RegularizerConfig(clip_norm=1.0),
                     OptimizerState("adam", 1e-2), epochs=4)
    assert res.rows[-1][3] > 0.4


def test_target_metric_stops_early():
    spec, task = tiny_lm()
    res = train_loop(spec, init_model(spec, 0), task, RegularizerConfig(), OptimizerState("adam", 3e-3),
                     epochs=50, target_metric=100.0, target_split="train")
    assert res.steps_to_target == res.steps and res.rows[-1][0] == 1


# --- gradient check ------------------------------------------------------------------------

def test_gradient_check_and_negative_control():
    good = gradient_check(seed=1)
    assert good.passed and good.max_rel_err < 1e-4
    assert set(good.per_param) >= {"Wz_v", "Wz_g", "Wx", "bias", "emb", "dec_W", "dec_b"}
    bad = gradient_check(seed=1, corrupt="bias")
    assert not bad.passed and bad.worst_param == "bias"
