import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trellisnet import autodiff as ad
from trellisnet.equivalence import (LSTM_TOL, VANILLA_TOL, SparseKernelPair, embed, embed_lstm,
                                    embed_vanilla, expected_trace, random_rnn, state_trace,
                                    trellis_loss_and_rnn_grads, vanilla_block_mask, verify_equivalence)
from trellisnet.rnn import LstmParams, VanillaRnnParams, history_table, run_full, run_truncated
from trellisnet.trellis import forward_numpy


def test_kernel_shapes_for_two_layers():
    emb = embed_vanilla(VanillaRnnParams.random(2, 3, 2, np.random.default_rng(0)), M=5)
    k = emb.kernels
    assert k.W1.shape == (6, 8) and k.W2.shape == (6, 8)
    assert emb.config.depth == 6 and emb.config.q == 6


@pytest.mark.parametrize("L,d,p", [(1, 2, 3), (2, 3, 2), (3, 4, 1)])
def test_sparsity_pattern(L, d, p):
    rng = np.random.default_rng(L * 10 + d)
    emb = embed_vanilla(VanillaRnnParams.random(L, d, p, rng, low=0.1, high=1.0), M=3)
    m1, m2 = vanilla_block_mask(L, d, p)
    assert m1.sum() == L * d * d
    assert m2.sum() == d * p + (L - 1) * d * d
    k = emb.kernels
    assert not k.W1[~m1].any() and not k.W2[~m2].any()
    assert (k.W1[m1] != 0).all() and (k.W2[m2] != 0).all()


def test_block_placement():
    rnn = VanillaRnnParams.random(2, 2, 3, np.random.default_rng(1))
    k = embed_vanilla(rnn, 2).kernels
    # column block 0 is x (width p); hidden group i sits in column block i+1
    np.testing.assert_array_equal(k.W1[0:2, 3:5], rnn.W_hh[0])
    np.testing.assert_array_equal(k.W1[2:4, 5:7], rnn.W_hh[1])
    np.testing.assert_array_equal(k.W2[0:2, 0:3], rnn.W_hx[0])
    np.testing.assert_array_equal(k.W2[2:4, 3:5], rnn.W_hx[1])


def test_zero_weights_give_zero_output():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 7))
    assert not embed_vanilla(VanillaRnnParams.random(2, 3, 2, rng, 0.0, 0.0), 3).outputs(x).any()
    lstm = LstmParams.random(2, 3, 2, rng, 0.0, 0.0)
    assert not embed_lstm(lstm, 3).outputs(x).any()


def test_lstm_gate_rows():
    emb = embed_lstm(LstmParams.random(3, 2, 2, np.random.default_rng(3), candidate_bias=False), 2)
    assert emb.params["Wz"].shape[0] == 4 * 3 * 2


def test_lstm_small_config_matches():
    rng = np.random.default_rng(4)
    rnn = LstmParams.random(2, 2, 2, rng, candidate_bias=False)
    x = rng.uniform(-1, 1, size=(2, 10))
    assert np.abs(embed_lstm(rnn, 3).outputs(x) - run_truncated(x, 3, rnn)).max() <= 1e-9


def test_single_layer_single_step_is_one_cell_application():
    rng = np.random.default_rng(5)
    rnn = VanillaRnnParams.random(1, 3, 2, rng)
    x = rng.normal(size=(2, 6))
    emb = embed_vanilla(rnn, 1)
    assert emb.config.depth == 1
    np.testing.assert_allclose(emb.outputs(x), np.tanh(rnn.W_hx[0] @ x), atol=1e-15)


def test_unsupported_embeddings_raise():
    rng = np.random.default_rng(6)
    with pytest.raises(ValueError):
        embed_vanilla(VanillaRnnParams.random(2, 2, 2, rng, nonlinearity="sigmoid"), 3)
    with pytest.raises(ValueError):
        embed_lstm(LstmParams.random(2, 2, 2, rng, candidate_bias=True), 3)
    with pytest.raises(ValueError):
        embed_vanilla(VanillaRnnParams.random(1, 2, 2, rng), 0)


def test_single_layer_sigmoid_and_biased_lstm_embed():
    rng = np.random.default_rng(7)
    x = rng.uniform(-1, 1, size=(2, 9))
    for rnn in (VanillaRnnParams.random(1, 3, 2, rng, nonlinearity="sigmoid"),
                LstmParams.random(1, 3, 2, rng, candidate_bias=True)):
        assert np.abs(embed(rnn, 4).outputs(x) - run_truncated(x, 4, rnn)).max() <= 1e-9


@settings(max_examples=25, deadline=None)
@given(cell=st.sampled_from(["vanilla", "lstm"]), L=st.integers(1, 3), d=st.integers(1, 4),
       p=st.integers(1, 3), M=st.integers(1, 6), T=st.integers(1, 16), seed=st.integers(0, 2**16))
def test_equivalence_property(cell, L, d, p, M, T, seed):
    report = verify_equivalence(cell, L, d, p, M, T, trials=1, seed=seed)
    assert report.passed, report.to_dict()
    assert max(report.layer_errors) <= (VANILLA_TOL if cell == "vanilla" else LSTM_TOL)


def test_report_fields():
    r = verify_equivalence("vanilla", 2, 3, 2, 5, 12, trials=3, seed=11)
    d = r.to_dict()
    assert d["dims"] == dict(L=2, d=3, p=2, M=5, T=12) and d["seed"] == 11
    assert len(d["trial_errors"]) == 3 and len(d["layer_errors"]) == 7
    assert d["passed"] and d["max_abs_err"] >= 0
    with pytest.raises(ValueError):
        verify_equivalence("vanilla", 0, 3, 2, 5, 12)


# --- inductive state embedding -------------------------------------------------------

def test_trace_layer_zero_is_zero():
    rng = np.random.default_rng(8)
    emb = embed_vanilla(VanillaRnnParams.random(2, 2, 2, rng), 3)
    assert not state_trace(emb, rng.normal(size=(2, 6)), 0).groups.any()


def test_future_start_groups_are_exactly_zero():
    rng = np.random.default_rng(9)
    for rnn in (VanillaRnnParams.random(3, 2, 2, rng), LstmParams.random(3, 2, 2, rng, candidate_bias=False)):
        emb = embed(rnn, 3)
        x = rng.normal(size=(2, 7))
        for j in range(emb.config.depth + 1):
            tr = state_trace(emb, x, j)
            t = np.arange(7)
            for i in range(3):
                future = tr.starts[i] > t
                assert np.all(tr.groups[i][:, future] == 0.0)


def test_trace_matches_windowed_runs():
    rng = np.random.default_rng(10)
    rnn = LstmParams.random(2, 3, 2, rng, candidate_bias=False)
    emb = embed(rnn, 4)
    x = rng.uniform(-1, 1, size=(2, 9))
    table = history_table(x, rnn)
    for j in range(emb.config.depth + 1):
        tr = state_trace(emb, x, j)
        assert np.abs(tr.groups - expected_trace(table, tr.starts)).max() <= 1e-9


def test_trace_rejects_bad_layer():
    emb = embed_vanilla(VanillaRnnParams.random(1, 2, 2, np.random.default_rng(0)), 2)
    with pytest.raises(ValueError):
        state_trace(emb, np.zeros((2, 3)), 3)


def test_first_trellis_layer_is_one_step_runs():
    # layer 1, group 1 at time t is a run started at t (a single cell application)
    rng = np.random.default_rng(11)
    rnn = VanillaRnnParams.random(2, 3, 2, rng)
    x = rng.normal(size=(2, 5))
    tr = state_trace(embed_vanilla(rnn, 3), x, 1)
    np.testing.assert_allclose(tr.groups[0], np.tanh(rnn.W_hx[0] @ x), atol=1e-15)


# --- repackaging boundary ----------------------------------------------------------

@pytest.mark.parametrize("cell,L", [("vanilla", 1), ("vanilla", 3), ("lstm", 1), ("lstm", 2)])
def test_carried_pad_recovers_untruncated_state(cell, L):
    rng = np.random.default_rng(12 + L)
    rnn = random_rnn(cell, L, 3, 2, rng)
    M = 4
    emb = embed(rnn, M)
    x = rng.uniform(-1, 1, size=(2, 2 * M))
    first = forward_numpy(x[:, :M], emb.params, emb.config)
    second = forward_numpy(x[:, M:], emb.params, emb.config, first.new_pad).z2.data[-emb.d:]
    full, _ = run_full(x[:, :M + 1], rnn)
    assert np.abs(second[:, 0] - full[:, -1]).max() <= 1e-9
    # without the pad the first step only sees one input
    cold = forward_numpy(x[:, M:], emb.params, emb.config).z2.data[-emb.d:]
    assert np.abs(cold[:, 0] - full[:, -1]).max() > 1e-6


# --- gradients through the embedding --------------------------------------------------

@pytest.mark.parametrize("cell,L", [("vanilla", 2), ("lstm", 1), ("lstm", 2)])
def test_gradients_match_truncated_rnn(cell, L):
    rng = np.random.default_rng(20 + L)
    rnn = random_rnn(cell, L, 2, 2, rng)
    M, T = 3, 6
    x = rng.uniform(-1, 1, size=(2, T))
    w = rng.normal(size=(2, T))
    emb = embed(rnn, M)
    loss, grads = trellis_loss_and_rnn_grads(emb, x, w)
    arrays = rnn.arrays()
    rebuild = (lambda a: LstmParams.from_arrays(a)) if cell == "lstm" else (lambda a: VanillaRnnParams.from_arrays(a))
    if cell == "lstm" and L > 1:
        # candidate biases are pinned to zero by the construction
        arrays = {k: v for k, v in arrays.items() if not k.endswith(".b_g")}
        zeros = {f"layer{i}.b_g": np.zeros(2) for i in range(L)}
        fn = lambda a: float((w * run_truncated(x, M, rebuild({**a, **zeros}))).sum())
    else:
        fn = lambda a: float((w * run_truncated(x, M, rebuild(a))).sum())
    assert loss == pytest.approx(fn(arrays), abs=1e-12)
    numeric = ad.finite_diff_gradient(fn, arrays)
    err, name = ad.max_relative_error({k: grads[k] for k in numeric}, numeric)
    assert err < 1e-6, name


def test_sparse_kernel_pair_from_trellis_round_trip():
    emb = embed_vanilla(VanillaRnnParams.random(2, 2, 3, np.random.default_rng(0)), 2)
    k = SparseKernelPair.from_trellis(emb.params)
    np.testing.assert_array_equal(k.W1[:, 3:], emb.params["Wz"][:, :, 0])
    np.testing.assert_array_equal(k.W2[:, :3], emb.params["Wx"][:, :, 1])
