import gzip

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trellisnet import data


# --- copy memory ---------------------------------------------------------------------

def test_copy_sample_geometry():
    for delay in (1, 5, 50):
        for s in data.gen_copy_task(20, delay, seed=0):
            assert len(s.input) == delay + 20
            assert (s.input == data.COPY_DELIM).sum() == 1
            assert s.input[delay + 9] == data.COPY_DELIM
            assert np.all((s.target >= 1) & (s.target <= 8)) and len(s.target) == 10
            assert not s.input[10:delay + 9].any() and not s.input[-10:].any()


def test_copy_same_seed_same_samples():
    a, b = data.copy_task_arrays(50, 7, 3), data.copy_task_arrays(50, 7, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], data.copy_task_arrays(50, 7, 4)[0])


def test_copy_rejects_bad_delay():
    with pytest.raises(ValueError):
        data.gen_copy_task(1, 0, 0)


def test_random_guess_baseline_is_one_eighth():
    _, payload = data.copy_task_arrays(1000, 3, seed=1)
    guess = np.random.default_rng(2).integers(1, 9, size=payload.shape)
    assert abs((guess == payload).mean() - 1 / 8) <= 0.02


def test_rule_based_extractor_is_exact():
    inputs, payload = data.copy_task_arrays(100, 9, seed=5)
    np.testing.assert_array_equal(data.extract_payload(inputs), payload)
    t = data.copy_targets(inputs, payload)
    np.testing.assert_array_equal(t[:, -10:], payload)
    assert (t[:, :-10] == -1).all()


def test_copy_cache_round_trip(tmp_path):
    samples = data.gen_copy_task(7, 4, seed=0)
    data.save_copy_cache(samples, tmp_path / "c.bin")
    back = data.load_copy_cache(tmp_path / "c.bin")
    assert all(np.array_equal(a.input, b.input) and np.array_equal(a.target, b.target)
               for a, b in zip(samples, back))
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(data.FormatError):
        data.load_copy_cache(tmp_path / "bad.bin")


# --- character corpora ---------------------------------------------------------------

def test_abab_corpus():
    c = data.corpus_from_text("abab", splits=(1.0, 0.0, 0.0))
    assert c.vocab == ["a", "b"] and c.ids.tolist() == [0, 1, 0, 1]


@settings(max_examples=40, deadline=None)
@given(st.text(alphabet="abcdefg \n", min_size=1, max_size=200))
def test_decode_encode_round_trip(text):
    c = data.corpus_from_text(text, splits=(1.0, 0.0, 0.0))
    assert c.decode(c.encode(text)) == text
    assert c.ids.max() < len(c.vocab)


def test_unknown_characters_map_to_unk():
    text = "aaaaaaaaab" * 9 + "zzzzzzzzzz"
    c = data.corpus_from_text(text)
    assert "z" not in c.vocab and c.unk_id is not None
    assert (c.split("test") == c.unk_id).all()
    with pytest.raises(KeyError):
        data.corpus_from_text("ab", (1.0, 0.0, 0.0)).encode("abc")


def test_corpus_errors(tmp_path):
    with pytest.raises(ValueError):
        data.corpus_from_text("")
    with pytest.raises(OSError):
        data.load_char_corpus(tmp_path / "missing.txt")
    (tmp_path / "bin.txt").write_bytes(b"\xff\xfe\x00")
    with pytest.raises(OSError):
        data.load_char_corpus(tmp_path / "bin.txt")


def test_load_char_corpus(tmp_path):
    (tmp_path / "t.txt").write_text("hello world\n" * 20, encoding="utf-8")
    c = data.load_char_corpus(tmp_path / "t.txt")
    assert len(c) == 240 and set(c.vocab) == set("helo wrd\n")


@settings(max_examples=30, deadline=None)
@given(n=st.integers(10, 300), batch=st.integers(1, 4), bptt=st.integers(2, 12))
def test_batch_iterator_partitions_lanes(n, batch, bptt):
    ids = np.arange(n)
    lane = n // batch
    if lane < bptt + 1:
        with pytest.raises(ValueError):
            list(data.batch_iterator(ids, batch, bptt))
        return
    windows = list(data.batch_iterator(ids, batch, bptt))
    assert windows[0].is_boundary and not any(w.is_boundary for w in windows[1:])
    targets = np.concatenate([w.targets for w in windows], axis=1)
    inputs = np.concatenate([w.inputs for w in windows], axis=1)
    # no gaps or duplicates: every lane's targets are its tokens after the first
    assert targets.size == batch * (lane - 1)
    lanes = ids[:lane * batch].reshape(batch, lane)
    np.testing.assert_array_equal(inputs, lanes[:, :-1])
    np.testing.assert_array_equal(targets, lanes[:, 1:])
    for a, b in zip(windows, windows[1:]):
        assert b.start == a.start + a.inputs.shape[1]


def test_single_lane_reconstructs_corpus():
    ids = np.arange(37)
    w = list(data.batch_iterator(ids, 1, 5))
    rebuilt = np.concatenate([w[0].inputs[0, :1]] + [x.targets[0] for x in w])
    np.testing.assert_array_equal(rebuilt, ids)


def test_batch_iterator_rejects_short_bptt():
    with pytest.raises(ValueError):
        list(data.batch_iterator(np.arange(10), 1, 1))


# --- IDX -----------------------------------------------------------------------------

def test_idx_round_trip(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, size=(2, 28, 28), dtype=np.uint8)
    data.write_idx(tmp_path / "img", imgs)
    data.write_idx(tmp_path / "lbl", np.array([3, 7], dtype=np.uint8))
    ds = data.load_idx(tmp_path / "img", tmp_path / "lbl")
    assert ds.sequences.shape == (2, 1, 784) and ds.T == 784
    np.testing.assert_array_equal(np.rint(ds.sequences * 255).astype(np.uint8).reshape(2, 28, 28), imgs)
    assert ds.labels.tolist() == [3, 7]
    assert ds.sequences.min() >= 0 and ds.sequences.max() <= 1


def test_idx_gzip_and_errors(tmp_path):
    imgs = np.zeros((3, 4, 4), dtype=np.uint8)
    data.write_idx(tmp_path / "img", imgs)
    with open(tmp_path / "img", "rb") as fh, gzip.open(tmp_path / "img.gz", "wb") as gz:
        gz.write(fh.read())
    assert data.read_idx(tmp_path / "img.gz", data.IDX_IMAGE_MAGIC).shape == (3, 4, 4)
    data.write_idx(tmp_path / "lbl", np.zeros(2, dtype=np.uint8))
    with pytest.raises(data.FormatError):
        data.read_idx(tmp_path / "lbl", data.IDX_IMAGE_MAGIC)
    with pytest.raises(data.FormatError):
        data.load_idx(tmp_path / "img", tmp_path / "lbl")
    raw = (tmp_path / "img").read_bytes()
    (tmp_path / "short").write_bytes(raw[:-5])
    with pytest.raises(data.FormatError):
        data.read_idx(tmp_path / "short", data.IDX_IMAGE_MAGIC)


def _dataset(n=4, hw=4, seed=0):
    rng = np.random.default_rng(seed)
    return data.PixelSequenceDataset(rng.random((n, 1, hw * hw)), rng.integers(0, 10, n), (hw, hw))


def test_downsample_averages_blocks():
    ds = _dataset()
    small = data.downsample(ds)
    assert small.image_shape == (2, 2) and small.T == 4
    img = ds.sequences[0, 0].reshape(4, 4)
    assert small.sequences[0, 0, 0] == pytest.approx(img[:2, :2].mean())
    with pytest.raises(ValueError):
        data.downsample(ds, 3)


def test_permutation_properties():
    ds = _dataset()
    assert data.permute_pixels(ds, None) is ds
    perm = data.permute_pixels(ds, 3)
    assert sorted(perm.permutation.tolist()) == list(range(16))
    np.testing.assert_array_equal(np.sort(perm.sequences, axis=-1), np.sort(ds.sequences, axis=-1))
    np.testing.assert_array_equal(data.unpermute(perm).sequences, ds.sequences)
    again = data.permute_pixels(ds, 3)
    np.testing.assert_array_equal(again.permutation, perm.permutation)
    # one permutation shared by every image
    for k in range(4):
        np.testing.assert_array_equal(perm.sequences[k, 0], ds.sequences[k, 0, perm.permutation])
