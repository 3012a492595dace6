"""Desk-scale datasets: copy-memory sequences, character corpora, IDX images."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

COPY_PAYLOAD = 10
COPY_BLANK = 0
COPY_DELIM = 9
COPY_SYMBOLS = 10  # alphabet {0..9}; payload symbols are 1..8


class FormatError(ValueError):
    """Malformed input file."""


# ---------------------------------------------------------------------------
# copy memory


@dataclass
class CopyTaskSample:
    input: np.ndarray   # [delay + 20] ints
    target: np.ndarray  # [10] payload, expected at the final 10 positions


def gen_copy_task(n_samples: int, delay: int, seed: int) -> List[CopyTaskSample]:
    """Copy-memory samples: payload, ``delay - 1`` blanks, delimiter, 10 blanks."""
    if delay < 1:
        raise ValueError("delay must be >= 1")
    inputs, targets = copy_task_arrays(n_samples, delay, seed)
    return [CopyTaskSample(inputs[k], targets[k]) for k in range(n_samples)]


def copy_task_arrays(n_samples: int, delay: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Batched form of :func:`gen_copy_task`: ``inputs[N, delay+20]``, ``payload[N, 10]``."""
    if delay < 1:
        raise ValueError("delay must be >= 1")
    rng = np.random.default_rng(seed)
    payload = rng.integers(1, 9, size=(n_samples, COPY_PAYLOAD))
    inputs = np.full((n_samples, delay + 2 * COPY_PAYLOAD), COPY_BLANK, dtype=np.int64)
    inputs[:, :COPY_PAYLOAD] = payload
    inputs[:, delay + COPY_PAYLOAD - 1] = COPY_DELIM
    return inputs, payload


def copy_targets(inputs: np.ndarray, payload: np.ndarray, ignore_index: int = -1) -> np.ndarray:
    """Per-position targets: payload at the last 10 steps, ``ignore_index`` elsewhere."""
    t = np.full(inputs.shape, ignore_index, dtype=np.int64)
    t[..., -COPY_PAYLOAD:] = payload
    return t


def extract_payload(inputs: np.ndarray) -> np.ndarray:
    """Rule-based solver: the symbols before the first blank."""
    return np.asarray(inputs)[..., :COPY_PAYLOAD]


def save_copy_cache(samples: Sequence[CopyTaskSample], path) -> None:
    """Length-prefixed binary cache: ``u32 count`` then per sample
    ``u32 len, int8[len]`` for input and target."""
    with open(path, "wb") as fh:
        fh.write(b"TRLC")
        fh.write(struct.pack("<I", len(samples)))
        for s in samples:
            for arr in (s.input, s.target):
                fh.write(struct.pack("<I", len(arr)))
                fh.write(np.asarray(arr, dtype=np.int8).tobytes())


def load_copy_cache(path) -> List[CopyTaskSample]:
    raw = Path(path).read_bytes()
    if raw[:4] != b"TRLC":
        raise FormatError(f"{path}: not a copy-task cache")
    (count,), pos = struct.unpack_from("<I", raw, 4), 8
    out = []
    for _ in range(count):
        arrs = []
        for _ in range(2):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            arrs.append(np.frombuffer(raw, dtype=np.int8, count=n, offset=pos).astype(np.int64))
            pos += n
        out.append(CopyTaskSample(*arrs))
    return out


# ---------------------------------------------------------------------------
# character corpora


@dataclass
class TokenCorpus:
    ids: np.ndarray
    vocab: List[str]
    splits: Dict[str, Tuple[int, int]]
    unk_id: Optional[int] = None

    @property
    def stoi(self) -> Dict[str, int]:
        return {c: i for i, c in enumerate(self.vocab)}

    def __len__(self):
        return len(self.ids)

    def encode(self, text: str) -> np.ndarray:
        stoi = self.stoi
        if self.unk_id is None:
            missing = sorted(set(text) - set(stoi))
            if missing:
                raise KeyError(f"characters not in vocabulary: {missing!r}")
        return np.array([stoi.get(c, self.unk_id) for c in text], dtype=np.int64)

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.vocab[i] for i in ids)

    def split(self, name: str) -> np.ndarray:
        lo, hi = self.splits[name]
        return self.ids[lo:hi]


UNK = "\x00<unk>"


def corpus_from_text(text: str, splits: Sequence[float] = (0.9, 0.05, 0.05)) -> TokenCorpus:
    """Character corpus with a vocabulary drawn from the training split only.

    An unknown token is appended to the vocabulary only when the held-out
    splits contain characters unseen in training.
    """
    if not text:
        raise ValueError("empty corpus")
    if len(splits) != 3 or any(s < 0 for s in splits) or abs(sum(splits) - 1.0) > 1e-9:
        raise ValueError("splits must be three non-negative fractions summing to 1")
    n = len(text)
    n_train = max(1, int(n * splits[0]))
    n_val = int(n * splits[1])
    bounds = {"train": (0, n_train), "val": (n_train, min(n, n_train + n_val)),
              "test": (min(n, n_train + n_val), n)}
    vocab = sorted(set(text[:n_train]))
    unk_id = None
    if set(text[n_train:]) - set(vocab):
        unk_id = len(vocab)
        vocab.append(UNK)
    stoi = {c: i for i, c in enumerate(vocab)}
    ids = np.array([stoi.get(c, unk_id) for c in text], dtype=np.int64)
    return TokenCorpus(ids, vocab, bounds, unk_id)


def load_char_corpus(path, splits: Sequence[float] = (0.9, 0.05, 0.05)) -> TokenCorpus:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise OSError(f"cannot read corpus {path}: {exc}") from exc
    return corpus_from_text(text, splits)


@dataclass
class Window:
    inputs: np.ndarray   # [B, L]
    targets: np.ndarray  # [B, L]
    is_boundary: bool
    start: int           # offset within each lane


def batch_iterator(ids: np.ndarray, batch: int, bptt_len: int) -> Iterator[Window]:
    """Contiguous, non-overlapping next-token windows over ``batch`` lanes.

    The stream is cut into ``batch`` equal lanes (the remainder is dropped).
    Window ``k+1`` of a lane starts where window ``k`` ended; the first window
    has ``is_boundary`` set, telling the caller to reset carried history.
    """
    if bptt_len < 2:
        raise ValueError("bptt_len must be >= 2")
    ids = np.asarray(ids)
    lane = len(ids) // batch
    if batch < 1 or lane < bptt_len + 1:
        raise ValueError(f"corpus of {len(ids)} tokens is shorter than one window of {bptt_len} x {batch}")
    lanes = ids[:lane * batch].reshape(batch, lane)
    for start in range(0, lane - 1, bptt_len):
        stop = min(start + bptt_len, lane - 1)
        yield Window(lanes[:, start:stop], lanes[:, start + 1:stop + 1], start == 0, start)


# ---------------------------------------------------------------------------
# IDX pixel sequences


@dataclass
class PixelSequenceDataset:
    sequences: np.ndarray  # [N, C, T]
    labels: np.ndarray     # [N]
    image_shape: Tuple[int, int]
    permutation: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.labels)

    @property
    def T(self) -> int:
        return self.sequences.shape[-1]

    def subset(self, idx) -> "PixelSequenceDataset":
        return replace(self, sequences=self.sequences[idx], labels=self.labels[idx])


def _open(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path, expect_magic: int) -> np.ndarray:
    """Read a big-endian unsigned-byte IDX array (gzip accepted)."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if body.size != int(np.prod(dims)):
        raise FormatError(f"{path}: expected {int(np.prod(dims))} bytes of data, found {body.size}")
    return body.reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path) -> PixelSequenceDataset:
    """Images become ``[1, H*W]`` sequences scaled to [0, 1]."""
    images = read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = read_idx(labels_path, IDX_LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    n, h, w = images.shape
    seqs = images.reshape(n, 1, h * w).astype(np.float64) / 255.0
    return PixelSequenceDataset(seqs, labels.astype(np.int64), (h, w))


def downsample(dataset: PixelSequenceDataset, factor: int = 2) -> PixelSequenceDataset:
    """Average-pool each image by ``factor`` in both directions (28x28 -> 14x14)."""
    if dataset.permutation is not None:
        raise ValueError("downsample before permuting")
    h, w = dataset.image_shape
    if h % factor or w % factor:
        raise ValueError(f"image {h}x{w} not divisible by {factor}")
    n, c, _ = dataset.sequences.shape
    imgs = dataset.sequences.reshape(n, c, h // factor, factor, w // factor, factor)
    pooled = imgs.mean(axis=(3, 5)).reshape(n, c, -1)
    return PixelSequenceDataset(pooled, dataset.labels, (h // factor, w // factor))


def permute_pixels(dataset: PixelSequenceDataset, seed: Optional[int]) -> PixelSequenceDataset:
    """Apply one seeded permutation of positions to every sequence.

    ``seed=None`` disables permutation and returns the dataset unchanged.
    """
    if seed is None:
        return dataset
    perm = np.random.default_rng(seed).permutation(dataset.T)
    return replace(dataset, sequences=dataset.sequences[..., perm], permutation=perm)


def unpermute(dataset: PixelSequenceDataset) -> PixelSequenceDataset:
    if dataset.permutation is None:
        return dataset
    inv = np.argsort(dataset.permutation)
    return replace(dataset, sequences=dataset.sequences[..., inv], permutation=None)
