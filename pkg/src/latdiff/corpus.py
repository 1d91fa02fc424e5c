"""Corpus ingestion: tokenization, fixed-length packing, hidden-state statistics."""

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)

UNK_ID = 0
UNK_TOKEN = "<unk>"
STD_FLOOR = 1e-6

_WORD_RE = re.compile(r"\w+|[^\w\s]")


class ByteTokenizer:
    """Identity byte map; vocab is the 256 byte values."""

    vocab_size = 256

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids) -> str:
        return bytes(int(i) for i in ids).decode("utf-8", errors="replace")


class WordTokenizer:
    """Word/punctuation tokenizer with a frequency-built vocabulary.

    Id 0 is reserved for unknown tokens; everything the vocabulary covers
    round-trips at the token level (encode(decode(ids)) == ids).
    """

    def __init__(self, vocab: dict[str, int]):
        if UNK_TOKEN not in vocab or vocab[UNK_TOKEN] != UNK_ID:
            raise ValueError(f"vocab must map {UNK_TOKEN!r} to id {UNK_ID}")
        self.vocab = dict(vocab)
        self.inverse = {i: w for w, i in self.vocab.items()}
        self.vocab_size = len(self.vocab)

    @classmethod
    def fit(cls, text: str, max_vocab: int = 512) -> "WordTokenizer":
        """Build a vocabulary from corpus frequency, most frequent first."""
        counts: dict[str, int] = {}
        for tok in _WORD_RE.findall(text):
            counts[tok] = counts.get(tok, 0) + 1
        ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        words = [w for w, _ in ordered[: max_vocab - 1]]
        vocab = {UNK_TOKEN: UNK_ID}
        for i, w in enumerate(words, start=1):
            vocab[w] = i
        return cls(vocab)

    def encode(self, text: str) -> list[int]:
        return [self.vocab.get(tok, UNK_ID) for tok in _WORD_RE.findall(text)]

    def decode(self, ids) -> str:
        words = [self.inverse.get(int(i), UNK_TOKEN) for i in ids]
        out = []
        for w in words:
            if out and _WORD_RE.fullmatch(w) and not re.fullmatch(r"\w+", w):
                out[-1] = out[-1] + w  # attach punctuation to the previous word
            else:
                out.append(w)
        return " ".join(out)

    def save(self, path):
        Path(path).write_text(json.dumps(self.vocab, sort_keys=True, indent=0))

    @classmethod
    def load(cls, path) -> "WordTokenizer":
        return cls(json.loads(Path(path).read_text()))


def tokenize_corpus(text: str, tokenizer) -> list[int]:
    """Deterministic token stream for a text; empty input yields an empty stream."""
    return tokenizer.encode(text)


def pack_chunks(tokens, n: int) -> np.ndarray:
    """Split a token stream into consecutive length-n chunks, dropping the remainder.

    No padding is ever introduced; output is a [num_chunks, n] integer array.
    """
    if n < 1:
        raise ValueError(f"chunk length must be >= 1, got {n}")
    arr = np.asarray(tokens, dtype=np.int64)
    num = len(arr) // n
    return arr[: num * n].reshape(num, n).copy()


@dataclass
class HiddenStats:
    """Per-dimension mean/std of encoder hidden states over a dataset."""

    mean: np.ndarray
    std: np.ndarray
    count: int
    layer: int
    encoder_fingerprint: str = ""

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ValueError("mean/std shape mismatch")
        if self.count <= 0:
            raise ValueError("count must be positive")
        if not (self.std > 0).all():
            raise ValueError("std must be strictly positive (floored upstream)")

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "count": int(self.count),
            "layer": int(self.layer),
            "encoder_fingerprint": self.encoder_fingerprint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HiddenStats":
        return cls(np.array(d["mean"]), np.array(d["std"]), d["count"], d["layer"],
                   d.get("encoder_fingerprint", ""))


def compute_hidden_stats(dataset: np.ndarray, encoder, layer: int,
                         max_sequences: int = 10_000, batch_size: int = 64,
                         encoder_fingerprint: str = "") -> HiddenStats:
    """Streaming per-dimension mean/std (population) of hidden states at `layer`.

    Accumulates in float64 in dataset order, so results are deterministic for a
    fixed dataset and order. Dead dimensions are floored at STD_FLOOR.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    use = dataset[:max_sequences]
    total = np.zeros(encoder.dim, dtype=np.float64)
    total_sq = np.zeros(encoder.dim, dtype=np.float64)
    count = 0
    encoder.eval()
    with torch.no_grad():
        for start in range(0, len(use), batch_size):
            ids = torch.as_tensor(use[start : start + batch_size], dtype=torch.long)
            h = encoder.hidden_states(ids, layer).double().reshape(-1, encoder.dim).numpy()
            total += h.sum(axis=0)
            total_sq += (h * h).sum(axis=0)
            count += h.shape[0]
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    std = np.sqrt(var)
    floored = std < STD_FLOOR
    if floored.any():
        logger.warning("flooring %d zero-variance hidden dimensions at %g",
                       int(floored.sum()), STD_FLOOR)
        std = np.maximum(std, STD_FLOOR)
    return HiddenStats(mean, std, count, layer, encoder_fingerprint)


def normalize_hidden(h: torch.Tensor, stats: HiddenStats) -> torch.Tensor:
    """(h - mean) / std elementwise; inverse of denormalize_hidden."""
    if h.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"hidden dim {h.shape[-1]} != stats dim {stats.mean.shape[0]}")
    mean = torch.as_tensor(stats.mean, dtype=h.dtype, device=h.device)
    std = torch.as_tensor(stats.std, dtype=h.dtype, device=h.device)
    return (h - mean) / std


def denormalize_hidden(h: torch.Tensor, stats: HiddenStats) -> torch.Tensor:
    if h.shape[-1] != stats.mean.shape[0]:
        raise ValueError(f"hidden dim {h.shape[-1]} != stats dim {stats.mean.shape[0]}")
    mean = torch.as_tensor(stats.mean, dtype=h.dtype, device=h.device)
    std = torch.as_tensor(stats.std, dtype=h.dtype, device=h.device)
    return h * std + mean


def save_stats(path, stats_by_layer: dict[int, HiddenStats]):
    """Persist stats for one or more layers as a self-describing JSON artifact."""
    payload = {"format": "latdiff-hidden-stats-v1",
               "layers": {str(k): v.to_dict() for k, v in stats_by_layer.items()}}
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_stats(path) -> dict[int, HiddenStats]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != "latdiff-hidden-stats-v1":
        raise ValueError(f"not a hidden-stats artifact: {path}")
    return {int(k): HiddenStats.from_dict(v) for k, v in payload["layers"].items()}
