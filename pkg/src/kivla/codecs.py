"""Action and state tokenizers.

Chunks are ``(H, d)`` arrays.  Both action tokenizers follow the scikit-learn
transformer protocol on stacks of chunks ``(n, H, d)``: ``fit`` learns the
per-dimension normalisation (1st/99th percentile mapped to [-1, 1]) and, for
FAST, the byte-pair merges; ``transform`` emits one token-id list per chunk;
``inverse_transform`` goes back to raw action units.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_chunks

CHUNK_EPS = 1e-9


# ----------------------------------------------------------------------- DCT


def dct_basis(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``C`` with ``coeffs = C @ signal``."""
    if n < 1:
        raise ValueError(f"DCT length must be >= 1, got {n}")
    k = np.arange(n)[:, None]
    t = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * t + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    c[0] /= math.sqrt(2.0)
    return c


def dct_forward(signal) -> np.ndarray:
    """Orthonormal type-II DCT along the first axis."""
    x = np.asarray(signal, dtype=np.float64)
    return dct_basis(x.shape[0]) @ x


def dct_inverse(coeffs) -> np.ndarray:
    c = np.asarray(coeffs, dtype=np.float64)
    return dct_basis(c.shape[0]).T @ c


def quantize(coeffs, scale: float) -> np.ndarray:
    """``round(coeffs * scale)``, ties to even."""
    if scale <= 0:
        raise ValueError(f"quantization scale must be positive, got {scale}")
    return np.rint(np.asarray(coeffs, dtype=np.float64) * scale).astype(np.int64)


def dequantize(indices, scale: float) -> np.ndarray:
    if scale <= 0:
        raise ValueError(f"quantization scale must be positive, got {scale}")
    return np.asarray(indices, dtype=np.float64) / scale


# ----------------------------------------------------------------------- BPE


@dataclass(frozen=True)
class BpeVocab:
    """Ordered merges over ``base_count`` base symbols; merge ``i`` makes id ``base_count + i``."""

    base_count: int
    merges: tuple[tuple[int, int], ...] = ()
    max_vocab: int | None = None
    _expansion: tuple[tuple[int, ...], ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        table = [(i,) for i in range(self.base_count)]
        for i, (a, b) in enumerate(self.merges):
            new = self.base_count + i
            if not (0 <= a < new and 0 <= b < new):
                raise ValueError(f"merge {i} ({a}, {b}) references an undefined symbol")
            table.append(table[a] + table[b])
        object.__setattr__(self, "_expansion", tuple(table))

    @property
    def size(self) -> int:
        return self.base_count + len(self.merges)

    def expansion_length(self, token: int) -> int:
        return len(self._expansion[token])

    def encode(self, symbols: Sequence[int]) -> list[int]:
        seq = list(symbols)
        for s in seq:
            if not 0 <= s < self.base_count:
                raise ValueError(f"base symbol {s} outside [0, {self.base_count})")
        for i, pair in enumerate(self.merges):
            if len(seq) < 2:
                break
            seq = _merge_pair(seq, pair, self.base_count + i)
        return seq

    def decode(self, tokens: Iterable[int]) -> list[int]:
        out: list[int] = []
        for t in tokens:
            if not 0 <= t < self.size:
                raise ValueError(f"token id {t} outside vocabulary of size {self.size}")
            out.extend(self._expansion[t])
        return out


def _merge_pair(seq: list[int], pair: tuple[int, int], new: int) -> list[int]:
    out = []
    i = 0
    n = len(seq)
    a, b = pair
    while i < n:
        if i + 1 < n and seq[i] == a and seq[i + 1] == b:
            out.append(new)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def bpe_train(corpus: Sequence[Sequence[int]], vocab_size: int, base_count: int | None = None) -> BpeVocab:
    """Greedy most-frequent-pair merges until ``vocab_size`` or no pair repeats.

    Ties go to the lexicographically smallest pair.
    """
    if not corpus:
        raise ValueError("BPE corpus is empty")
    seqs = [list(s) for s in corpus]
    if base_count is None:
        base_count = max((max(s) for s in seqs if s), default=-1) + 1
    merges: list[tuple[int, int]] = []
    while base_count + len(merges) < vocab_size:
        counts: Counter = Counter()
        for s in seqs:
            counts.update(zip(s, s[1:]))
        if not counts:
            break
        best_count = max(counts.values())
        if best_count < 2:
            break
        pair = min(p for p, c in counts.items() if c == best_count)
        new = base_count + len(merges)
        seqs = [_merge_pair(s, pair, new) for s in seqs]
        merges.append(pair)
    return BpeVocab(base_count, tuple(merges), vocab_size)


# ------------------------------------------------------------ normalisation


class _ChunkNormalizer(BaseEstimator):
    def _fit_range(self, X):
        flat = X.reshape(-1, X.shape[-1])
        self.low_ = np.percentile(flat, self.low_percentile, axis=0)
        self.high_ = np.percentile(flat, self.high_percentile, axis=0)
        same = self.high_ - self.low_ < 1e-12
        self.low_ = np.where(same, self.low_ - 1.0, self.low_)
        self.high_ = np.where(same, self.high_ + 1.0, self.high_)

    def normalize(self, X) -> np.ndarray:
        """Raw actions to [-1, 1] (clipped)."""
        check_is_fitted(self, "low_")
        X = np.asarray(X, dtype=np.float64)
        z = 2.0 * (X - self.low_) / (self.high_ - self.low_) - 1.0
        return np.clip(z, -1.0, 1.0)

    def denormalize(self, Z) -> np.ndarray:
        check_is_fitted(self, "low_")
        Z = np.asarray(Z, dtype=np.float64)
        return (Z + 1.0) / 2.0 * (self.high_ - self.low_) + self.low_


# ---------------------------------------------------------------------- FAST


class FastTokenizer(TransformerMixin, _ChunkNormalizer):
    """Per-dimension DCT, scalar quantization, then byte-pair encoding.

    Coefficients are flattened dimension-major and shifted by ``offset_`` so
    every representable coefficient of a chunk in [-1, 1] is a valid base
    symbol.

    Parameters
    ----------
    horizon, action_dim : int
        Chunk shape ``(H, d)``.
    scale : float
        Quantization scale; coefficient error is at most ``1 / (2 * scale)``.
    vocab_size : int
        Upper bound on base symbols plus merges.
    """

    def __init__(self, horizon=8, action_dim=3, scale=64.0, vocab_size=512,
                 low_percentile=1.0, high_percentile=99.0):
        self.horizon = horizon
        self.action_dim = action_dim
        self.scale = scale
        self.vocab_size = vocab_size
        self.low_percentile = low_percentile
        self.high_percentile = high_percentile

    @property
    def n_symbols(self) -> int:
        return self.horizon * self.action_dim

    def _offset(self) -> int:
        return int(math.ceil(math.sqrt(self.horizon) * self.scale))

    def fit(self, X, y=None):
        X = check_chunks(X, self.horizon, self.action_dim)
        self._fit_range(X)
        self.offset_ = self._offset()
        base = 2 * self.offset_ + 1
        if base > self.vocab_size:
            raise ValueError(
                f"vocab_size {self.vocab_size} is smaller than the {base} base symbols "
                f"needed at scale {self.scale} and horizon {self.horizon}"
            )
        corpus = [self._symbols(z) for z in self.normalize(X)]
        self.bpe_ = bpe_train(corpus, self.vocab_size, base_count=base)
        return self

    def _symbols(self, chunk: np.ndarray) -> list[int]:
        q = quantize(dct_forward(chunk), self.scale)  # (H, d)
        return (q.T.reshape(-1) + self.offset_).tolist()

    def encode(self, chunk) -> list[int]:
        """Token ids for one normalised chunk."""
        check_is_fitted(self, "bpe_")
        chunk = np.asarray(chunk, dtype=np.float64)
        if chunk.shape != (self.horizon, self.action_dim):
            raise ValueError(f"chunk shape {chunk.shape} != ({self.horizon}, {self.action_dim})")
        return self.bpe_.encode(self._symbols(np.clip(chunk, -1.0, 1.0)))

    def decode(self, ids) -> np.ndarray:
        """Normalised chunk from token ids (clamped to [-1, 1])."""
        check_is_fitted(self, "bpe_")
        symbols = self.bpe_.decode(ids)
        if len(symbols) != self.n_symbols:
            raise ValueError(
                f"decoded {len(symbols)} coefficients, expected {self.n_symbols} "
                f"(H={self.horizon}, d={self.action_dim})"
            )
        q = np.asarray(symbols, dtype=np.int64).reshape(self.action_dim, self.horizon).T - self.offset_
        return np.clip(dct_inverse(dequantize(q, self.scale)), -1.0, 1.0)

    def transform(self, X) -> list[list[int]]:
        X = check_chunks(X, self.horizon, self.action_dim)
        return [self.encode(z) for z in self.normalize(X)]

    def inverse_transform(self, ids_list) -> np.ndarray:
        return self.denormalize(np.stack([self.decode(ids) for ids in ids_list]))

    @property
    def token_vocab_size(self) -> int:
        check_is_fitted(self, "bpe_")
        return self.bpe_.size

    def token_length(self, token: int) -> int:
        return self.bpe_.expansion_length(token)

    def to_dict(self) -> dict:
        check_is_fitted(self, "bpe_")
        return {
            "kind": "fast",
            "horizon": self.horizon,
            "action_dim": self.action_dim,
            "scale": float(self.scale),
            "vocab_size": self.vocab_size,
            "low_percentile": float(self.low_percentile),
            "high_percentile": float(self.high_percentile),
            "low": [float(v) for v in self.low_],
            "high": [float(v) for v in self.high_],
            "base_count": self.bpe_.base_count,
            "merges": [list(m) for m in self.bpe_.merges],
        }


# --------------------------------------------------------------------- naive


class NaiveBinTokenizer(TransformerMixin, _ChunkNormalizer):
    """Uniform per-dimension bins over [-1, 1], one token per (timestep, dim).

    ``stride > 1`` keeps every ``stride``-th timestep and decodes by holding
    each coded action until the next one.
    """

    def __init__(self, horizon=8, action_dim=3, n_bins=256, stride=1,
                 low_percentile=1.0, high_percentile=99.0):
        self.horizon = horizon
        self.action_dim = action_dim
        self.n_bins = n_bins
        self.stride = stride
        self.low_percentile = low_percentile
        self.high_percentile = high_percentile

    @property
    def coded_steps(self) -> np.ndarray:
        return np.arange(0, self.horizon, self.stride)

    @property
    def n_tokens(self) -> int:
        return len(self.coded_steps) * self.action_dim

    def fit(self, X, y=None):
        if self.n_bins < 2:
            raise ValueError(f"n_bins must be >= 2, got {self.n_bins}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        X = check_chunks(X, self.horizon, self.action_dim)
        self._fit_range(X)
        return self

    def bin_of(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.clip(np.floor((x + 1.0) / 2.0 * self.n_bins), 0, self.n_bins - 1).astype(np.int64)

    def bin_center(self, b) -> np.ndarray:
        return -1.0 + (np.asarray(b, dtype=np.float64) + 0.5) * 2.0 / self.n_bins

    def encode(self, chunk) -> list[int]:
        chunk = np.asarray(chunk, dtype=np.float64)
        if chunk.shape != (self.horizon, self.action_dim):
            raise ValueError(f"chunk shape {chunk.shape} != ({self.horizon}, {self.action_dim})")
        return self.bin_of(chunk[self.coded_steps]).reshape(-1).tolist()

    def decode(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size != self.n_tokens:
            raise ValueError(f"got {ids.size} tokens, expected {self.n_tokens}")
        if np.any((ids < 0) | (ids >= self.n_bins)):
            raise ValueError(f"token id outside [0, {self.n_bins})")
        coded = self.bin_center(ids.reshape(-1, self.action_dim))
        hold = np.minimum(np.arange(self.horizon) // self.stride, len(coded) - 1)
        return coded[hold]

    def transform(self, X) -> list[list[int]]:
        X = check_chunks(X, self.horizon, self.action_dim)
        return [self.encode(z) for z in self.normalize(X)]

    def inverse_transform(self, ids_list) -> np.ndarray:
        return self.denormalize(np.stack([self.decode(ids) for ids in ids_list]))

    @property
    def token_vocab_size(self) -> int:
        return self.n_bins

    def token_length(self, token: int) -> int:
        return 1

    @property
    def n_symbols(self) -> int:
        return self.n_tokens

    def to_dict(self) -> dict:
        check_is_fitted(self, "low_")
        return {
            "kind": "naive",
            "horizon": self.horizon,
            "action_dim": self.action_dim,
            "n_bins": self.n_bins,
            "stride": self.stride,
            "low_percentile": float(self.low_percentile),
            "high_percentile": float(self.high_percentile),
            "low": [float(v) for v in self.low_],
            "high": [float(v) for v in self.high_],
        }


def codec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    low, high = np.asarray(d.pop("low")), np.asarray(d.pop("high"))
    if kind == "fast":
        base = d.pop("base_count")
        merges = tuple(tuple(m) for m in d.pop("merges"))
        codec = FastTokenizer(**d)
        codec.offset_ = codec._offset()
        codec.bpe_ = BpeVocab(base, merges, codec.vocab_size)
    elif kind == "naive":
        codec = NaiveBinTokenizer(**d)
    else:
        raise ValueError(f"unknown codec kind {kind!r}")
    codec.low_, codec.high_ = low, high
    return codec


def save_codec(codec, path) -> None:
    Path(path).write_text(json.dumps(codec.to_dict(), sort_keys=True, indent=1) + "\n")


def load_codec(path):
    return codec_from_dict(json.loads(Path(path).read_text()))


def make_codec(kind: str, horizon: int, action_dim: int):
    """``fast``, ``naive`` or ``naive-stride-5`` with the default settings."""
    if kind == "fast":
        return FastTokenizer(horizon, action_dim)
    if kind == "naive":
        return NaiveBinTokenizer(horizon, action_dim)
    if kind.startswith("naive-stride-"):
        return NaiveBinTokenizer(horizon, action_dim, stride=int(kind.rsplit("-", 1)[1]))
    raise ValueError(f"unknown codec {kind!r}")


# --------------------------------------------------------------------- state

STATE_KINDS = ("text", "special", "continuous")


class StateEncoder(BaseEstimator):
    """Proprioceptive state as text digits, special bin tokens, or one raw vector.

    ``encode`` returns stream items ``(modality, payload)``:

    * ``text``: decimal digits of bins ``1..n_bins`` as word strings, dims
      separated by ``"|"``.
    * ``special``: one bin index per dimension (``modality="state-token"``).
    * ``continuous``: a single item carrying the raw vector.
    """

    def __init__(self, kind="continuous", n_bins=256, state_dim=3, low=-1.0, high=1.0):
        self.kind = kind
        self.n_bins = n_bins
        self.state_dim = state_dim
        self.low = low
        self.high = high

    def bins(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        z = (q - self.low) / (self.high - self.low)
        return np.clip(np.floor(z * self.n_bins), 0, self.n_bins - 1).astype(np.int64) + 1

    def max_tokens(self) -> int:
        if self.kind == "text":
            return int(math.floor(math.log10(self.n_bins) + 2)) * self.state_dim
        if self.kind == "special":
            return self.state_dim
        return 1

    def encode(self, q) -> list[tuple[str, object]]:
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.state_dim,):
            raise ValueError(f"state shape {q.shape} != ({self.state_dim},)")
        if self.kind == "continuous":
            return [("state", q.copy())]
        b = self.bins(q)
        if self.kind == "special":
            return [("state-token", int(v) - 1) for v in b]
        if self.kind == "text":
            items: list[tuple[str, object]] = []
            for i, v in enumerate(b):
                if i:
                    items.append(("word", "|"))
                items.extend(("word", ch) for ch in str(int(v)))
            return items
        raise ValueError(f"unknown state encoding {self.kind!r}; expected one of {STATE_KINDS}")
