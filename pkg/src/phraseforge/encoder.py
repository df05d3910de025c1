"""Dual start/end vector representations for contexts and phrase spans.

A pluggable provider produces frozen base embeddings; the trainable surface is
a projection head of four square matrices applied on top. The built-in
provider is a deterministic hashed bag-of-tokens featurizer:

* every token lands in a hashed bucket with a hashed sign (the shared "bag"
  component),
* the start vector additionally mixes tokens weighted by 1/(1+position) under
  an independently salted hash,
* the end vector mixes tokens weighted by 1/(1+distance_from_end),
* each vector is L2-normalized; empty text yields exact zero vectors.

Everything is a pure function of (text, dim, seed), so embeddings are
reproducible bit for bit across runs and platforms.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .corpus import Passage, ConvContext, PhraseSpan
from .errors import ConfigurationError, IndexFormatError

# Tokens bounding the span inside its composed context window, so that nested
# spans sharing a neighborhood still featurize differently.
SPAN_OPEN = "[A]"
SPAN_CLOSE = "[/A]"
CONTEXT_WINDOW = 10

_MASK64 = (1 << 64) - 1


@lru_cache(maxsize=1 << 16)
def _token_hashes(token: str, seed: int) -> tuple[int, int, int]:
    """64-bit hashes of a token under the bag/start/end salts."""
    key = (seed & _MASK64).to_bytes(8, "little")
    out = []
    for salt in (b"bag", b"start", b"end"):
        h = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key, person=salt)
        out.append(int.from_bytes(h.digest(), "little"))
    return tuple(out)


def _accumulate(vec: np.ndarray, h: int, dim: int, weight: float) -> None:
    bucket = (h >> 1) % dim
    sign = 1.0 if (h & 1) == 0 else -1.0
    vec[bucket] += sign * weight


def _normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        return vec
    return vec / norm


@dataclass(frozen=True)
class BaseEmbedding:
    start_vec: np.ndarray
    end_vec: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.start_vec.shape[0])


@dataclass(frozen=True)
class QueryEmbedding:
    start_vec: np.ndarray
    end_vec: np.ndarray
    provenance: str = ""

    def concat(self) -> np.ndarray:
        return np.concatenate([self.start_vec, self.end_vec])


@dataclass(frozen=True)
class PhraseEmbedding:
    start_vec: np.ndarray
    end_vec: np.ndarray
    provenance: str = ""

    def concat(self) -> np.ndarray:
        return np.concatenate([self.start_vec, self.end_vec])


# Relative weight of the position-sensitive mixes against the flat bag. The
# bag of a typical span neighborhood dominates at 1.0, leaving overlapping
# spans nearly indistinguishable; 4.0 keeps them separable after projection.
_MIX_SCALE = 4.0


def featurize(text: str, dim: int, seed: int) -> BaseEmbedding:
    if dim < 2:
        raise ConfigurationError(f"embedding dim must be >= 2, got {dim}")
    tokens = text.split()
    n = len(tokens)
    bag = np.zeros(dim)
    smix = np.zeros(dim)
    emix = np.zeros(dim)
    for pos, tok in enumerate(tokens):
        hb, hs, he = _token_hashes(tok, seed)
        _accumulate(bag, hb, dim, 1.0)
        _accumulate(smix, hs, dim, _MIX_SCALE / (1.0 + pos))
        _accumulate(emix, he, dim, _MIX_SCALE / (1.0 + (n - 1 - pos)))
    return BaseEmbedding(_normalize(bag + smix), _normalize(bag + emix))


class HashedFeaturizer:
    """Built-in encoder provider backed by :func:`featurize`."""

    def __init__(self, dim: int, seed: int):
        if dim < 2:
            raise ConfigurationError(f"embedding dim must be >= 2, got {dim}")
        self.dim = dim
        self.seed = seed

    def encode_batch(self, texts: list[str]) -> list[BaseEmbedding]:
        return [featurize(t, self.dim, self.seed) for t in texts]

    def encode(self, text: str) -> BaseEmbedding:
        return featurize(text, self.dim, self.seed)

    def describe(self) -> str:
        return f"hashed-featurizer(dim={self.dim}, seed={self.seed})"


_HEAD_MAGIC = b"PFHD"
_HEAD_VERSION = 1
_HEAD_FIELDS = ("w_q_start", "w_q_end", "w_p_start", "w_p_end")


@dataclass
class ProjectionHead:
    """Trainable linear maps over frozen base embeddings, one per side and
    endpoint. All four matrices are square d x d, float64."""

    w_q_start: np.ndarray
    w_q_end: np.ndarray
    w_p_start: np.ndarray
    w_p_end: np.ndarray

    def __post_init__(self):
        d = self.dim
        for name in _HEAD_FIELDS:
            m = getattr(self, name)
            if m.shape != (d, d):
                raise ConfigurationError(f"{name} must be square {d}x{d}, got {m.shape}")
            if not np.all(np.isfinite(m)):
                raise ConfigurationError(f"{name} contains non-finite entries")

    @property
    def dim(self) -> int:
        return int(self.w_q_start.shape[0])

    @classmethod
    def identity(cls, dim: int) -> "ProjectionHead":
        return cls(*(np.eye(dim) for _ in _HEAD_FIELDS))

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(*(getattr(self, f).copy() for f in _HEAD_FIELDS))

    def matrices(self) -> dict[str, np.ndarray]:
        return {f: getattr(self, f) for f in _HEAD_FIELDS}

    def save(self, path) -> None:
        d = self.dim
        blob = [_HEAD_MAGIC, struct.pack("<HI", _HEAD_VERSION, d)]
        for f in _HEAD_FIELDS:
            blob.append(np.ascontiguousarray(getattr(self, f), dtype="<f8").tobytes())
        Path(path).write_bytes(b"".join(blob))

    @classmethod
    def load(cls, path) -> "ProjectionHead":
        raw = Path(path).read_bytes()
        if len(raw) < 10 or raw[:4] != _HEAD_MAGIC:
            raise IndexFormatError(f"not a projection head file: {path}")
        version, d = struct.unpack("<HI", raw[4:10])
        if version != _HEAD_VERSION:
            raise IndexFormatError(f"unsupported head version {version}")
        need = 10 + 4 * d * d * 8
        if len(raw) != need:
            raise IndexFormatError(f"truncated head file: {path}")
        mats = []
        off = 10
        for _ in _HEAD_FIELDS:
            mats.append(np.frombuffer(raw, dtype="<f8", count=d * d, offset=off)
                        .reshape(d, d).copy())
            off += d * d * 8
        return cls(*mats)


def _project(w_start: np.ndarray, w_end: np.ndarray, base: BaseEmbedding, dim: int):
    if base.dim != dim:
        raise ConfigurationError(
            f"provider dim {base.dim} does not match head dim {dim}")
    return w_start @ base.start_vec, w_end @ base.end_vec


def encode_context(ctx: ConvContext, head: ProjectionHead, provider) -> QueryEmbedding:
    base = provider.encode(ctx.serialized_text)
    start, end = _project(head.w_q_start, head.w_q_end, base, head.dim)
    return QueryEmbedding(start, end,
                          provenance=f"{ctx.conversation_id}#{ctx.turn_index}")


def compose_span_text(span: PhraseSpan, passage: Passage) -> str:
    """Span surface bracketed by marker tokens, with up to CONTEXT_WINDOW
    passage tokens of left and right context.

    The bracketed span appears twice, once after the left window and once at
    the very end. The trailing copy sits where the end-position mix weights
    peak, so spans that share a neighborhood but differ in their boundaries
    still get distinct embeddings; it also doubles the surface tokens in the
    bag relative to window tokens.
    """
    toks = passage.token_strings()
    left = toks[max(0, span.start_token - CONTEXT_WINDOW):span.start_token]
    inner = toks[span.start_token:span.end_token + 1]
    right = toks[span.end_token + 1:span.end_token + 1 + CONTEXT_WINDOW]
    core = [SPAN_OPEN] + inner + [SPAN_CLOSE]
    return " ".join(left + core + right + core)


def encode_phrase(span: PhraseSpan, passage: Passage, head: ProjectionHead,
                  provider) -> PhraseEmbedding:
    base = provider.encode(compose_span_text(span, passage))
    start, end = _project(head.w_p_start, head.w_p_end, base, head.dim)
    return PhraseEmbedding(start, end,
                           provenance=f"{span.passage_id}:{span.start_token}-{span.end_token}")
