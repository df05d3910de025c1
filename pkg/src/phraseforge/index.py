"""Flat dense phrase index with exact top-k inner-product search.

Each entry pairs a phrase span with its projected start/end vectors, stored
as one contiguous 2d-wide float32 row (start first). A query scores an entry
as <q.start, p.start> + <q.end, p.end>, which the concatenated layout turns
into a single inner product per row. Scores accumulate in float64; ranking
ties break by entry order, which is (passage_id, start_token, end_token).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .corpus import Corpus, PhraseSpan, enumerate_phrase_spans
from .encoder import PhraseEmbedding, ProjectionHead, QueryEmbedding, compose_span_text
from .errors import ConfigurationError, IndexFormatError

_MAGIC = b"PFIX"
_VERSION = 1
_HEADER = struct.Struct("<4sHIQ32s")  # magic, version, dim, entry count, fingerprint


@dataclass(frozen=True)
class RankedPhrase:
    span: PhraseSpan
    score: float
    rank: int


@dataclass
class PhraseIndex:
    spans: list[PhraseSpan]
    matrix: np.ndarray  # (n, 2*dim) float32, row i = [start_vec ; end_vec] of spans[i]
    dim: int
    fingerprint: str

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape != (len(self.spans), 2 * self.dim):
            raise ConfigurationError(
                f"index matrix shape {self.matrix.shape} does not match "
                f"{len(self.spans)} spans at dim {self.dim}")

    def __len__(self):
        return len(self.spans)

    def entry_embedding(self, i: int) -> PhraseEmbedding:
        row = self.matrix[i].astype(np.float64)
        return PhraseEmbedding(row[:self.dim], row[self.dim:],
                               provenance=f"{self.spans[i].passage_id}:{i}")

    def lookup(self, span_key: tuple[str, int, int]) -> int | None:
        """Entry position of a (passage_id, start, end) key, if indexed."""
        if not hasattr(self, "_key_to_row"):
            self._key_to_row = {s.key(): i for i, s in enumerate(self.spans)}
        return self._key_to_row.get(span_key)


def score(q: QueryEmbedding, p: PhraseEmbedding) -> float:
    """Inner product of the concatenated start/end representations."""
    qv = q.concat()
    pv = p.concat()
    if qv.shape != pv.shape:
        raise ConfigurationError(f"dim mismatch: query {qv.shape} vs phrase {pv.shape}")
    return float(np.dot(qv.astype(np.float64), pv.astype(np.float64)))


def build_index(corpus: Corpus, head: ProjectionHead, provider,
                max_phrase_len: int) -> PhraseIndex:
    """Enumerate, embed, and project every span of every passage.

    Entries are emitted in (passage_id, start, end) order regardless of the
    corpus file order, so rebuilding from identical inputs is byte-identical.
    """
    if len(corpus) == 0:
        raise ConfigurationError("cannot build an index over an empty corpus")
    spans: list[PhraseSpan] = []
    texts: list[str] = []
    for passage in sorted(corpus.passages, key=lambda p: p.passage_id):
        for span in enumerate_phrase_spans(passage, max_phrase_len):
            spans.append(span)
            texts.append(compose_span_text(span, passage))

    d = head.dim
    matrix = np.empty((len(spans), 2 * d), dtype=np.float32)
    batch = 4096
    for lo in range(0, len(texts), batch):
        embeddings = provider.encode_batch(texts[lo:lo + batch])
        starts = np.stack([e.start_vec for e in embeddings])
        ends = np.stack([e.end_vec for e in embeddings])
        if starts.shape[1] != d:
            raise ConfigurationError(
                f"provider dim {starts.shape[1]} does not match head dim {d}")
        matrix[lo:lo + len(embeddings), :d] = starts @ head.w_p_start.T
        matrix[lo:lo + len(embeddings), d:] = ends @ head.w_p_end.T
    return PhraseIndex(spans, matrix, d, corpus.fingerprint)


def _query_vector(index: PhraseIndex, q: QueryEmbedding) -> np.ndarray:
    qv = q.concat().astype(np.float64)
    if qv.shape[0] != 2 * index.dim:
        raise ConfigurationError(
            f"query dim {qv.shape[0] // 2} does not match index dim {index.dim}")
    return qv


def _ranked(index: PhraseIndex, order, scores) -> list[RankedPhrase]:
    return [RankedPhrase(index.spans[int(i)], float(s), rank)
            for rank, (i, s) in enumerate(zip(order, scores), start=1)]


def search_topk(index: PhraseIndex, q: QueryEmbedding, k: int) -> list[RankedPhrase]:
    """The k best entries under the active scan kernel."""
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    order, scores = kernels.topk_scan(index.matrix, _query_vector(index, q), k)
    return _ranked(index, order, scores)


def brute_force_oracle(index: PhraseIndex, q: QueryEmbedding, k: int) -> list[RankedPhrase]:
    """Ground truth for search_topk: full scan, then one stable sort."""
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    scores = kernels.dot_scores(index.matrix, _query_vector(index, q))
    order = np.argsort(-scores, kind="stable")[:k]
    return _ranked(index, order, scores[order])


def passages_from_phrases(ranked: list[RankedPhrase], cutoff: int) -> list[str]:
    """Passage ids in order of their best phrase rank, truncated to cutoff."""
    if cutoff < 1:
        raise ConfigurationError(f"cutoff must be >= 1, got {cutoff}")
    seen = []
    for rp in ranked:
        pid = rp.span.passage_id
        if pid not in seen:
            seen.append(pid)
            if len(seen) == cutoff:
                break
    return seen


def save_index(index: PhraseIndex, path) -> None:
    fingerprint = bytes.fromhex(index.fingerprint)
    if len(fingerprint) != 32:
        raise ConfigurationError("index fingerprint must be a sha256 hex digest")
    parts = [_HEADER.pack(_MAGIC, _VERSION, index.dim, len(index.spans), fingerprint)]
    matrix = np.ascontiguousarray(index.matrix, dtype="<f4")
    for i, span in enumerate(index.spans):
        pid = span.passage_id.encode("utf-8")
        parts.append(struct.pack("<I", len(pid)))
        parts.append(pid)
        parts.append(struct.pack("<II", span.start_token, span.end_token))
        parts.append(matrix[i].tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_index(path, corpus: Corpus | None = None) -> PhraseIndex:
    """Read an index file; verify the fingerprint when a corpus is supplied."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise IndexFormatError(f"truncated index file: {path}")
    magic, version, dim, count, fingerprint = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise IndexFormatError(f"not a phrase index file: {path}")
    if version != _VERSION:
        raise IndexFormatError(f"unsupported index version {version}")
    fingerprint_hex = fingerprint.hex()
    if corpus is not None and corpus.fingerprint != fingerprint_hex:
        raise IndexFormatError(
            "index fingerprint does not match the corpus; rebuild the index")

    spans: list[PhraseSpan] = []
    rows = np.empty((count, 2 * dim), dtype=np.float32)
    off = _HEADER.size
    row_bytes = 2 * dim * 4
    try:
        for i in range(count):
            (pid_len,) = struct.unpack_from("<I", raw, off)
            off += 4
            pid = raw[off:off + pid_len].decode("utf-8")
            if len(raw[off:off + pid_len]) != pid_len:
                raise IndexFormatError(f"truncated index file: {path}")
            off += pid_len
            start, end = struct.unpack_from("<II", raw, off)
            off += 8
            vec = raw[off:off + row_bytes]
            if len(vec) != row_bytes:
                raise IndexFormatError(f"truncated index file: {path}")
            rows[i] = np.frombuffer(vec, dtype="<f4")
            off += row_bytes
            spans.append(PhraseSpan(pid, start, end, surface=""))
    except struct.error as exc:
        raise IndexFormatError(f"truncated index file: {path}") from exc
    if off != len(raw):
        raise IndexFormatError(f"trailing bytes in index file: {path}")

    if corpus is not None:
        by_id = corpus.by_id()
        spans = [
            PhraseSpan(s.passage_id, s.start_token, s.end_token,
                       by_id[s.passage_id].slice_bytes(s.start_token, s.end_token))
            for s in spans
        ]
    return PhraseIndex(spans, rows, dim, fingerprint_hex)
