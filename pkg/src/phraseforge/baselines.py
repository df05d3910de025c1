"""Two-stage retriever-reader pipeline used for comparison runs.

The retriever is either Okapi BM25 over the corpus or a dense scorer that
represents each passage as the mean of its indexed phrase vectors. The reader
re-enumerates spans inside the retrieved passages and scores them with the
same dual-vector inner product as the single-stage engine, so any quality gap
between pipeline and single-stage comes from the retrieval restriction, not
from a different reader. Retrieval and reading are sequential by definition;
the answer is always drawn from the retrieved passages.
"""

from __future__ import annotations

import math
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, ConvContext, enumerate_phrase_spans
from .encoder import ProjectionHead, QueryEmbedding, encode_phrase
from .errors import ConfigurationError, NotFoundError
from .index import PhraseIndex, score

DEFAULT_K1 = 0.9
DEFAULT_B = 0.4
DEFAULT_TOPK_PASSAGES = 5


@dataclass
class Bm25Index:
    postings: dict[str, dict[str, int]]  # term -> {passage_id: term frequency}
    doc_len: dict[str, int]
    avg_len: float
    n_docs: int
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B
    passage_order: list[str] = field(default_factory=list)

    @classmethod
    def build(cls, corpus: Corpus, k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> "Bm25Index":
        if len(corpus) == 0:
            raise ConfigurationError("cannot build BM25 over an empty corpus")
        postings: dict[str, dict[str, int]] = {}
        doc_len = {}
        for passage in corpus.passages:
            tokens = passage.token_strings()
            doc_len[passage.passage_id] = len(tokens)
            for term, tf in Counter(tokens).items():
                postings.setdefault(term, {})[passage.passage_id] = tf
        total = sum(doc_len.values())
        if total == 0:
            raise ConfigurationError("BM25 corpus has no tokens")
        return cls(postings=postings, doc_len=doc_len,
                   avg_len=total / len(corpus), n_docs=len(corpus), k1=k1, b=b,
                   passage_order=[p.passage_id for p in corpus.passages])

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, {}))
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))


def bm25_score(query_tokens: list[str], passage_id: str, index: Bm25Index) -> float:
    """Okapi score of one passage; absent terms contribute 0."""
    if passage_id not in index.doc_len:
        raise NotFoundError(f"passage not in BM25 index: {passage_id}")
    length_norm = index.k1 * (1.0 - index.b
                              + index.b * index.doc_len[passage_id] / index.avg_len)
    total = 0.0
    for term in query_tokens:
        tf = index.postings.get(term, {}).get(passage_id, 0)
        if tf == 0:
            continue
        total += index.idf(term) * (tf * (index.k1 + 1.0)) / (tf + length_norm)
    return total


def _bm25_rank(ctx_text: str, index: Bm25Index, k: int) -> list[str]:
    query = ctx_text.split()
    # Accumulate over postings so passages without any query term stay at 0.
    acc: dict[str, float] = {pid: 0.0 for pid in index.passage_order}
    for term in query:
        posting = index.postings.get(term)
        if not posting:
            continue
        idf = index.idf(term)
        for pid, tf in posting.items():
            norm = index.k1 * (1.0 - index.b + index.b * index.doc_len[pid] / index.avg_len)
            acc[pid] += idf * (tf * (index.k1 + 1.0)) / (tf + norm)
    ranked = sorted(acc.items(), key=lambda kv: (-kv[1], kv[0]))
    return [pid for pid, _ in ranked[:k]]


@dataclass
class DensePassageRetriever:
    """Scores passages by the mean phrase vector of each passage."""

    passage_ids: list[str]
    matrix: np.ndarray  # (n_passages, 2*dim) float64, mean start ; mean end

    @classmethod
    def from_phrase_index(cls, index: PhraseIndex) -> "DensePassageRetriever":
        groups: dict[str, list[int]] = {}
        for i, span in enumerate(index.spans):
            groups.setdefault(span.passage_id, []).append(i)
        pids = sorted(groups)
        matrix = np.empty((len(pids), index.matrix.shape[1]))
        for row, pid in enumerate(pids):
            matrix[row] = index.matrix[groups[pid]].astype(np.float64).mean(axis=0)
        return cls(pids, matrix)

    def rank(self, q: QueryEmbedding, k: int) -> list[str]:
        scores = self.matrix @ q.concat().astype(np.float64)
        order = sorted(range(len(self.passage_ids)),
                       key=lambda i: (-scores[i], self.passage_ids[i]))
        return [self.passage_ids[i] for i in order[:k]]


def retrieve_passages(ctx: ConvContext, retriever, k: int = DEFAULT_TOPK_PASSAGES,
                      query: QueryEmbedding | None = None) -> list[str]:
    """Top-k passage ids under the selected retriever; ties break by id."""
    if k < 1:
        raise ConfigurationError(f"K must be >= 1, got {k}")
    if isinstance(retriever, Bm25Index):
        return _bm25_rank(ctx.serialized_text, retriever, k)
    if isinstance(retriever, DensePassageRetriever):
        if query is None:
            raise ConfigurationError("dense retrieval needs the encoded context")
        return retriever.rank(query, k)
    raise ConfigurationError(f"unknown retriever type: {type(retriever).__name__}")


@dataclass(frozen=True)
class PipelineAnswer:
    answer: str
    source_passage_id: str
    retriever_rank_of_source: int
    retrieve_ms: float
    read_ms: float


def read_answer(ctx: ConvContext, passages: list[str], corpus: Corpus,
                head: ProjectionHead, provider, query: QueryEmbedding,
                max_phrase_len: int) -> PipelineAnswer:
    """Extractive reader: best span among the retrieved passages only.

    Spans are embedded at read time (the reader stage does its own encoding
    work per question, as in any two-stage pipeline), scored with the same
    function the single-stage engine uses, ties resolved by retrieval rank
    then span order.
    """
    if not passages:
        raise ConfigurationError("reader needs at least one retrieved passage")
    by_id = corpus.by_id()
    best = None
    best_score = -math.inf
    for rank, pid in enumerate(passages, start=1):
        passage = by_id.get(pid)
        if passage is None:
            raise NotFoundError(f"retrieved passage not in corpus: {pid}")
        for span in enumerate_phrase_spans(passage, max_phrase_len):
            emb = encode_phrase(span, passage, head, provider)
            s = score(query, emb)
            if s > best_score:
                best_score = s
                best = (span, rank)
    if best is None:  # every retrieved passage was empty
        return PipelineAnswer("", passages[0], 1, 0.0, 0.0)
    span, rank = best
    return PipelineAnswer(answer=span.surface, source_passage_id=span.passage_id,
                          retriever_rank_of_source=rank, retrieve_ms=0.0, read_ms=0.0)


def pipeline_answer(ctx: ConvContext, retriever, corpus: Corpus,
                    head: ProjectionHead, provider, query: QueryEmbedding,
                    k: int = DEFAULT_TOPK_PASSAGES,
                    max_phrase_len: int = 20) -> PipelineAnswer:
    """Timed retrieve-then-read; the stages cannot overlap."""
    t0 = time.perf_counter()
    passages = retrieve_passages(ctx, retriever, k, query=query)
    t1 = time.perf_counter()
    answer = read_answer(ctx, passages, corpus, head, provider, query, max_phrase_len)
    t2 = time.perf_counter()
    return PipelineAnswer(answer=answer.answer,
                          source_passage_id=answer.source_passage_id,
                          retriever_rank_of_source=answer.retriever_rank_of_source,
                          retrieve_ms=(t1 - t0) * 1e3, read_ms=(t2 - t1) * 1e3)
