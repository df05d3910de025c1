"""Joint contrastive training of the projection head.

Two losses share one forward pass:

* phrase loss: softmax cross-entropy of each context against its positive
  phrase, with the other in-batch positives plus a ring buffer of frozen
  phrase embeddings from the preceding batches as negatives;
* turn loss: softmax cross-entropy aligning each context with its previous
  turn's context against the other in-batch contexts, both sides encoded by
  the query-side matrices.

The total is ``lambda1 * phrase_loss + lambda2 * turn_loss``; gradients with
respect to the four head matrices are analytic (softmax cross-entropy
composed with bilinear scores) and are verified against central finite
differences in the test suite. Optimization is plain gradient descent with a
fixed learning rate, deterministic given the seed.

All softmax denominators use the max-shift log-sum-exp identity.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .corpus import (Corpus, ConversationTurn, ConvContext, Passage, PhraseSpan,
                     build_conv_context, group_by_conversation)
from .encoder import HashedFeaturizer, ProjectionHead, compose_span_text
from .errors import ConfigurationError, NumericError, TrainingDiverged, ValidationError
from .evaluation import normalize_answer
from .index import PhraseIndex

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class TrainingExample:
    ctx: ConvContext
    positive_span: PhraseSpan
    positive_text: str  # span surface composed with its passage context window
    prev_ctx: ConvContext | None = None


@dataclass
class Batch:
    examples: list[TrainingExample]
    epoch: int = 0
    step: int = 0

    def __post_init__(self):
        if len(self.examples) < 2:
            raise ConfigurationError(
                f"batch needs >= 2 examples for in-batch negatives, got {len(self.examples)}")

    def __len__(self):
        return len(self.examples)


class PreBatchQueue:
    """Ring buffer of projected phrase embeddings from the preceding batches.

    Entries are frozen snapshots: they contribute score terms but no gradient
    flows through them.
    """

    def __init__(self, capacity_batches: int):
        if capacity_batches < 0:
            raise ConfigurationError(f"queue capacity must be >= 0, got {capacity_batches}")
        self.capacity_batches = capacity_batches
        self._chunks: deque[np.ndarray] = deque()

    def push_batch(self, projected: np.ndarray) -> None:
        if self.capacity_batches == 0:
            return
        self._chunks.append(np.array(projected, dtype=np.float64, copy=True))
        while len(self._chunks) > self.capacity_batches:
            self._chunks.popleft()

    def matrix(self, width: int) -> np.ndarray:
        if not self._chunks:
            return np.zeros((0, width))
        return np.vstack(list(self._chunks))

    def __len__(self):
        return sum(chunk.shape[0] for chunk in self._chunks)


@dataclass(frozen=True)
class LossReport:
    l_neg: float
    l_turn: float
    l_total: float
    grad_norm: float
    step: int = 0

    def as_record(self) -> dict:
        return {"step": self.step, "l_neg": self.l_neg, "l_turn": self.l_turn,
                "l_total": self.l_total, "grad_norm": self.grad_norm}


@dataclass
class HeadGradient:
    w_q_start: np.ndarray
    w_q_end: np.ndarray
    w_p_start: np.ndarray
    w_p_end: np.ndarray

    def frobenius_norm(self) -> float:
        total = 0.0
        for m in (self.w_q_start, self.w_q_end, self.w_p_start, self.w_p_end):
            total += float(np.sum(m * m))
        return float(np.sqrt(total))


@dataclass
class _EmbeddedBatch:
    """Base (pre-projection) vectors for one batch."""

    s_q: np.ndarray  # (B, d) context start
    e_q: np.ndarray  # (B, d) context end
    s_p: np.ndarray  # (B, d) positive phrase start
    e_p: np.ndarray  # (B, d) positive phrase end
    eligible: np.ndarray  # (B,) bool, has a previous-turn context
    s_prev: np.ndarray  # (B, d), zero rows where ineligible
    e_prev: np.ndarray
    ids: list[str] = field(default_factory=list)


def _embed_batch(batch: Batch, provider) -> _EmbeddedBatch:
    texts = []
    for ex in batch.examples:
        texts.append(ex.ctx.serialized_text)
        texts.append(ex.positive_text)
        texts.append(ex.prev_ctx.serialized_text if ex.prev_ctx is not None else "")
    embs = provider.encode_batch(texts)
    d = embs[0].dim
    b = len(batch.examples)
    out = _EmbeddedBatch(
        s_q=np.empty((b, d)), e_q=np.empty((b, d)),
        s_p=np.empty((b, d)), e_p=np.empty((b, d)),
        eligible=np.zeros(b, dtype=bool),
        s_prev=np.zeros((b, d)), e_prev=np.zeros((b, d)),
        ids=[f"{ex.ctx.conversation_id}#{ex.ctx.turn_index}" for ex in batch.examples],
    )
    for i, ex in enumerate(batch.examples):
        out.s_q[i], out.e_q[i] = embs[3 * i].start_vec, embs[3 * i].end_vec
        out.s_p[i], out.e_p[i] = embs[3 * i + 1].start_vec, embs[3 * i + 1].end_vec
        if ex.prev_ctx is not None:
            out.eligible[i] = True
            out.s_prev[i], out.e_prev[i] = embs[3 * i + 2].start_vec, embs[3 * i + 2].end_vec
    return out


def _logsumexp_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def _forward_backward(eb: _EmbeddedBatch, queue_matrix: np.ndarray,
                      head: ProjectionHead, lam1: float, lam2: float,
                      want_grad: bool):
    """Shared forward/backward over base arrays.

    Returns (l_neg, l_turn, n_eligible, grads, projected_phrases) where
    ``projected_phrases`` is the (B, 2d) in-batch positive matrix, the
    snapshot a caller pushes into the pre-batch queue after the step.
    """
    b, d = eb.s_q.shape
    vs = eb.s_q @ head.w_q_start.T
    ve = eb.e_q @ head.w_q_end.T
    us = eb.s_p @ head.w_p_start.T
    ue = eb.e_p @ head.w_p_end.T
    projected_phrases = np.hstack([us, ue])

    m = queue_matrix.shape[0]
    z_in = vs @ us.T + ve @ ue.T  # z_in[i, j] = f(ctx_i, phrase_j)
    if m:
        z_q = np.hstack([vs, ve]) @ queue_matrix.T
        z = np.hstack([z_in, z_q])
    else:
        z = z_in
    if not np.all(np.isfinite(z)):
        bad = int(np.argwhere(~np.isfinite(z))[0][0])
        raise NumericError(f"non-finite phrase score for example {eb.ids[bad]}")
    l_neg = float(np.mean(_logsumexp_rows(z) - np.diagonal(z_in)))

    elig = np.flatnonzero(eb.eligible)
    n_eligible = int(elig.size)
    l_turn = 0.0
    z_t = None
    ps = pe = None
    if n_eligible:
        ps = eb.s_prev[elig] @ head.w_q_start.T
        pe = eb.e_prev[elig] @ head.w_q_end.T
        z_t = ps @ vs.T + pe @ ve.T  # z_t[r, j] = f(ctx_j, prev_ctx of elig[r])
        if not np.all(np.isfinite(z_t)):
            bad = int(elig[np.argwhere(~np.isfinite(z_t))[0][0]])
            raise NumericError(f"non-finite turn score for example {eb.ids[bad]}")
        l_turn = float(np.mean(_logsumexp_rows(z_t) - z_t[np.arange(n_eligible), elig]))

    if not want_grad:
        return l_neg, l_turn, n_eligible, None, projected_phrases

    grads = HeadGradient(np.zeros((d, d)), np.zeros((d, d)), np.zeros((d, d)),
                         np.zeros((d, d)))
    if lam1 != 0.0:
        g = _softmax_rows(z)
        g[np.arange(b), np.arange(b)] -= 1.0
        g *= lam1 / b
        g_in = g[:, :b]
        # u_all[j] is the projected start (resp. end) half of candidate j.
        u_all_s = np.vstack([us, queue_matrix[:, :d]]) if m else us
        u_all_e = np.vstack([ue, queue_matrix[:, d:]]) if m else ue
        grads.w_q_start += (g @ u_all_s).T @ eb.s_q
        grads.w_q_end += (g @ u_all_e).T @ eb.e_q
        grads.w_p_start += vs.T @ g_in @ eb.s_p
        grads.w_p_end += ve.T @ g_in @ eb.e_p

    if lam2 != 0.0 and n_eligible:
        gt = _softmax_rows(z_t)
        gt[np.arange(n_eligible), elig] -= 1.0
        gt *= lam2 / n_eligible
        sp = eb.s_prev[elig]
        ep = eb.e_prev[elig]
        # Both sides of the turn score go through the query matrices, so each
        # contributes a symmetrized outer-product term.
        grads.w_q_start += head.w_q_start @ (sp.T @ gt @ eb.s_q + eb.s_q.T @ gt.T @ sp)
        grads.w_q_end += head.w_q_end @ (ep.T @ gt @ eb.e_q + eb.e_q.T @ gt.T @ ep)

    return l_neg, l_turn, n_eligible, grads, projected_phrases


def _queue_matrix(queue: PreBatchQueue | None, dim: int) -> np.ndarray:
    if queue is None:
        return np.zeros((0, 2 * dim))
    return queue.matrix(2 * dim)


def loss_neg(batch: Batch, queue: PreBatchQueue | None, head: ProjectionHead,
             provider) -> float:
    eb = _embed_batch(batch, provider)
    l_neg, _, _, _, _ = _forward_backward(eb, _queue_matrix(queue, head.dim), head,
                                          lam1=0.0, lam2=0.0, want_grad=False)
    return l_neg


def loss_turn(batch: Batch, head: ProjectionHead, provider, with_flag: bool = False):
    """Mean turn loss over eligible examples; 0 when none are eligible.

    ``with_flag=True`` also returns the eligible-example count so callers can
    tell a genuine zero from an empty mean.
    """
    eb = _embed_batch(batch, provider)
    _, l_turn, n_eligible, _, _ = _forward_backward(
        eb, np.zeros((0, 2 * head.dim)), head, lam1=0.0, lam2=0.0, want_grad=False)
    if with_flag:
        return l_turn, n_eligible
    return l_turn


def loss_total(batch: Batch, queue: PreBatchQueue | None, head: ProjectionHead,
               lam1: float = 4.0, lam2: float = 1.0, provider=None,
               step: int = 0) -> LossReport:
    if lam1 < 0 or lam2 < 0:
        raise ConfigurationError("loss weights must be non-negative")
    eb = _embed_batch(batch, provider)
    l_neg, l_turn, _, grads, _ = _forward_backward(
        eb, _queue_matrix(queue, head.dim), head, lam1, lam2, want_grad=True)
    return LossReport(l_neg=l_neg, l_turn=l_turn,
                      l_total=lam1 * l_neg + lam2 * l_turn,
                      grad_norm=grads.frobenius_norm(), step=step)


def grad_head(batch: Batch, queue: PreBatchQueue | None, head: ProjectionHead,
              lam1: float = 4.0, lam2: float = 1.0, provider=None) -> HeadGradient:
    if lam1 < 0 or lam2 < 0:
        raise ConfigurationError("loss weights must be non-negative")
    eb = _embed_batch(batch, provider)
    _, _, _, grads, _ = _forward_backward(
        eb, _queue_matrix(queue, head.dim), head, lam1, lam2, want_grad=True)
    for name, m in grads.__dict__.items():
        if not np.all(np.isfinite(m)):
            raise NumericError(f"non-finite gradient in {name}")
    return grads


def find_positive_span(passage: Passage, gold_answer: str,
                       max_phrase_len: int) -> PhraseSpan | None:
    """Earliest span whose normalized surface equals the normalized answer."""
    target = normalize_answer(gold_answer)
    if not target:
        return None
    n = len(passage.tokens)
    for s in range(n):
        for e in range(s, min(s + max_phrase_len, n)):
            if normalize_answer(passage.slice_bytes(s, e)) == target:
                return PhraseSpan(passage.passage_id, s, e, passage.slice_bytes(s, e))
    return None


def make_training_examples(turns: list[ConversationTurn], corpus: Corpus,
                           token_budget: int, max_phrase_len: int,
                           ) -> tuple[list[TrainingExample], int]:
    """Build one example per turn whose gold answer is locatable in its gold
    passage; returns (examples, skipped_count)."""
    by_id = corpus.by_id()
    examples: list[TrainingExample] = []
    skipped = 0
    for conv_id, conv_turns in group_by_conversation(turns).items():
        for turn in conv_turns:
            passage = by_id.get(turn.gold_passage_id or "")
            if passage is None:
                skipped += 1
                continue
            span = find_positive_span(passage, turn.gold_answer, max_phrase_len)
            if span is None:
                skipped += 1
                continue
            ctx = build_conv_context(conv_turns, turn.turn_index, token_budget)
            prev_ctx = (build_conv_context(conv_turns, turn.turn_index - 1, token_budget)
                        if turn.turn_index > 1 else None)
            examples.append(TrainingExample(ctx=ctx, positive_span=span,
                                            positive_text=compose_span_text(span, passage),
                                            prev_ctx=prev_ctx))
    return examples, skipped


def _precompute(examples: list[TrainingExample], provider) -> _EmbeddedBatch:
    batch = Batch(examples) if len(examples) >= 2 else None
    if batch is None:
        raise ConfigurationError("training needs at least 2 examples")
    return _embed_batch(batch, provider)


def _slice_embedded(full: _EmbeddedBatch, idx: np.ndarray) -> _EmbeddedBatch:
    return _EmbeddedBatch(
        s_q=full.s_q[idx], e_q=full.e_q[idx], s_p=full.s_p[idx], e_p=full.e_p[idx],
        eligible=full.eligible[idx], s_prev=full.s_prev[idx], e_prev=full.e_prev[idx],
        ids=[full.ids[i] for i in idx],
    )


@dataclass
class TrainResult:
    head: ProjectionHead
    trajectory: list[LossReport]
    skipped_turns: int = 0


def train(turns: list[ConversationTurn], corpus: Corpus, config,
          provider=None) -> TrainResult:
    """Gradient-descent training of all four head matrices.

    ``config`` carries batch_size, prebatch_batches, epochs, learning_rate,
    lambda1, lambda2, seed, dim, max_phrase_len, token_budget. Shuffling is
    seeded; trailing partial batches smaller than 2 are dropped.
    """
    provider = provider or HashedFeaturizer(config.dim, config.seed)
    examples, skipped = make_training_examples(
        turns, corpus, config.token_budget, config.max_phrase_len)
    if len(examples) < 2:
        raise ValidationError(
            f"found {len(examples)} trainable turns (skipped {skipped}); need >= 2")
    if config.batch_size < 2:
        raise ConfigurationError("batch_size must be >= 2")

    full = _precompute(examples, provider)
    head = ProjectionHead.identity(config.dim)
    queue = PreBatchQueue(config.prebatch_batches)
    rng = np.random.default_rng(config.seed)
    trajectory: list[LossReport] = []
    step = 0
    lr = config.learning_rate
    for _epoch in range(config.epochs):
        perm = rng.permutation(len(examples))
        for lo in range(0, len(examples), config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            if idx.size < 2:
                continue
            eb = _slice_embedded(full, idx)
            qm = queue.matrix(2 * config.dim)
            l_neg, l_turn, _, grads, projected = _forward_backward(
                eb, qm, head, config.lambda1, config.lambda2, want_grad=True)
            step += 1
            report = LossReport(
                l_neg=l_neg, l_turn=l_turn,
                l_total=config.lambda1 * l_neg + config.lambda2 * l_turn,
                grad_norm=grads.frobenius_norm(), step=step)
            trajectory.append(report)
            if not np.isfinite(report.l_total) or report.l_total > DIVERGENCE_LIMIT:
                raise TrainingDiverged(
                    f"loss diverged at step {step}: {report.l_total}", trajectory)
            head.w_q_start -= lr * grads.w_q_start
            head.w_q_end -= lr * grads.w_q_end
            head.w_p_start -= lr * grads.w_p_start
            head.w_p_end -= lr * grads.w_p_end
            queue.push_batch(projected)
    return TrainResult(head=head, trajectory=trajectory, skipped_turns=skipped)


def finetune_query(index: PhraseIndex, turns: list[ConversationTurn], corpus: Corpus,
                   head: ProjectionHead, config, provider=None) -> TrainResult:
    """Query-side fine-tuning against a frozen index.

    Only the query matrices move. For every example the candidate list is its
    gold span's stored index row (the positive) followed by the current top-k
    retrieved rows; all candidate vectors come from the index and stay frozen,
    so phrase matrices and index bytes are untouched by construction.
    """
    provider = provider or HashedFeaturizer(config.dim, config.seed)
    if index.dim != head.dim:
        raise ConfigurationError(f"index dim {index.dim} != head dim {head.dim}")
    examples, skipped = make_training_examples(
        turns, corpus, config.token_budget, config.max_phrase_len)
    rows = []
    kept: list[TrainingExample] = []
    for ex in examples:
        row = index.lookup(ex.positive_span.key())
        if row is None:
            skipped += 1
            continue
        kept.append(ex)
        rows.append(row)
    if len(kept) < 2:
        raise ValidationError(
            f"found {len(kept)} finetunable turns (skipped {skipped}); need >= 2")

    full = _precompute(kept, provider)
    positive_rows = np.asarray(rows)
    new_head = head.copy()
    d = config.dim
    rng = np.random.default_rng(config.seed)
    trajectory: list[LossReport] = []
    step = 0
    lr = config.learning_rate
    k = config.finetune_topk
    for _epoch in range(config.finetune_epochs):
        perm = rng.permutation(len(kept))
        for lo in range(0, len(kept), config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            if idx.size < 1:
                continue
            b = idx.size
            s_q = full.s_q[idx]
            e_q = full.e_q[idx]
            vs = s_q @ new_head.w_q_start.T
            ve = e_q @ new_head.w_q_end.T
            queries = np.hstack([vs, ve])
            g_qs = np.zeros((d, d))
            g_qe = np.zeros((d, d))
            total = 0.0
            for r in range(b):
                pos_row = int(positive_rows[idx[r]])
                order, _ = kernels.topk_scan(index.matrix, queries[r], k)
                cand_rows = [pos_row] + [int(j) for j in order if int(j) != pos_row]
                cand = index.matrix[cand_rows].astype(np.float64)
                z = cand @ queries[r]
                if not np.all(np.isfinite(z)):
                    raise NumericError(f"non-finite score for example {full.ids[idx[r]]}")
                m = z.max()
                lse = m + np.log(np.exp(z - m).sum())
                total += float(lse - z[0])
                g = np.exp(z - lse)
                g[0] -= 1.0
                g_qs += np.outer(cand[:, :d].T @ g, s_q[r])
                g_qe += np.outer(cand[:, d:].T @ g, e_q[r])
            step += 1
            l_neg = total / b
            g_qs /= b
            g_qe /= b
            norm = float(np.sqrt(np.sum(g_qs * g_qs) + np.sum(g_qe * g_qe)))
            report = LossReport(l_neg=l_neg, l_turn=0.0, l_total=l_neg,
                                grad_norm=norm, step=step)
            trajectory.append(report)
            if not np.isfinite(l_neg) or l_neg > DIVERGENCE_LIMIT:
                raise TrainingDiverged(
                    f"query fine-tuning diverged at step {step}: {l_neg}", trajectory)
            new_head.w_q_start -= lr * g_qs
            new_head.w_q_end -= lr * g_qe
    return TrainResult(head=new_head, trajectory=trajectory, skipped_turns=skipped)


def turn_alignment_rate(examples: list[TrainingExample], head: ProjectionHead,
                        provider, batch_size: int, seed: int) -> float:
    """Argmax-level check of the turn loss: against each eligible example's
    previous context, its own current context must outscore every
    non-consecutive in-batch context. Returns the fraction of eligible turns
    for which that holds (batching seeded, same scheme as training)."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(examples))
    wins = 0
    eligible = 0
    for lo in range(0, len(examples), batch_size):
        idx = perm[lo:lo + batch_size]
        if idx.size < 2:
            continue
        batch = [examples[i] for i in idx]
        eb = _embed_batch(Batch(batch), provider)
        vs = eb.s_q @ head.w_q_start.T
        ve = eb.e_q @ head.w_q_end.T
        ps = eb.s_prev @ head.w_q_start.T
        pe = eb.e_prev @ head.w_q_end.T
        for i, ex in enumerate(batch):
            if ex.prev_ctx is None:
                continue
            eligible += 1
            anchor = vs[i] @ ps[i] + ve[i] @ pe[i]
            ok = True
            for j, other in enumerate(batch):
                if j == i:
                    continue
                adjacent = (other.ctx.conversation_id == ex.ctx.conversation_id
                            and abs(other.ctx.turn_index - ex.ctx.turn_index) == 1)
                if adjacent:
                    continue
                rival = vs[j] @ ps[i] + ve[j] @ pe[i]
                if rival >= anchor:
                    ok = False
                    break
            wins += ok
    return wins / eligible if eligible else 0.0
