"""End-to-end wiring: answer turns with either system and collect metrics.

The single-stage engine encodes the conversational context and searches the
phrase index directly; the pipeline engines retrieve passages first and read
an answer out of them. Both share the provider and projection head, so
comparisons isolate the architecture rather than the representation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .baselines import (Bm25Index, DensePassageRetriever, pipeline_answer,
                        retrieve_passages)
from .config import RunConfig
from .corpus import Corpus, ConversationTurn, build_conv_context, group_by_conversation
from .encoder import HashedFeaturizer, ProjectionHead, encode_context
from .errors import ConfigurationError
from .evaluation import EvalReport, build_eval_report
from .index import PhraseIndex, passages_from_phrases, search_topk
from .remote import RemoteEncoder

ENDPOINT_ENV = "PHRASEFORGE_ENCODER_ENDPOINT"
SYSTEM_NAMES = ("single", "bm25", "dense")


def make_provider(config: RunConfig, endpoint: str | None = None):
    """Built-in featurizer unless an encoder endpoint is configured."""
    endpoint = endpoint if endpoint is not None else os.environ.get(ENDPOINT_ENV, "")
    if endpoint:
        return RemoteEncoder(endpoint)
    return HashedFeaturizer(config.dim, config.seed)


@dataclass
class TurnAnswer:
    turn: ConversationTurn
    answer: str
    ranked_passages: list[str]


class SingleStageSystem:
    """Answer = surface of the best-scoring phrase over the whole index."""

    name = "single"

    def __init__(self, index: PhraseIndex, head: ProjectionHead, provider,
                 k: int, cutoff: int):
        self.index = index
        self.head = head
        self.provider = provider
        self.k = k
        self.cutoff = cutoff

    def answer(self, ctx) -> TurnAnswer | None:
        query = encode_context(ctx, self.head, self.provider)
        ranked = search_topk(self.index, query, self.k)
        if not ranked:
            return None
        return TurnAnswer(turn=None, answer=ranked[0].span.surface,
                          ranked_passages=passages_from_phrases(ranked, self.cutoff))


class PipelineSystem:
    """Two-stage retrieve-then-read system over the same head/provider."""

    def __init__(self, name: str, retriever, corpus: Corpus, head: ProjectionHead,
                 provider, topk_passages: int, max_phrase_len: int):
        if name not in ("bm25", "dense"):
            raise ConfigurationError(f"unknown pipeline system: {name}")
        self.name = name
        self.retriever = retriever
        self.corpus = corpus
        self.head = head
        self.provider = provider
        self.topk_passages = topk_passages
        self.max_phrase_len = max_phrase_len

    def answer(self, ctx) -> TurnAnswer:
        query = encode_context(ctx, self.head, self.provider)
        result = pipeline_answer(ctx, self.retriever, self.corpus, self.head,
                                 self.provider, query, k=self.topk_passages,
                                 max_phrase_len=self.max_phrase_len)
        ranking = retrieve_passages(ctx, self.retriever, self.topk_passages, query=query)
        return TurnAnswer(turn=None, answer=result.answer, ranked_passages=ranking)


def build_system(name: str, corpus: Corpus, index: PhraseIndex, head: ProjectionHead,
                 provider, config: RunConfig):
    if name == "single":
        return SingleStageSystem(index, head, provider, config.k, config.cutoff)
    if name == "bm25":
        return PipelineSystem("bm25", Bm25Index.build(corpus), corpus, head, provider,
                              config.topk_passages, config.max_phrase_len)
    if name == "dense":
        retriever = DensePassageRetriever.from_phrase_index(index)
        return PipelineSystem("dense", retriever, corpus, head, provider,
                              config.topk_passages, config.max_phrase_len)
    raise ConfigurationError(f"unknown system {name!r}; choose from {SYSTEM_NAMES}")


def answer_conversations(system, turns: list[ConversationTurn], token_budget: int,
                         history: str = "gold") -> list[TurnAnswer]:
    """Answer every turn in order.

    ``history="gold"`` builds contexts from the dataset answers;
    ``history="predicted"`` feeds each turn the system's own earlier answers.
    """
    if history not in ("gold", "predicted"):
        raise ConfigurationError(f"history must be gold or predicted, got {history!r}")
    out: list[TurnAnswer] = []
    for _conv_id, conv_turns in group_by_conversation(turns).items():
        predicted: dict[int, str] = {}
        for turn in conv_turns:
            ctx = build_conv_context(
                conv_turns, turn.turn_index, token_budget,
                answers=predicted if history == "predicted" else None)
            result = system.answer(ctx)
            answer = result.answer if result else ""
            ranking = result.ranked_passages if result else []
            predicted[turn.turn_index] = answer
            out.append(TurnAnswer(turn=turn, answer=answer, ranked_passages=ranking))
    return out


def evaluate_system(system, turns: list[ConversationTurn], token_budget: int,
                    cutoff: int, history: str = "gold") -> EvalReport:
    answers = answer_conversations(system, turns, token_budget, history)
    return build_eval_report(
        predictions=[a.answer for a in answers],
        golds=[a.turn.gold_answer for a in answers],
        rankings=[a.ranked_passages for a in answers],
        gold_passages=[a.turn.gold_passage_id for a in answers],
        cutoff=cutoff)


def bench_callables(systems: dict[str, object], turns: list[ConversationTurn],
                    token_budget: int):
    """Prebuilt contexts plus per-system answer callables for the latency
    harness (context building is shared prep, not a timed stage)."""
    contexts = []
    for _conv_id, conv_turns in group_by_conversation(turns).items():
        for turn in conv_turns:
            contexts.append(build_conv_context(conv_turns, turn.turn_index, token_budget))
    callables = {name: (lambda ctx, s=system: s.answer(ctx))
                 for name, system in systems.items()}
    return contexts, callables
