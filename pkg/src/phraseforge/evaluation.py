"""Answer metrics, retrieval metrics, and the wall-clock latency harness."""

from __future__ import annotations

import string
import time
from dataclasses import dataclass, field

from .errors import ConfigurationError

_PUNCT = set(string.punctuation)
_ARTICLES = {"a", "an", "the"}

DEFAULT_CUTOFF = 10


def normalize_answer(s: str) -> str:
    """Lowercase, strip punctuation, drop article tokens, collapse whitespace.

    Idempotent: applying it twice is a no-op, which the metric invariants rely
    on (punctuation is removed before article matching so that tokens like
    "the." reduce all the way in one pass).
    """
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    tokens = [t for t in s.split() if t not in _ARTICLES]
    return " ".join(tokens)


def f1_score(prediction: str, gold: str) -> float:
    """Token-multiset F1 over normalized strings."""
    pred_tokens = normalize_answer(prediction).split()
    gold_tokens = normalize_answer(gold).split()
    if not pred_tokens or not gold_tokens:
        return 1.0 if pred_tokens == gold_tokens else 0.0
    common = 0
    remaining = {}
    for t in gold_tokens:
        remaining[t] = remaining.get(t, 0) + 1
    for t in pred_tokens:
        if remaining.get(t, 0) > 0:
            remaining[t] -= 1
            common += 1
    if common == 0:
        return 0.0
    precision = common / len(pred_tokens)
    recall = common / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def exact_match(prediction: str, gold: str) -> int:
    return int(normalize_answer(prediction) == normalize_answer(gold))


@dataclass
class EvalReport:
    f1: float
    em: float
    top_k_accuracy: dict[int, float]
    mrr_at_10: float
    precision_at_10: float
    n_questions: int
    n_missing_gold: int = 0

    def as_record(self) -> dict:
        return {
            "f1": self.f1, "em": self.em,
            "top_k_accuracy": {str(k): v for k, v in sorted(self.top_k_accuracy.items())},
            "mrr": self.mrr_at_10, "precision": self.precision_at_10,
            "n_questions": self.n_questions, "n_missing_gold": self.n_missing_gold,
        }


def retrieval_metrics(rankings: list[list[str]], golds: list[str | None],
                      cutoff: int = DEFAULT_CUTOFF,
                      ks: tuple[int, ...] = (1, 5, 10)):
    """Top-k accuracy, MRR, and single-gold precision within a cutoff.

    Questions without a gold passage id are excluded from the averages and
    reported as a count. MRR uses 1/rank when the gold appears within the
    cutoff, else 0; per-question precision is hits-in-cutoff divided by the
    cutoff (at most 1 hit with a single gold).
    """
    if cutoff < 1:
        raise ConfigurationError(f"cutoff must be >= 1, got {cutoff}")
    if len(rankings) != len(golds):
        raise ConfigurationError("rankings and golds must have equal length")
    kept = [(r, g) for r, g in zip(rankings, golds) if g is not None]
    missing = len(golds) - len(kept)
    if not kept:
        return {k: 0.0 for k in ks}, 0.0, 0.0, missing
    top_k = {k: 0 for k in ks}
    mrr = 0.0
    precision = 0.0
    for ranking, gold in kept:
        window = ranking[:cutoff]
        rank = window.index(gold) + 1 if gold in window else 0
        for k in ks:
            if 0 < rank <= k:
                top_k[k] += 1
        if rank:
            mrr += 1.0 / rank
            precision += 1.0 / cutoff
    n = len(kept)
    return ({k: v / n for k, v in top_k.items()}, mrr / n, precision / n, missing)


def evaluate_answers(predictions: list[str], golds: list[str]) -> tuple[float, float]:
    """Mean F1 and mean EM over aligned prediction/gold pairs."""
    if len(predictions) != len(golds):
        raise ConfigurationError("predictions and golds must have equal length")
    if not predictions:
        return 0.0, 0.0
    f1 = sum(f1_score(p, g) for p, g in zip(predictions, golds)) / len(predictions)
    em = sum(exact_match(p, g) for p, g in zip(predictions, golds)) / len(predictions)
    return f1, em


def build_eval_report(predictions, golds, rankings, gold_passages,
                      cutoff: int = DEFAULT_CUTOFF) -> EvalReport:
    f1, em = evaluate_answers(predictions, golds)
    top_k, mrr, precision, missing = retrieval_metrics(
        rankings, gold_passages, cutoff=cutoff, ks=(1, 5, cutoff))
    return EvalReport(f1=f1, em=em, top_k_accuracy=top_k, mrr_at_10=mrr,
                      precision_at_10=precision, n_questions=len(predictions),
                      n_missing_gold=missing)


@dataclass
class SystemLatency:
    name: str
    relative_time: float
    questions_per_sec: float
    seconds_per_question: float
    failed: bool = False
    error: str = ""


@dataclass
class LatencyReport:
    systems: list[SystemLatency]
    fastest: str
    repetitions: int
    warmup: int
    n_questions: int

    def as_record(self) -> dict:
        return {
            "fastest": self.fastest,
            "repetitions": self.repetitions,
            "warmup": self.warmup,
            "n_questions": self.n_questions,
            "systems": [vars(s).copy() for s in self.systems],
        }

    def as_table(self) -> str:
        lines = ["system\trelative_time\tquestions_per_sec"]
        for s in self.systems:
            if s.failed:
                lines.append(f"{s.name}\tFAILED\tFAILED")
            else:
                lines.append(f"{s.name}\t{s.relative_time:.2f}\t{s.questions_per_sec:.2f}")
        return "\n".join(lines)


def bench_latency(systems: dict[str, callable], questions: list,
                  warmup: int = 2, repetitions: int = 5,
                  clock=time.perf_counter) -> LatencyReport:
    """Median end-to-end per-question time for each system.

    Each repetition answers every question sequentially (both stages of a
    pipeline run inside its callable, so their cost is measured together);
    the per-question time is the repetition total divided by the question
    count, and the median over repetitions is reported. The fastest system
    defines relative time 1.00.
    """
    if not systems:
        raise ConfigurationError("bench_latency needs at least one system")
    if len(questions) < 10:
        raise ConfigurationError(f"bench_latency needs >= 10 questions, got {len(questions)}")
    if repetitions < 1 or warmup < 0:
        raise ConfigurationError("repetitions must be >= 1 and warmup >= 0")

    results: dict[str, SystemLatency] = {}
    for name, answer in systems.items():
        try:
            for _ in range(warmup):
                for q in questions:
                    answer(q)
            per_q_times = []
            for _ in range(repetitions):
                t0 = clock()
                for q in questions:
                    answer(q)
                per_q_times.append((clock() - t0) / len(questions))
            per_q_times.sort()
            mid = len(per_q_times) // 2
            if len(per_q_times) % 2:
                median = per_q_times[mid]
            else:
                median = 0.5 * (per_q_times[mid - 1] + per_q_times[mid])
            results[name] = SystemLatency(
                name=name, relative_time=0.0,
                questions_per_sec=1.0 / median if median > 0 else float("inf"),
                seconds_per_question=median)
        except Exception as exc:  # a failing system must not sink the others
            results[name] = SystemLatency(name=name, relative_time=0.0,
                                          questions_per_sec=0.0,
                                          seconds_per_question=float("inf"),
                                          failed=True, error=str(exc))

    ok = [s for s in results.values() if not s.failed]
    if not ok:
        raise ConfigurationError("every benchmarked system failed")
    best = min(s.seconds_per_question for s in ok)
    fastest = min(ok, key=lambda s: (s.seconds_per_question, s.name)).name
    for s in ok:
        s.relative_time = s.seconds_per_question / best if best > 0 else 1.0
    return LatencyReport(systems=list(results.values()), fastest=fastest,
                         repetitions=repetitions, warmup=warmup,
                         n_questions=len(questions))
