"""Corpora, conversations, phrase spans, and conversational contexts.

File formats (UTF-8, one JSON object per line):

* corpus: ``{"passage_id": str, "title": str, "text": str}``
* conversations: ``{"conversation_id": str, "turn_index": int, "question": str,
  "gold_answer": str, "gold_passage_id": str|absent}``

Unknown fields are ignored. Tokenization is whitespace splitting on the raw
text; token offsets are byte offsets into the UTF-8 encoding, so slicing the
encoded text with them reproduces the token exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError, NotFoundError, ParseError, ValidationError

# Separator between items of a serialized conversational context. Chosen to
# survive whitespace tokenization as a single recognizable token.
SEP = " [SEP] "

DEFAULT_MAX_PHRASE_LEN = 20
DEFAULT_TOKEN_BUDGET = 64

_ASCII_WS = b" \t\n\r\f\v"


def tokenize_with_offsets(text: str) -> list[tuple[str, int, int]]:
    """Split on whitespace, returning (token, byte_start, byte_end) triples.

    Offsets index the UTF-8 encoding of ``text``; ``end`` is exclusive.
    """
    raw = text.encode("utf-8")
    tokens = []
    i = 0
    n = len(raw)
    while i < n:
        while i < n and raw[i] in _ASCII_WS:
            i += 1
        if i >= n:
            break
        start = i
        while i < n and raw[i] not in _ASCII_WS:
            i += 1
        tokens.append((raw[start:i].decode("utf-8"), start, i))
    return tokens


@dataclass(frozen=True)
class Passage:
    passage_id: str
    title: str
    text: str
    tokens: tuple[tuple[str, int, int], ...]

    @classmethod
    def from_text(cls, passage_id: str, title: str, text: str) -> "Passage":
        return cls(passage_id, title, text, tuple(tokenize_with_offsets(text)))

    def token_strings(self) -> list[str]:
        return [t[0] for t in self.tokens]

    def slice_bytes(self, start_token: int, end_token: int) -> str:
        """Exact text between the first byte of start_token and the last of
        end_token (inclusive token range)."""
        raw = self.text.encode("utf-8")
        return raw[self.tokens[start_token][1]:self.tokens[end_token][2]].decode("utf-8")


@dataclass(frozen=True)
class Corpus:
    passages: tuple[Passage, ...]
    fingerprint: str

    def __post_init__(self):
        ids = [p.passage_id for p in self.passages]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate passage_id: {', '.join(dupes)}")

    @classmethod
    def from_passages(cls, passages) -> "Corpus":
        """In-memory corpus; fingerprint is taken over a canonical dump."""
        passages = tuple(passages)
        canon = "\n".join(
            json.dumps({"passage_id": p.passage_id, "title": p.title, "text": p.text},
                       sort_keys=True)
            for p in passages
        )
        return cls(passages, hashlib.sha256(canon.encode("utf-8")).hexdigest())

    def get(self, passage_id: str) -> Passage:
        p = self.by_id().get(passage_id)
        if p is None:
            raise NotFoundError(f"passage not found: {passage_id}")
        return p

    def by_id(self) -> dict[str, Passage]:
        return {p.passage_id: p for p in self.passages}

    def __len__(self):
        return len(self.passages)


@dataclass(frozen=True)
class ConversationTurn:
    conversation_id: str
    turn_index: int
    question: str
    gold_answer: str
    gold_passage_id: str | None = None


@dataclass(frozen=True)
class ConvContext:
    """Serialized context for one turn: the current question followed by the
    previous question/answer pairs, most recent first."""

    conversation_id: str
    turn_index: int
    serialized_text: str
    token_budget: int


@dataclass(frozen=True)
class PhraseSpan:
    passage_id: str
    start_token: int
    end_token: int  # inclusive
    surface: str

    def key(self) -> tuple[str, int, int]:
        return (self.passage_id, self.start_token, self.end_token)


def load_corpus(path) -> Corpus:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"corpus not found: {path}")
    raw = path.read_bytes()
    passages = []
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON in corpus record: {exc.msg}", line=lineno) from exc
        if not isinstance(rec, dict):
            raise ParseError("corpus record is not an object", line=lineno)
        missing = [k for k in ("passage_id", "title", "text") if k not in rec]
        if missing:
            raise ParseError(f"corpus record missing fields: {', '.join(missing)}", line=lineno)
        passages.append(Passage.from_text(str(rec["passage_id"]), str(rec["title"]),
                                          str(rec["text"])))
    return Corpus(tuple(passages), hashlib.sha256(raw).hexdigest())


def load_conversations(path) -> list[ConversationTurn]:
    """Load turns grouped by conversation (first-appearance order), each group
    sorted by turn_index. Turn indices must be contiguous starting at 1."""
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"conversations not found: {path}")
    by_conv: dict[str, list[ConversationTurn]] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON in conversation record: {exc.msg}",
                             line=lineno) from exc
        if "question" not in rec or rec["question"] is None:
            raise ParseError("conversation record missing question", line=lineno)
        for key in ("conversation_id", "turn_index"):
            if key not in rec:
                raise ParseError(f"conversation record missing {key}", line=lineno)
        turn = ConversationTurn(
            conversation_id=str(rec["conversation_id"]),
            turn_index=int(rec["turn_index"]),
            question=str(rec["question"]),
            gold_answer=str(rec.get("gold_answer", "")),
            gold_passage_id=(str(rec["gold_passage_id"])
                             if rec.get("gold_passage_id") is not None else None),
        )
        by_conv.setdefault(turn.conversation_id, []).append(turn)

    out: list[ConversationTurn] = []
    for conv_id, turns in by_conv.items():
        turns.sort(key=lambda t: t.turn_index)
        for expected, turn in enumerate(turns, start=1):
            if turn.turn_index != expected:
                raise ValidationError(
                    f"conversation {conv_id}: gap at turn {expected}"
                    if turn.turn_index > expected
                    else f"conversation {conv_id}: duplicate turn {turn.turn_index}")
        out.extend(turns)
    return out


def enumerate_phrase_spans(passage: Passage, max_phrase_len: int) -> list[PhraseSpan]:
    """All token spans (s, e) with e - s + 1 <= max_phrase_len, ordered by (s, e)."""
    if max_phrase_len < 1:
        raise ConfigurationError(f"max_phrase_len must be >= 1, got {max_phrase_len}")
    n = len(passage.tokens)
    spans = []
    for s in range(n):
        for e in range(s, min(s + max_phrase_len, n)):
            spans.append(PhraseSpan(passage.passage_id, s, e, passage.slice_bytes(s, e)))
    return spans


def span_count(n_tokens: int, max_phrase_len: int) -> int:
    """Closed form for the number of spans enumerate_phrase_spans emits."""
    return sum(min(max_phrase_len, n_tokens - s) for s in range(n_tokens))


def _count_tokens(items: list[str]) -> int:
    # Token count of the serialized join, including the separator tokens.
    return sum(len(item.split()) for item in items) + (len(items) - 1 if items else 0)


def build_conv_context(
    turns: list[ConversationTurn],
    turn_index: int,
    token_budget: int = DEFAULT_TOKEN_BUDGET,
    conversation_id: str | None = None,
    answers: dict[int, str] | None = None,
) -> ConvContext:
    """Serialize the context for one turn.

    The current question comes first, then prior (question, answer) pairs from
    most recent to oldest, all joined with the separator. Whole pairs are
    dropped oldest-first until the whitespace token count fits the budget; the
    current question itself is never dropped.

    ``answers`` overrides the history answers by turn index (used for
    predicted-history inference); gold answers are used otherwise.
    """
    if conversation_id is not None:
        turns = [t for t in turns if t.conversation_id == conversation_id]
    by_index = {t.turn_index: t for t in turns}
    if turn_index not in by_index:
        raise NotFoundError(f"turn {turn_index} not found")
    current = by_index[turn_index]

    def answer_for(idx: int) -> str:
        if answers is not None and idx in answers:
            return answers[idx]
        return by_index[idx].gold_answer

    items = [current.question]
    used = _count_tokens(items)
    for j in range(turn_index - 1, 0, -1):
        prior = by_index.get(j)
        if prior is None:
            raise NotFoundError(f"turn {j} missing from conversation history")
        pair = [prior.question, answer_for(j)]
        added = _count_tokens(items + pair) - used
        if used + added > token_budget:
            break
        items.extend(pair)
        used += added

    return ConvContext(
        conversation_id=current.conversation_id,
        turn_index=turn_index,
        serialized_text=SEP.join(items),
        token_budget=token_budget,
    )


def group_by_conversation(turns: list[ConversationTurn]) -> dict[str, list[ConversationTurn]]:
    groups: dict[str, list[ConversationTurn]] = {}
    for t in turns:
        groups.setdefault(t.conversation_id, []).append(t)
    for ts in groups.values():
        ts.sort(key=lambda t: t.turn_index)
    return groups
