"""Synthetic conversational QA benchmark generator.

The world has 20 disjoint topics. Each topic owns 10 entities and 10
passages: 6 attribute ledgers (one fact line per entity, holding that
attribute's unique value phrase) and 4 archive passages that mention every
entity twice but hold no values. Conversations stay on one topic: the first
turn names an entity, later turns refer to it only through the history, and
roughly half of the follow-up questions paraphrase the attribute with a
synonym that never occurs in any passage. Answers are the planted value
phrases (one or two tokens), so every gold answer is a literal span of its
gold ledger passage.

Everything is driven by one seed, so regenerating with the same seed
reproduces the fixture byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

N_TOPICS = 20
ENTITIES_PER_TOPIC = 10
ATTRIBUTES = ("color", "size", "origin", "rank", "era", "mass")
SYNONYMS = {"color": "hue", "size": "girth", "origin": "roots",
            "rank": "standing", "era": "period", "mass": "heft"}
ARCHIVE_NAMES = ("alpha", "beta", "gamma", "delta")

FIRST_TURN_TEMPLATES = (
    "what {attr} is {ent} ?",
    "what is the {attr} of {ent} ?",
    "tell me the {attr} of {ent} .",
)
FOLLOWUP_TEMPLATES = (
    "and what {attr} does it have ?",
    "what about its {attr} ?",
    "and the {attr} next ?",
)
PARAPHRASE_TEMPLATES = (
    "and how {syn} is it ?",
    "what of its {syn} ?",
    "and the {syn} then ?",
)


def _entity(topic: int, m: int) -> str:
    return f"e{topic}m{m}"


def _value_tokens(topic: int, attr_idx: int, m: int, two_tokens: bool) -> list[str]:
    base = f"z{topic}a{attr_idx}m{m}"
    if two_tokens:
        return [base, f"w{topic}a{attr_idx}m{m}"]
    return [base]


def _ledger_id(topic: int, attr: str) -> str:
    return f"t{topic:02d}-{attr}"


@dataclass
class Benchmark:
    passages: list[dict]
    conversations: list[dict]
    meta: dict


def generate_benchmark(seed: int = 20240) -> Benchmark:
    rng = np.random.default_rng(seed)
    passages = []
    values: dict[tuple[int, int, int], str] = {}

    for t in range(N_TOPICS):
        for ai, attr in enumerate(ATTRIBUTES):
            facts = [f"topic{t} {attr} ledger ."]
            for m in range(ENTITIES_PER_TOPIC):
                toks = _value_tokens(t, ai, m, two_tokens=bool(rng.random() < 0.4))
                values[(t, ai, m)] = " ".join(toks)
                facts.append(f"{_entity(t, m)} holds {' '.join(toks)} .")
            passages.append({
                "passage_id": _ledger_id(t, attr),
                "title": f"topic{t} {attr} ledger",
                "text": " ".join(facts),
            })
        for name in ARCHIVE_NAMES:
            mentions = " ".join(f"{_entity(t, m)} {_entity(t, m)}"
                                for m in range(ENTITIES_PER_TOPIC))
            passages.append({
                "passage_id": f"t{t:02d}-archive-{name}",
                "title": f"topic{t} archive {name}",
                "text": f"topic{t} archive {name} . {mentions} . old shelves of topic{t} .",
            })

    # Topics 0-9 carry three conversations each, topics 10-19 two; the second
    # group is the held-out split for the zero-shot / query-side-fine-tuning
    # transfer protocol.
    plans = []
    for t in range(N_TOPICS):
        for m in range(3 if t < 10 else 2):
            plans.append((t, m, f"conv{t:02d}e{m}"))

    conversations = []
    for t, m, conv_id in plans:
        attr_order = rng.permutation(len(ATTRIBUTES))[:3]
        for turn, ai in enumerate(attr_order, start=1):
            attr = ATTRIBUTES[ai]
            if turn == 1:
                template = FIRST_TURN_TEMPLATES[int(rng.integers(len(FIRST_TURN_TEMPLATES)))]
                question = template.format(attr=attr, ent=_entity(t, m))
            elif rng.random() < 0.5:
                template = PARAPHRASE_TEMPLATES[int(rng.integers(len(PARAPHRASE_TEMPLATES)))]
                question = template.format(syn=SYNONYMS[attr])
            else:
                template = FOLLOWUP_TEMPLATES[int(rng.integers(len(FOLLOWUP_TEMPLATES)))]
                question = template.format(attr=attr)
            conversations.append({
                "conversation_id": conv_id,
                "turn_index": turn,
                "question": question,
                "gold_answer": values[(t, int(ai), m)],
                "gold_passage_id": _ledger_id(t, attr),
                "topic": t,
            })

    meta = {
        "seed": seed,
        "n_topics": N_TOPICS,
        "n_passages": len(passages),
        "n_conversations": sum(1 for c in conversations if c["turn_index"] == 1),
        "n_turns": len(conversations),
        "attributes": list(ATTRIBUTES),
        "train_topics": list(range(0, 10)),
        "transfer_topics": list(range(10, 20)),
    }
    return Benchmark(passages=passages, conversations=conversations, meta=meta)


def conversation_topic(conversation_id: str) -> int:
    """Topic index encoded in a generated conversation id (conv<TT>e<M>)."""
    return int(conversation_id[4:6])


def split_topics(conversations: list):
    """Source turns (topics 0-9) and held-out turns (topics 10-19).

    Works on generated record dicts and on loaded ConversationTurn objects
    alike, keyed off the conversation id.
    """
    source, held_out = [], []
    for rec in conversations:
        conv_id = rec["conversation_id"] if isinstance(rec, dict) else rec.conversation_id
        (source if conversation_topic(conv_id) < 10 else held_out).append(rec)
    return source, held_out


def write_benchmark(out_dir, seed: int = 20240, manifest_extra: dict | None = None) -> Benchmark:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench = generate_benchmark(seed)
    with open(out / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for rec in bench.passages:
            fh.write(json.dumps(rec) + "\n")
    with open(out / "conversations.jsonl", "w", encoding="utf-8") as fh:
        for rec in bench.conversations:
            fh.write(json.dumps(rec) + "\n")
    source, held_out = split_topics(bench.conversations)
    manifest = dict(bench.meta)
    manifest["splits"] = {
        "source_turns": len(source),
        "held_out_turns": len(held_out),
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return bench
