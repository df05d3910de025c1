"""Command-line entry point.

Subcommands: ingest, index, train, finetune-query, retrieve, eval, bench,
ablate. All randomness flows from --seed; outputs for a fixed seed are
byte-identical across runs (latency numbers excepted, being wall-clock).
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import kernels
from .baselines import Bm25Index
from .config import RunConfig, resolve_config
from .corpus import build_conv_context, group_by_conversation, load_conversations, load_corpus
from .encoder import ProjectionHead, encode_context
from .engine import (SYSTEM_NAMES, answer_conversations, bench_callables, build_system,
                     evaluate_system, make_provider)
from .errors import ConfigurationError, NotFoundError, PhraseForgeError
from .evaluation import bench_latency
from .index import build_index, load_index, save_index, search_topk
from .training import finetune_query, train

_PIPELINES = ("bm25", "dense")


def _emit_error(exc: Exception) -> None:
    line = json.dumps({"error": type(exc).__name__, "cause": str(exc)}, sort_keys=True)
    print(line, file=sys.stderr)


def _write_json(path, payload) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _config_from_args(args) -> RunConfig:
    overrides = {}
    for key in ("seed", "dim", "batch_size", "prebatch_batches", "epochs",
                "learning_rate", "lambda1", "lambda2", "max_phrase_len",
                "token_budget", "k", "cutoff", "topk_passages", "reps", "warmup",
                "finetune_topk", "finetune_epochs"):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    if getattr(args, "no_turn_loss", False):
        overrides["lambda2"] = 0.0
    return resolve_config(getattr(args, "config", None), **overrides)


def _load_head(path, config: RunConfig) -> ProjectionHead:
    if path is None:
        return ProjectionHead.identity(config.dim)
    if not Path(path).exists():
        raise NotFoundError(f"head not found: {path}")
    return ProjectionHead.load(path)


def _load_index_checked(args, config: RunConfig, corpus):
    if not Path(args.index).exists():
        raise NotFoundError(f"index not found: {args.index}")
    return load_index(args.index, corpus=corpus)


def _write_trajectory(path, trajectory) -> None:
    if path is None:
        return
    with open(path, "w", encoding="utf-8") as fh:
        for report in trajectory:
            fh.write(json.dumps(report.as_record(), sort_keys=True) + "\n")


def cmd_ingest(args) -> int:
    corpus = load_corpus(args.corpus)
    summary = {
        "passages": len(corpus),
        "tokens": sum(len(p.tokens) for p in corpus.passages),
        "corpus_fingerprint": corpus.fingerprint,
    }
    if args.conversations:
        turns = load_conversations(args.conversations)
        summary["turns"] = len(turns)
        summary["conversations"] = len(group_by_conversation(turns))
    _write_json(args.out, summary)
    return 0


def cmd_index(args) -> int:
    config = _config_from_args(args)
    corpus = load_corpus(args.corpus)
    provider = make_provider(config)
    head = _load_head(args.head, config)
    t0 = time.perf_counter()
    index = build_index(corpus, head, provider, config.max_phrase_len)
    build_seconds = time.perf_counter() - t0
    save_index(index, args.out)
    manifest = {
        "dim": index.dim,
        "entries": len(index),
        "fingerprint": index.fingerprint,
        "max_phrase_len": config.max_phrase_len,
        "build_seconds": round(build_seconds, 3),
        "kernel_backend": kernels.BACKEND_NAME,
        "provider": provider.describe(),
    }
    _write_json(args.manifest, manifest)
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    corpus = load_corpus(args.corpus)
    turns = load_conversations(args.conversations)
    provider = make_provider(config)
    result = train(turns, corpus, config, provider)
    result.head.save(args.out_head)
    _write_trajectory(args.trajectory, result.trajectory)
    last = result.trajectory[-1]
    _write_json(None, {"steps": last.step, "final_l_total": last.l_total,
                       "final_l_neg": last.l_neg, "final_l_turn": last.l_turn,
                       "skipped_turns": result.skipped_turns})
    return 0


def cmd_finetune(args) -> int:
    config = _config_from_args(args)
    corpus = load_corpus(args.corpus)
    turns = load_conversations(args.conversations)
    provider = make_provider(config)
    head = _load_head(args.head, config)
    index = _load_index_checked(args, config, corpus)
    result = finetune_query(index, turns, corpus, head, config, provider)
    result.head.save(args.out_head)
    _write_trajectory(args.trajectory, result.trajectory)
    last = result.trajectory[-1]
    _write_json(None, {"steps": last.step, "final_l_total": last.l_total,
                       "skipped_turns": result.skipped_turns})
    return 0


def cmd_retrieve(args) -> int:
    config = _config_from_args(args)
    corpus = load_corpus(args.corpus)
    provider = make_provider(config)
    head = _load_head(args.head, config)
    index = _load_index_checked(args, config, corpus)
    if index.dim != head.dim:
        raise ConfigurationError(f"index dim {index.dim} != head dim {head.dim}")

    if args.question is not None:
        from .corpus import ConvContext

        ctx = ConvContext("adhoc", 1, args.question, config.token_budget)
        query = encode_context(ctx, head, provider)
        for rp in search_topk(index, query, config.k):
            print(f"{rp.rank}\t{rp.score:.6f}\t{rp.span.passage_id}"
                  f"\t{rp.span.start_token}-{rp.span.end_token}\t{rp.span.surface}")
        return 0

    turns = load_conversations(args.conversations)
    system = build_system("single", corpus, index, head, provider, config)
    for ta in answer_conversations(system, turns, config.token_budget,
                                   history=args.history):
        print(f"{ta.turn.conversation_id}\t{ta.turn.turn_index}\t{ta.answer}")
    return 0


def cmd_eval(args) -> int:
    config = _config_from_args(args)
    corpus = load_corpus(args.corpus)
    turns = load_conversations(args.conversations)
    provider = make_provider(config)
    head = _load_head(args.head, config)
    index = _load_index_checked(args, config, corpus)
    system = build_system(args.system, corpus, index, head, provider, config)
    report = evaluate_system(system, turns, config.token_budget, config.cutoff,
                             history=args.history)
    _write_json(args.out, {"system": args.system, **report.as_record()})
    if args.table:
        top1 = report.top_k_accuracy.get(1, 0.0)
        lines = ["system\tF1\tEM\tTop-1\tMRR\tPrecision",
                 f"{args.system}\t{report.f1:.4f}\t{report.em:.4f}"
                 f"\t{top1:.4f}\t{report.mrr_at_10:.4f}\t{report.precision_at_10:.4f}"]
        Path(args.table).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def cmd_bench(args) -> int:
    config = _config_from_args(args)
    corpus = load_corpus(args.corpus)
    turns = load_conversations(args.conversations)
    provider = make_provider(config)
    head = _load_head(args.head, config)
    index = _load_index_checked(args, config, corpus)
    names = [n.strip() for n in args.systems.split(",") if n.strip()]
    for name in names:
        if name not in SYSTEM_NAMES:
            raise ConfigurationError(f"unknown system {name!r}; choose from {SYSTEM_NAMES}")
    if args.limit:
        turns = turns[:args.limit]
    systems = {name: build_system(name, corpus, index, head, provider, config)
               for name in names}
    contexts, callables = bench_callables(systems, turns, config.token_budget)
    report = bench_latency(callables, contexts, warmup=config.warmup,
                           repetitions=config.reps)
    _write_json(args.out, report.as_record())
    print(report.as_table())
    return 0


def cmd_ablate(args) -> int:
    """Contrastive-learning x query-side-fine-tuning grid, four rows."""
    config = _config_from_args(args)
    corpus = load_corpus(args.corpus)
    turns = load_conversations(args.conversations)
    provider = make_provider(config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for use_cl in (True, False):
        cfg = RunConfig(**{**vars(config), "lambda2": config.lambda2 if use_cl else 0.0})
        trained = train(turns, corpus, cfg, provider)
        index = build_index(corpus, trained.head, provider, cfg.max_phrase_len)
        for use_qf in (True, False):
            head = trained.head
            if use_qf:
                head = finetune_query(index, turns, corpus, trained.head, cfg,
                                      provider).head
            system = build_system("single", corpus, index, head, provider, cfg)
            report = evaluate_system(system, turns, cfg.token_budget, cfg.cutoff)
            rows.append({"cl": use_cl, "qf": use_qf,
                         "f1": report.f1, "em": report.em})

    _write_json(out_dir / "ablation.json", {"rows": rows})
    lines = ["CL\tQF\tF1\tEM"]
    for row in rows:
        lines.append(f"{'+' if row['cl'] else '-'}\t{'+' if row['qf'] else '-'}"
                     f"\t{row['f1']:.4f}\t{row['em']:.4f}")
    table = "\n".join(lines)
    (out_dir / "ablation.tsv").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phraseforge",
        description="Conversational QA by direct phrase retrieval, with "
                    "retriever-reader baselines and a latency harness.")
    parser.set_defaults(func=None)
    sub = parser.add_subparsers(dest="command")

    def common(p, index_arg=False, head_arg=False, conv_required=True):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--dim", type=int, default=None)
        p.add_argument("--corpus", required=True)
        if conv_required:
            p.add_argument("--conversations", required=True)
        if index_arg:
            p.add_argument("--index", required=True)
        if head_arg:
            p.add_argument("--head", default=None, help="projection head file "
                           "(identity head when omitted)")

    p = sub.add_parser("ingest", help="validate inputs and print a summary")
    p.add_argument("--config", default=None)
    p.add_argument("--corpus", required=True)
    p.add_argument("--conversations", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", help="build and persist the phrase index")
    common(p, conv_required=False, head_arg=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--max-phrase-len", dest="max_phrase_len", type=int, default=None)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("train", help="train the projection head")
    common(p)
    p.add_argument("--out-head", required=True)
    p.add_argument("--trajectory", default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--prebatch-batches", dest="prebatch_batches", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.add_argument("--lambda1", type=float, default=None)
    p.add_argument("--lambda2", type=float, default=None)
    p.add_argument("--no-turn-loss", dest="no_turn_loss", action="store_true",
                   help="set the turn-loss weight to zero")
    p.add_argument("--max-phrase-len", dest="max_phrase_len", type=int, default=None)
    p.add_argument("--token-budget", dest="token_budget", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune-query", help="query-side fine-tuning on a frozen index")
    common(p, index_arg=True, head_arg=True)
    p.add_argument("--out-head", required=True)
    p.add_argument("--trajectory", default=None)
    p.add_argument("--finetune-topk", dest="finetune_topk", type=int, default=None)
    p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int, default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("retrieve", help="answer a question or a conversation file")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--head", default=None)
    p.add_argument("--question", default=None)
    p.add_argument("--conversations", default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--history", choices=("gold", "predicted"), default="predicted",
                   help="history source when answering a conversation file")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", help="answer + retrieval metrics for one system")
    common(p, index_arg=True, head_arg=True)
    p.add_argument("--system", choices=SYSTEM_NAMES, default="single")
    p.add_argument("--history", choices=("gold", "predicted"), default="gold")
    p.add_argument("--cutoff", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--topk-passages", dest="topk_passages", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--table", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="wall-clock comparison of systems")
    common(p, index_arg=True, head_arg=True)
    p.add_argument("--systems", default="single,bm25")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--limit", type=int, default=0, help="cap the question count")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--topk-passages", dest="topk_passages", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="CL x QF ablation grid")
    common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.func is None:
        parser.print_help()
        return 2
    if args.command == "retrieve" and (args.question is None) == (args.conversations is None):
        _emit_error(ConfigurationError("retrieve needs exactly one of --question "
                                       "or --conversations"))
        return 2
    try:
        return args.func(args)
    except (ConfigurationError, NotFoundError) as exc:
        _emit_error(exc)
        return 2
    except PhraseForgeError as exc:
        _emit_error(exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
