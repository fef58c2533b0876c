"""Command-line entry point exposing the full experimental workflow.

Exit codes: 0 success, 1 usage error, 2 runtime error. All randomness is
controlled by --seed (default 0), so rerunning a subcommand with identical
flags reproduces identical output files.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import corpus as corpus_mod
from . import retrieval, trainer
from .encoder import (
    check_gradients,
    load_checkpoint,
    make_gradcheck_instance,
    save_checkpoint,
)
from .errors import ReconError
from .loss import MODES, LossConfig
from .trainer import FewshotConfig, TrainConfig

CONTINUE_DEFAULT_PEAK_LR = 1.25e-4
GRADCHECK_THRESHOLD = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 instead of argparse's 2
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="recon", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a planted-topic synthetic corpus")
    p.add_argument("--topics", type=int, default=4, help="number of topics (default 4)")
    p.add_argument("--docs-per-topic", type=int, default=200, help="documents per topic (default 200)")
    p.add_argument("--mixed", type=float, default=0.5, help="fraction of two-topic documents (default 0.5)")
    p.add_argument("--tokens-per-doc", type=int, default=128, help="tokens per document (default 128)")
    p.add_argument("--vocab-per-topic", type=int, default=64, help="distinct words per topic (default 64)")
    p.add_argument("--head-words", type=int, default=None, help="common words each document draws from (default min(16, vocab-per-topic))")
    p.add_argument("--queries-per-topic", type=int, default=16, help="held-out queries per topic (default 16)")
    p.add_argument("--query-tokens", type=int, default=16, help="tokens per query (default 16)")
    p.add_argument("--vocab-size", type=int, default=corpus_mod.DEFAULT_VOCAB_SIZE, help="hashed vocabulary size (default 65536)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.add_argument("--out", required=True, help="output directory")

    for name in ("pretrain", "continue-pretrain"):
        p = sub.add_parser(name, help="unsupervised pre-training" if name == "pretrain" else "continued pre-training on a target corpus")
        p.add_argument("--corpus", required=True, help="JSONL corpus path")
        p.add_argument("--out", required=True, help="output checkpoint path")
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--labels", help="synthetic label TSV for weight metrics")
        p.add_argument("--metrics", help="step metrics JSONL path (default <out>.metrics.jsonl)")
        p.add_argument("--mode", choices=MODES, help="loss mode override")
        p.add_argument("--pairs", type=int, help="positives per document override")
        p.add_argument("--negatives", choices=("moco", "in_batch"), help="negative source override")
        p.add_argument("--batch-groups", type=int, help="documents per batch override")
        p.add_argument("--steps", type=int, help="total steps override")
        p.add_argument("--warmup", type=int, help="warmup steps override")
        p.add_argument("--peak-lr", type=float, help="peak learning rate override")
        p.add_argument("--seed", type=int, help="run seed override (default 0)")
        if name == "pretrain":
            p.add_argument("--resume", help="checkpoint to resume from")
        else:
            p.add_argument("--checkpoint", required=True, help="checkpoint to adapt")

    p = sub.add_parser("fewshot", help="few-shot fine-tuning with BM25 negatives")
    p.add_argument("--checkpoint", required=True, help="checkpoint to fine-tune")
    p.add_argument("--corpus", required=True, help="JSONL corpus path")
    p.add_argument("--examples", required=True, help="TSV of query_text<TAB>gold_doc_id")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--negatives", type=int, help="BM25 negatives per query override")
    p.add_argument("--epochs", type=int, help="epochs override")
    p.add_argument("--batch-size", type=int, help="batch size override")
    p.add_argument("--lr", type=float, help="learning rate override")
    p.add_argument("--seed", type=int, help="shuffling seed override (default 0)")

    p = sub.add_parser("index", help="embed a corpus into a dense index")
    p.add_argument("--checkpoint", required=True, help="encoder checkpoint")
    p.add_argument("--corpus", required=True, help="JSONL corpus path")
    p.add_argument("--out", required=True, help="output .npz index path")

    p = sub.add_parser("search", help="rank a corpus for each query")
    p.add_argument("--queries", required=True, help="JSONL queries path")
    p.add_argument("--k", type=int, default=100, help="results per query (default 100)")
    p.add_argument("--out", required=True, help="output TREC run path")
    p.add_argument("--tag", default="recon", help="run tag (default recon)")
    p.add_argument("--checkpoint", help="encoder checkpoint (dense search)")
    p.add_argument("--index", help="prebuilt .npz index (dense search)")
    p.add_argument("--corpus", help="JSONL corpus (dense without --index, or --bm25)")
    p.add_argument("--bm25", action="store_true", help="score lexically with BM25 instead of the encoder")

    p = sub.add_parser("evaluate", help="score a run (or a checkpoint) against qrels")
    p.add_argument("--qrels", required=True, help="qrels TSV path")
    p.add_argument("--metric", action="append", default=None, help="metric like ndcg@10; repeatable (default ndcg@10)")
    p.add_argument("--run", help="premade TREC run to score")
    p.add_argument("--checkpoint", help="encoder checkpoint (dense run is computed)")
    p.add_argument("--corpus", help="JSONL corpus (with --checkpoint)")
    p.add_argument("--queries", help="JSONL queries (with --checkpoint)")
    p.add_argument("--k", type=int, default=100, help="depth of the computed run (default 100)")
    p.add_argument("--out", help="write the JSON report here instead of stdout")

    p = sub.add_parser("compare", help="paired significance test between two runs")
    p.add_argument("--run-a", required=True, help="TREC run A")
    p.add_argument("--run-b", required=True, help="TREC run B")
    p.add_argument("--qrels", required=True, help="qrels TSV path")
    p.add_argument("--metric", default="ndcg@10", help="metric like ndcg@10 (default ndcg@10)")
    p.add_argument("--out", help="write the JSON report here instead of stdout")

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--v", type=int, default=64, help="vocabulary size (default 64)")
    p.add_argument("--d", type=int, default=8, help="embedding dim (default 8)")
    p.add_argument("--m", type=int, default=2, help="groups per batch (default 2)")
    p.add_argument("--pairs", type=int, default=4, help="positives per group (default 4)")
    p.add_argument("--eps", type=float, default=1e-5, help="finite-difference step (default 1e-5)")
    p.add_argument("--seed", type=int, default=0, help="instance seed (default 0)")
    p.add_argument("--mode", choices=MODES, help="check a single loss mode")
    p.add_argument("--negatives", choices=("moco", "in_batch"), help="check a single negative source")
    return parser


def _load_corpus(path):
    return corpus_mod.ingest_jsonl(path)


def _train_config(args, defaults: TrainConfig | None = None) -> TrainConfig:
    cfg = (
        trainer.parse_config_file(args.config, TrainConfig)
        if args.config
        else (defaults or TrainConfig())
    )
    overrides = {
        "mode": args.mode,
        "pairs_per_doc": args.pairs,
        "negatives_mode": args.negatives,
        "batch_groups": getattr(args, "batch_groups", None),
        "total_steps": args.steps,
        "warmup_steps": args.warmup,
        "peak_lr": args.peak_lr,
        "seed": args.seed,
    }
    changed = {k: v for k, v in overrides.items() if v is not None}
    if changed:
        cfg = TrainConfig(**{**cfg.__dict__, **changed})
    return cfg


def _cmd_gen_synthetic(args) -> int:
    import os

    spec = corpus_mod.SyntheticSpec(
        num_topics=args.topics,
        docs_per_topic=args.docs_per_topic,
        mixed_fraction=args.mixed,
        tokens_per_doc=args.tokens_per_doc,
        vocab_per_topic=args.vocab_per_topic,
        head_words_per_doc=args.head_words,
        seed=args.seed,
        queries_per_topic=args.queries_per_topic,
        query_tokens=args.query_tokens,
        vocab_size=args.vocab_size,
    )
    docs, queries, qrels, labels = corpus_mod.gen_synthetic(spec)
    os.makedirs(args.out, exist_ok=True)
    corpus_mod.write_jsonl(os.path.join(args.out, "corpus.jsonl"), docs)
    corpus_mod.write_jsonl(os.path.join(args.out, "queries.jsonl"), queries)
    retrieval.write_qrels(os.path.join(args.out, "qrels.tsv"), qrels)
    corpus_mod.write_labels(os.path.join(args.out, "labels.tsv"), labels)
    print(f"wrote {len(docs)} documents, {len(queries)} queries to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _train_config(args)
    docs = _load_corpus(args.corpus)
    labels = corpus_mod.read_labels(args.labels) if args.labels else None
    state = None
    if args.resume:
        state = trainer.state_from_checkpoint(load_checkpoint(args.resume), cfg)
    metrics_path = args.metrics or f"{args.out}.metrics.jsonl"
    state, history = trainer.pretrain(
        docs, cfg, labels=labels, out_path=args.out, metrics_path=metrics_path, state=state
    )
    final_loss = history[-1]["loss"] if history else float("nan")
    print(f"pretrained {state.step} steps (final loss {final_loss:.6f}) -> {args.out}")
    return 0


def _cmd_continue_pretrain(args) -> int:
    defaults = TrainConfig(peak_lr=CONTINUE_DEFAULT_PEAK_LR)
    cfg = _train_config(args, defaults=defaults)
    docs = _load_corpus(args.corpus)
    labels = corpus_mod.read_labels(args.labels) if args.labels else None
    ckpt = load_checkpoint(args.checkpoint)
    metrics_path = args.metrics or f"{args.out}.metrics.jsonl"
    state, history = trainer.continue_pretrain(
        ckpt, docs, cfg, labels=labels, out_path=args.out, metrics_path=metrics_path
    )
    final_loss = history[-1]["loss"] if history else float("nan")
    print(f"continued for {state.step} steps (final loss {final_loss:.6f}) -> {args.out}")
    return 0


def _read_examples(path) -> list[tuple[str, str]]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ReconError(f"{path}:{lineno}: expected query_text<TAB>doc_id")
            examples.append((parts[0], parts[1]))
    return examples


def _cmd_fewshot(args) -> int:
    fcfg = (
        trainer.parse_config_file(args.config, FewshotConfig)
        if args.config
        else FewshotConfig()
    )
    overrides = {
        "negatives_per_query": args.negatives,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "seed": args.seed,
    }
    changed = {k: v for k, v in overrides.items() if v is not None}
    if changed:
        fcfg = FewshotConfig(**{**fcfg.__dict__, **changed})
    ckpt = load_checkpoint(args.checkpoint)
    docs = _load_corpus(args.corpus)
    examples = _read_examples(args.examples)
    tuned = trainer.fewshot_finetune(ckpt.params, docs, examples, fcfg)
    save_checkpoint(args.out, tuned)
    print(f"fine-tuned on {len(examples)} examples for {fcfg.epochs} epochs -> {args.out}")
    return 0


def _cmd_index(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    docs = _load_corpus(args.corpus)
    index = retrieval.build_index(ckpt.params, docs)
    np.savez(args.out, doc_ids=np.array(index.doc_ids), matrix=index.matrix)
    print(f"indexed {len(index.doc_ids)} documents -> {args.out}")
    return 0


def _load_index(path) -> retrieval.DenseIndex:
    with np.load(path, allow_pickle=False) as data:
        return retrieval.DenseIndex([str(x) for x in data["doc_ids"]], data["matrix"])


def _cmd_search(args) -> int:
    queries = _load_corpus(args.queries)
    if args.bm25:
        if not args.corpus:
            raise UsageError("--bm25 requires --corpus")
        stats = retrieval.build_bm25(_load_corpus(args.corpus))
        run = {q.id: retrieval.bm25_rank(q.text, stats, args.k) for q in queries}
    else:
        if not args.checkpoint:
            raise UsageError("dense search requires --checkpoint (or use --bm25)")
        ckpt = load_checkpoint(args.checkpoint)
        if args.index:
            index = _load_index(args.index)
        elif args.corpus:
            index = retrieval.build_index(ckpt.params, _load_corpus(args.corpus))
        else:
            raise UsageError("dense search requires --index or --corpus")
        run = retrieval.run_queries(ckpt.params, index, queries, args.k)
    retrieval.write_trec_run(args.out, run, tag=args.tag)
    print(f"wrote run for {len(run)} queries -> {args.out}")
    return 0


def _emit_report(report: dict, out_path) -> None:
    if out_path:
        retrieval.write_json(out_path, report)
    else:
        json.dump(report, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")


def _cmd_evaluate(args) -> int:
    qrels = retrieval.read_qrels(args.qrels)
    metric_names = args.metric or ["ndcg@10"]
    if args.run:
        run = retrieval.read_trec_run(args.run)
    else:
        if not (args.checkpoint and args.corpus and args.queries):
            raise UsageError("evaluate needs --run, or --checkpoint with --corpus and --queries")
        ckpt = load_checkpoint(args.checkpoint)
        index = retrieval.build_index(ckpt.params, _load_corpus(args.corpus))
        run = retrieval.run_queries(ckpt.params, index, _load_corpus(args.queries), args.k)
    report = retrieval.metrics_report(run, qrels, metric_names)
    _emit_report(report, args.out)
    return 0


def _cmd_compare(args) -> int:
    qrels = retrieval.read_qrels(args.qrels)
    run_a = retrieval.read_trec_run(args.run_a)
    run_b = retrieval.read_trec_run(args.run_b)
    report = retrieval.compare_report(run_a, run_b, qrels, args.metric)
    _emit_report(report, args.out)
    return 0


def _cmd_gradcheck(args) -> int:
    modes = [args.mode] if args.mode else list(MODES)
    sources = [args.negatives] if args.negatives else ["in_batch", "moco"]
    worst = 0.0
    for mode in modes:
        for source in sources:
            params, groups, queue, momentum = make_gradcheck_instance(
                args.v, args.d, args.m, args.pairs, source, seed=args.seed
            )
            err = check_gradients(
                params,
                groups,
                LossConfig(mode=mode),
                source,
                queue=queue,
                momentum_table=momentum,
                eps=args.eps,
                seed=args.seed,
            )
            worst = max(worst, err)
            status = "ok" if err < GRADCHECK_THRESHOLD else "FAIL"
            print(f"{mode:>15s} x {source:<8s} max_rel_error = {err:.3e}  [{status}]")
    if worst >= GRADCHECK_THRESHOLD:
        print(f"gradcheck failed: worst error {worst:.3e} >= {GRADCHECK_THRESHOLD}")
        return 2
    return 0


_COMMANDS = {
    "gen-synthetic": _cmd_gen_synthetic,
    "pretrain": _cmd_pretrain,
    "continue-pretrain": _cmd_continue_pretrain,
    "fewshot": _cmd_fewshot,
    "index": _cmd_index,
    "search": _cmd_search,
    "evaluate": _cmd_evaluate,
    "compare": _cmd_compare,
    "gradcheck": _cmd_gradcheck,
}


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ReconError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
