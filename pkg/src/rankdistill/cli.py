"""Command-line entry point: ``rankdistill <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 input data error, 3 runtime failure.
Summaries go to stdout, logs to stderr. ``--config`` takes a flat JSON object
whose keys are option names; explicit flags win over it.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from ._parallel import default_threads
from .corpus import Corpus, Dataset, load_corpus, load_qrels, load_queries
from .distillation import (
    DEFAULT_LIST_LENGTH,
    DEFAULT_PER_RETRIEVER_K,
    FileTeacher,
    SyntheticTeacher,
    build_bce_set,
    build_mse_set,
    build_permutation_set,
    mine_all,
    read_pools,
    score_pools,
    write_pools,
    write_teacher_scores,
)
from .errors import DataError, RankDistillError
from .evaluation import (
    REFERENCE_THROUGHPUT,
    EvalReport,
    aggregate,
    chart_csv,
    compare_chart_data,
    evaluate_run,
    measure_throughput,
    read_throughput_rows,
    render_table,
    throughput_table,
)
from .pipeline import ExperimentSpec, rerank_all, retrieve_all, run_distillation_experiment
from .reranker import FeatureProvider, MLPReranker, PassthroughReranker, RerankRequest, ScorerParams, load_checkpoint, save_checkpoint
from .retrieval import (
    BM25Retriever,
    DenseRetriever,
    SparseRetriever,
    build_index,
    load_embeddings,
    load_index,
    load_sparse_weights,
    read_run,
    save_index,
    write_run,
)
from .training import TrainConfig, TrainingSet, fit_feature_normalizer, read_samples, train, write_loss_log, write_samples

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- shared option groups ----------------------------------------------------


def _common(p):
    p.add_argument("--config", help="flat JSON object of option defaults")
    p.add_argument("--threads", type=int, default=default_threads(), help="worker cap; 1 forces the serial path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def _resources(p):
    p.add_argument("--corpus", help="corpus JSONL")
    p.add_argument("--queries", nargs="+", help="query JSONL file(s)")
    p.add_argument("--embeddings", nargs="+", help="embedding JSONL file(s) for documents and queries")
    p.add_argument("--sparse", nargs="+", help="sparse expansion JSONL file(s)")
    p.add_argument("--index", help="prebuilt BM25 index JSON (otherwise built from --corpus)")
    p.add_argument("--query-cap", type=int, default=1000)


def _training_flags(p):
    p.add_argument("--loss", choices=("bce", "mse", "ranknet"))
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--schedule", choices=("linear_decay", "constant"), default="linear_decay")
    p.add_argument("--hidden", type=int, default=16)


REQUIRED = {
    "index": ("corpus", "output"),
    "retrieve": ("queries", "output"),
    "mine": ("corpus", "queries", "embeddings", "sparse", "output"),
    "teacher-score": ("pools", "queries", "output"),
    "train": ("samples", "loss", "corpus", "queries", "embeddings", "sparse", "output"),
    "rerank": ("run", "queries", "output"),
    "eval": ("run", "queries", "qrels"),
    "report": ("reports",),
    "experiment": ("output",),
    "bench-throughput": ("run", "queries", "corpus", "embeddings", "sparse"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rankdistill", description="Retrieve-then-rerank and reranker distillation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("index", help="build a BM25 index")
    _common(p)
    p.add_argument("--corpus")
    p.add_argument("--output")

    p = sub.add_parser("retrieve", help="first-stage top-k0 retrieval to a TREC run")
    _common(p)
    _resources(p)
    p.add_argument("--retriever", choices=("bm25", "dense", "sparse"), default="bm25")
    p.add_argument("--k0", type=int, default=100)
    p.add_argument("--output")

    p = sub.add_parser("mine", help="merge candidates from BM25, dense and sparse retrievers")
    _common(p)
    _resources(p)
    p.add_argument("--per-retriever-k", type=int, default=DEFAULT_PER_RETRIEVER_K)
    p.add_argument("--output")

    p = sub.add_parser("teacher-score", help="score candidate pools with a teacher and emit training sets")
    _common(p)
    _resources(p)
    p.add_argument("--pools")
    p.add_argument("--teacher-scores", help="TSV of precomputed teacher scores")
    p.add_argument("--teacher-model", help="synthetic teacher JSON")
    p.add_argument("--list-length", type=int, default=DEFAULT_LIST_LENGTH)
    p.add_argument("--qrels", help="qrels for the binary (bce) set")
    p.add_argument("--negatives-per-positive", type=int, default=4)
    p.add_argument("--mse-out")
    p.add_argument("--ranknet-out")
    p.add_argument("--bce-out")
    p.add_argument("--output", help="teacher score TSV")

    p = sub.add_parser("train", help="train a student reranker")
    _common(p)
    _resources(p)
    _training_flags(p)
    p.add_argument("--samples")
    p.add_argument("--loss-log")
    p.add_argument("--output", help="checkpoint JSON")

    p = sub.add_parser("rerank", help="rerank a first-stage run to top-k")
    _common(p)
    _resources(p)
    p.add_argument("--run")
    p.add_argument("--checkpoint", help="student checkpoint; omit for passthrough")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--output")

    p = sub.add_parser("eval", help="NDCG@k of a run against qrels")
    _common(p)
    p.add_argument("--run")
    p.add_argument("--queries", nargs="+")
    p.add_argument("--qrels")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--gain", choices=("linear", "exponential"), default="linear")
    p.add_argument("--query-cap", type=int, default=1000)
    p.add_argument("--name", default="dataset")
    p.add_argument("--group", default="Other")
    p.add_argument("--model", default="model")
    p.add_argument("--baseline", help="baseline report JSON for deltas")
    p.add_argument("--output", help="report JSON")

    p = sub.add_parser("report", help="render reports as a table and chart data")
    _common(p)
    p.add_argument("--reports", nargs="+")
    p.add_argument("--baseline", help="baseline report for the per-dataset chart")
    p.add_argument("--output", help="table text file")
    p.add_argument("--chart-csv", help="chart CSV comparing the first report to the baseline")

    p = sub.add_parser("experiment", help="run the closed-loop synthetic distillation experiment")
    _common(p)
    p.add_argument("--spec", help="experiment spec JSON (field names of ExperimentSpec)")
    p.add_argument("--n-docs", type=int)
    p.add_argument("--n-train-queries", type=int)
    p.add_argument("--n-eval-queries", type=int)
    p.add_argument("--k0", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--output")

    p = sub.add_parser("bench-throughput", help="time reranking and compare with reference rows")
    _common(p)
    _resources(p)
    p.add_argument("--run")
    p.add_argument("--checkpoint")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--reference", help="CSV rows model,qps[,note]; defaults to built-in figures")
    p.add_argument("--output", help="JSON report")
    return parser


# -- argument resolution ----------------------------------------------------


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise UsageError(f"unknown command {name!r}")


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("rankdistill: a command is required (see --help)")
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.config}: invalid JSON ({exc.msg})") from None
        if not isinstance(cfg, dict):
            raise DataError(f"{args.config}: config must be a JSON object")
        sub = _subparser(parser, args.command)
        known = {a.dest for a in sub._actions}
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = sorted(set(cfg) - known - {"config"})
        if unknown:
            raise UsageError(f"rankdistill {args.command}: unknown config keys {unknown}")
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    missing = [f"--{d.replace('_', '-')}" for d in REQUIRED[args.command] if getattr(args, d.replace("-", "_"), None) in (None, [])]
    if missing:
        raise UsageError(f"rankdistill {args.command}: missing required option(s) {' '.join(missing)}")
    for name in ("threads", "k", "k0", "query_cap", "epochs", "batch_size"):
        value = getattr(args, name, None)
        if value is not None and value < 1:
            raise UsageError(f"rankdistill {args.command}: --{name.replace('_', '-')} must be >= 1")
    return args


# -- resource loading ---------------------------------------------------------


def _queries(args):
    out = []
    for path in args.queries:
        out.extend(load_queries(path))
    return out[: args.query_cap] if getattr(args, "query_cap", None) else out


def _need(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if not getattr(args, n, None)]
    if missing:
        raise UsageError(f"rankdistill {args.command}: this mode needs {' '.join(missing)}")


def _bm25(args, corpus):
    if args.index:
        return BM25Retriever(load_index(args.index))
    return BM25Retriever.from_corpus(corpus)


def _provider(args, queries) -> FeatureProvider:
    _need(args, "corpus", "embeddings", "sparse")
    corpus = load_corpus(args.corpus)
    return FeatureProvider(
        corpus,
        queries,
        _bm25(args, corpus),
        DenseRetriever(load_embeddings(*args.embeddings), corpus.ids),
        SparseRetriever(load_sparse_weights(*args.sparse), corpus.ids),
    )


def _write_text(path, text):
    Path(path).write_text(text, encoding="utf-8")


# -- commands -------------------------------------------------------------------


def cmd_index(args):
    corpus = load_corpus(args.corpus)
    index = build_index(corpus)
    save_index(index, args.output)
    print(f"indexed {index.doc_count} documents, {len(index.postings)} terms -> {args.output}")


def cmd_retrieve(args):
    queries = _queries(args)
    if args.retriever == "bm25":
        if args.index:
            retriever = BM25Retriever(load_index(args.index))
        else:
            _need(args, "corpus")
            retriever = BM25Retriever.from_corpus(load_corpus(args.corpus))
    else:
        _need(args, "corpus", args.retriever == "dense" and "embeddings" or "sparse")
        ids = load_corpus(args.corpus).ids
        if args.retriever == "dense":
            retriever = DenseRetriever(load_embeddings(*args.embeddings), ids)
        else:
            retriever = SparseRetriever(load_sparse_weights(*args.sparse), ids)
    run = retrieve_all(retriever, queries, args.k0, args.threads)
    write_run(run.values(), args.output)
    print(f"retrieved top-{args.k0} for {len(run)} queries with {retriever.tag} -> {args.output}")


def cmd_mine(args):
    queries = _queries(args)
    provider = _provider(args, queries)
    pools = mine_all(queries, [provider.bm25, provider.dense, provider.sparse], args.per_retriever_k, args.threads)
    write_pools(pools, args.output)
    sizes = [len(p) for p in pools]
    mean = sum(sizes) / len(sizes) if sizes else 0.0
    print(f"mined {len(pools)} pools (mean size {mean:.1f}, max {max(sizes, default=0)}) -> {args.output}")


def cmd_teacher_score(args):
    queries = _queries(args)
    pools = read_pools(args.pools)
    if args.teacher_scores and args.teacher_model:
        raise UsageError("rankdistill teacher-score: give --teacher-scores or --teacher-model, not both")
    if args.teacher_scores:
        teacher = FileTeacher.from_tsv(args.teacher_scores)
    elif args.teacher_model:
        teacher = SyntheticTeacher.load(args.teacher_model, _provider(args, queries))
    else:
        raise UsageError("rankdistill teacher-score: one of --teacher-scores or --teacher-model is required")
    scores = score_pools(teacher, queries, pools, args.threads)
    write_teacher_scores(scores, args.output)
    order = [q.query_id for q in queries]
    pool_map = {p.query_id: p for p in pools}
    print(f"scored {len(scores)} pairs over {len(scores.scores)} queries -> {args.output}")
    if args.mse_out:
        n = write_samples(build_mse_set(scores, order, pool_map), args.mse_out)
        print(f"wrote {n} regression samples -> {args.mse_out}")
    if args.ranknet_out:
        n = write_samples(build_permutation_set(scores, args.list_length, order, pool_map), args.ranknet_out)
        print(f"wrote {n} permutation samples (L={args.list_length}) -> {args.ranknet_out}")
    if args.bce_out:
        _need(args, "qrels")
        samples = build_bce_set(pools, load_qrels(args.qrels), args.negatives_per_positive, args.seed)
        n = write_samples(samples, args.bce_out)
        print(f"wrote {n} binary samples -> {args.bce_out}")


def cmd_train(args):
    samples = read_samples(args.samples)
    if not samples:
        raise DataError(f"{args.samples}: no training samples")
    kinds = {s.kind for s in samples}
    if kinds != {args.loss}:
        raise DataError(f"loss {args.loss!r} cannot train on {sorted(kinds)} samples from {args.samples}")
    queries = _queries_all(args)
    provider = _provider(args, queries)
    data = TrainingSet(samples, provider)
    mean, scale = fit_feature_normalizer(data.feature_matrix())
    init = ScorerParams.init(hidden_dim=args.hidden, seed=args.seed, feature_mean=mean, feature_scale=scale, tag=f"student-{args.loss}")
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, peak_lr=args.lr, schedule=args.schedule, seed=args.seed)
    result = train(init, data, config)
    meta = {"loss": args.loss, "seed": args.seed, "samples": len(samples), "config": asdict(config)}
    save_checkpoint(result.params, args.output, meta)
    if args.loss_log:
        write_loss_log(result.log, args.loss_log)
    print(f"trained {args.loss} student on {len(samples)} samples; final epoch loss {result.epoch_losses[-1]:.6f} -> {args.output}")


def _queries_all(args):
    # training sets name their own queries; never cap them
    out = []
    for path in args.queries:
        out.extend(load_queries(path))
    return out


def _reranker(args, queries):
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
        return MLPReranker(params, _provider(args, queries)), None
    corpus = load_corpus(args.corpus) if args.corpus else None
    return PassthroughReranker(), corpus


def cmd_rerank(args):
    queries = _queries(args)
    first = read_run(args.run)
    reranker, corpus = _reranker(args, queries)
    if corpus is None and args.checkpoint:
        corpus = reranker.provider.corpus
    out = rerank_all(reranker, queries, first, args.k, corpus, args.threads)
    write_run(out.values(), args.output)
    print(f"reranked {len(out)} queries to top-{args.k} -> {args.output}")


def cmd_eval(args):
    queries = _queries(args)
    run = read_run(args.run)
    dataset = Dataset(args.name, Corpus(), tuple(queries), load_qrels(args.qrels), group=args.group)
    result = evaluate_run(run, dataset, args.k, args.gain)
    baseline = EvalReport.load(args.baseline) if args.baseline else None
    report = aggregate({args.name: result.mean}, {args.name: args.group}, baseline, model=args.model)
    if args.output:
        report.save(args.output)
    sys.stdout.write(render_table(([baseline] if baseline else []) + [report]))
    print(f"{args.model}: NDCG@{args.k} = {result.mean:.6f} over {result.evaluated} judged queries ({args.name})")


def cmd_report(args):
    reports = [EvalReport.load(p) for p in args.reports]
    baseline = EvalReport.load(args.baseline) if args.baseline else None
    table = render_table(([baseline] if baseline else []) + reports)
    sys.stdout.write(table)
    if args.output:
        _write_text(args.output, table)
    if args.chart_csv:
        if baseline is None:
            raise UsageError("rankdistill report: --chart-csv needs --baseline")
        _write_text(args.chart_csv, chart_csv(compare_chart_data(reports[0], baseline)))


def cmd_experiment(args):
    spec_data = {}
    if args.spec:
        try:
            spec_data = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"spec file not found: {args.spec}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{args.spec}: invalid JSON ({exc.msg})") from None
    for key in ("n_docs", "n_train_queries", "n_eval_queries", "k0", "k"):
        if getattr(args, key) is not None:
            spec_data[key] = getattr(args, key)
    try:
        spec = ExperimentSpec.from_json(spec_data).with_seed(args.seed)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"rankdistill experiment: bad spec ({exc})") from None
    result = run_distillation_experiment(spec, args.output, args.threads)
    sys.stdout.write(result.table())
    taus = ", ".join(f"{k} {v:.4f}" for k, v in result.kendall.items())
    print(f"kendall tau vs teacher: {taus}")
    print(f"artifacts -> {args.output}")


def cmd_bench_throughput(args):
    queries = _queries(args)
    first = read_run(args.run)
    reranker, corpus = _reranker(args, queries)
    if corpus is None and args.checkpoint:
        corpus = reranker.provider.corpus
    requests = [RerankRequest(q, first[q.query_id], args.k) for q in queries if q.query_id in first and len(first[q.query_id])]
    if not requests:
        raise DataError("no queries with candidates to rerank")
    measured = measure_throughput(reranker, requests)
    rows = [measured, *(read_throughput_rows(args.reference) if args.reference else REFERENCE_THROUGHPUT)]
    sys.stdout.write(throughput_table(rows))
    if args.output:
        payload = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(r).items()} for r in rows]
        _write_text(args.output, json.dumps(payload, indent=2) + "\n")


COMMANDS = {
    "index": cmd_index,
    "retrieve": cmd_retrieve,
    "mine": cmd_mine,
    "teacher-score": cmd_teacher_score,
    "train": cmd_train,
    "rerank": cmd_rerank,
    "eval": cmd_eval,
    "report": cmd_report,
    "experiment": cmd_experiment,
    "bench-throughput": cmd_bench_throughput,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RankDistillError, ValueError, RuntimeError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
