"""Retrieve-then-rerank orchestration and the closed-loop distillation experiment."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ._parallel import ordered_map
from .corpus import Dataset, cap_queries, load_dataset, save_corpus, save_qrels, save_queries
from .distillation import (
    DEFAULT_LIST_LENGTH,
    DEFAULT_PER_RETRIEVER_K,
    SyntheticTeacher,
    build_mse_set,
    build_permutation_set,
    mine_all,
    score_pools,
    teacher_order,
    write_pools,
    write_teacher_scores,
)
from .errors import DataError
from .evaluation import EvalReport, aggregate, evaluate_run, kendall_tau, render_table
from .reranker import FeatureProvider, MLPReranker, Reranker, RerankRequest, ScoreFnReranker, ScorerParams, rerank, save_checkpoint
from .retrieval import BM25Retriever, DenseRetriever, RankedList, Retriever, SparseRetriever, save_embeddings, save_sparse_weights, write_run
from .synthetic import CollectionParams, generate_collection
from .training import TrainConfig, TrainingSet, fit_feature_normalizer, train, write_loss_log, write_samples

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    k0: int = 100
    k: int = 10
    query_cap: int = 1000
    retriever: str = "dense"
    checkpoint: str | None = None
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.k < 1 or self.k0 < 1:
            raise ValueError("k and k0 must be positive")
        if self.k > self.k0:
            raise ValueError(f"k ({self.k}) must not exceed k0 ({self.k0})")
        if self.query_cap < 1:
            raise ValueError("query_cap must be >= 1")


def retrieve_all(retriever: Retriever, queries, k0: int, threads: int = 1) -> dict[str, RankedList]:
    lists = ordered_map(lambda q: retriever.retrieve(q, k0), queries, threads)
    return {r.query_id: r for r in lists}


def rerank_all(reranker: Reranker, queries, candidates: Mapping[str, RankedList], k: int, corpus=None, threads: int = 1) -> dict[str, RankedList]:
    todo = [q for q in queries if q.query_id in candidates and len(candidates[q.query_id])]
    lists = ordered_map(lambda q: rerank(reranker, RerankRequest(q, candidates[q.query_id], k), corpus), todo, threads)
    return {r.query_id: r for r in lists}


@dataclass
class BenchmarkResult:
    baseline: EvalReport
    models: dict[str, EvalReport]
    runs: dict[str, dict[str, dict[str, RankedList]]] = field(repr=False)

    def table(self) -> str:
        return render_table([self.baseline, *self.models.values()])


def run_benchmark(
    config: PipelineConfig,
    benchmark: Sequence[Dataset],
    retriever_for: Callable[[Dataset], Retriever],
    rerankers: Mapping[str, Callable[[Dataset], Reranker]],
    baseline_name: str = "retriever",
) -> BenchmarkResult:
    """Cap queries, retrieve top-k0, rerank to top-k and score NDCG@k for every dataset.

    The fixed first-stage run is also scored on its own as the baseline.
    """
    base_scores: dict[str, float] = {}
    model_scores: dict[str, dict[str, float]] = {name: {} for name in rerankers}
    groups = {}
    runs: dict[str, dict[str, dict[str, RankedList]]] = {}
    for ds in benchmark:
        try:
            capped = cap_queries(ds, config.query_cap)
            retriever = retriever_for(capped)
            first = retrieve_all(retriever, capped.queries, config.k0, config.threads)
            runs[ds.name] = {baseline_name: first}
            base_scores[ds.name] = evaluate_run(first, capped, config.k).mean
            for name, make in rerankers.items():
                out = rerank_all(make(capped), capped.queries, first, config.k, capped.corpus, config.threads)
                runs[ds.name][name] = out
                model_scores[name][ds.name] = evaluate_run(out, capped, config.k).mean
        except DataError as exc:
            raise DataError(f"dataset {ds.name!r}: {exc}") from exc
        groups[ds.name] = ds.group
    baseline = aggregate(base_scores, groups, model=baseline_name)
    models = {name: aggregate(scores, groups, baseline, model=name) for name, scores in model_scores.items()}
    return BenchmarkResult(baseline, models, runs)


# -- manifests -------------------------------------------------------------


def load_manifest(path) -> tuple[list[Dataset], dict]:
    """JSON manifest: ``{"datasets": [{name, group, corpus, queries, qrels}, ...], ...params}``.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    base = path.parent
    datasets = []
    for entry in data.get("datasets", []):
        try:
            datasets.append(
                load_dataset(
                    entry["name"],
                    base / entry["corpus"],
                    base / entry["queries"],
                    base / entry["qrels"] if entry.get("qrels") else None,
                    entry.get("group", "Other"),
                )
            )
        except KeyError as exc:
            raise DataError(f"{path}: dataset entry missing {exc.args[0]!r}") from None
    params = {k: v for k, v in data.items() if k != "datasets"}
    return datasets, params


# -- distillation experiment ----------------------------------------------


def _mse_student_config():
    return TrainConfig(epochs=10, batch_size=32, peak_lr=3e-3, schedule="linear_decay", seed=0)


def _ranknet_student_config():
    # twice the regression rate, as in the transformer recipes
    return TrainConfig(epochs=10, batch_size=32, peak_lr=6e-3, schedule="linear_decay", seed=0)


@dataclass(frozen=True)
class ExperimentSpec:
    n_docs: int = 10_000
    n_train_queries: int = 2_000
    n_eval_queries: int = 500
    vocab_size: int = 3_000
    n_topics: int = 60
    teacher_hidden: int = 32
    teacher_nonlinear_gain: float = 1.0
    teacher_offset_scale: float = 1.0
    teacher_temperature: float = 1.0
    teacher_probability: bool = True
    student_hidden: int = 16
    per_retriever_k: int = DEFAULT_PER_RETRIEVER_K
    list_length: int = DEFAULT_LIST_LENGTH
    k0: int = 100
    k: int = 10
    grade2_fraction: float = 0.05
    grade1_fraction: float = 0.10
    mse: TrainConfig = field(default_factory=_mse_student_config)
    ranknet: TrainConfig = field(default_factory=_ranknet_student_config)
    seed: int = 0

    def __post_init__(self):
        if self.n_train_queries < 1:
            raise ValueError("the experiment needs at least one training query")
        if self.n_eval_queries < 1:
            raise ValueError("the experiment needs at least one evaluation query")
        if self.n_docs < max(self.k0, self.per_retriever_k):
            raise ValueError("corpus smaller than the candidate depth")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: Mapping) -> "ExperimentSpec":
        data = dict(data)
        for key in ("mse", "ranknet"):
            if key in data and isinstance(data[key], Mapping):
                cfg = dict(data[key])
                if "betas" in cfg:
                    cfg["betas"] = tuple(cfg["betas"])
                data[key] = TrainConfig(**cfg)
        return cls(**data)

    def with_seed(self, seed: int) -> "ExperimentSpec":
        return replace(self, seed=seed, mse=replace(self.mse, seed=seed), ranknet=replace(self.ranknet, seed=seed))


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    ndcg: dict[str, float]
    kendall: dict[str, float]
    reports: dict[str, EvalReport]
    epoch_losses: dict[str, list[float]]
    runs: dict[str, dict[str, RankedList]] = field(repr=False)
    dataset: Dataset = field(repr=False)
    students: dict[str, ScorerParams] = field(repr=False)

    def table(self) -> str:
        order = ["retriever", "mse", "ranknet", "teacher"]
        return render_table([self.reports[n] for n in order if n in self.reports])

    def summary(self) -> dict:
        return {
            "seed": self.spec.seed,
            "ndcg@10": self.ndcg,
            "kendall_tau_vs_teacher": self.kendall,
            "epoch_losses": self.epoch_losses,
            "spec": self.spec.to_json(),
        }


def grade_by_teacher(scored: Mapping[str, float], grade2_fraction: float, grade1_fraction: float) -> dict[str, int]:
    """Quantile buckets of teacher score: top fraction -> 2, next -> 1, rest -> 0."""
    order = teacher_order(scored)
    m = len(order)
    n2 = max(1, math.ceil(grade2_fraction * m))
    n1 = math.ceil(grade1_fraction * m)
    return {d: (2 if i < n2 else 1 if i < n2 + n1 else 0) for i, d in enumerate(order)}


def _mean_tau(reranker_scores: Mapping[str, np.ndarray], teacher_scores: Mapping[str, np.ndarray]) -> float:
    taus = [kendall_tau(reranker_scores[q], teacher_scores[q]) for q in sorted(teacher_scores)]
    taus = [t for t in taus if not math.isnan(t)]
    return float(np.mean(taus)) if taus else float("nan")


def run_distillation_experiment(spec: ExperimentSpec, out_dir=None, threads: int = 1) -> ExperimentResult:
    """Synthetic teacher -> mined pools -> MSE and RankNet students -> held-out NDCG@k.

    Relevance on held-out queries is defined by the teacher itself (quantile
    grades over the dense top-k0), so the teacher is the attainable ceiling.
    """
    n_queries = spec.n_train_queries + spec.n_eval_queries
    coll = generate_collection(
        CollectionParams(
            n_docs=spec.n_docs, n_queries=n_queries, vocab_size=spec.vocab_size, n_topics=spec.n_topics, seed=spec.seed
        )
    )
    corpus = coll.corpus
    train_q = coll.queries[: spec.n_train_queries]
    eval_q = coll.queries[spec.n_train_queries :]
    bm25 = BM25Retriever.from_corpus(corpus)
    dense = DenseRetriever(coll.embeddings, corpus.ids)
    sparse = SparseRetriever(coll.sparse, corpus.ids)
    provider = FeatureProvider(corpus, coll.queries, bm25, dense, sparse)

    pools = mine_all(train_q, [bm25, dense, sparse], spec.per_retriever_k, threads)
    pool_map = {p.query_id: p for p in pools}

    probe = SyntheticTeacher.create(provider, coll.intents, np.ones((2, 9)), seed=spec.seed)
    ref = np.concatenate([probe.inputs(provider.query(p.query_id), p.doc_ids) for p in pools])
    teacher = SyntheticTeacher.create(
        provider, coll.intents, ref, seed=spec.seed, hidden_dim=spec.teacher_hidden,
        nonlinear_gain=spec.teacher_nonlinear_gain, offset_scale=spec.teacher_offset_scale,
        temperature=spec.teacher_temperature, probability=spec.teacher_probability,
    )
    scores = score_pools(teacher, train_q, pools, threads)
    order = [q.query_id for q in train_q]
    mse_set = build_mse_set(scores, order, pool_map)
    perm_set = build_permutation_set(scores, spec.list_length, order, pool_map)

    students = {}
    losses = {}
    logs = {}
    for name, samples, cfg in (("mse", mse_set, spec.mse), ("ranknet", perm_set, spec.ranknet)):
        data = TrainingSet(samples, provider)
        mean, scale = fit_feature_normalizer(data.feature_matrix())
        init = ScorerParams.init(hidden_dim=spec.student_hidden, seed=cfg.seed, feature_mean=mean, feature_scale=scale, tag=f"student-{name}")
        result = train(init, data, cfg)
        students[name] = result.params
        losses[name] = result.epoch_losses
        logs[name] = result.log

    # held-out evaluation over the dense first stage
    first = retrieve_all(dense, eval_q, spec.k0, threads)
    teacher_eval = {q.query_id: teacher.score(q, first[q.query_id].doc_ids) for q in eval_q}
    qrels = {
        q.query_id: grade_by_teacher(
            dict(zip(first[q.query_id].doc_ids, teacher_eval[q.query_id])), spec.grade2_fraction, spec.grade1_fraction
        )
        for q in eval_q
    }
    dataset = Dataset("synthetic-heldout", corpus, tuple(eval_q), qrels, group="Other")

    systems: dict[str, Reranker] = {
        "mse": MLPReranker(students["mse"], provider),
        "ranknet": MLPReranker(students["ranknet"], provider),
        "teacher": ScoreFnReranker(teacher.score, teacher.tag),
    }
    runs = {"retriever": {qid: r.truncate(spec.k) for qid, r in first.items()}}
    ndcg = {"retriever": evaluate_run(first, dataset, spec.k).mean}
    kendall = {}
    full_scores = {}
    for name, system in systems.items():
        runs[name] = rerank_all(system, eval_q, first, spec.k, corpus, threads)
        ndcg[name] = evaluate_run(runs[name], dataset, spec.k).mean
        if name != "teacher":
            full_scores[name] = {q.query_id: system.score(q, first[q.query_id]) for q in eval_q}
            kendall[name] = _mean_tau(full_scores[name], teacher_eval)
    groups = {dataset.name: dataset.group}
    baseline = aggregate({dataset.name: ndcg["retriever"]}, groups, model="retriever (dense)")
    reports = {"retriever": baseline}
    for name in systems:
        reports[name] = aggregate({dataset.name: ndcg[name]}, groups, baseline, model=name)

    result = ExperimentResult(spec, ndcg, kendall, reports, losses, runs, dataset, students)
    if out_dir is not None:
        _write_experiment(Path(out_dir), result, coll, train_q, eval_q, pools, scores, mse_set, perm_set, teacher, logs, first)
    return result


def _write_experiment(out, result, coll, train_q, eval_q, pools, scores, mse_set, perm_set, teacher, logs, first):
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(coll.corpus, out / "corpus.jsonl")
    save_queries(train_q, out / "queries-train.jsonl")
    save_queries(eval_q, out / "queries-eval.jsonl")
    save_qrels(result.dataset.qrels, out / "qrels-eval.tsv")
    save_embeddings(coll.embeddings, out / "embeddings.jsonl")
    save_sparse_weights(coll.sparse, out / "sparse.jsonl")
    write_pools(pools, out / "pools-train.jsonl")
    write_teacher_scores(scores, out / "teacher-scores.tsv")
    write_samples(mse_set, out / "train-mse.jsonl")
    write_samples(perm_set, out / "train-ranknet.jsonl")
    (out / "train-ranknet.meta.json").write_text(
        json.dumps({"list_length": result.spec.list_length, "queries": len(perm_set)}, indent=1) + "\n"
    )
    teacher.save(out / "teacher.json")
    for name, params in result.students.items():
        save_checkpoint(params, out / f"student-{name}.json", {"seed": result.spec.seed, "loss": name})
        write_loss_log(logs[name], out / f"loss-{name}.csv")
    write_run(first.values(), out / "run-retriever-k0.trec")
    for name, run in result.runs.items():
        write_run(run.values(), out / f"run-{name}.trec")
    for name, report in result.reports.items():
        report.save(out / f"report-{name}.json")
    (out / "table.txt").write_text(result.table(), encoding="utf-8")
    (out / "experiment.json").write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
