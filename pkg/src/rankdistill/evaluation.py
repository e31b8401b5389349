"""NDCG@k scoring, benchmark aggregation, comparison tables and throughput timing."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .corpus import GROUPS, Dataset
from .errors import DataError
from .retrieval import RankedList

GAINS = ("linear", "exponential")


def _gain(grade: float, mode: str) -> float:
    if mode == "linear":
        return float(grade)
    if mode == "exponential":
        return 2.0**grade - 1.0
    raise ValueError(f"unknown gain mode {mode!r}")


def dcg_at_k(ranking: Sequence[str], grades: Mapping[str, int], k: int, gain: str = "linear") -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    total = 0.0
    for i, doc_id in enumerate(ranking[:k]):
        g = grades.get(doc_id, 0)
        if g:
            total += _gain(g, gain) / math.log2(i + 2)
    return total


def ideal_dcg(grades: Mapping[str, int], k: int, gain: str = "linear") -> float:
    best = sorted((g for g in grades.values() if g > 0), reverse=True)[:k]
    return sum(_gain(g, gain) / math.log2(i + 2) for i, g in enumerate(best))


def ndcg_at_k(ranking: Sequence[str], grades: Mapping[str, int], k: int, gain: str = "linear") -> float:
    """DCG normalized by the ideal ordering of the judged documents; 0 if nothing is relevant."""
    ideal = ideal_dcg(grades, k, gain)
    if ideal == 0.0:
        return 0.0
    return dcg_at_k(ranking, grades, k, gain) / ideal


def is_evaluable(grades: Mapping[str, int] | None) -> bool:
    return bool(grades) and any(g > 0 for g in grades.values())


@dataclass
class RunEvaluation:
    per_query: dict[str, float]
    mean: float
    k: int

    @property
    def evaluated(self) -> int:
        return len(self.per_query)


def evaluate_run(
    run: Mapping[str, RankedList | Sequence[str]],
    dataset: Dataset,
    k: int = 10,
    gain: str = "linear",
) -> RunEvaluation:
    """Mean NDCG@k over the dataset's queries that have a positive judgment.

    A judged query missing from ``run`` scores 0.
    """
    known = {q.query_id for q in dataset.queries}
    unknown = [qid for qid in run if qid not in known]
    if unknown:
        raise DataError(
            f"run references {len(unknown)} queries absent from dataset {dataset.name!r}, e.g. {unknown[0]!r}"
        )
    per_query = {}
    for q in dataset.queries:
        grades = dataset.qrels.get(q.query_id)
        if not is_evaluable(grades):
            continue
        ranked = run.get(q.query_id)
        if ranked is None:
            ranking = []
        elif isinstance(ranked, RankedList):
            ranking = ranked.doc_ids
        else:
            ranking = list(ranked)
        per_query[q.query_id] = ndcg_at_k(ranking, grades, k, gain)
    mean = float(np.mean(list(per_query.values()))) if per_query else 0.0
    return RunEvaluation(per_query, mean, k)


# -- aggregation -----------------------------------------------------------


@dataclass
class EvalReport:
    model: str
    per_dataset: dict[str, float]
    groups: dict[str, str]
    per_group: dict[str, float]
    overall: float
    baseline: str | None = None
    baseline_deltas: dict[str, float] = field(default_factory=dict)
    improved: list[str] = field(default_factory=list)
    group_deltas: dict[str, float] = field(default_factory=dict)
    overall_delta: float | None = None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: Mapping) -> "EvalReport":
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _group_order(groups: Iterable[str]) -> list[str]:
    present = set(groups)
    known = [g for g in GROUPS if g in present]
    return known + sorted(present - set(GROUPS))


def aggregate(
    per_dataset: Mapping[str, float],
    groups: Mapping[str, str],
    baseline: EvalReport | Mapping[str, float] | None = None,
    model: str = "model",
    baseline_name: str | None = None,
) -> EvalReport:
    """Unweighted per-group and overall means, plus deltas against ``baseline``.

    ``improved`` lists datasets where the model beats the baseline.
    """
    if not per_dataset:
        raise DataError("nothing to aggregate")
    missing = [d for d in per_dataset if d not in groups]
    if missing:
        raise DataError(f"dataset {missing[0]!r} has no group")
    names = sorted(per_dataset)
    members: dict[str, list[float]] = {}
    for name in names:
        members.setdefault(groups[name], []).append(per_dataset[name])
    per_group = {g: float(np.mean(members[g])) for g in _group_order(members)}
    overall = float(np.mean([per_dataset[n] for n in names]))
    report = EvalReport(
        model=model,
        per_dataset={n: float(per_dataset[n]) for n in names},
        groups={n: groups[n] for n in names},
        per_group=per_group,
        overall=overall,
    )
    if baseline is not None:
        if isinstance(baseline, EvalReport):
            base_values = baseline.per_dataset
            baseline_name = baseline_name or baseline.model
        else:
            base_values = baseline
        absent = [n for n in names if n not in base_values]
        if absent:
            raise DataError(f"baseline has no entry for dataset {absent[0]!r}")
        base = aggregate({n: base_values[n] for n in names}, groups, model=baseline_name or "baseline")
        report.baseline = base.model
        report.baseline_deltas = {n: per_dataset[n] - base_values[n] for n in names}
        report.improved = [n for n in names if per_dataset[n] > base_values[n]]
        report.group_deltas = {g: per_group[g] - base.per_group[g] for g in per_group}
        report.overall_delta = overall - base.overall
    return report


def render_table(reports: Sequence[EvalReport], scale: float = 100.0, marker: str = "+") -> str:
    """Aligned text table: model, average, one column per group.

    Cells where a model beats its baseline carry ``marker``.
    """
    group_cols = _group_order(g for r in reports for g in r.per_group)
    header = ["Model name", "Average", *group_cols]
    rows = [header]
    for r in reports:
        def cell(value, delta):
            if value is None:
                return "-"
            text = f"{value * scale:.2f}"
            if delta is not None and delta > 0:
                text += marker
            return text

        rows.append(
            [r.model, cell(r.overall, r.overall_delta)]
            + [cell(r.per_group.get(g), r.group_deltas.get(g)) for g in group_cols]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for j, row in enumerate(rows):
        parts = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append(" | ".join(parts).rstrip())
        if j == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ChartRow:
    dataset: str
    baseline: float
    model: float
    delta: float


def compare_chart_data(model: EvalReport, baseline: EvalReport) -> list[ChartRow]:
    """Per-dataset rows sorted ascending by improvement (ties by dataset name)."""
    if set(model.per_dataset) != set(baseline.per_dataset):
        diff = sorted(set(model.per_dataset) ^ set(baseline.per_dataset))
        raise DataError(f"reports cover different datasets, e.g. {diff[0]!r}")
    rows = [
        ChartRow(name, baseline.per_dataset[name], model.per_dataset[name], model.per_dataset[name] - baseline.per_dataset[name])
        for name in model.per_dataset
    ]
    rows.sort(key=lambda r: (r.delta, r.dataset))
    return rows


def chart_csv(rows: Iterable[ChartRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "baseline", "model", "delta"])
    for r in rows:
        w.writerow([r.dataset, repr(r.baseline), repr(r.model), repr(r.delta)])
    return buf.getvalue()


# -- rank agreement --------------------------------------------------------


def kendall_tau(a: Sequence[float], b: Sequence[float]) -> float:
    """Kendall tau-b between two score vectors over the same items."""
    if len(a) < 2:
        return float("nan")
    tau = stats.kendalltau(a, b).statistic
    return float(tau)


# -- throughput ------------------------------------------------------------


@dataclass(frozen=True)
class ThroughputReport:
    model: str
    queries_processed: int
    wall_seconds: float
    qps: float
    reference: bool = False
    note: str = ""

    @classmethod
    def measured(cls, model: str, queries: int, seconds: float) -> "ThroughputReport":
        if seconds <= 0:
            raise ValueError("wall time must be positive")
        return cls(model, queries, seconds, queries / seconds)

    @classmethod
    def reference_row(cls, model: str, qps: float, note: str = "") -> "ThroughputReport":
        """A published figure with no raw counts; kept for side-by-side display."""
        return cls(model, 0, float("nan"), qps, reference=True, note=note)


# Published single-GPU (A6000) evaluation throughput of the 13B teacher and two distilled students.
REFERENCE_THROUGHPUT = (
    ThroughputReport.reference_row("mt5-13b-mmarco-100k (teacher)", 0.15, "A6000 GPU"),
    ThroughputReport.reference_row("polish-roberta-large-v2", 5.0, "A6000 GPU"),
    ThroughputReport.reference_row("polish-roberta-base-v2", 8.4, "A6000 GPU"),
)


def measure_throughput(
    reranker,
    requests: Sequence,
    rerank_fn: Callable | None = None,
    clock: Callable[[], float] = time.perf_counter,
) -> ThroughputReport:
    """Time only the rerank calls over ``requests`` and report queries per second."""
    from .reranker import rerank

    requests = list(requests)
    if not requests:
        raise ValueError("throughput needs at least one request")
    fn = rerank_fn or rerank
    elapsed = 0.0
    for req in requests:
        start = clock()
        fn(reranker, req)
        elapsed += clock() - start
    elapsed = max(elapsed, 1e-12)
    return ThroughputReport.measured(getattr(reranker, "tag", None) or "reranker", len(requests), elapsed)


def read_throughput_rows(path) -> list[ThroughputReport]:
    """Load comparison rows from a CSV with columns ``model,qps[,note]``."""
    rows = []
    with Path(path).open("r", encoding="utf-8", newline="") as f:
        for rec in csv.DictReader(f):
            try:
                qps = float(rec["qps"])
            except (KeyError, ValueError):
                raise DataError(f"{path}: throughput rows need a numeric 'qps' column") from None
            rows.append(ThroughputReport.reference_row(rec["model"], qps, rec.get("note") or ""))
    return rows


def throughput_table(rows: Sequence[ThroughputReport]) -> str:
    lines = [f"{'model':<36} {'queries':>8} {'seconds':>10} {'qps':>10}  source"]
    for r in rows:
        q = "-" if r.reference else str(r.queries_processed)
        s = "-" if r.reference else f"{r.wall_seconds:.4f}"
        src = f"reference ({r.note})" if r.reference and r.note else ("reference" if r.reference else "measured")
        lines.append(f"{r.model:<36} {q:>8} {s:>10} {r.qps:>10.2f}  {src}")
    return "\n".join(lines) + "\n"
