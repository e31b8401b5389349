"""Teacher-student data pipeline.

Candidates are mined from several first-stage retrievers, merged, scored by a
teacher, and turned into regression (MSE) or permutation (RankNet) training sets.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from ._parallel import ordered_map
from .corpus import Query
from .errors import DataError, IntegrityError, ParseError
from .reranker import FeatureProvider, ScorerParams, forward
from .retrieval import RankedList, Retriever
from .training import BinaryPairSample, PermutationSample, RegressionPairSample

logger = logging.getLogger(__name__)

DEFAULT_PER_RETRIEVER_K = 16
DEFAULT_LIST_LENGTH = 20


@dataclass
class CandidatePool:
    """Deduplicated union of several retrievers' top-k lists for one query.

    ``sources[doc_id]`` maps retriever tag to that retriever's ``(rank, score)``.
    """

    query_id: str
    sources: dict[str, dict[str, tuple[int, float]]] = field(default_factory=dict)

    @property
    def doc_ids(self) -> list[str]:
        return sorted(self.sources)

    def best_rank(self, doc_id: str) -> int:
        return min(rank for rank, _ in self.sources[doc_id].values())

    def __len__(self):
        return len(self.sources)

    def __contains__(self, doc_id):
        return doc_id in self.sources

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "candidates": [
                {"doc_id": d, "sources": {t: [r, s] for t, (r, s) in sorted(self.sources[d].items())}}
                for d in self.doc_ids
            ],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "CandidatePool":
        pool = cls(data["query_id"])
        for cand in data["candidates"]:
            pool.sources[cand["doc_id"]] = {t: (int(r), float(s)) for t, (r, s) in cand["sources"].items()}
        return pool


def merge_lists(query_id: str, lists: Sequence[RankedList]) -> CandidatePool:
    pool = CandidatePool(query_id)
    for i, ranked in enumerate(lists):
        tag = ranked.source_tag or f"retriever{i}"
        if any(tag in s for s in pool.sources.values()):
            tag = f"{tag}#{i}"
        for rank, (doc_id, score) in enumerate(ranked.entries, start=1):
            pool.sources.setdefault(doc_id, {})[tag] = (rank, score)
    return pool


def mine_candidates(query: Query, retrievers: Sequence[Retriever], per_retriever_k: int = DEFAULT_PER_RETRIEVER_K) -> CandidatePool:
    if per_retriever_k < 1:
        raise ValueError("per_retriever_k must be >= 1")
    return merge_lists(query.query_id, [r.retrieve(query, per_retriever_k) for r in retrievers])


def mine_all(queries: Sequence[Query], retrievers, per_retriever_k=DEFAULT_PER_RETRIEVER_K, threads=1) -> list[CandidatePool]:
    return ordered_map(lambda q: mine_candidates(q, retrievers, per_retriever_k), queries, threads)


def write_pools(pools: Iterable[CandidatePool], path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for pool in sorted(pools, key=lambda p: p.query_id):
            f.write(json.dumps(pool.to_json(), sort_keys=True) + "\n")


def read_pools(path) -> list[CandidatePool]:
    pools = []
    with Path(path).open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                pools.append(CandidatePool.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad pool record ({exc})", path, lineno) from None
    return pools


# -- teachers --------------------------------------------------------------


class Teacher(Protocol):
    tag: str

    def score(self, query: Query, doc_ids: Sequence[str]) -> np.ndarray: ...


class TeacherError(DataError):
    pass


class FileTeacher:
    """Replays precomputed teacher scores; unknown pairs raise ``TeacherError``."""

    def __init__(self, scores: Mapping[str, Mapping[str, float]], tag: str = "file-teacher"):
        self.scores = scores
        self.tag = tag

    @classmethod
    def from_tsv(cls, path, tag=None) -> "FileTeacher":
        return cls(read_teacher_scores(path), tag or Path(path).stem)

    def score(self, query: Query, doc_ids: Sequence[str]) -> np.ndarray:
        known = self.scores.get(query.query_id, {})
        try:
            return np.array([known[d] for d in doc_ids], dtype=np.float64)
        except KeyError as exc:
            raise TeacherError(f"no teacher score for ({query.query_id}, {exc.args[0]})") from None


# Hand-set weights of the synthetic teacher's linear part over standardized inputs:
# the eight student features (FEATURE_NAMES order) followed by the hidden intent
# similarity. The first-stage rank is deliberately ignored.
SYNTHETIC_LINEAR_WEIGHTS = (0.5, 0.6, 0.4, 0.2, 0.4, -0.2, 0.0, 0.0, 1.2)


class SyntheticTeacher:
    """Hidden scorer for closed-loop experiments.

    logit = temperature * (linear(z) + nonlinear_gain * mlp(z)) + query_offset(query_id)

    where z stacks the standardized student features and one signal students
    never see: the similarity between the query's noise-free intent vector and
    the document embedding. With ``probability=True`` the teacher reports
    sigmoid(logit), like a reranker that emits the probability of a "relevant"
    token; otherwise the logit itself. Neither the per-query offset nor the
    squashing changes any within-query ordering.
    """

    def __init__(
        self,
        provider: FeatureProvider,
        intents: Mapping[str, Sequence[float]],
        mlp: ScorerParams,
        linear: Sequence[float] = SYNTHETIC_LINEAR_WEIGHTS,
        nonlinear_gain: float = 1.0,
        offset_scale: float = 1.0,
        seed: int = 0,
        tag: str = "synthetic-teacher",
        temperature: float = 1.0,
        probability: bool = False,
    ):
        if provider.dense is None:
            raise DataError("the synthetic teacher needs document embeddings")
        self.provider = provider
        self.intents = {k: np.asarray(v, dtype=np.float64) for k, v in intents.items()}
        self.mlp = mlp
        self.linear = np.asarray(linear, dtype=np.float64)
        if self.linear.shape != (mlp.input_dim,):
            raise ValueError("linear weights must match the teacher's input width")
        self.nonlinear_gain = float(nonlinear_gain)
        self.offset_scale = float(offset_scale)
        self.seed = int(seed)
        self.tag = tag
        self.temperature = float(temperature)
        self.probability = bool(probability)

    def inputs(self, query: Query, doc_ids: Sequence[str]) -> np.ndarray:
        x = self.provider.features(query, doc_ids)
        intent = self.intents.get(query.query_id)
        if intent is None:
            raise TeacherError(f"no intent vector for query {query.query_id!r}")
        docs = self.provider.dense.table.matrix(doc_ids)
        return np.column_stack([x, docs @ intent])

    @classmethod
    def create(cls, provider, intents, reference_inputs, seed=0, hidden_dim=32, **kw) -> "SyntheticTeacher":
        """Random MLP part, input standardization fitted on ``reference_inputs``."""
        from .training import fit_feature_normalizer

        mean, scale = fit_feature_normalizer(reference_inputs)
        width = reference_inputs.shape[1]
        mlp = ScorerParams.init(width, hidden_dim, seed=seed, feature_mean=mean, feature_scale=scale)
        mlp.w1[7, :] = 0.0
        return cls(provider, intents, mlp, seed=seed, **kw)

    def query_offset(self, query_id: str) -> float:
        if self.offset_scale == 0.0:
            return 0.0
        digest = hashlib.sha256(f"{self.seed}:{query_id}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return self.offset_scale * float(rng.standard_normal())

    def logits(self, query: Query, doc_ids: Sequence[str]) -> np.ndarray:
        x = self.inputs(query, doc_ids)
        z = (x - self.mlp.feature_mean) / self.mlp.feature_scale
        raw = z @ self.linear + self.nonlinear_gain * forward(self.mlp, x)
        return self.temperature * raw + self.query_offset(query.query_id)

    def score(self, query: Query, doc_ids: Sequence[str]) -> np.ndarray:
        logit = self.logits(query, doc_ids)
        if self.probability:
            return 0.5 * (1.0 + np.tanh(0.5 * logit))
        return logit

    def to_json(self) -> dict:
        p = self.mlp
        return {
            "kind": "synthetic-teacher",
            "tag": self.tag,
            "seed": self.seed,
            "linear": self.linear.tolist(),
            "nonlinear_gain": self.nonlinear_gain,
            "offset_scale": self.offset_scale,
            "temperature": self.temperature,
            "probability": self.probability,
            "input_dim": p.input_dim,
            "hidden_dim": p.hidden_dim,
            "feature_mean": p.feature_mean.tolist(),
            "feature_scale": p.feature_scale.tolist(),
            "params": p.flat().tolist(),
            "intents": {k: v.tolist() for k, v in sorted(self.intents.items())},
        }

    @classmethod
    def from_json(cls, data: Mapping, provider: FeatureProvider) -> "SyntheticTeacher":
        mlp = ScorerParams.zeros(
            data["input_dim"], data["hidden_dim"], feature_mean=data["feature_mean"], feature_scale=data["feature_scale"]
        ).with_flat(np.asarray(data["params"]))
        return cls(
            provider, data["intents"], mlp, data["linear"], data["nonlinear_gain"], data["offset_scale"],
            data["seed"], data["tag"], data.get("temperature", 1.0), data.get("probability", False),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, provider: FeatureProvider) -> "SyntheticTeacher":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")), provider)


# -- scoring ---------------------------------------------------------------


@dataclass
class TeacherScores:
    scores: dict[str, dict[str, float]]
    teacher_tag: str = "teacher"

    def __len__(self):
        return sum(len(v) for v in self.scores.values())


def score_pool(teacher: Teacher, query: Query, pool: CandidatePool) -> dict[str, float]:
    doc_ids = pool.doc_ids
    if not doc_ids:
        return {}
    values = np.asarray(teacher.score(query, doc_ids), dtype=np.float64)
    if values.shape != (len(doc_ids),):
        raise TeacherError(f"teacher returned {values.shape} scores for {len(doc_ids)} documents")
    if not np.all(np.isfinite(values)):
        raise TeacherError(f"teacher produced non-finite scores for query {query.query_id!r}")
    return {d: float(v) for d, v in zip(doc_ids, values)}


def score_pools(teacher: Teacher, queries: Sequence[Query], pools: Sequence[CandidatePool], threads=1) -> TeacherScores:
    """Score every pool; a query whose scoring fails is dropped and logged."""
    by_id = {q.query_id: q for q in queries}

    def work(pool):
        query = by_id.get(pool.query_id)
        if query is None:
            raise DataError(f"pool for unknown query {pool.query_id!r}")
        try:
            return pool.query_id, score_pool(teacher, query, pool)
        except TeacherError as exc:
            logger.warning("teacher failed on query %s: %s", pool.query_id, exc)
            return pool.query_id, None

    out = {}
    for qid, scored in ordered_map(work, pools, threads):
        if scored is not None:
            out[qid] = scored
    return TeacherScores(out, getattr(teacher, "tag", "teacher"))


def read_teacher_scores(path) -> dict[str, dict[str, float]]:
    """TSV ``query_id<TAB>doc_id<TAB>score``; a header row is optional."""
    scores: dict[str, dict[str, float]] = {}
    with Path(path).open("r", encoding="utf-8", newline="") as f:
        for lineno, row in enumerate(csv.reader(f, delimiter="\t"), start=1):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 columns, got {len(row)}", path, lineno)
            qid, doc_id, raw = row
            try:
                value = float(raw)
            except ValueError:
                if lineno == 1:
                    continue
                raise ParseError(f"bad score {raw!r}", path, lineno) from None
            if not math.isfinite(value):
                raise IntegrityError(f"{path}:{lineno}: non-finite teacher score")
            scores.setdefault(qid, {})[doc_id] = value
    return scores


def write_teacher_scores(scores: TeacherScores | Mapping, path) -> None:
    table = scores.scores if isinstance(scores, TeacherScores) else scores
    with Path(path).open("w", encoding="utf-8") as f:
        for qid in sorted(table):
            for doc_id in sorted(table[qid]):
                f.write(f"{qid}\t{doc_id}\t{table[qid][doc_id]!r}\n")


# -- training sets ---------------------------------------------------------


def _query_order(scores: TeacherScores, query_order: Sequence[str] | None) -> list[str]:
    if query_order is None:
        return sorted(scores.scores)
    return [q for q in query_order if q in scores.scores]


def _pool_rank(pools, qid, doc_id):
    if pools is None or qid not in pools:
        return None
    return pools[qid].best_rank(doc_id)


def build_mse_set(
    scores: TeacherScores,
    query_order: Sequence[str] | None = None,
    pools: Mapping[str, CandidatePool] | None = None,
) -> list[RegressionPairSample]:
    """One regression sample per scored pair, in query order then doc_id order."""
    if len(scores) == 0 and not scores.scores:
        raise DataError("no teacher scores")
    out = []
    for qid in _query_order(scores, query_order):
        scored = scores.scores[qid]
        if not scored:
            logger.warning("query %s has an empty pool; no regression samples", qid)
            continue
        for doc_id in sorted(scored):
            out.append(RegressionPairSample(qid, doc_id, scored[doc_id], _pool_rank(pools, qid, doc_id)))
    return out


def teacher_order(scored: Mapping[str, float]) -> list[str]:
    """Doc ids by teacher score descending, ties by ascending doc_id."""
    return [d for d, _ in sorted(scored.items(), key=lambda kv: (-kv[1], kv[0]))]


def build_permutation_set(
    scores: TeacherScores,
    list_length: int = DEFAULT_LIST_LENGTH,
    query_order: Sequence[str] | None = None,
    pools: Mapping[str, CandidatePool] | None = None,
) -> list[PermutationSample]:
    """Teacher-sorted lists truncated to ``list_length``; pools under 2 documents are skipped."""
    if list_length < 2:
        raise ValueError("list_length must be >= 2")
    out = []
    skipped = 0
    for qid in _query_order(scores, query_order):
        scored = scores.scores[qid]
        if len(scored) < 2:
            skipped += 1
            continue
        ordered = teacher_order(scored)[:list_length]
        ranks = None
        if pools is not None and qid in pools:
            ranks = tuple(pools[qid].best_rank(d) for d in ordered)
        out.append(PermutationSample(qid, tuple(ordered), ranks))
    if skipped:
        logger.warning("skipped %d queries with fewer than 2 scored candidates", skipped)
    return out


def build_bce_set(
    pools: Sequence[CandidatePool],
    qrels: Mapping[str, Mapping[str, int]],
    negatives_per_positive: int = 4,
    seed: int = 0,
) -> list[BinaryPairSample]:
    """Positives from qrels, hard negatives sampled from the query's own candidates.

    Negatives are pool members without a positive judgment; the draw is seeded.
    """
    rng = np.random.default_rng(seed)
    out = []
    for pool in sorted(pools, key=lambda p: p.query_id):
        judged = qrels.get(pool.query_id, {})
        positives = sorted(d for d, g in judged.items() if g > 0)
        if not positives:
            continue
        negatives = [d for d in pool.doc_ids if judged.get(d, 0) <= 0]
        for d in positives:
            rank = pool.best_rank(d) if d in pool else None
            out.append(BinaryPairSample(pool.query_id, d, 1, rank))
        n_neg = min(len(negatives), negatives_per_positive * len(positives))
        if n_neg:
            picks = rng.choice(len(negatives), size=n_neg, replace=False)
            for i in sorted(picks):
                d = negatives[i]
                out.append(BinaryPairSample(pool.query_id, d, 0, pool.best_rank(d)))
    return out
