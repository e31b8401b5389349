"""Feature-based student reranker.

A small tanh MLP (F -> H -> H -> 1) scores query-document feature vectors.
Forward and backward passes are written out by hand so gradients can be
checked against finite differences.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Protocol

import numpy as np

from .corpus import Corpus, Document, Query
from .errors import DataError, ParseError
from .retrieval import BM25Retriever, DenseRetriever, RankedList, SparseRetriever, tokenize

FEATURE_NAMES = (
    "bm25",
    "dense",
    "sparse",
    "overlap",
    "coverage",
    "log_doc_len",
    "log_query_len",
    "reciprocal_rank",
)
NUM_FEATURES = len(FEATURE_NAMES)
CHECKPOINT_VERSION = 1


def _features_from_tokens(query_tokens, doc_tokens, aux: Mapping[str, float] | None) -> np.ndarray:
    aux = aux or {}
    q_terms = set(query_tokens)
    shared = len(q_terms.intersection(doc_tokens))
    coverage = shared / len(q_terms) if q_terms else 0.0
    rank = aux.get("rank")
    return np.array(
        [
            float(aux.get("bm25", 0.0)),
            float(aux.get("dense", 0.0)),
            float(aux.get("sparse", 0.0)),
            float(shared),
            coverage,
            math.log1p(len(doc_tokens)),
            math.log1p(len(query_tokens)),
            1.0 / rank if rank else 0.0,
        ]
    )


def extract_features(query: Query, doc: Document, aux: Mapping[str, float] | None = None) -> np.ndarray:
    """Feature vector in ``FEATURE_NAMES`` order.

    ``aux`` may carry first-stage scores under ``bm25``, ``dense`` and ``sparse``
    plus the 1-based first-stage ``rank``; missing entries count as 0.
    """
    return _features_from_tokens(tokenize(query.text), tokenize(doc.full_text), aux)


class FeatureProvider:
    """Computes feature matrices for (query, candidates) with cached tokenization.

    Any of the three first-stage scorers may be ``None``; its feature is then 0.
    """

    def __init__(
        self,
        corpus: Corpus,
        queries: Sequence[Query] | Mapping[str, Query],
        bm25: BM25Retriever | None = None,
        dense: DenseRetriever | None = None,
        sparse: SparseRetriever | None = None,
    ):
        self.corpus = corpus
        if isinstance(queries, Mapping):
            self.queries = dict(queries)
        else:
            self.queries = {q.query_id: q for q in queries}
        self.bm25 = bm25
        self.dense = dense
        self.sparse = sparse
        self._doc_tokens: dict[str, tuple[frozenset, int]] = {}

    def query(self, query_id: str) -> Query:
        try:
            return self.queries[query_id]
        except KeyError:
            raise DataError(f"unknown query {query_id!r}") from None

    def _doc(self, doc_id: str) -> tuple[frozenset, int]:
        cached = self._doc_tokens.get(doc_id)
        if cached is None:
            if doc_id not in self.corpus:
                raise DataError(f"document {doc_id!r} not in corpus")
            toks = tokenize(self.corpus[doc_id].full_text)
            cached = (frozenset(toks), len(toks))
            self._doc_tokens[doc_id] = cached
        return cached

    def _first_stage(self, retriever, query: Query, doc_ids: Sequence[str]) -> np.ndarray:
        if retriever is None:
            return np.zeros(len(doc_ids))
        return retriever.score_docs(query, doc_ids)

    def features(self, query: Query | str, doc_ids: Sequence[str], ranks: Sequence[int] | None = None) -> np.ndarray:
        """Return an ``(len(doc_ids), F)`` matrix; ``ranks`` are 1-based first-stage ranks."""
        if isinstance(query, str):
            query = self.query(query)
        docs = [self._doc(d) for d in doc_ids]
        q_tokens = tokenize(query.text)
        q_terms = set(q_tokens)
        out = np.zeros((len(doc_ids), NUM_FEATURES))
        out[:, 0] = self._first_stage(self.bm25, query, doc_ids)
        out[:, 1] = self._first_stage(self.dense, query, doc_ids)
        out[:, 2] = self._first_stage(self.sparse, query, doc_ids)
        for i, (terms, length) in enumerate(docs):
            shared = len(q_terms & terms)
            out[i, 3] = shared
            out[i, 4] = shared / len(q_terms) if q_terms else 0.0
            out[i, 5] = math.log1p(length)
        out[:, 6] = math.log1p(len(q_tokens))
        if ranks is not None:
            r = np.asarray(ranks, dtype=np.float64)
            out[:, 7] = np.where(r > 0, 1.0 / np.where(r > 0, r, 1.0), 0.0)
        return out


# -- the MLP ---------------------------------------------------------------


@dataclass
class ScorerParams:
    """Weights of the F -> H -> H -> 1 tanh network.

    ``feature_mean``/``feature_scale`` standardize inputs and are fixed
    (not trained); the defaults leave inputs untouched.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    feature_mean: np.ndarray = None
    feature_scale: np.ndarray = None
    feature_names: tuple[str, ...] = FEATURE_NAMES
    tag: str = "mlp"

    _ORDER = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __post_init__(self):
        for name in self._ORDER:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.b3 = self.b3.reshape(1)
        f, h = self.w1.shape
        expected = {"b1": (h,), "w2": (h, h), "b2": (h,), "w3": (h,), "b3": (1,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.feature_mean is None:
            self.feature_mean = np.zeros(f)
        if self.feature_scale is None:
            self.feature_scale = np.ones(f)
        self.feature_mean = np.asarray(self.feature_mean, dtype=np.float64)
        self.feature_scale = np.asarray(self.feature_scale, dtype=np.float64)
        if self.feature_mean.shape != (f,) or self.feature_scale.shape != (f,):
            raise ValueError("feature normalization must have one entry per input feature")
        if np.any(self.feature_scale <= 0):
            raise ValueError("feature_scale entries must be positive")
        self.feature_names = tuple(self.feature_names)
        if len(self.feature_names) != f:
            raise ValueError(f"{len(self.feature_names)} feature names for {f} inputs")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def size(self) -> int:
        return sum(getattr(self, n).size for n in self._ORDER)

    @classmethod
    def zeros(cls, input_dim=NUM_FEATURES, hidden_dim=16, **kw) -> "ScorerParams":
        h = hidden_dim
        names = kw.pop("feature_names", FEATURE_NAMES if input_dim == NUM_FEATURES else tuple(f"x{i}" for i in range(input_dim)))
        return cls(
            np.zeros((input_dim, h)), np.zeros(h), np.zeros((h, h)), np.zeros(h), np.zeros(h), np.zeros(1),
            feature_names=names, **kw,
        )

    @classmethod
    def init(cls, input_dim=NUM_FEATURES, hidden_dim=16, seed=0, **kw) -> "ScorerParams":
        """Gaussian init with variance 1/fan_in, zero biases."""
        rng = np.random.default_rng(seed)
        p = cls.zeros(input_dim, hidden_dim, **kw)
        p.w1 = rng.normal(0.0, 1.0 / math.sqrt(input_dim), size=p.w1.shape)
        p.w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden_dim), size=p.w2.shape)
        p.w3 = rng.normal(0.0, 1.0 / math.sqrt(hidden_dim), size=p.w3.shape)
        return p

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in self._ORDER])

    def with_flat(self, vector: np.ndarray) -> "ScorerParams":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise ValueError(f"flat vector has shape {vector.shape}, expected ({self.size},)")
        parts = {}
        offset = 0
        for name in self._ORDER:
            shape = getattr(self, name).shape
            n = int(np.prod(shape))
            parts[name] = vector[offset : offset + n].reshape(shape).copy()
            offset += n
        return replace(self, **parts)

    def copy(self) -> "ScorerParams":
        return self.with_flat(self.flat())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))


def _check_inputs(params: ScorerParams, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"features have shape {np.shape(features)}, model expects {params.input_dim} columns")
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite feature values")
    return x


def _activations(params: ScorerParams, x: np.ndarray):
    z = (x - params.feature_mean) / params.feature_scale
    h1 = np.tanh(z @ params.w1 + params.b1)
    h2 = np.tanh(h1 @ params.w2 + params.b2)
    s = h2 @ params.w3 + params.b3[0]
    return z, h1, h2, s


def forward(params: ScorerParams, features) -> np.ndarray | float:
    """Score one feature vector (returns float) or a batch (returns array)."""
    single = np.ndim(features) == 1
    x = _check_inputs(params, features)
    s = _activations(params, x)[3]
    return float(s[0]) if single else s


def backward(params: ScorerParams, features, upstream) -> np.ndarray:
    """Flat gradient of ``sum_i upstream[i] * score_i`` w.r.t. all trainable parameters."""
    x = _check_inputs(params, features)
    g = np.asarray(upstream, dtype=np.float64).reshape(-1)
    if g.shape[0] != x.shape[0]:
        raise ValueError(f"{g.shape[0]} upstream gradients for {x.shape[0]} samples")
    z, h1, h2, _ = _activations(params, x)
    gw3 = h2.T @ g
    gb3 = np.array([g.sum()])
    d2 = np.outer(g, params.w3) * (1.0 - h2 * h2)
    gw2 = h1.T @ d2
    gb2 = d2.sum(axis=0)
    d1 = (d2 @ params.w2.T) * (1.0 - h1 * h1)
    gw1 = z.T @ d1
    gb1 = d1.sum(axis=0)
    return np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2, gw3, gb3])


def save_checkpoint(params: ScorerParams, path, metadata: Mapping | None = None) -> None:
    data = {
        "format_version": CHECKPOINT_VERSION,
        "tag": params.tag,
        "input_dim": params.input_dim,
        "hidden_dim": params.hidden_dim,
        "feature_names": list(params.feature_names),
        "feature_mean": params.feature_mean.tolist(),
        "feature_scale": params.feature_scale.tolist(),
        "params": {n: getattr(params, n).ravel().tolist() for n in ScorerParams._ORDER},
        "metadata": dict(metadata or {}),
    }
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> ScorerParams:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid checkpoint JSON ({exc.msg})", path) from None
    if data.get("format_version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {data.get('format_version')!r}", path)
    f, h = data["input_dim"], data["hidden_dim"]
    shapes = {"w1": (f, h), "b1": (h,), "w2": (h, h), "b2": (h,), "w3": (h,), "b3": (1,)}
    arrays = {n: np.asarray(data["params"][n], dtype=np.float64).reshape(s) for n, s in shapes.items()}
    return ScorerParams(
        **arrays,
        feature_mean=data["feature_mean"],
        feature_scale=data["feature_scale"],
        feature_names=tuple(data["feature_names"]),
        tag=data.get("tag", "mlp"),
    )


# -- reranking -------------------------------------------------------------


@dataclass(frozen=True)
class RerankRequest:
    query: Query
    candidates: RankedList
    k: int = 10

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")


class Reranker(Protocol):
    tag: str

    def score(self, query: Query, candidates: RankedList) -> np.ndarray: ...


class MLPReranker:
    def __init__(self, params: ScorerParams, provider: FeatureProvider, tag: str | None = None):
        self.params = params
        self.provider = provider
        self.tag = tag or params.tag

    def score(self, query: Query, candidates: RankedList) -> np.ndarray:
        x = self.provider.features(query, candidates.doc_ids, ranks=range(1, len(candidates) + 1))
        return forward(self.params, x)


class PassthroughReranker:
    """Keeps first-stage scores; output is the input list truncated to k."""

    tag = None

    def score(self, query: Query, candidates: RankedList) -> np.ndarray:
        return candidates.scores


class ScoreFnReranker:
    """Wrap any ``fn(query, doc_ids) -> scores`` as a reranker."""

    def __init__(self, fn: Callable[[Query, list[str]], Sequence[float]], tag: str):
        self.fn = fn
        self.tag = tag

    def score(self, query: Query, candidates: RankedList) -> np.ndarray:
        return np.asarray(self.fn(query, candidates.doc_ids), dtype=np.float64)


def oracle_reranker(qrels: Mapping[str, Mapping[str, int]], sign: float = 1.0, tag="oracle") -> ScoreFnReranker:
    """Scores equal to the judged grade (0 when unjudged); ``sign=-1`` gives the adversary."""

    def fn(query, doc_ids):
        grades = qrels.get(query.query_id, {})
        return [sign * grades.get(d, 0) for d in doc_ids]

    return ScoreFnReranker(fn, tag)


def rerank(reranker: Reranker, request: RerankRequest, corpus: Corpus | None = None) -> RankedList:
    """Score every candidate and return the top ``k`` (ties by ascending doc_id)."""
    cands = request.candidates
    if len(cands) == 0:
        raise ValueError(f"no candidates to rerank for query {request.query.query_id!r}")
    if corpus is not None:
        for doc_id in cands.doc_ids:
            if doc_id not in corpus:
                raise DataError(f"candidate {doc_id!r} for query {request.query.query_id!r} not in corpus")
    scores = np.asarray(reranker.score(request.query, cands), dtype=np.float64)
    if scores.shape != (len(cands),):
        raise ValueError(f"reranker returned {scores.shape} scores for {len(cands)} candidates")
    tag = reranker.tag or cands.source_tag
    return RankedList.from_scores(cands.query_id, cands.doc_ids, scores, request.k, tag)
