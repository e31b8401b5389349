"""First-stage retrievers: BM25 over an inverted index, exact dense scan, sparse expansion.

All three expose ``retrieve(query, k0) -> RankedList`` and ``score_pair(query, doc_id)``.
Ranked lists are ordered by score descending with ties broken by ascending doc_id.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import sparse

from .corpus import Corpus, Query
from .errors import DataError, IntegrityError, ParseError

_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on anything that is not a Unicode letter or digit."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class RankedList:
    query_id: str
    entries: tuple[tuple[str, float], ...]
    source_tag: str = ""

    def __post_init__(self):
        entries = tuple((str(d), float(s)) for d, s in self.entries)
        object.__setattr__(self, "entries", entries)
        seen = set()
        for i, (doc_id, score) in enumerate(entries):
            if doc_id in seen:
                raise IntegrityError(f"duplicate doc {doc_id!r} in ranked list for {self.query_id!r}")
            seen.add(doc_id)
            if i and _sort_key(entries[i - 1]) > _sort_key((doc_id, score)):
                raise IntegrityError(f"ranked list for {self.query_id!r} is not in canonical order")

    @classmethod
    def from_scores(cls, query_id, doc_ids: Sequence[str], scores, k=None, source_tag=""):
        """Sort ``(doc_id, score)`` pairs canonically and keep the top ``k``."""
        pairs = sorted(zip(doc_ids, (float(s) for s in scores)), key=_sort_key)
        if k is not None:
            pairs = pairs[:k]
        return cls(query_id, tuple(pairs), source_tag)

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.entries]

    @property
    def scores(self) -> np.ndarray:
        return np.array([s for _, s in self.entries], dtype=np.float64)

    def __len__(self):
        return len(self.entries)

    def truncate(self, k: int) -> "RankedList":
        return RankedList(self.query_id, self.entries[:k], self.source_tag)


def _sort_key(entry):
    return (-entry[1], entry[0])


def top_k_order(scores: np.ndarray, id_rank: np.ndarray, k: int) -> np.ndarray:
    """Indices of the top ``k`` scores, ties resolved by ``id_rank`` (lower first)."""
    n = len(scores)
    k = min(k, n)
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    if k < n:
        kth = np.partition(scores, n - k)[n - k]
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((id_rank[cand], -scores[cand]))
    return cand[order[:k]]


class Retriever(Protocol):
    tag: str

    def retrieve(self, query: Query, k0: int) -> RankedList: ...

    def score_pair(self, query: Query, doc_id: str) -> float: ...


def retrieve_topk(retriever: Retriever, query: Query, k0: int) -> RankedList:
    if k0 < 1:
        raise ValueError(f"k0 must be positive, got {k0}")
    return retriever.retrieve(query, k0)


class _ScanRetriever:
    """Shared top-k plumbing for retrievers that score every document at once."""

    tag = "scan"

    def __init__(self, doc_ids: Sequence[str]):
        self.doc_ids = tuple(doc_ids)
        self._ordinal = {d: i for i, d in enumerate(self.doc_ids)}
        ranks = np.empty(len(self.doc_ids), dtype=np.int64)
        ranks[np.argsort(np.array(self.doc_ids, dtype=object), kind="stable")] = np.arange(len(self.doc_ids))
        self._id_rank = ranks

    def score_all(self, query: Query) -> np.ndarray:
        raise NotImplementedError

    def retrieve(self, query: Query, k0: int) -> RankedList:
        scores = self.score_all(query)
        idx = top_k_order(scores, self._id_rank, k0)
        entries = tuple((self.doc_ids[i], float(scores[i])) for i in idx)
        return RankedList(query.query_id, entries, self.tag)

    def ordinals(self, doc_ids: Sequence[str]) -> np.ndarray:
        try:
            return np.fromiter((self._ordinal[d] for d in doc_ids), dtype=np.int64, count=len(doc_ids))
        except KeyError as exc:
            raise DataError(f"document {exc.args[0]!r} unknown to {self.tag} retriever") from None

    def score_docs(self, query: Query, doc_ids: Sequence[str]) -> np.ndarray:
        """Scores for a subset of documents (same values as ``score_all`` up to rounding)."""
        return self.score_all(query)[self.ordinals(doc_ids)]

    def score_pair(self, query: Query, doc_id: str) -> float:
        return float(self.score_all(query)[self._ordinal[doc_id]])


# -- BM25 ------------------------------------------------------------------


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if self.k1 < 0:
            raise ValueError("k1 must be >= 0")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError("b must lie in [0, 1]")


@dataclass
class InvertedIndex:
    doc_ids: tuple[str, ...]
    postings: dict[str, tuple[np.ndarray, np.ndarray]]
    doc_lengths: np.ndarray
    doc_frequencies: dict[str, int] = field(init=False)
    avg_doc_length: float = field(init=False)

    def __post_init__(self):
        self.doc_lengths = np.asarray(self.doc_lengths, dtype=np.float64)
        self.doc_frequencies = {t: len(p[0]) for t, p in self.postings.items()}
        self.avg_doc_length = float(self.doc_lengths.mean()) if len(self.doc_lengths) else 0.0
        self._idf: dict[str, float] = {}

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    def idf(self, term: str) -> float:
        cached = self._idf.get(term)
        if cached is None:
            n = self.doc_count
            df = self.doc_frequencies.get(term, 0)
            cached = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
            self._idf[term] = cached
        return cached

    def term_frequency(self, term: str, ordinal: int) -> int:
        post = self.postings.get(term)
        if post is None:
            return 0
        docs, tfs = post
        i = np.searchsorted(docs, ordinal)
        if i < len(docs) and docs[i] == ordinal:
            return int(tfs[i])
        return 0

    def to_json(self) -> dict:
        return {
            "format_version": 1,
            "doc_ids": list(self.doc_ids),
            "doc_lengths": [int(x) for x in self.doc_lengths],
            "postings": {
                t: [[int(d), int(tf)] for d, tf in zip(docs, tfs)]
                for t, (docs, tfs) in self.postings.items()
            },
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "InvertedIndex":
        postings = {}
        for term, rows in data["postings"].items():
            arr = np.asarray(rows, dtype=np.int64).reshape(-1, 2)
            postings[term] = (arr[:, 0].copy(), arr[:, 1].copy())
        return cls(tuple(data["doc_ids"]), postings, np.asarray(data["doc_lengths"]))


def build_index(corpus: Corpus, tokenizer: Callable[[str], list[str]] = tokenize) -> InvertedIndex:
    """Index title and text of every document. Ordinals follow corpus order."""
    if len(corpus) == 0:
        raise DataError("cannot index an empty corpus")
    acc: dict[str, tuple[list[int], list[int]]] = {}
    lengths = []
    for ordinal, doc in enumerate(corpus.documents()):
        tokens = tokenizer(doc.full_text)
        lengths.append(len(tokens))
        for term, tf in Counter(tokens).items():
            docs, tfs = acc.setdefault(term, ([], []))
            docs.append(ordinal)
            tfs.append(tf)
    postings = {
        t: (np.asarray(d, dtype=np.int64), np.asarray(f, dtype=np.int64))
        for t, (d, f) in sorted(acc.items())
    }
    return InvertedIndex(corpus.ids, postings, np.asarray(lengths))


def save_index(index: InvertedIndex, path) -> None:
    Path(path).write_text(json.dumps(index.to_json(), sort_keys=True), encoding="utf-8")


def load_index(path) -> InvertedIndex:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid index JSON ({exc.msg})", path) from None
    return InvertedIndex.from_json(data)


def bm25_score(index: InvertedIndex, params: Bm25Params, query_terms: Sequence[str], ordinal: int) -> float:
    if not 0 <= ordinal < index.doc_count:
        raise IndexError(f"document ordinal {ordinal} out of range")
    k1, b = params.k1, params.b
    norm = 1.0 - b + b * index.doc_lengths[ordinal] / index.avg_doc_length if index.avg_doc_length else 1.0
    score = 0.0
    for term in query_terms:
        tf = index.term_frequency(term, ordinal)
        if tf == 0:
            continue
        score += index.idf(term) * (tf * (k1 + 1.0) / (tf + k1 * norm))
    return float(score)


class BM25Retriever(_ScanRetriever):
    tag = "bm25"

    def __init__(self, index: InvertedIndex, params: Bm25Params = Bm25Params(), tokenizer=tokenize):
        super().__init__(index.doc_ids)
        self.index = index
        self.params = params
        self.tokenizer = tokenizer
        if index.avg_doc_length:
            self._norm = 1.0 - params.b + params.b * index.doc_lengths / index.avg_doc_length
        else:
            self._norm = np.ones(index.doc_count)

    @classmethod
    def from_corpus(cls, corpus: Corpus, params: Bm25Params = Bm25Params()) -> "BM25Retriever":
        return cls(build_index(corpus), params)

    def score_terms(self, terms: Sequence[str]) -> np.ndarray:
        k1 = self.params.k1
        scores = np.zeros(self.index.doc_count)
        for term in terms:
            post = self.index.postings.get(term)
            if post is None:
                continue
            docs, tfs = post
            tf = tfs.astype(np.float64)
            scores[docs] += self.index.idf(term) * (tf * (k1 + 1.0) / (tf + k1 * self._norm[docs]))
        return scores

    def score_all(self, query: Query) -> np.ndarray:
        return self.score_terms(self.tokenizer(query.text))

    def score_docs(self, query: Query, doc_ids: Sequence[str]) -> np.ndarray:
        ords = self.ordinals(doc_ids)
        k1 = self.params.k1
        scores = np.zeros(len(ords))
        norm = self._norm[ords]
        for term in self.tokenizer(query.text):
            post = self.index.postings.get(term)
            if post is None:
                continue
            docs, tfs = post
            pos = np.minimum(np.searchsorted(docs, ords), len(docs) - 1)
            hit = docs[pos] == ords
            tf = np.where(hit, tfs[pos], 0).astype(np.float64)
            contrib = self.index.idf(term) * (tf * (k1 + 1.0) / (tf + k1 * norm))
            scores += np.where(hit, contrib, 0.0)
        return scores

    def score_pair(self, query: Query, doc_id: str) -> float:
        return bm25_score(self.index, self.params, self.tokenizer(query.text), self._ordinal[doc_id])


# -- dense -----------------------------------------------------------------


class EmbeddingTable:
    """Unit-normalized vectors keyed by document or query id."""

    def __init__(self, vectors: Mapping[str, Sequence[float]], dimension: int | None = None, tol=1e-6):
        table = {}
        for key, vec in vectors.items():
            arr = np.asarray(vec, dtype=np.float64)
            if dimension is None:
                dimension = arr.shape[0]
            if arr.shape != (dimension,):
                raise IntegrityError(f"vector {key!r} has shape {arr.shape}, expected ({dimension},)")
            norm = float(np.linalg.norm(arr))
            if abs(norm - 1.0) > tol:
                raise IntegrityError(f"vector {key!r} is not unit-normalized (norm {norm:.8f})")
            table[key] = arr
        self.dimension = dimension or 0
        self.vectors = table

    def __contains__(self, key):
        return key in self.vectors

    def __getitem__(self, key) -> np.ndarray:
        return self.vectors[key]

    def __len__(self):
        return len(self.vectors)

    def matrix(self, ids: Sequence[str]) -> np.ndarray:
        missing = [i for i in ids if i not in self.vectors]
        if missing:
            raise DataError(f"{len(missing)} ids have no embedding, e.g. {missing[0]!r}")
        if not ids:
            return np.zeros((0, self.dimension))
        return np.stack([self.vectors[i] for i in ids])


def load_embeddings(*paths) -> EmbeddingTable:
    vectors: dict[str, list[float]] = {}
    for path in paths:
        for lineno, rec in _iter_jsonl(path):
            key = rec.get("_id")
            vec = rec.get("vector")
            if not isinstance(key, str) or not isinstance(vec, list):
                raise ParseError("expected fields '_id' (string) and 'vector' (list)", path, lineno)
            if key in vectors:
                raise IntegrityError(f"{path}:{lineno}: duplicate embedding id {key!r}")
            vectors[key] = vec
    return EmbeddingTable(vectors)


def save_embeddings(table: EmbeddingTable | Mapping[str, Sequence[float]], path, ids=None) -> None:
    vectors = table.vectors if isinstance(table, EmbeddingTable) else table
    with Path(path).open("w", encoding="utf-8") as f:
        for key in ids if ids is not None else vectors:
            vec = [float(x) for x in vectors[key]]
            f.write(json.dumps({"_id": key, "vector": vec}) + "\n")


class DenseRetriever(_ScanRetriever):
    """Exact inner-product scan over unit vectors (cosine similarity)."""

    tag = "dense-cosine"

    def __init__(self, table: EmbeddingTable, doc_ids: Sequence[str]):
        super().__init__(doc_ids)
        self.table = table
        self._matrix = table.matrix(self.doc_ids)

    def _query_vector(self, query_id: str) -> np.ndarray:
        if query_id not in self.table:
            raise DataError(f"no embedding for query {query_id!r}")
        return self.table[query_id]

    def score_all(self, query: Query) -> np.ndarray:
        return self._matrix @ self._query_vector(query.query_id)

    def score_docs(self, query: Query, doc_ids: Sequence[str]) -> np.ndarray:
        return self._matrix[self.ordinals(doc_ids)] @ self._query_vector(query.query_id)

    def score_pair(self, query: Query, doc_id: str) -> float:
        return float(self._matrix[self._ordinal[doc_id]] @ self._query_vector(query.query_id))


def dense_topk(table: EmbeddingTable, query_id: str, k0: int, doc_ids: Sequence[str]) -> RankedList:
    return DenseRetriever(table, doc_ids).retrieve(Query(query_id, ""), k0)


# -- sparse expansion ------------------------------------------------------


class SparseExpansionModel:
    """Precomputed non-negative term weights for documents and queries."""

    def __init__(self, term_weights: Mapping[str, Mapping[str, float]]):
        table = {}
        for key, weights in term_weights.items():
            clean = {}
            for term, w in weights.items():
                w = float(w)
                if not math.isfinite(w) or w < 0:
                    raise IntegrityError(f"weight for {key!r}/{term!r} must be finite and >= 0, got {w}")
                clean[str(term)] = w
            table[key] = clean
        self.term_weights = table

    def __contains__(self, key):
        return key in self.term_weights

    def __getitem__(self, key) -> dict[str, float]:
        return self.term_weights[key]

    def __len__(self):
        return len(self.term_weights)


def load_sparse_weights(*paths) -> SparseExpansionModel:
    weights: dict[str, dict] = {}
    for path in paths:
        for lineno, rec in _iter_jsonl(path):
            key = rec.get("_id")
            w = rec.get("weights")
            if not isinstance(key, str) or not isinstance(w, dict):
                raise ParseError("expected fields '_id' (string) and 'weights' (object)", path, lineno)
            if key in weights:
                raise IntegrityError(f"{path}:{lineno}: duplicate sparse id {key!r}")
            weights[key] = w
    return SparseExpansionModel(weights)


def save_sparse_weights(model: SparseExpansionModel | Mapping, path, ids=None) -> None:
    table = model.term_weights if isinstance(model, SparseExpansionModel) else model
    with Path(path).open("w", encoding="utf-8") as f:
        for key in ids if ids is not None else table:
            f.write(json.dumps({"_id": key, "weights": table[key]}, sort_keys=True) + "\n")


class SparseRetriever(_ScanRetriever):
    tag = "sparse"

    def __init__(self, model: SparseExpansionModel, doc_ids: Sequence[str]):
        super().__init__(doc_ids)
        self.model = model
        vocab: dict[str, int] = {}
        rows, cols, vals = [], [], []
        for i, doc_id in enumerate(self.doc_ids):
            if doc_id not in model:
                raise DataError(f"no sparse weights for document {doc_id!r}")
            weights = model[doc_id]
            for term in sorted(weights):
                w = weights[term]
                rows.append(i)
                cols.append(vocab.setdefault(term, len(vocab)))
                vals.append(w)
        self._vocab = vocab
        self._matrix = sparse.csr_matrix(
            (vals, (rows, cols)), shape=(len(self.doc_ids), max(len(vocab), 1)), dtype=np.float64
        )

    def _query_weights(self, query_id: str) -> dict[str, float]:
        if query_id not in self.model:
            raise DataError(f"no sparse weights for query {query_id!r}")
        return self.model[query_id]

    def _query_vector(self, query_id: str) -> np.ndarray:
        qvec = np.zeros(self._matrix.shape[1])
        for term, w in self._query_weights(query_id).items():
            j = self._vocab.get(term)
            if j is not None:
                qvec[j] = w
        return qvec

    def score_all(self, query: Query) -> np.ndarray:
        return np.asarray(self._matrix @ self._query_vector(query.query_id)).ravel()

    def score_docs(self, query: Query, doc_ids: Sequence[str]) -> np.ndarray:
        sub = self._matrix[self.ordinals(doc_ids)]
        return np.asarray(sub @ self._query_vector(query.query_id)).ravel()

    def score_pair(self, query: Query, doc_id: str) -> float:
        if doc_id not in self._ordinal:
            raise KeyError(doc_id)
        qw = self._query_weights(query.query_id)
        dw = self.model[doc_id]
        return float(sum(qw[t] * dw[t] for t in sorted(qw) if t in dw))


def sparse_topk(model: SparseExpansionModel, query_id: str, k0: int, doc_ids: Sequence[str]) -> RankedList:
    return SparseRetriever(model, doc_ids).retrieve(Query(query_id, ""), k0)


# -- run files -------------------------------------------------------------


def format_run(runs: Iterable[RankedList], tag: str | None = None) -> str:
    lines = []
    for run in sorted(runs, key=lambda r: r.query_id):
        run_tag = tag or run.source_tag or "run"
        for rank, (doc_id, score) in enumerate(run.entries, start=1):
            lines.append(f"{run.query_id} Q0 {doc_id} {rank} {score!r} {run_tag}")
    return "\n".join(lines) + ("\n" if lines else "")


def write_run(runs: Iterable[RankedList], path, tag: str | None = None) -> None:
    """Write TREC run lines ``qid Q0 doc rank score tag``, queries sorted by id."""
    Path(path).write_text(format_run(runs, tag), encoding="utf-8")


def read_run(path) -> dict[str, RankedList]:
    """Parse a TREC run file. Entries are re-sorted by score (ties by doc_id)."""
    rows: dict[str, list[tuple[str, float]]] = {}
    tags: dict[str, str] = {}
    with Path(path).open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ParseError(f"expected 6 columns, got {len(parts)}", path, lineno)
            qid, _, doc_id, _rank, raw, tag = parts
            try:
                score = float(raw)
            except ValueError:
                raise ParseError(f"bad score {raw!r}", path, lineno) from None
            rows.setdefault(qid, []).append((doc_id, score))
            tags.setdefault(qid, tag)
    runs = {}
    for qid, entries in rows.items():
        if len({d for d, _ in entries}) != len(entries):
            raise IntegrityError(f"{path}: duplicate document in run for query {qid!r}")
        runs[qid] = RankedList(qid, tuple(sorted(entries, key=_sort_key)), tags[qid])
    return runs


def _iter_jsonl(path):
    with Path(path).open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", path, lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("expected a JSON object", path, lineno)
            yield lineno, rec
