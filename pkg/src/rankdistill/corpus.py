"""Corpora, query sets and relevance judgments in BEIR layout.

Corpus and queries are JSON-lines files (``_id``, ``title``, ``text``),
qrels are a TSV with the header ``query-id	corpus-id	score``.
"""

from __future__ import annotations

import csv
import json
import logging
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import IntegrityError, ParseError

logger = logging.getLogger(__name__)

GROUPS = ("PolEval", "WebDS", "BEIR", "MAUPQA", "Other")

QRELS_HEADER = ("query-id", "corpus-id", "score")


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    title: str = ""

    def __post_init__(self):
        if not self.doc_id:
            raise IntegrityError("document id must be non-empty")
        if not self.text and not self.title:
            raise IntegrityError(f"document {self.doc_id!r} has neither text nor title")

    @property
    def full_text(self) -> str:
        if self.title and self.text:
            return f"{self.title} {self.text}"
        return self.title or self.text


@dataclass(frozen=True)
class Query:
    query_id: str
    text: str

    def __post_init__(self):
        if not self.query_id:
            raise IntegrityError("query id must be non-empty")


class Corpus(Mapping):
    """Immutable, insertion-ordered ``doc_id -> Document`` mapping."""

    def __init__(self, documents: Iterable[Document] = ()):
        docs: dict[str, Document] = {}
        for doc in documents:
            if doc.doc_id in docs:
                raise IntegrityError(f"duplicate document id {doc.doc_id!r}")
            docs[doc.doc_id] = doc
        self._docs = docs
        self._ids = tuple(docs)

    def __getitem__(self, doc_id: str) -> Document:
        return self._docs[doc_id]

    def __iter__(self) -> Iterator[str]:
        return iter(self._ids)

    def __len__(self) -> int:
        return len(self._ids)

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return self._ids == other._ids and self._docs == other._docs

    def __hash__(self):
        return hash(self._ids)

    def __repr__(self):
        return f"Corpus({len(self)} documents)"

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    def documents(self) -> list[Document]:
        return [self._docs[i] for i in self._ids]


Qrels = dict[str, dict[str, int]]


@dataclass(frozen=True)
class Dataset:
    name: str
    corpus: Corpus
    queries: tuple[Query, ...]
    qrels: Qrels = field(default_factory=dict, compare=False)
    group: str = "Other"

    def __post_init__(self):
        object.__setattr__(self, "queries", tuple(self.queries))

    def validate(self) -> "Dataset":
        """Check qrels against corpus and queries; return self for chaining."""
        query_ids = set()
        for q in self.queries:
            if q.query_id in query_ids:
                raise IntegrityError(f"{self.name}: duplicate query id {q.query_id!r}")
            query_ids.add(q.query_id)
        for qid, judged in self.qrels.items():
            if qid not in query_ids:
                raise IntegrityError(f"{self.name}: judged query {qid!r} not in query set")
            for doc_id, grade in judged.items():
                if doc_id not in self.corpus:
                    raise IntegrityError(
                        f"{self.name}: judged document {doc_id!r} (query {qid!r}) not in corpus"
                    )
                if grade < 0:
                    raise IntegrityError(f"{self.name}: negative grade for ({qid}, {doc_id})")
        return self

    def query_map(self) -> dict[str, Query]:
        return {q.query_id: q for q in self.queries}


def cap_queries(dataset: Dataset, limit: int) -> Dataset:
    """Keep the first ``limit`` queries in file order. Qrels are left as they are."""
    if limit < 1:
        raise ValueError(f"query limit must be >= 1, got {limit}")
    if len(dataset.queries) <= limit:
        return dataset
    return replace(dataset, queries=dataset.queries[:limit])


def _read_jsonl(path) -> Iterator[tuple[int, dict]]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", path, lineno) from None
            if not isinstance(record, dict):
                raise ParseError("expected a JSON object", path, lineno)
            yield lineno, record


def _string_field(record, key, path, lineno, required=True) -> str:
    value = record.get(key)
    if value is None:
        if required:
            raise ParseError(f"missing field {key!r}", path, lineno)
        return ""
    if not isinstance(value, str):
        raise ParseError(f"field {key!r} must be a string", path, lineno)
    return value


def load_corpus(path) -> Corpus:
    docs = []
    seen = set()
    for lineno, rec in _read_jsonl(path):
        doc_id = _string_field(rec, "_id", path, lineno)
        if doc_id in seen:
            raise IntegrityError(f"{path}:{lineno}: duplicate document id {doc_id!r}")
        seen.add(doc_id)
        text = _string_field(rec, "text", path, lineno, required=False)
        title = _string_field(rec, "title", path, lineno, required=False)
        try:
            docs.append(Document(doc_id=doc_id, text=text, title=title))
        except IntegrityError as exc:
            raise IntegrityError(f"{path}:{lineno}: {exc}") from None
    return Corpus(docs)


def save_corpus(corpus: Iterable[Document] | Corpus, path) -> None:
    docs = corpus.documents() if isinstance(corpus, Corpus) else corpus
    with Path(path).open("w", encoding="utf-8") as f:
        for doc in docs:
            rec = {"_id": doc.doc_id, "title": doc.title, "text": doc.text}
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_queries(path) -> list[Query]:
    queries = []
    seen = set()
    for lineno, rec in _read_jsonl(path):
        qid = _string_field(rec, "_id", path, lineno)
        if qid in seen:
            raise IntegrityError(f"{path}:{lineno}: duplicate query id {qid!r}")
        seen.add(qid)
        queries.append(Query(qid, _string_field(rec, "text", path, lineno)))
    return queries


def save_queries(queries: Iterable[Query], path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for q in queries:
            f.write(json.dumps({"_id": q.query_id, "text": q.text}, ensure_ascii=False) + "\n")


def load_qrels(path) -> Qrels:
    """Read a BEIR qrels TSV. Later duplicate (query, doc) rows win, with a warning."""
    qrels: Qrels = {}
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f, delimiter="\t")
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if lineno == 1 and tuple(c.strip() for c in row[:3]) == QRELS_HEADER:
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 columns, got {len(row)}", path, lineno)
            qid, doc_id, raw = (c.strip() for c in row)
            try:
                grade = int(raw)
            except ValueError:
                raise ParseError(f"non-integer grade {raw!r}", path, lineno) from None
            if grade < 0:
                raise IntegrityError(f"{path}:{lineno}: negative grade {grade} for ({qid}, {doc_id})")
            judged = qrels.setdefault(qid, {})
            if doc_id in judged:
                logger.warning(
                    "%s:%d: duplicate judgment for (%s, %s); %d replaces %d",
                    path, lineno, qid, doc_id, grade, judged[doc_id],
                )
            judged[doc_id] = grade
    return qrels


def save_qrels(qrels: Mapping[str, Mapping[str, int]], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as f:
        f.write("\t".join(QRELS_HEADER) + "\n")
        for qid, judged in qrels.items():
            for doc_id, grade in judged.items():
                f.write(f"{qid}\t{doc_id}\t{int(grade)}\n")


def load_dataset(name, corpus_path, queries_path, qrels_path=None, group="Other") -> Dataset:
    qrels = load_qrels(qrels_path) if qrels_path else {}
    ds = Dataset(
        name=name,
        corpus=load_corpus(corpus_path),
        queries=tuple(load_queries(queries_path)),
        qrels=qrels,
        group=group,
    )
    return ds.validate()
