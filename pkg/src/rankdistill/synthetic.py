"""Seeded synthetic collections: documents, queries, dense vectors and sparse expansions.

Documents are drawn from a topic model over a made-up vocabulary. Each query
is written from a source document, so lexical, dense and sparse signals are
all informative but imperfect. The noise-free query intent vectors are kept
aside for teachers that should know more than any student can observe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, Document, Query
from .retrieval import EmbeddingTable, SparseExpansionModel


@dataclass(frozen=True)
class CollectionParams:
    n_docs: int = 10_000
    n_queries: int = 2_500
    vocab_size: int = 3_000
    n_topics: int = 60
    topic_words: int = 80
    dim: int = 32
    mean_doc_len: int = 40
    topic_share: float = 0.6
    doc_noise: float = 0.6
    query_noise: float = 0.8
    expansion_terms: int = 6
    seed: int = 0


@dataclass
class SyntheticCollection:
    corpus: Corpus
    queries: list[Query]
    embeddings: EmbeddingTable
    sparse: SparseExpansionModel
    source_doc: dict[str, str]
    intents: dict[str, np.ndarray]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def generate_collection(params: CollectionParams = CollectionParams()) -> SyntheticCollection:
    p = params
    rng = np.random.default_rng(p.seed)
    vocab = np.array([f"w{i:04d}" for i in range(p.vocab_size)])
    zipf = 1.0 / np.arange(1, p.vocab_size + 1) ** 1.05
    background = zipf / zipf.sum()
    background = background[rng.permutation(p.vocab_size)]

    topic_vocab = np.stack([rng.choice(p.vocab_size, size=p.topic_words, replace=False) for _ in range(p.n_topics)])
    tw = 1.0 / np.arange(1, p.topic_words + 1) ** 0.8
    topic_weights = tw / tw.sum()
    topic_vec = _unit(rng.standard_normal((p.n_topics, p.dim)))

    docs = []
    doc_vecs = np.empty((p.n_docs, p.dim))
    doc_tokens = []
    doc_topic = rng.integers(0, p.n_topics, size=p.n_docs)
    for i in range(p.n_docs):
        t = doc_topic[i]
        length = max(5, int(rng.poisson(p.mean_doc_len)))
        from_topic = rng.random(length) < p.topic_share
        toks = np.where(
            from_topic,
            topic_vocab[t][rng.choice(p.topic_words, size=length, p=topic_weights)],
            rng.choice(p.vocab_size, size=length, p=background),
        )
        doc_tokens.append(toks)
        title = " ".join(vocab[topic_vocab[t][rng.choice(p.topic_words, size=3, p=topic_weights)]])
        docs.append(Document(f"d{i:05d}", " ".join(vocab[toks]), title))
        # a private direction per doc keeps near-duplicates apart in dense space
        doc_vecs[i] = topic_vec[t] + p.doc_noise * rng.standard_normal(p.dim) / np.sqrt(p.dim) * 3.0
    doc_vecs = _unit(doc_vecs)

    vectors = {}
    weights = {}
    for i, doc in enumerate(docs):
        vectors[doc.doc_id] = doc_vecs[i]
        weights[doc.doc_id] = _sparse_weights(rng, doc_tokens[i], topic_vocab[doc_topic[i]], vocab, p.expansion_terms)

    queries = []
    source = {}
    intents = {}
    for j in range(p.n_queries):
        src = int(rng.integers(p.n_docs))
        t = doc_topic[src]
        n_terms = int(rng.integers(2, 7))
        n_from_doc = int(rng.integers(1, n_terms + 1))
        from_doc = rng.choice(doc_tokens[src], size=n_from_doc)
        from_topic = topic_vocab[t][rng.choice(p.topic_words, size=n_terms - n_from_doc, p=topic_weights)]
        toks = np.concatenate([from_doc, from_topic])
        qid = f"q{j:05d}"
        queries.append(Query(qid, " ".join(vocab[toks])))
        source[qid] = docs[src].doc_id
        intent = doc_vecs[src] + 0.3 * topic_vec[t]
        intents[qid] = _unit(intent)
        vectors[qid] = _unit(intent + p.query_noise * rng.standard_normal(p.dim) / np.sqrt(p.dim) * 3.0)
        weights[qid] = _sparse_weights(rng, toks, topic_vocab[t], vocab, p.expansion_terms // 2)

    return SyntheticCollection(
        corpus=Corpus(docs),
        queries=queries,
        embeddings=EmbeddingTable(vectors),
        sparse=SparseExpansionModel(weights),
        source_doc=source,
        intents=intents,
    )


def _sparse_weights(rng, tokens, topic_terms, vocab, n_expand) -> dict[str, float]:
    terms, counts = np.unique(tokens, return_counts=True)
    weights = {str(vocab[t]): float(np.log1p(c)) for t, c in zip(terms, counts)}
    for t in rng.choice(topic_terms, size=n_expand, replace=False):
        key = str(vocab[t])
        weights[key] = weights.get(key, 0.0) + float(0.5 * rng.random())
    return weights
