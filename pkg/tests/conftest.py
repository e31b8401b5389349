import numpy as np
import pytest

from rankdistill.corpus import Corpus, Dataset, Document, Query
from rankdistill.reranker import FeatureProvider
from rankdistill.retrieval import BM25Retriever, DenseRetriever, SparseRetriever
from rankdistill.synthetic import CollectionParams, generate_collection


@pytest.fixture(scope="session")
def small_collection():
    return generate_collection(CollectionParams(n_docs=300, n_queries=40, vocab_size=400, n_topics=8, seed=3))


@pytest.fixture(scope="session")
def small_stack(small_collection):
    c = small_collection
    bm25 = BM25Retriever.from_corpus(c.corpus)
    dense = DenseRetriever(c.embeddings, c.corpus.ids)
    sparse = SparseRetriever(c.sparse, c.corpus.ids)
    provider = FeatureProvider(c.corpus, c.queries, bm25, dense, sparse)
    return c, bm25, dense, sparse, provider


@pytest.fixture
def toy_corpus():
    return Corpus(
        [
            Document("d1", "the cat sat on the mat", "cats"),
            Document("d2", "dogs chase cats in the park"),
            Document("d3", "a quiet mat for a quiet cat"),
            Document("d4", "stock markets fell sharply today", "finance"),
            Document("d5", "the park was empty"),
        ]
    )


@pytest.fixture
def toy_dataset(toy_corpus):
    queries = (Query("q1", "cat mat"), Query("q2", "park dogs"), Query("q3", "markets"))
    qrels = {"q1": {"d1": 2, "d3": 1}, "q2": {"d2": 1}, "q3": {"d4": 1, "d5": 0}}
    return Dataset("toy", toy_corpus, queries, qrels, group="Other")


def unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
