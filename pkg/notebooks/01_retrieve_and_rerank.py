# %% [markdown]
# # Retrieve, then rerank
# A small synthetic collection, three first-stage retrievers and a few
# rerankers evaluated with NDCG@10 over a fixed top-100.

# %%
import numpy as np

from rankdistill.corpus import Dataset
from rankdistill.pipeline import PipelineConfig, run_benchmark
from rankdistill.reranker import FeatureProvider, MLPReranker, PassthroughReranker, ScorerParams, oracle_reranker
from rankdistill.retrieval import BM25Retriever, DenseRetriever, SparseRetriever
from rankdistill.synthetic import CollectionParams, generate_collection

coll = generate_collection(CollectionParams(n_docs=2000, n_queries=200, seed=1))
corpus = coll.corpus
print(len(corpus), "documents,", len(coll.queries), "queries")
print(coll.queries[0].text, "->", coll.source_doc[coll.queries[0].query_id])

# %%
bm25 = BM25Retriever.from_corpus(corpus)
dense = DenseRetriever(coll.embeddings, corpus.ids)
sparse = SparseRetriever(coll.sparse, corpus.ids)

q = coll.queries[0]
for r in (bm25, dense, sparse):
    top = r.retrieve(q, 5)
    print(f"{r.tag:>13}", top.doc_ids)

# %% [markdown]
# Judge each query by its source document (grade 2). Where does it land?

# %%
qrels = {q.query_id: {coll.source_doc[q.query_id]: 2} for q in coll.queries}
for r in (bm25, dense, sparse):
    ranks = []
    for q in coll.queries:
        ids = r.retrieve(q, 100).doc_ids
        src = coll.source_doc[q.query_id]
        ranks.append(ids.index(src) + 1 if src in ids else np.inf)
    ranks = np.array(ranks)
    print(f"{r.tag:>13}  found@100 {np.isfinite(ranks).mean():.2f}  median rank {np.median(ranks[np.isfinite(ranks)]):.0f}")

# %% [markdown]
# Benchmark with a fixed dense first stage. Passthrough must match the
# retriever exactly and the oracle is the ceiling. Queries here are written
# from their source document, so even a randomly initialized MLP over lexical
# features lifts the weak dense ranking.

# %%
halves = [
    Dataset("first-half", corpus, tuple(coll.queries[:100]), qrels, group="WebDS"),
    Dataset("second-half", corpus, tuple(coll.queries[100:]), qrels, group="Other"),
]
provider = FeatureProvider(corpus, coll.queries, bm25, dense, sparse)
result = run_benchmark(
    PipelineConfig(k0=100, k=10),
    halves,
    lambda ds: dense,
    {
        "passthrough": lambda ds: PassthroughReranker(),
        "oracle": lambda ds: oracle_reranker(ds.qrels),
        "untrained-mlp": lambda ds: MLPReranker(ScorerParams.init(seed=0), provider, tag="untrained"),
    },
)
print(result.table())
