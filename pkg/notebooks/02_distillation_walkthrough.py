# %% [markdown]
# # Distilling a teacher into small students
# Mine candidates from three retrievers, score them with a hidden teacher,
# then train one student on pointwise teacher scores (MSE) and one on
# teacher orderings (RankNet).

# %%
import numpy as np

from rankdistill.distillation import SyntheticTeacher, build_mse_set, build_permutation_set, mine_all, score_pools
from rankdistill.evaluation import kendall_tau
from rankdistill.reranker import FeatureProvider, ScorerParams, forward
from rankdistill.retrieval import BM25Retriever, DenseRetriever, SparseRetriever
from rankdistill.synthetic import CollectionParams, generate_collection
from rankdistill.training import TrainConfig, TrainingSet, fit_feature_normalizer, train

coll = generate_collection(CollectionParams(n_docs=3000, n_queries=600, seed=0))
train_q, eval_q = coll.queries[:500], coll.queries[500:]
bm25 = BM25Retriever.from_corpus(coll.corpus)
dense = DenseRetriever(coll.embeddings, coll.corpus.ids)
sparse = SparseRetriever(coll.sparse, coll.corpus.ids)
provider = FeatureProvider(coll.corpus, coll.queries, bm25, dense, sparse)

# %% [markdown]
# Candidate pools: top-16 from each retriever, merged. Overlap keeps most
# pools well under the 48 maximum.

# %%
pools = mine_all(train_q, [bm25, dense, sparse], 16)
sizes = np.array([len(p) for p in pools])
print("pool size min/mean/max:", sizes.min(), round(sizes.mean(), 1), sizes.max())

# %% [markdown]
# The teacher sees one signal no student can: similarity to the query's
# noise-free intent. It reports a probability, as a generative reranker would.

# %%
probe = SyntheticTeacher.create(provider, coll.intents, np.ones((2, 9)))
ref = np.concatenate([probe.inputs(provider.query(p.query_id), p.doc_ids) for p in pools])
teacher = SyntheticTeacher.create(provider, coll.intents, ref, seed=0, probability=True)
scores = score_pools(teacher, train_q, pools)
order = [q.query_id for q in train_q]
pool_map = {p.query_id: p for p in pools}
mse_set = build_mse_set(scores, order, pool_map)
perm_set = build_permutation_set(scores, 20, order, pool_map)
print(len(mse_set), "regression pairs;", len(perm_set), "teacher orderings of length <= 20")

# %%
students = {}
for name, samples, lr in (("mse", mse_set, 3e-3), ("ranknet", perm_set, 6e-3)):
    data = TrainingSet(samples, provider)
    mean, scale = fit_feature_normalizer(data.feature_matrix())
    init = ScorerParams.init(seed=0, feature_mean=mean, feature_scale=scale)
    res = train(init, data, TrainConfig(epochs=10, batch_size=32, peak_lr=lr, seed=0))
    students[name] = res.params
    print(name, "epoch losses:", " ".join(f"{x:.4f}" for x in res.epoch_losses))

# %% [markdown]
# Agreement with the teacher on held-out queries, over each query's dense top-100.

# %%
for name, params in students.items():
    taus = []
    for q in eval_q:
        ids = dense.retrieve(q, 100).doc_ids
        s = forward(params, provider.features(q, ids, ranks=range(1, 101)))
        taus.append(kendall_tau(s, teacher.score(q, ids)))
    print(f"{name:>8} kendall tau vs teacher: {np.mean(taus):.3f}")
