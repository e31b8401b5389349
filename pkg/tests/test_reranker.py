import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rankdistill.corpus import Document, Query
from rankdistill.errors import DataError, ParseError
from rankdistill.reranker import (
    FEATURE_NAMES,
    MLPReranker,
    PassthroughReranker,
    RerankRequest,
    ScoreFnReranker,
    ScorerParams,
    backward,
    extract_features,
    forward,
    load_checkpoint,
    oracle_reranker,
    rerank,
    save_checkpoint,
)
from rankdistill.retrieval import RankedList

from gradcheck import mlp_instance


def test_features_by_hand():
    q = Query("q", "red apple red")
    d = Document("d", "an apple a day", "Green")
    x = extract_features(q, d, {"bm25": 1.5, "dense": 0.25, "rank": 4})
    assert dict(zip(FEATURE_NAMES, x)) == pytest.approx(
        {
            "bm25": 1.5,
            "dense": 0.25,
            "sparse": 0.0,
            "overlap": 1.0,
            "coverage": 0.5,
            "log_doc_len": math.log(6),
            "log_query_len": math.log(4),
            "reciprocal_rank": 0.25,
        }
    )


def test_provider_matches_extract_features(small_stack):
    c, bm25, dense, sparse, provider = small_stack
    q = c.queries[2]
    ids = list(c.corpus.ids[:9])
    x = provider.features(q, ids, ranks=range(1, 10))
    for i, d in enumerate(ids):
        aux = {"bm25": bm25.score_pair(q, d), "dense": dense.score_pair(q, d), "sparse": sparse.score_pair(q, d), "rank": i + 1}
        np.testing.assert_allclose(x[i], extract_features(q, c.corpus[d], aux), rtol=1e-12, atol=1e-12)
    with pytest.raises(DataError):
        provider.features(q, ["missing"])


def test_tanh_tanh_oracle():
    # one input, one hidden unit, unit weights: s = tanh(tanh(x))
    p = ScorerParams.zeros(1, 1, feature_names=("x",))
    p.w1[:] = 1.0
    p.w2[:] = 1.0
    p.w3[:] = 1.0
    for x in (-2.0, -0.3, 0.0, 0.7, 3.0):
        assert forward(p, [x]) == pytest.approx(math.tanh(math.tanh(x)), abs=1e-15)


def test_normalization_applied():
    p = ScorerParams.zeros(1, 1, feature_names=("x",), feature_mean=[2.0], feature_scale=[4.0])
    p.w1[:] = 1.0
    p.w2[:] = 1.0
    p.w3[:] = 1.0
    assert forward(p, [6.0]) == pytest.approx(math.tanh(math.tanh(1.0)))


@given(st.integers(1, 20), st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_batch_equals_rows(m, seed):
    rng = np.random.default_rng(seed)
    p = ScorerParams.init(seed=seed)
    x = rng.normal(size=(m, 8))
    batch = forward(p, x)
    assert batch.shape == (m,)
    np.testing.assert_allclose(batch, [forward(p, row) for row in x], rtol=1e-12, atol=1e-14)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(7)
    assert max(mlp_instance(rng) for _ in range(25)) < 1e-6


def test_backward_is_linear_in_upstream():
    rng = np.random.default_rng(0)
    p = ScorerParams.init(seed=1)
    x = rng.normal(size=(5, 8))
    a, b = rng.normal(size=5), rng.normal(size=5)
    np.testing.assert_allclose(backward(p, x, a + b), backward(p, x, a) + backward(p, x, b), atol=1e-12)


def test_non_finite_features_rejected():
    p = ScorerParams.init()
    with pytest.raises(DataError):
        forward(p, np.full(8, np.nan))
    with pytest.raises(ValueError):
        forward(p, np.zeros(5))


def test_flat_roundtrip():
    p = ScorerParams.init(seed=3)
    q = p.with_flat(p.flat())
    np.testing.assert_array_equal(q.flat(), p.flat())
    assert p.size == 8 * 16 + 16 + 16 * 16 + 16 + 16 + 1
    with pytest.raises(ValueError):
        p.with_flat(np.zeros(3))


def test_checkpoint_roundtrip(tmp_path):
    p = ScorerParams.init(seed=4, feature_mean=np.arange(8.0), feature_scale=np.full(8, 2.0), tag="s")
    save_checkpoint(p, tmp_path / "c.json", {"loss": "mse"})
    back = load_checkpoint(tmp_path / "c.json")
    np.testing.assert_array_equal(back.flat(), p.flat())
    np.testing.assert_array_equal(back.feature_mean, p.feature_mean)
    assert back.tag == "s"
    (tmp_path / "bad.json").write_text('{"format_version": 99}')
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "bad.json")


# ---- reranking


def _cands(n, seed=0):
    rng = np.random.default_rng(seed)
    return RankedList.from_scores("q", [f"d{i:03d}" for i in range(n)], rng.normal(size=n), source_tag="bm25")


@given(st.integers(1, 40), st.integers(1, 15), st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_rerank_invariants(n, k, seed):
    cands = _cands(n, seed)
    rng = np.random.default_rng(seed + 1)
    r = ScoreFnReranker(lambda q, ids: rng.integers(0, 3, size=len(ids)), "rand")
    out = rerank(r, RerankRequest(Query("q", ""), cands, k))
    assert len(out) == min(k, n)
    assert set(out.doc_ids) <= set(cands.doc_ids)
    keys = [(-s, d) for d, s in out.entries]
    assert keys == sorted(keys)


def test_passthrough_keeps_run_and_tag():
    cands = _cands(12)
    out = rerank(PassthroughReranker(), RerankRequest(Query("q", ""), cands, 5))
    assert out.entries == cands.entries[:5]
    assert out.source_tag == "bm25"


def test_rerank_edge_cases(toy_corpus):
    with pytest.raises(ValueError):
        rerank(PassthroughReranker(), RerankRequest(Query("q", ""), RankedList("q", ()), 3))
    with pytest.raises(ValueError):
        RerankRequest(Query("q", ""), _cands(2), 0)
    with pytest.raises(DataError):
        rerank(PassthroughReranker(), RerankRequest(Query("q", ""), _cands(2), 1), toy_corpus)


def test_oracle_and_adversary():
    cands = _cands(6)
    qrels = {"q": {"d004": 2, "d001": 1}}
    best = rerank(oracle_reranker(qrels), RerankRequest(Query("q", ""), cands, 3))
    assert best.doc_ids == ["d004", "d001", "d000"]
    worst = rerank(oracle_reranker(qrels, sign=-1.0), RerankRequest(Query("q", ""), cands, 6))
    assert worst.doc_ids[-2:] == ["d001", "d004"]


def test_mlp_reranker_uses_ranks(small_stack):
    c, bm25, *_, provider = small_stack
    q = c.queries[0]
    cands = bm25.retrieve(q, 10)
    p = ScorerParams.init(seed=0)
    scores = MLPReranker(p, provider).score(q, cands)
    x = provider.features(q, cands.doc_ids, ranks=range(1, 11))
    np.testing.assert_array_equal(scores, forward(p, x))
    assert x[0, 7] == 1.0 and x[9, 7] == pytest.approx(0.1)
