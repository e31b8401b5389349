import logging

import numpy as np
import pytest

from rankdistill.corpus import Query
from rankdistill.distillation import (
    CandidatePool,
    FileTeacher,
    SyntheticTeacher,
    TeacherScores,
    build_bce_set,
    build_mse_set,
    build_permutation_set,
    merge_lists,
    mine_all,
    mine_candidates,
    read_pools,
    read_teacher_scores,
    score_pools,
    teacher_order,
    write_pools,
    write_teacher_scores,
)
from rankdistill.errors import IntegrityError, ParseError
from rankdistill.retrieval import RankedList


class FixedRetriever:
    """Returns a preset list, best first."""

    def __init__(self, tag, doc_ids):
        self.tag = tag
        self.doc_ids = list(doc_ids)

    def retrieve(self, query, k0):
        n = len(self.doc_ids)
        return RankedList(query.query_id, tuple((d, float(n - i)) for i, d in enumerate(self.doc_ids[:k0])), self.tag)


Q = Query("q", "anything")


def test_pool_full_overlap_is_16():
    ids = [f"d{i:02d}" for i in range(20)]
    pool = mine_candidates(Q, [FixedRetriever(t, ids) for t in ("bm25", "dense", "sparse")], 16)
    assert len(pool) == 16


def test_pool_disjoint_is_48():
    rs = [FixedRetriever(t, [f"{t}{i:02d}" for i in range(30)]) for t in ("bm25", "dense", "sparse")]
    assert len(mine_candidates(Q, rs, 16)) == 48


def test_pool_inclusion_exclusion_is_38():
    # |A|=|B|=|C|=16, |AB|=5, |AC|=3, |BC|=4, |ABC|=2 -> 48 - 12 + 2 = 38
    t = ["t0", "t1"]
    a = t + ["ab0", "ab1", "ab2", "ac0"] + [f"a{i}" for i in range(10)]
    b = t + ["ab0", "ab1", "ab2", "bc0", "bc1"] + [f"b{i}" for i in range(9)]
    c = t + ["ac0", "bc0", "bc1"] + [f"c{i}" for i in range(11)]
    assert len(a) == len(b) == len(c) == 16
    pool = mine_candidates(Q, [FixedRetriever("x", a), FixedRetriever("y", b), FixedRetriever("z", c)], 16)
    assert len(pool) == 38
    assert set(pool.sources["t0"]) == {"x", "y", "z"}


def test_pool_records_best_rank():
    pool = merge_lists("q", [FixedRetriever("x", ["a", "b", "c"]).retrieve(Q, 3), FixedRetriever("y", ["c", "a"]).retrieve(Q, 2)])
    assert pool.best_rank("c") == 1
    assert pool.best_rank("b") == 2
    assert pool.doc_ids == ["a", "b", "c"]


def test_pool_bounded_on_real_retrievers(small_stack):
    c, bm25, dense, sparse, _ = small_stack
    pools = mine_all(c.queries, [bm25, dense, sparse], 16)
    assert all(16 <= len(p) <= 48 for p in pools)
    assert [p.query_id for p in pools] == [q.query_id for q in c.queries]


def test_pools_roundtrip(tmp_path, small_stack):
    c, bm25, dense, sparse, _ = small_stack
    pools = mine_all(c.queries[:5], [bm25, dense, sparse], 8)
    write_pools(pools, tmp_path / "p.jsonl")
    back = read_pools(tmp_path / "p.jsonl")
    assert [p.to_json() for p in back] == [p.to_json() for p in pools]
    (tmp_path / "bad.jsonl").write_text('{"query_id": "q"}\n')
    with pytest.raises(ParseError):
        read_pools(tmp_path / "bad.jsonl")


# ---- teacher scoring


def _pool(qid, ids):
    return CandidatePool(qid, {d: {"x": (i + 1, 0.0)} for i, d in enumerate(ids)})


def test_file_teacher_drops_failed_queries(caplog):
    teacher = FileTeacher({"q1": {"a": 0.5, "b": 0.1}, "q2": {"a": 0.3}})
    queries = [Query("q1", "x"), Query("q2", "y")]
    with caplog.at_level(logging.WARNING):
        scores = score_pools(teacher, queries, [_pool("q1", ["a", "b"]), _pool("q2", ["a", "b"])])
    assert scores.scores == {"q1": {"a": 0.5, "b": 0.1}}
    assert "q2" in caplog.text


def test_teacher_scores_tsv(tmp_path):
    write_teacher_scores({"q": {"b": 0.25, "a": 1 / 3}}, tmp_path / "t.tsv")
    assert read_teacher_scores(tmp_path / "t.tsv") == {"q": {"a": 1 / 3, "b": 0.25}}
    (tmp_path / "bad.tsv").write_text("q\ta\tnan\n")
    with pytest.raises(IntegrityError):
        read_teacher_scores(tmp_path / "bad.tsv")


def test_teacher_order_ties_by_doc_id():
    assert teacher_order({"c": 1.0, "a": 1.0, "b": 2.0}) == ["b", "a", "c"]


def test_permutation_set():
    scores = TeacherScores({"q1": {f"d{i:02d}": float(i % 7) for i in range(30)}, "q2": {"x": 1.0}})
    perms = build_permutation_set(scores, list_length=20)
    assert len(perms) == 1
    p = perms[0]
    assert len(p.ordered_doc_ids) == 20
    vals = [scores.scores["q1"][d] for d in p.ordered_doc_ids]
    assert vals == sorted(vals, reverse=True)
    assert p.ordered_doc_ids[:5] == ("d06", "d13", "d20", "d27", "d05")
    with pytest.raises(ValueError):
        build_permutation_set(scores, list_length=1)


def test_permutation_ranks_from_pool():
    scores = TeacherScores({"q": {"a": 0.1, "b": 0.9}})
    pools = {"q": _pool("q", ["a", "b"])}
    (p,) = build_permutation_set(scores, pools=pools)
    assert p.ordered_doc_ids == ("b", "a") and p.ranks == (2, 1)


def test_mse_set():
    scores = TeacherScores({"q2": {"b": 0.2, "a": 0.4}, "q1": {"c": 0.9}})
    mse = build_mse_set(scores, query_order=["q2", "q1"])
    assert [(s.query_id, s.doc_id, s.teacher_score) for s in mse] == [("q2", "a", 0.4), ("q2", "b", 0.2), ("q1", "c", 0.9)]


def test_bce_set_ratio_and_determinism():
    pools = [_pool("q1", [f"d{i}" for i in range(30)]), _pool("q2", ["a", "b"]), _pool("q3", ["z"])]
    qrels = {"q1": {"d3": 1, "d7": 2, "d9": 0}, "q2": {"a": 1}}
    one = build_bce_set(pools, qrels, 4, seed=1)
    two = build_bce_set(pools, qrels, 4, seed=1)
    assert one == two
    q1 = [s for s in one if s.query_id == "q1"]
    assert sum(s.label for s in q1) == 2 and len(q1) == 10
    assert not {s.doc_id for s in q1 if s.label == 0} & {"d3", "d7"}
    q2 = [s for s in one if s.query_id == "q2"]
    assert [(s.doc_id, s.label) for s in q2] == [("a", 1), ("b", 0)]
    assert not [s for s in one if s.query_id == "q3"]


# ---- synthetic teacher


@pytest.fixture(scope="module")
def teacher(small_stack):
    c, *_, provider = small_stack
    ref = np.random.default_rng(0).normal(size=(50, 9))
    return SyntheticTeacher.create(provider, c.intents, ref, seed=2, probability=True)


def test_synthetic_teacher_roundtrip(tmp_path, teacher, small_stack):
    c, *_, provider = small_stack
    teacher.save(tmp_path / "t.json")
    back = SyntheticTeacher.load(tmp_path / "t.json", provider)
    ids = list(c.corpus.ids[:20])
    np.testing.assert_array_equal(back.score(c.queries[0], ids), teacher.score(c.queries[0], ids))


def test_synthetic_teacher_properties(teacher, small_stack):
    c, *_ = small_stack
    ids = list(c.corpus.ids[:40])
    q = c.queries[1]
    p = teacher.score(q, ids)
    assert np.all((p > 0) & (p < 1))
    logits = teacher.logits(q, ids)
    # squashing and the per-query offset leave the order alone
    assert np.array_equal(np.argsort(-p, kind="stable"), np.argsort(-logits, kind="stable"))
    assert teacher.query_offset(q.query_id) == teacher.query_offset(q.query_id)
    # the first-stage rank input is ignored
    assert np.all(teacher.mlp.w1[7] == 0) and teacher.linear[7] == 0
