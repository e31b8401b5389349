import json

import pytest

from rankdistill.corpus import (
    Corpus,
    Dataset,
    Document,
    Query,
    cap_queries,
    load_corpus,
    load_dataset,
    load_qrels,
    load_queries,
    save_corpus,
    save_qrels,
    save_queries,
)
from rankdistill.errors import DataError, IntegrityError, ParseError


def test_corpus_roundtrip(tmp_path, toy_corpus):
    p = tmp_path / "corpus.jsonl"
    save_corpus(toy_corpus, p)
    back = load_corpus(p)
    assert back == toy_corpus
    assert back.ids == ("d1", "d2", "d3", "d4", "d5")


def test_duplicate_doc_id_is_integrity_error(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"_id": "a", "text": "x"}\n{"_id": "a", "text": "y"}\n')
    with pytest.raises(IntegrityError):
        load_corpus(p)
    with pytest.raises(DataError):
        Corpus([Document("a", "x"), Document("a", "y")])


def test_malformed_jsonl_reports_line(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"_id": "a", "text": "x"}\n{not json\n')
    with pytest.raises(ParseError) as info:
        load_corpus(p)
    assert info.value.line == 2
    assert ":2:" in str(info.value)


def test_document_needs_text_or_title():
    with pytest.raises(DataError):
        Document("x", "", "")
    assert Document("x", "", "t").full_text == "t"


def test_queries_roundtrip(tmp_path):
    qs = [Query("q1", "zażółć gęślą jaźń"), Query("q2", "b")]
    p = tmp_path / "q.jsonl"
    save_queries(qs, p)
    assert load_queries(p) == qs
    assert "zażółć" in p.read_text(encoding="utf-8")


def test_qrels_header_and_grades(tmp_path):
    p = tmp_path / "qrels.tsv"
    p.write_text("query-id\tcorpus-id\tscore\nq1\td1\t2\nq1\td2\t0\nq2\td3\t1\n")
    assert load_qrels(p) == {"q1": {"d1": 2, "d2": 0}, "q2": {"d3": 1}}


def test_qrels_errors(tmp_path):
    p = tmp_path / "qrels.tsv"
    p.write_text("q1\td1\tx\n")
    with pytest.raises(ParseError):
        load_qrels(p)
    p.write_text("q1\td1\t-1\n")
    with pytest.raises(IntegrityError):
        load_qrels(p)
    p.write_text("q1\td1\n")
    with pytest.raises(ParseError):
        load_qrels(p)


def test_qrels_duplicate_last_wins(tmp_path, caplog):
    p = tmp_path / "qrels.tsv"
    p.write_text("q1\td1\t1\nq1\td1\t2\n")
    assert load_qrels(p) == {"q1": {"d1": 2}}
    assert "duplicate" in caplog.text.lower()


def test_qrels_roundtrip(tmp_path):
    qrels = {"q2": {"b": 1}, "q1": {"a": 2, "c": 0}}
    p = tmp_path / "qrels.tsv"
    save_qrels(qrels, p)
    assert load_qrels(p) == qrels
    assert p.read_text().splitlines()[0] == "query-id\tcorpus-id\tscore"


def test_dataset_validation(toy_corpus):
    qs = (Query("q1", "cat"),)
    with pytest.raises(DataError):
        Dataset("x", toy_corpus, qs, {"q1": {"nope": 1}}).validate()
    with pytest.raises(DataError):
        Dataset("x", toy_corpus, qs, {"q9": {"d1": 1}}).validate()
    with pytest.raises(DataError):
        Dataset("x", toy_corpus, qs + qs, {}).validate()


def test_cap_queries_keeps_file_order(toy_dataset):
    capped = cap_queries(toy_dataset, 2)
    assert [q.query_id for q in capped.queries] == ["q1", "q2"]
    assert cap_queries(toy_dataset, 1000).queries == toy_dataset.queries
    with pytest.raises(ValueError):
        cap_queries(toy_dataset, 0)


def test_load_dataset(tmp_path, toy_dataset):
    save_corpus(toy_dataset.corpus, tmp_path / "c.jsonl")
    save_queries(toy_dataset.queries, tmp_path / "q.jsonl")
    save_qrels(toy_dataset.qrels, tmp_path / "r.tsv")
    ds = load_dataset("toy", tmp_path / "c.jsonl", tmp_path / "q.jsonl", tmp_path / "r.tsv", "BEIR")
    assert ds.group == "BEIR"
    assert ds.qrels == toy_dataset.qrels
