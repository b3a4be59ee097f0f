import json
import os
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gen
from ebr.errors import (ChecksumError, DimensionMismatch, DuplicateDocument, FormatError,
                        InvalidArgument, UnknownDocument)
from ebr.index import (Document, Index, doc_matches, evaluate_boolean, load_index,
                       read_jsonl_documents, save_index, write_jsonl_documents)
from ebr.quant import AnnConfig
from ebr.querylang import And, Nn, Or, Term, parse_query

PEOPLE = ("(and (or (term location:seattle) (term location:menlo_park))"
          " (and (term text:john) (term text:smithe)))")


def doc(i, *terms, **emb):
    return Document(i, {t: None for t in terms}, emb)


def test_add_updates_postings():
    idx = Index()
    idx.add_document(doc("a", "text:john", "location:seattle"))
    snap = idx.snapshot
    assert snap.postings["text:john"].ordinals.tolist() == [0]
    assert snap.postings["location:seattle"].ordinals.tolist() == [0]


def test_dimension_mismatch():
    idx = Index(dims={"m1": 8})
    with pytest.raises(DimensionMismatch):
        idx.add_document(doc("a", "x:1", m1=np.ones(4)))
    idx = Index()
    idx.add_document(doc("a", "x:1", m1=np.ones(8)))
    with pytest.raises(DimensionMismatch):
        idx.add_document(doc("b", "x:1", m1=np.ones(4)))


def test_generation_counts_mutations():
    idx = Index()
    g0 = idx.generation
    for i in "abc":
        idx.add_document(doc(i, "x:1"))
    idx.remove_document("b")
    idx.add_document(doc("d", "x:1"))
    assert idx.generation - g0 == 5


def test_duplicate_rejected_in_batch_and_across():
    idx = Index()
    idx.add_document(doc("a", "x:1"))
    with pytest.raises(DuplicateDocument):
        idx.add_document(doc("a", "x:2"))
    with pytest.raises(DuplicateDocument):
        idx.add_documents([doc("b", "x:1"), doc("b", "x:2")])
    assert len(idx.snapshot) == 1


def test_remove_and_readd():
    idx = Index()
    idx.add_documents([doc("a", "u:a"), doc("b", "u:b")])
    idx.remove_document("a")
    assert idx.evaluate_boolean(Term("u", "a")) == set()
    with pytest.raises(UnknownDocument):
        idx.remove_document("zzz")
    with pytest.raises(UnknownDocument):
        idx.remove_document("a")
    idx.add_document(doc("a", "u:a"))
    assert idx.evaluate_boolean(Term("u", "a")) == {"a"}


def test_update_and_compact():
    idx = Index()
    idx.add_documents([doc("a", "x:1"), doc("b", "x:1")])
    idx.update_document(doc("a", "x:2"))
    assert idx.evaluate_boolean(Term("x", "1")) == {"b"}
    assert idx.evaluate_boolean(Term("x", "2")) == {"a"}
    idx.compact()
    snap = idx.snapshot
    assert sorted(snap.documents) == [0, 1] and snap.dead.size == 0
    assert idx.evaluate_boolean(Term("x", "2")) == {"a"}
    with pytest.raises(UnknownDocument):
        idx.update_document(doc("q", "x:1"))


def test_people_query():
    idx = Index()
    idx.add_documents([doc("A", "text:john", "text:smithe", "location:seattle"),
                       doc("B", "text:john", "text:smith", "location:seattle"),
                       doc("C", "text:john", "text:smithe", "location:austin")])
    assert evaluate_boolean(parse_query(PEOPLE), idx.snapshot) == {"A"}


def test_or_and_disjoint():
    idx = Index()
    idx.add_documents([doc("d1", "x:1"), doc("d2", "x:2")])
    assert idx.evaluate_boolean(Or((Term("x", "1"), Term("x", "2")))) == {"d1", "d2"}
    assert idx.evaluate_boolean(And((Term("x", "1"), Term("x", "2")))) == set()
    assert idx.evaluate_boolean(Term("nope", "z")) == set()


def test_boolean_rejects_nn():
    with pytest.raises(InvalidArgument):
        Index().evaluate_boolean(Nn("k", radius=0.1))


def test_ingest_filter():
    idx = Index(filter=parse_query("(term type:group)"))
    idx.add_documents([doc("a", "type:group"), doc("b", "type:person")])
    assert set(idx.snapshot.ordinals) == {"a"}
    with pytest.raises(InvalidArgument):
        Index(filter=Nn("k", radius=0.1))
    assert doc_matches(parse_query("(or (term a:b) (term c:d))"), {"c:d": None})


def test_snapshot_isolation():
    idx = Index()
    idx.add_document(doc("a", "x:1"))
    old = idx.snapshot
    idx.add_document(doc("b", "x:1"))
    idx.remove_document("a")
    assert evaluate_boolean(Term("x", "1"), old) == {"a"}
    assert idx.evaluate_boolean(Term("x", "1")) == {"b"}


def test_concurrent_readers_and_writer():
    idx = Index()
    idx.add_documents([doc(f"s{i}", "x:1") for i in range(50)])
    errors = []

    def reader():
        for _ in range(200):
            snap = idx.snapshot
            got = evaluate_boolean(Term("x", "1"), snap)
            if len(got) != len(snap):
                errors.append((len(got), len(snap)))

    threads = [threading.Thread(target=reader) for _ in range(4)]
    for t in threads:
        t.start()
    for i in range(100):
        idx.add_document(doc(f"w{i}", "x:1"))
    for t in threads:
        t.join()
    assert not errors


def _invariants(snap):
    for pl in snap.postings.values():
        assert np.all(np.diff(pl.ordinals) > 0)
    live = set(snap.ordinals.values())
    for o in live:
        for t in snap.documents[o].terms:
            assert np.count_nonzero(snap.postings[t].ordinals == o) == 1


@settings(max_examples=300)
@given(st.integers(0, 2**32 - 1))
def test_boolean_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    docs = gen.random_corpus(rng, int(rng.integers(0, 30)))
    idx = Index()
    idx.add_documents(docs)
    live = list(docs)
    for _ in range(int(rng.integers(0, 4))):
        if live:
            victim = live.pop(int(rng.integers(len(live))))
            idx.remove_document(victim.doc_id)
    if rng.random() < 0.5:
        idx.compact()
    _invariants(idx.snapshot)
    for _ in range(5):
        q = gen.random_boolean(rng)
        assert idx.evaluate_boolean(q) == gen.oracle_boolean(q, live)


# -- persistence ------------------------------------------------------------------

def _built(rng, n=100, key="m", cfg=None):
    idx = Index()
    idx.add_documents(gen.random_corpus(rng, n, {key: 8}))
    idx.build_ann(key, cfg or AnnConfig(4, 2, 0))
    return idx


def test_round_trip_empty(tmp_path):
    save_index(Index().snapshot, tmp_path / "ix")
    snap = load_index(tmp_path / "ix")
    assert len(snap) == 0 and snap.postings == {}


@pytest.mark.filterwarnings("ignore:training PQ")
def test_round_trip_boolean_and_ann(tmp_path, rng):
    idx = _built(rng, cfg=AnnConfig(4, 2, 4, "opq"))
    idx.remove_document("d0003")
    idx.save(tmp_path / "ix")
    back = Index.open(tmp_path / "ix")
    assert back.generation == idx.generation
    for _ in range(20):
        q = gen.random_boolean(rng)
        assert back.evaluate_boolean(q) == idx.evaluate_boolean(q)
    for _ in range(10):
        qv = {"m": rng.normal(size=8)}
        for q in (Nn("m", top_k=7), Nn("m", radius=0.8), Nn("m", radius=1.0, nprobe=1)):
            a, b = idx.search(q, qv), back.search(q, qv)
            assert a.ids == b.ids and a.scanned_documents == b.scanned_documents
            np.testing.assert_allclose([r.distance for r in a.results],
                                       [r.distance for r in b.results], atol=1e-6)
    # mutations after load keep working
    back.add_document(doc("new", "x:1", m=np.ones(8)))
    assert "new" in back.search(Nn("m", top_k=200), {"m": np.ones(8)}).ids


def test_save_is_deterministic(tmp_path):
    for name in ("a", "b"):
        _built(np.random.default_rng(5)).save(tmp_path / name)
    for f in ("manifest.json", "docs.bin", "postings.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


@pytest.mark.parametrize("victim", ["docs.bin", "postings.bin", "ann/m/quantizer.bin",
                                    "ann/m/postings.bin"])
def test_corruption_detected(tmp_path, rng, victim):
    _built(rng).save(tmp_path / "ix")
    path = tmp_path / "ix" / victim
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        load_index(tmp_path / "ix")


def test_manifest_tamper_and_version(tmp_path, rng):
    _built(rng).save(tmp_path / "ix")
    mpath = tmp_path / "ix" / "manifest.json"
    m = json.loads(mpath.read_text())
    m["generation"] += 1
    mpath.write_text(json.dumps(m))
    with pytest.raises(ChecksumError):
        load_index(tmp_path / "ix")
    m["format_version"] = 99
    mpath.write_text(json.dumps(m))
    with pytest.raises(FormatError):
        load_index(tmp_path / "ix")


def test_save_replaces_existing(tmp_path, rng):
    target = tmp_path / "ix"
    _built(rng).save(target)
    idx = Index()
    idx.add_document(doc("only", "x:1"))
    idx.save(target)
    assert set(load_index(target).ordinals) == {"only"}
    assert not [p for p in os.listdir(tmp_path) if p != "ix"]


def test_set_embeddings_keeps_ordinals(rng):
    idx = _built(rng, n=20)
    before = dict(idx.snapshot.ordinals)
    idx.set_embeddings("z", {"d0001": [1.0, 0.0], "d0002": [0.0, 1.0]})
    assert idx.snapshot.ordinals == before
    assert "m" in idx.snapshot.ann_segments
    idx.set_embeddings("m", {"d0001": np.ones(8)})
    assert "m" not in idx.snapshot.ann_segments
    with pytest.raises(DimensionMismatch):
        idx.set_embeddings("z", {"d0003": [1.0, 2.0, 3.0]})
    with pytest.raises(UnknownDocument):
        idx.set_embeddings("z", {"nope": [1.0, 2.0]})


# -- JSONL -----------------------------------------------------------------------------

def test_jsonl_round_trip_with_payloads(tmp_path):
    d = Document("x", {"text:a": b"\x00\x01", "loc:b": None}, {"m": [1.0, 2.0]},
                 {"text_fields": {"name": "a"}})
    write_jsonl_documents(tmp_path / "c.jsonl", [d])
    ((_, back),) = list(read_jsonl_documents(tmp_path / "c.jsonl"))
    assert back.terms == d.terms and back.features == d.features
    np.testing.assert_array_equal(back.embeddings["m"], [1.0, 2.0])


def test_jsonl_error_names_line(tmp_path):
    lines = [json.dumps({"id": f"d{i}", "terms": ["x:1"]}) for i in range(6)] + ["{not json"]
    p = tmp_path / "c.jsonl"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(InvalidArgument, match=":7:"):
        list(read_jsonl_documents(p))


@pytest.mark.parametrize("bad", [{"terms": []}, {"id": "", "terms": []},
                                 {"id": "a", "terms": ["nocolon"]},
                                 {"id": "a", "embeddings": {"m": [1, "x"]}},
                                 {"id": "a", "payloads": {"x:1": "!!"}}])
def test_document_validation(bad):
    with pytest.raises((InvalidArgument, ValueError)):
        Document.from_json(bad)
