import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gen
from ebr.ensemble import (EnsembleMember, EnsembleSpec, cascade_rerank, cascade_search,
                          embedding_key, ensemble_document_embedding,
                          ensemble_document_embeddings, ensemble_query_embedding, grid_search_weights,
                          load_spec, normalized_concat, spec_hash, weighted_concat, weighted_score)
from ebr.errors import InvalidArgument, UnknownEmbeddingKey
from ebr.evalharness import EvalSession
from ebr.index import Document, Index
from ebr.quant import AnnConfig
from ebr.querylang import And, Nn, Term
from ebr.trainer.model import init_towers, save_checkpoint


def members(n=2, seed=0):
    out = []
    for i in range(n):
        cfg = dataclasses.replace(gen.tiny_model_config(), hidden_dims=(32,))
        q, d = init_towers(cfg, seed=seed + i)
        out.append(EnsembleMember(f"m{i}", q, d))
    return out


def records(n, seed=0):
    rng = np.random.default_rng(seed)
    return [gen.random_record(rng) for _ in range(n)]


def test_concat_examples():
    v = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    np.testing.assert_allclose(weighted_concat(v, [1, 1]), [1, 0, 0, 1])
    np.testing.assert_allclose(weighted_concat(v, [2, 1]), [2, 0, 0, 1])
    np.testing.assert_allclose(normalized_concat([np.array([3.0, 4.0]), np.array([0.0, 5.0])]),
                               [0.6, 0.8, 0, 1])


@settings(max_examples=50)
@given(st.integers(2, 5), st.integers(0, 10**6))
def test_document_concat_norm_is_sqrt_n(n, seed):
    rng = np.random.default_rng(seed)
    v = normalized_concat([rng.normal(size=3) + 0.1 for _ in range(n)])
    assert np.linalg.norm(v) == pytest.approx(np.sqrt(n), abs=1e-12)


def test_spec_validation():
    m = members(2)
    with pytest.raises(InvalidArgument):
        EnsembleSpec(m[:1])
    with pytest.raises(InvalidArgument):
        EnsembleSpec(m, (1.0, 0.0))
    with pytest.raises(InvalidArgument):
        EnsembleSpec(m, (1.0, float("inf")))
    with pytest.raises(InvalidArgument):
        EnsembleSpec(m, (1.0,))
    with pytest.raises(InvalidArgument):
        EnsembleSpec(members(3), mode="cascade")
    with pytest.raises(InvalidArgument):
        EnsembleSpec(m, mode="vote")
    with pytest.raises(InvalidArgument):
        EnsembleSpec(m, mode="cascade", rerank_depth=0)
    assert EnsembleSpec(m).weights == (1.0, 1.0) and EnsembleSpec(m).keys == ("m0", "m1")


@settings(max_examples=200)
@given(st.integers(0, 10**6), st.integers(2, 4))
def test_weighted_score_identity(seed, n):
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.1, 3.0, size=n)
    qs = [rng.normal(size=4) for _ in range(n)]
    ds = [rng.normal(size=4) for _ in range(n)]
    assert weighted_concat(qs, w) @ normalized_concat(ds) == \
        pytest.approx(weighted_score(qs, ds, w), abs=1e-9)


def test_ensemble_embeddings_rank_like_weighted_score():
    m = members(3)
    spec = EnsembleSpec(m, (1.0, 0.5, 2.0))
    docs = records(40, seed=1)
    query = records(1, seed=2)[0]
    dmat = ensemble_document_embeddings(spec, docs)
    np.testing.assert_allclose(dmat[7], ensemble_document_embedding(spec, docs[7]), atol=1e-12)
    qv = ensemble_query_embedding(spec, query)
    cos = dmat @ qv / (np.linalg.norm(dmat, axis=1) * np.linalg.norm(qv))
    sw = [weighted_score([x.model_q.encode([query])[0] for x in m],
                         [x.model_d.encode([d])[0] for x in m], spec.weights) for d in docs]
    np.testing.assert_allclose(dmat @ qv, sw, atol=1e-9)
    assert list(np.argsort(-cos, kind="stable")) == list(np.argsort(-np.asarray(sw), kind="stable"))


def test_spec_hash_and_key():
    m = members(2)
    a, b = EnsembleSpec(m, (1, 2)), EnsembleSpec(m, (1.0, 2.0))
    assert spec_hash(a) == spec_hash(b) and len(spec_hash(a)) == 16
    assert embedding_key(a) == f"ensemble:{spec_hash(a)}"
    assert spec_hash(EnsembleSpec(m, (2, 1))) != spec_hash(a)


# -- cascade -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def cascade_index():
    m = members(2, seed=10)
    docs = records(60, seed=3)
    idx = Index()
    e1 = m[0].model_d.encode(docs)
    e2 = m[1].model_d.encode(docs)
    idx.add_documents([Document(f"d{i:03d}", {"kind:" + ("a" if i % 2 else "b"): None},
                                {"m0": e1[i], "m1": e2[i]}) for i in range(len(docs))])
    idx.build_ann("m0", AnnConfig(4, 4, 0))
    idx.build_ann("m1", AnnConfig(4, 4, 0))
    return m, idx.snapshot


def test_cascade_orders_by_stage_two(cascade_index):
    m, snap = cascade_index
    q = records(1, seed=9)[0]
    spec = EnsembleSpec(m, mode="cascade", rerank_depth=10)
    out = cascade_search(spec, q, snap)
    assert len(out) == 10
    assert [s for _, s in out] == sorted((s for _, s in out), reverse=True)
    stage1 = snap.search(Nn("m0", top_k=10),
                         {"m0": m[0].model_q.encode([q])[0]}).ids
    assert {i for i, _ in out} == set(stage1)
    assert out == cascade_search(spec, q, snap)


def test_cascade_same_model_both_stages_keeps_stage_one_order(cascade_index):
    m, snap = cascade_index
    q = m[0].model_q.encode(records(1, seed=4))[0]
    out = cascade_rerank(snap, "m0", q, "m0", q, depth=15)
    assert [i for i, _ in out] == snap.search(Nn("m0", top_k=15), {"m0": q}).ids
    # reranking its own output again changes nothing
    again = cascade_rerank(snap, "m0", q, "m0", q, depth=15)
    assert again == out


def test_cascade_swapped_stages(cascade_index):
    m, snap = cascade_index
    rec = records(1, seed=5)[0]
    q0, q1 = m[0].model_q.encode([rec])[0], m[1].model_q.encode([rec])[0]
    full = len(snap)
    a = cascade_rerank(snap, "m0", q0, "m1", q1, depth=full)
    b = cascade_rerank(snap, "m1", q1, "m1", q1, depth=full)
    # with depth covering the corpus the stage-1 model does not matter
    assert a == b


def test_cascade_radius_and_constraint(cascade_index):
    m, snap = cascade_index
    rec = records(1, seed=6)[0]
    q0, q1 = m[0].model_q.encode([rec])[0], m[1].model_q.encode([rec])[0]
    out = cascade_rerank(snap, "m0", q0, "m1", q1, depth=1000, radius=0.8, nprobe=4)
    want = snap.search(Nn("m0", radius=0.8, nprobe=4), {"m0": q0}).ids
    assert {i for i, _ in out} == set(want)
    out = cascade_rerank(snap, "m0", q0, "m1", q1, depth=1000, radius=0.8, nprobe=4,
                         constraint=Term("kind", "a"))
    want = snap.search(And((Term("kind", "a"), Nn("m0", radius=0.8, nprobe=4))), {"m0": q0}).ids
    assert {i for i, _ in out} == set(want)
    assert all(int(i[1:]) % 2 == 1 for i, _ in out)
    everything = snap.search(Nn("m0", radius=0.8, nprobe=4), {"m0": q0}).ids
    short = cascade_rerank(snap, "m0", q0, "m1", q1, depth=3, radius=0.8, nprobe=4)
    assert {i for i, _ in short} == set(everything[:3])


def test_cascade_missing_stage_two_embedding():
    idx = Index()
    idx.add_documents([Document("a", {}, {"k1": [1.0, 0.0]}), Document("b", {}, {"k1": [0.0, 1.0]})])
    idx.build_ann("k1", AnnConfig(1, 1, 0))
    with pytest.raises(UnknownEmbeddingKey):
        cascade_rerank(idx.snapshot, "k1", np.array([1.0, 0.0]), "k2", np.array([1.0, 0.0]), 2)
    with pytest.raises(InvalidArgument):
        cascade_search(EnsembleSpec(members(2)), None, idx.snapshot)


# -- spec files and tuning ------------------------------------------------------------------


def test_load_spec(tmp_path):
    for i, mm in enumerate(members(2)):
        save_checkpoint(tmp_path / f"tower{i}.ckpt", mm.model_q, mm.model_d)
    (tmp_path / "ens.json").write_text(json.dumps(
        {"mode": "cascade", "models": ["tower0.ckpt", "tower1.ckpt"], "rerank_depth": 7}))
    spec = load_spec(tmp_path / "ens.json")
    assert spec.mode == "cascade" and spec.rerank_depth == 7
    assert spec.keys == ("tower0", "tower1")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(InvalidArgument):
        load_spec(tmp_path / "bad.json")


def test_grid_search_weights():
    m = members(2)
    docs = records(30, seed=7)
    corpus = {f"d{i:02d}": r for i, r in enumerate(docs)}
    sessions = [EvalSession(docs[i], {f"d{i:02d}"}, str(i)) for i in range(10)]
    best, table = grid_search_weights(m, corpus, sessions, grid=(0.5, 1.0, 2.0))
    assert [w for w, _ in table] == [(1.0, 0.5), (1.0, 1.0), (1.0, 2.0)]
    assert best in [w for w, _ in table]
    assert dict(table)[best] == max(r for _, r in table)
    assert all(0.0 <= r <= 1.0 for _, r in table)
