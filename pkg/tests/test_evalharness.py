import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gen
from ebr.errors import InvalidArgument
from ebr.evalharness import (CSV_COLUMNS, Corpus, EvalSession, SweepGrid, anisotropic_vectors,
                             exact_knn, mean_one_recall_at_10, model_recall, one_recall_at_10,
                             recall_at_k, recall_at_matched_scan, run_sweep, sessions_from_log,
                             sweep_csv)
from ebr.index import Document, Index
from ebr.quant import AnnConfig
from ebr.querylang import Nn
from ebr.trainer import synthetic as syn
from ebr.trainer.features import FeatureRecord
from ebr.trainer.mining import Session
from ebr.trainer.model import init_towers


def test_recall_examples():
    assert recall_at_k(["a", "b", "c"], {"b"}, 1) == 0.0
    assert recall_at_k(["a", "b", "c"], {"b"}, 2) == 1.0
    assert recall_at_k(["a", "b"], {"a", "z"}, 10) == 0.5
    with pytest.raises(InvalidArgument):
        recall_at_k(["a"], set(), 1)
    with pytest.raises(InvalidArgument):
        recall_at_k(["a"], {"a"}, 0)


def test_one_recall_at_10():
    top = [f"d{i}" for i in range(12)]
    assert one_recall_at_10(top, "d9") == 1.0
    assert one_recall_at_10(top, "d10") == 0.0
    assert mean_one_recall_at_10([(top, "d0"), (top, "d11")]) == 0.5


@settings(max_examples=200)
@given(st.integers(0, 10**6))
def test_recall_monotone_in_k(seed):
    rng = np.random.default_rng(seed)
    ranked = [f"d{i}" for i in rng.permutation(30)]
    targets = {f"d{i}" for i in rng.choice(30, size=int(rng.integers(1, 6)), replace=False)}
    vals = [recall_at_k(ranked, targets, k) for k in range(1, 32)]
    assert vals == sorted(vals) and vals[-1] == 1.0


def test_exact_knn_cases():
    c = {"a": [1.0, 0.0], "b": [0.0, 1.0], "c": [2.0, 0.0]}
    assert exact_knn(c, [1.0, 0.1], 3) == ["a", "c", "b"]  # a and c tie, broken by id
    assert exact_knn((["x", "y"], [[1.0, 1.0], [-1.0, 0.0]]), [1.0, 0.0], 1) == ["x"]
    assert exact_knn(c, [0.0, 1.0], 10) == ["b", "a", "c"]
    with pytest.raises(InvalidArgument):
        exact_knn(c, [0.0, 0.0], 1)
    with pytest.raises(InvalidArgument):
        Corpus([], np.zeros((0, 2)))


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1))
def test_exact_knn_matches_flat_full_probe(seed):
    rng = np.random.default_rng(seed)
    docs = gen.random_corpus(rng, int(rng.integers(3, 60)), {"m": 8})
    idx = Index()
    idx.add_documents(docs)
    idx.build_ann("m", AnnConfig(3, 3, 0))
    q = rng.normal(size=8)
    corpus = Corpus.from_documents(docs, "m")
    assert exact_knn(corpus, q, 10) == idx.search(Nn("m", top_k=10), {"m": q}).ids


def test_sessions_and_model_recall():
    q = FeatureRecord({"name": "x"})
    log = [Session(q, ["a", "b"], ["a"], None), Session(q, ["a"], [], "c"),
           Session(q, ["a"], [], None)]
    ev = sessions_from_log(log)
    assert [s.target_ids for s in ev] == [frozenset({"a"}), frozenset({"c"})]
    with pytest.raises(InvalidArgument):
        EvalSession(q, set())
    cfg = syn.SyntheticConfig(num_docs=200, seed=1)
    world = syn.make_world(cfg)
    corpus = {p.doc_id: world.doc_features(p) for p in world.people}
    sessions = sessions_from_log(syn.make_sessions(world, 50))
    mq, md = init_towers(syn.model_config(cfg), seed=0)
    r = model_recall(mq, md, corpus, sessions, ks=(1, 10, 100))
    assert 0.0 <= r[1] <= r[10] <= r[100] <= 1.0


# -- sweeps ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def sweep_data():
    x = anisotropic_vectors(600, dim=16, seed=0)
    corpus = Corpus([f"v{i:05d}" for i in range(len(x))], x)
    return corpus, anisotropic_vectors(40, dim=16, seed=1)


def test_flat_full_probe_point_is_perfect(sweep_data):
    corpus, qs = sweep_data
    pts = run_sweep(SweepGrid([4], [4], [0]), corpus, qs, measure_latency=False)
    assert len(pts) == 1
    p = pts[0]
    assert p.one_recall_at_10 == 1.0 and p.recall_at_k[1] == 1.0
    assert p.mean_scanned_documents == len(corpus) and p.mean_latency_us is None


def test_sweep_scans_grow_with_nprobe_and_csv_is_deterministic(sweep_data):
    corpus, qs = sweep_data
    grid = SweepGrid([8], [1, 2, 4, 8], [0, 4], ["identity", "opq"])
    pts = run_sweep(grid, corpus, qs, measure_latency=False)
    assert len(pts) == 12  # opq with pq_bytes=0 is infeasible and skipped
    for pq, tr in [(0, "identity"), (4, "identity"), (4, "opq")]:
        line = sorted((p for p in pts if (p.config.pq_bytes, p.config.transform) == (pq, tr)),
                      key=lambda p: p.config.nprobe_default)
        scans = [p.mean_scanned_documents for p in line]
        assert scans == sorted(scans) and scans[-1] == len(corpus)
    text = sweep_csv(pts)
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS) and len(text.splitlines()) == 13
    assert text == sweep_csv(run_sweep(grid, corpus, qs, measure_latency=False))
    scans = [p.mean_scanned_documents for p in pts]
    assert scans == sorted(scans)


def test_scanned_documents_accounting(sweep_data):
    corpus, qs = sweep_data
    idx = Index()
    idx.add_documents([Document(i, {}, {"k": v}) for i, v in zip(corpus.ids, corpus.vectors)])
    idx.build_ann("k", AnnConfig(8, 1, 0))
    seg = idx.snapshot.ann_segments["k"]
    pts = {p.config.nprobe_default: p for p in
           run_sweep(SweepGrid([8], [1, 3], [0]), corpus, qs, measure_latency=False)}
    for npr in (1, 3):
        per_query = [idx.search(Nn("k", top_k=100, nprobe=npr), {"k": q}).scanned_documents
                     for q in qs]
        assert all(s == seg.knn(q, 100, npr)[2] for s, q in zip(per_query, qs))
        assert pts[npr].mean_scanned_documents == pytest.approx(np.mean(per_query))


def test_infeasible_points_are_skipped(sweep_data, caplog):
    corpus, qs = sweep_data
    pts = run_sweep(SweepGrid([4], [2, 8], [0, 5]), corpus, qs, measure_latency=False)
    assert [(p.config.nprobe_default, p.config.pq_bytes) for p in pts] == [(2, 0)]
    assert "skipping" in caplog.text
    with pytest.raises(InvalidArgument):
        run_sweep(SweepGrid([], [1], [0]), corpus, qs)


def test_latency_and_threads(sweep_data):
    corpus, qs = sweep_data
    a = run_sweep(SweepGrid([4], [2], [0]), corpus, qs, threads=2)
    b = run_sweep(SweepGrid([4], [2], [0]), corpus, qs, measure_latency=False)
    assert a[0].mean_latency_us > 0
    assert a[0].one_recall_at_10 == b[0].one_recall_at_10


def test_recall_at_matched_scan(sweep_data):
    corpus, qs = sweep_data
    pts = run_sweep(SweepGrid([8], [1, 2, 8], [0]), corpus, qs, measure_latency=False)
    lo, hi = pts[0], pts[-1]
    assert recall_at_matched_scan(pts, lo.mean_scanned_documents) == lo.one_recall_at_10
    assert recall_at_matched_scan(pts, 10**9) == hi.one_recall_at_10


def test_anisotropic_vectors_fixed_mixture():
    a, b = anisotropic_vectors(50, 8, seed=0), anisotropic_vectors(50, 8, seed=0)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, anisotropic_vectors(50, 8, seed=1))
    assert a.shape == (50, 8)
