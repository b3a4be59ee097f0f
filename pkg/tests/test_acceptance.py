"""End-to-end acceptance criteria; each test prints one PASS/FAIL line."""
import numpy as np
import pytest

import gen
from ebr import experiments
from ebr.ensemble import normalized_concat, weighted_concat, weighted_score
from ebr.evalharness import exact_knn, recall_at_matched_scan
from ebr.index import Index, read_jsonl_documents
from ebr.quant import AnnConfig
from ebr.querylang import And, Nn, Term
from ebr.trainer.features import FeatureRecord
from ebr.trainer.model import load_checkpoint, save_checkpoint

RESULTS = gen.ACCEPTANCE


def report(n, name, ok, detail):
    line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def tutorial_runs(tmp_path_factory):
    return [experiments.run_tutorial(tmp_path_factory.mktemp(f"tutorial{i}"), seed=0)
            for i in range(2)]


def test_criterion_01_exactness_envelope():
    rng = np.random.default_rng(2024)
    corpora, bad = 1000, []
    for c in range(corpora):
        n = int(rng.integers(1, 501))
        d = int(rng.choice([8, 16, 32]))
        docs = gen.random_corpus(rng, n, {"m": d})
        nc = int(rng.integers(1, min(n, 16) + 1))
        idx = Index()
        idx.add_documents(docs)
        idx.build_ann("m", AnnConfig(nc, nc, 0, seed=c))
        q = rng.normal(size=d)
        k = int(rng.integers(1, n + 2))
        vecs = {x.doc_id: x.embeddings["m"] for x in docs}
        if idx.search(Nn("m", top_k=k), {"m": q}).ids != exact_knn(vecs, q, k):
            bad.append((c, "topk"))
        dist = sorted(gen.cosine_distances(q, docs, "m").items(), key=lambda t: t[1])
        cut = int(rng.integers(0, n + 1))
        # place the radius midway between neighbours so no distance sits on the boundary
        lo = dist[cut - 1][1] if cut else 0.0
        hi = dist[cut][1] if cut < n else 2.0
        radius = (lo + hi) / 2
        got = set(idx.search(Nn("m", radius=radius, nprobe=nc), {"m": q}).ids)
        if got != {i for i, _ in dist[:cut]} and hi - lo > 1e-9:
            bad.append((c, "radius"))
    report(1, "exactness envelope", not bad, f"{corpora} corpora, mismatches={bad[:5]}")


def test_criterion_02_boolean_oracle():
    rng = np.random.default_rng(7)
    queries, bad = 0, 0
    for _ in range(20):
        docs = gen.random_corpus(rng, int(rng.integers(1, 300)))
        idx = Index()
        idx.add_documents(docs)
        for _ in range(60):
            q = gen.random_boolean(rng, depth=4)
            queries += 1
            bad += set(idx.search(q).ids) != gen.oracle_boolean(q, docs)
    report(2, "Boolean oracle equivalence", bad == 0 and queries >= 1000,
           f"{queries} queries, mismatches={bad}")


def test_criterion_03_ensemble_identity():
    rng = np.random.default_rng(3)
    worst = 0.0
    trials = 10_000
    for _ in range(trials):
        n = int(rng.integers(2, 6))
        dim = int(rng.integers(2, 9))
        w = rng.uniform(0.05, 5.0, size=n)
        qs = [rng.normal(size=dim) for _ in range(n)]
        ds = [rng.normal(size=dim) for _ in range(n)]
        eq, ed = weighted_concat(qs, w), normalized_concat(ds)
        cos = eq @ ed / (np.linalg.norm(eq) * np.linalg.norm(ed))
        lhs = cos * np.sqrt((w ** 2).sum()) * np.sqrt(n)
        worst = max(worst, abs(lhs - weighted_score(qs, ds, w)))
    report(3, "ensemble identity", worst < 1e-9, f"{trials} triples, max |diff|={worst:.2e}")


def test_criterion_04_gradient_check():
    errs, seed = [], 0
    while len(errs) < 100:
        shared = ("name.trigram", "c") if seed % 3 == 0 else ()
        e = gen.gradient_check(seed, shared=shared)
        if e is not None:
            errs.append(e)
        seed += 1
    report(4, "gradient check", max(errs) < 1e-4,
           f"{len(errs)} models ({seed - len(errs)} kink-adjacent draws skipped), "
           f"max rel err={max(errs):.2e}")


@pytest.mark.slow
def test_criterion_05_quantization_shape():
    pts = experiments.quant_sweep()
    by = {(p.config.transform, p.config.nprobe_default, p.config.pq_bytes): p for p in pts}
    probes = sorted({k[1] for k in by})
    pqs = sorted({k[2] for k in by})
    mono = all(by["identity", n, a].one_recall_at_10 <= by["identity", n, b].one_recall_at_10
               for n in probes for a, b in zip(pqs, pqs[1:]))
    plateau = max(abs(by["identity", n, 8].one_recall_at_10 - by["identity", n, 16].one_recall_at_10)
                  for n in probes)
    gaps = []
    for pq in pqs:
        plain = [p for p in pts if p.config.transform == "identity" and p.config.pq_bytes == pq]
        opq = [p for p in pts if p.config.transform == "opq" and p.config.pq_bytes == pq]
        gaps += [recall_at_matched_scan(opq, p.mean_scanned_documents) - p.one_recall_at_10
                 for p in plain]
    ok = mono and plateau <= 0.005 and min(gaps) >= 0.0
    report(5, "quantization shape", ok,
           f"non-decreasing={mono}, |r(d/4)-r(d/2)|max={plateau:.4f}, "
           f"min OPQ-PQ gap at matched scan={min(gaps):+.4f}")


@pytest.mark.slow
def test_criterion_06_mining_directionality():
    r = experiments.mining_comparison(seeds=range(5))
    a = r["online_hard"] > r["random"]
    b = r["non_click_impressions"] < r["random"]
    c = r["mixed"] >= r["offline_hard"]
    report(6, "mining directionality", a and b and c,
           ", ".join(f"{k}={v:.4f}" for k, v in r.items()) + f" (a={a} b={b} c={c})")


@pytest.mark.slow
def test_criterion_07_margin_sensitivity():
    r = experiments.margin_sweep()
    spread = max(r.values()) - min(r.values())
    report(7, "margin sensitivity", spread > 0.01,
           ", ".join(f"m={k}: {v:.4f}" for k, v in r.items()) + f", spread={spread:.4f}")


def test_criterion_08_hybrid_fuzzy(tutorial_runs):
    r = experiments.fuzzy_probe(tutorial_runs[0])
    target = "planted-john-smith"
    ok = target not in r["term_only"] and target in r["above"] and target not in r["below"]
    report(8, "hybrid fuzzy retrieval", ok,
           f"index distance={r['distance']:.4f} (rank {r['rank']}), term-only hit="
           f"{target in r['term_only']}, above={target in r['above']}, "
           f"below={target in r['below']}")


def test_criterion_09_persistence(tutorial_runs, tmp_path):
    art = tutorial_runs[0]
    mq, md, meta = load_checkpoint(art["checkpoint"])
    save_checkpoint(tmp_path / "copy.ckpt", mq, md, meta)
    mq2, md2, _ = load_checkpoint(tmp_path / "copy.ckpt")
    docs = [d for _, d in read_jsonl_documents(art["corpus"])]
    recs = [FeatureRecord.from_json(d.features) for d in docs[:200]]
    ckpt_ok = (np.array_equal(mq.encode(recs), mq2.encode(recs))
               and np.array_equal(md.encode(recs), md2.encode(recs)))

    live = Index()
    live.add_documents(docs)
    live.build_ann("unified", AnnConfig(16, 4, 8, "opq"))
    live.save(tmp_path / "idx")
    loaded = Index.open(tmp_path / "idx")
    rng = np.random.default_rng(0)
    worst, same = 0.0, True
    queries = mq.encode(recs[:50])
    for i, v in enumerate(queries):
        for q in (Nn("unified", top_k=20, nprobe=int(rng.integers(1, 17))),
                  Nn("unified", radius=0.4, nprobe=4),
                  And((Term("type", "person"), Nn("unified", radius=0.5)))):
            a, b = live.search(q, {"unified": v}), loaded.search(q, {"unified": v})
            same &= a.ids == b.ids and a.scanned_documents == b.scanned_documents
            if a.results:
                worst = max(worst, max(abs(x.distance - y.distance)
                                       for x, y in zip(a.results, b.results)))
    ok = ckpt_ok and same and worst <= 1e-6
    report(9, "persistence round-trip", ok,
           f"checkpoint encodings identical={ckpt_ok}, result ids identical={same}, "
           f"max distance diff={worst:.1e}")


def test_criterion_10_determinism(tutorial_runs):
    a, b = tutorial_runs
    same = {k: open(a[k], "rb").read() == open(b[k], "rb").read()
            for k in ("checkpoint", "manifest", "sweep")}
    report(10, "determinism", all(same.values()),
           ", ".join(f"{k} identical={v}" for k, v in same.items()))
