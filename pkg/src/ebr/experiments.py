"""Reproducible experiment drivers shared by the scripts and the acceptance suite."""
import json
import os
from dataclasses import dataclass

import numpy as np

from . import evalharness
from .trainer import synthetic as syn
from .trainer.mining import MiningConfig, mine_offline_hard_negatives
from .trainer.model import init_towers
from .trainer.train import TrainConfig, TrainingData, examples_from_sessions, train


@dataclass
class Bench:
    """A fixed synthetic world: corpus records, training data and eval sessions."""
    cfg: syn.SyntheticConfig
    corpus: dict
    data: TrainingData
    sessions: list

    @classmethod
    def make(cls, cfg=syn.SyntheticConfig()):
        world = syn.make_world(cfg)
        corpus = {p.doc_id: world.doc_features(p) for p in world.people}
        train_s = syn.make_sessions(world, cfg.num_train_sessions)
        eval_s = syn.make_sessions(world, cfg.num_eval_sessions, failure_rate=0.0)
        return cls(cfg, corpus, TrainingData(examples_from_sessions(train_s), corpus),
                   evalharness.sessions_from_log(eval_s))

    def recall10(self, res):
        return evalharness.model_recall(res.model_q, res.model_d, self.corpus, self.sessions,
                                        ks=(10,))[10]


def _offline_negatives(bench, base, mining):
    c = evalharness.embed_corpus(base.model_d, bench.corpus)
    ex = bench.data.select(mining.positive_source)
    return mine_offline_hard_negatives(
        base.model_q.encode([e.query for e in ex]), c.unit, c.ids,
        [{e.positive_id} for e in ex], mining.offline_rank_window,
        mining.hard_negatives_per_positive, seed=0)


def mining_comparison(seeds=range(5), bench=None, hp=TrainConfig()):
    """Mean recall@10 per negative-mining strategy, averaged over training seeds.

    Offline hard negatives are mined from the random-negative model of the
    same seed; ``mixed`` draws its hard slots from that same pool, so it and
    ``offline_hard`` differ only in the easy:hard mix.
    """
    bench = bench or Bench.make()
    out = {k: [] for k in ("random", "online_hard", "non_click_impressions", "offline_hard",
                           "mixed")}
    for seed in seeds:
        q0, d0 = init_towers(syn.model_config(bench.cfg), seed=seed)
        h = TrainConfig(hp.lr, hp.batch_size, hp.epochs, hp.margin, seed)
        base = train(q0, d0, MiningConfig(), bench.data, h)
        out["random"].append(bench.recall10(base))
        for src in ("online_hard", "non_click_impressions"):
            out[src].append(bench.recall10(
                train(q0, d0, MiningConfig(negative_source=src), bench.data, h)))
        off = _offline_negatives(bench, base, MiningConfig())
        for src in ("offline_hard", "mixed"):
            out[src].append(bench.recall10(train(
                q0, d0, MiningConfig(negative_source=src, easy_to_hard_ratio=100.0),
                bench.data, h, offline_negatives=off)))
    return {k: float(np.mean(v)) for k, v in out.items()}


def margin_sweep(margins=(0.05, 0.1, 0.2, 0.4), seeds=(0,), bench=None, hp=TrainConfig()):
    """Mean recall@10 of random-negative training per margin."""
    bench = bench or Bench.make()
    out = {}
    for m in margins:
        vals = []
        for seed in seeds:
            q0, d0 = init_towers(syn.model_config(bench.cfg), seed=seed)
            h = TrainConfig(hp.lr, hp.batch_size, hp.epochs, float(m), seed)
            vals.append(bench.recall10(train(q0, d0, MiningConfig(), bench.data, h)))
        out[float(m)] = float(np.mean(vals))
    return out


def quant_sweep(num_vectors=10_000, num_queries=500, dim=32, num_clusters=64,
                nprobe=(1, 2, 4, 8, 16), pq_bytes=None, transforms=("identity", "opq"), seed=0):
    """Sweep points on the anisotropic synthetic corpus (latency off, so deterministic)."""
    pq_bytes = pq_bytes or (dim // 8, dim // 4, dim // 2)
    x = evalharness.anisotropic_vectors(num_vectors, dim, seed=seed)
    q = evalharness.anisotropic_vectors(num_queries, dim, seed=seed + 1)
    corpus = evalharness.Corpus([f"v{i:06d}" for i in range(num_vectors)], x)
    grid = evalharness.SweepGrid([num_clusters], list(nprobe), list(pq_bytes), list(transforms),
                                 seed=seed)
    return evalharness.run_sweep(grid, corpus, q, measure_latency=False)


# -- tutorial ------------------------------------------------------------------------------

TUTORIAL_INDEX = dict(num_clusters=16, pq_bytes=8, transform="opq")


def _cli(*argv):
    from .cli import main

    code = main([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"ebr {' '.join(map(str, argv))} exited {code}")


def run_tutorial(out_dir, seed=0, num_docs=1000, epochs=5):
    """ingest, train, embed, index and sweep through the CLI; returns artifact paths."""
    d = os.fspath(out_dir)
    p = lambda name: os.path.join(d, name)  # noqa: E731
    common = ["--verbosity", "0", "--seed", seed]
    _cli(*common, "synth", p("data"), "--num-docs", num_docs)
    _cli(*common, "train", "--data", p("data/train.jsonl"), "--corpus", p("data/corpus.jsonl"),
         "--out", p("model.ckpt"), "--positives", "clicks+hard_positives",
         "--mining", "online_hard", "--epochs", epochs)
    _cli(*common, "embed", p("data/corpus.jsonl"), "--model", p("model.ckpt"), "--key", "unified",
         "--out", p("embedded.jsonl"))
    _cli(*common, "ingest", p("embedded.jsonl"), p("index"))
    cfg = TUTORIAL_INDEX
    _cli(*common, "index", "build", p("index"), "--key", "unified", "--num-clusters",
         cfg["num_clusters"], "--nprobe", 4, "--pq-bytes", cfg["pq_bytes"], "--transform",
         cfg["transform"])
    _cli(*common, "sweep", "--corpus", p("embedded.jsonl"), "--key", "unified", "--sessions",
         p("data/sessions_eval.jsonl"), "--model", p("model.ckpt"), "--num-clusters", "8,16",
         "--nprobe", "1,4,8", "--pq-bytes", "0,8", "--no-latency", "--out", p("sweep.csv"))
    return {"checkpoint": p("model.ckpt"), "manifest": p("index/manifest.json"),
            "sweep": p("sweep.csv"), "index": p("index"), "query": p("data/query.json"),
            "corpus": p("embedded.jsonl")}


def fuzzy_probe(artifacts, planted_id="planted-john-smith", eps=1e-4):
    """Check that the planted misspelled-name target is reachable only through ``nn``.

    Returns a dict with the planted document's index-estimated distance and
    the result sets for the term query and for radius just above / below it.
    """
    from .index import Index
    from .querylang import And, Nn, Or, Term
    from .trainer.features import FeatureRecord
    from .trainer.model import load_checkpoint

    idx = Index.open(artifacts["index"])
    mq, _, _ = load_checkpoint(artifacts["checkpoint"])
    with open(artifacts["query"], encoding="utf-8") as f:
        emb = {"unified": mq.encode([FeatureRecord.from_json(json.load(f))])[0]}
    nc = idx.snapshot.ann_segments["unified"].num_clusters
    everything = idx.search(Nn("unified", top_k=len(idx.snapshot), nprobe=nc), emb)
    dist = {r.doc_id: r.distance for r in everything.results}[planted_id]
    text = And((Term("text", "john"), Term("text", "smithe")))

    def ids(radius):
        q = Or((text, Nn("unified", radius=radius, nprobe=nc)))
        return set(idx.search(q, emb).ids)

    return {"distance": dist, "rank": everything.ids.index(planted_id) + 1,
            "term_only": set(idx.search(text).ids), "above": ids(dist + eps),
            "below": ids(max(dist - eps, 0.0))}
