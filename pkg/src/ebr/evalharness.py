"""Offline metrics and ANN tuning sweeps."""
import csv
import io
import itertools
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import annsearch
from .errors import EbrError, InvalidArgument
from .quant import AnnConfig
from .vecmath import normalize_rows

log = logging.getLogger(__name__)

CSV_COLUMNS = ["num_clusters", "nprobe", "pq_bytes", "transform", "one_recall_at_10",
               "recall_at_1", "recall_at_10", "recall_at_100", "mean_scanned_documents",
               "mean_latency_us"]


def recall_at_k(ranked, targets, k):
    if k < 1:
        raise InvalidArgument("K must be >= 1")
    targets = set(targets)
    if not targets:
        raise InvalidArgument("target set is empty")
    return len(targets.intersection(ranked[:k])) / len(targets)


def one_recall_at_10(ann_top10, exact_top1):
    return 1.0 if exact_top1 in list(ann_top10)[:10] else 0.0


def mean_one_recall_at_10(pairs):
    pairs = list(pairs)
    return float(np.mean([one_recall_at_10(a, e) for a, e in pairs])) if pairs else 0.0


class Corpus:
    """Doc ids with an (n, d) embedding matrix; rows are normalized once."""

    def __init__(self, ids, vectors):
        self.ids = list(ids)
        if not self.ids:
            raise InvalidArgument("empty corpus")
        self.vectors = np.asarray(vectors, dtype=np.float64)
        self.unit = normalize_rows(self.vectors)
        order = np.argsort(np.asarray(self.ids, dtype=object), kind="stable")
        self.tie_rank = np.empty(len(self.ids), dtype=np.int64)
        self.tie_rank[order] = np.arange(len(self.ids))

    @classmethod
    def from_documents(cls, docs, key):
        docs = [d for d in docs if key in d.embeddings]
        return cls([d.doc_id for d in docs], [d.embeddings[key] for d in docs])

    def __len__(self):
        return len(self.ids)

    def rank(self, query, k=None):
        """Row indices by descending cosine, ties by doc id."""
        q = np.asarray(query, dtype=np.float64)
        nq = np.sqrt(q @ q)
        if nq == 0.0:
            raise InvalidArgument("zero query vector")
        order = np.lexsort((self.tie_rank, -(self.unit @ (q / nq))))
        return order if k is None else order[:k]


def exact_knn(corpus, query, k):
    """Exhaustive cosine ranking (ties by doc id); the ground-truth oracle."""
    if not isinstance(corpus, Corpus):
        ids, vecs = zip(*corpus.items()) if isinstance(corpus, dict) else corpus
        corpus = Corpus(ids, np.asarray(vecs))
    return [corpus.ids[i] for i in corpus.rank(query, k)]


@dataclass
class EvalSession:
    query: object  # FeatureRecord (or a raw query vector for vector-only sweeps)
    target_ids: frozenset
    session_id: str = ""

    def __post_init__(self):
        self.target_ids = frozenset(self.target_ids)
        if not self.target_ids:
            raise InvalidArgument(f"session {self.session_id!r} has no targets")


def sessions_from_log(sessions, prefix="s"):
    """Eval sessions from a session log: the target is the click or later success."""
    out = []
    for i, s in enumerate(sessions):
        targets = set(s.clicked) | ({s.later_success} if s.later_success else set())
        if targets:
            out.append(EvalSession(s.query, targets, f"{prefix}{i}"))
    return out


def embed_corpus(model_d, corpus_records, batch_size=1024):
    """Corpus of document-tower embeddings from ``{doc_id: FeatureRecord}``."""
    ids = sorted(corpus_records)
    chunks = [model_d.encode([corpus_records[i] for i in ids[s:s + batch_size]])
              for s in range(0, len(ids), batch_size)]
    return Corpus(ids, np.concatenate(chunks))


def model_recall(model_q, model_d, corpus_records, sessions, ks=(1, 10, 100), corpus=None):
    """Mean recall@K over sessions using exact KNN over the full corpus."""
    corpus = corpus or embed_corpus(model_d, corpus_records)
    yq = model_q.encode([s.query for s in sessions])
    kmax = max(ks)
    out = {k: 0.0 for k in ks}
    for s, q in zip(sessions, yq):
        ranked = [corpus.ids[i] for i in corpus.rank(q, kmax)]
        for k in ks:
            out[k] += recall_at_k(ranked, s.target_ids, k)
    return {k: v / len(sessions) for k, v in out.items()}


# -- sweeps -------------------------------------------------------------------------

@dataclass
class SweepPoint:
    config: AnnConfig
    one_recall_at_10: float
    recall_at_k: dict
    mean_scanned_documents: float
    mean_latency_us: float = None

    def row(self):
        r = {"num_clusters": self.config.num_clusters, "nprobe": self.config.nprobe_default,
             "pq_bytes": self.config.pq_bytes, "transform": self.config.transform,
             "one_recall_at_10": f"{self.one_recall_at_10:.6f}",
             "mean_scanned_documents": f"{self.mean_scanned_documents:.3f}",
             "mean_latency_us": "" if self.mean_latency_us is None else f"{self.mean_latency_us:.1f}"}
        for k in (1, 10, 100):
            r[f"recall_at_{k}"] = f"{self.recall_at_k.get(k, 0.0):.6f}"
        return r


@dataclass
class SweepGrid:
    num_clusters: list
    nprobe: list
    pq_bytes: list
    transform: list = field(default_factory=lambda: ["identity"])
    seed: int = 0

    def __len__(self):
        return len(self.num_clusters) * len(self.nprobe) * len(self.pq_bytes) * len(self.transform)


def run_sweep(grid, corpus, queries, targets=None, threads=1, measure_latency=True):
    """Evaluate every grid point; one segment build per (clusters, pq_bytes, transform).

    ``queries`` is an (m, d) array of query embeddings; ``targets`` an
    optional list of target-id sets for recall@K (defaults to each query's
    exact top-1). Points are returned sorted by mean scanned documents.
    """
    if len(grid) == 0:
        raise InvalidArgument("empty sweep grid")
    queries = np.asarray(queries, dtype=np.float64)
    exact = [corpus.ids[corpus.rank(q, 1)[0]] for q in queries]
    if targets is None:
        targets = [{e} for e in exact]
    ids = corpus.ids
    points = []
    for nc, pqb, tr in itertools.product(grid.num_clusters, grid.pq_bytes, grid.transform):
        probes = sorted(set(grid.nprobe))
        try:
            base = AnnConfig(nc, 1, pqb, tr, seed=grid.seed).validate(corpus.vectors.shape[1])
            seg = annsearch.build_ann_segment(list(corpus.vectors), "sweep", base)
        except EbrError as exc:
            log.warning("skipping clusters=%s pq_bytes=%s transform=%s: %s", nc, pqb, tr, exc)
            continue
        for npr in probes:
            if npr > nc:
                log.warning("skipping nprobe=%s > num_clusters=%s", npr, nc)
                continue

            def one(q, npr=npr):
                t0 = time.perf_counter()
                ords, _, scanned = seg.knn(q, 100, npr)
                return [ids[o] for o in ords], scanned, time.perf_counter() - t0

            if threads > 1:
                with ThreadPoolExecutor(threads) as ex:
                    res = list(ex.map(one, queries))
            else:
                res = [one(q) for q in queries]
            rk = {k: float(np.mean([recall_at_k(r[0], t, k) for r, t in zip(res, targets)]))
                  for k in (1, 10, 100)}
            points.append(SweepPoint(
                AnnConfig(nc, npr, pqb, tr, seed=grid.seed),
                mean_one_recall_at_10((r[0][:10], e) for r, e in zip(res, exact)), rk,
                float(np.mean([r[1] for r in res])),
                float(np.mean([r[2] for r in res]) * 1e6) if measure_latency else None))
    points.sort(key=lambda p: (p.mean_scanned_documents, p.config.num_clusters,
                               p.config.nprobe_default, p.config.pq_bytes, p.config.transform))
    return points


def sweep_csv(points):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for p in points:
        w.writerow(p.row())
    return buf.getvalue()


def recall_at_matched_scan(points, scanned):
    """Linear interpolation of 1-recall@10 against mean scanned documents."""
    pts = sorted((p.mean_scanned_documents, p.one_recall_at_10) for p in points)
    xs, ys = zip(*pts)
    return float(np.interp(scanned, xs, ys))


def anisotropic_vectors(n, dim=32, seed=0, decay=0.85, num_centers=64, center_scale=1.0):
    """Clustered vectors with geometrically decaying per-axis variance, randomly rotated.

    Variance concentrates in a few directions that are spread unevenly over
    the PQ subspaces, which is the regime where a learned rotation pays off.
    """
    scales = decay ** np.arange(dim)
    # the mixture is fixed; ``seed`` only drives sampling, so corpora and
    # queries drawn with different seeds share one distribution
    shared = np.random.default_rng(12345)
    centers = shared.normal(size=(num_centers, dim)) * scales * center_scale
    rot, _ = np.linalg.qr(shared.normal(size=(dim, dim)))
    rng = np.random.default_rng(seed)
    x = centers[rng.integers(num_centers, size=n)] + rng.normal(size=(n, dim)) * scales * 0.5
    return x @ rot.T
