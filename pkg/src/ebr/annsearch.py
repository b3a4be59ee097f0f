"""Embedding search inside the inverted index.

Each embedding key gets an :class:`AnnSegment`: documents are normalized,
transformed, assigned to a coarse cluster (their cluster "term") and store a
quantized residual (their "payload"). An ``(nn ...)`` clause is rewritten into
a scan over the probed clusters, verifying the radius or selecting the top K
from ADC distance estimates.
"""
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _sets, quant, storage
from .errors import (DimensionMismatch, InvalidArgument, QueryValidationError,
                     UnknownEmbeddingKey)
from .querylang import And, Nn, Term, iter_nodes, validate_query
from .vecmath import normalize_rows


@dataclass
class AnnSegment:
    embedding_key: str
    config: quant.AnnConfig
    transform: object
    coarse: quant.CoarseQuantizer
    pq: Optional[quant.ProductQuantizer]
    cluster_ordinals: tuple  # per cluster, sorted int64 ordinals
    cluster_codes: tuple  # per cluster, uint8 (n, M) codes or float64 (n, d) residuals

    @property
    def dim(self):
        return self.transform.dim

    @property
    def num_clusters(self):
        return self.coarse.num_clusters

    @property
    def flat(self):
        return self.pq is None

    def __len__(self):
        return sum(o.shape[0] for o in self.cluster_ordinals)

    def prepare(self, vectors):
        x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise DimensionMismatch(
                f"embedding {self.embedding_key!r} has dim {self.dim}, got {x.shape[1]}")
        return self.transform.apply(normalize_rows(x))

    def encode(self, vectors):
        """Cluster ids and payload codes for raw (unnormalized) vectors."""
        xt = self.prepare(vectors)
        clusters = self.coarse.assign(xt)
        residuals = xt - self.coarse.centroids[clusters]
        codes = residuals if self.flat else self.pq.encode(residuals)
        return clusters, codes

    def reconstruct(self, cluster, code):
        """Approximate transformed vector for one stored entry."""
        r = code if self.flat else self.pq.decode(code[None, :])[0]
        return self.coarse.centroids[cluster] + r

    def with_added(self, ordinals, vectors):
        """Copy-on-write append; ordinals must exceed every stored ordinal."""
        ordinals = np.asarray(ordinals, dtype=np.int64)
        if ordinals.shape[0] == 0:
            return self
        clusters, codes = self.encode(vectors)
        ords = list(self.cluster_ordinals)
        cds = list(self.cluster_codes)
        for c in np.unique(clusters):
            sel = clusters == c
            ords[c] = np.concatenate([ords[c], ordinals[sel]])
            cds[c] = np.concatenate([cds[c], codes[sel]])
        return replace(self, cluster_ordinals=tuple(ords), cluster_codes=tuple(cds))

    def remapped(self, mapping):
        """Apply an old->new ordinal map (dict); entries missing from it are dropped."""
        ords, cds = [], []
        for o, c in zip(self.cluster_ordinals, self.cluster_codes):
            keep = np.array([int(x) in mapping for x in o], dtype=bool)
            new = np.array([mapping[int(x)] for x in o[keep]], dtype=np.int64)
            order = np.argsort(new, kind="stable")
            ords.append(new[order])
            cds.append(c[keep][order])
        return replace(self, cluster_ordinals=tuple(ords), cluster_codes=tuple(cds))

    def probes(self, query_t, nprobe):
        return quant.assign_coarse(self.coarse, query_t, nprobe)

    def scan(self, query_t, clusters, dead=_sets.EMPTY):
        """Estimated cosine distances for every live entry of ``clusters``.

        Returns ``(ordinals, distances, scanned)`` with ordinals sorted.
        """
        all_ords, all_dist = [], []
        scanned = 0
        table = None
        for c in clusters:
            ords = self.cluster_ordinals[c]
            codes = self.cluster_codes[c]
            if dead.shape[0]:
                live = np.isin(ords, dead, invert=True)
                ords, codes = ords[live], codes[live]
            if ords.shape[0] == 0:
                continue
            scanned += ords.shape[0]
            r = query_t - self.coarse.centroids[c]
            if self.flat:
                diff = codes - r
                d2 = np.einsum("ij,ij->i", diff, diff)
            else:
                table = quant.adc_table(self.pq, r)
                d2 = quant.adc_distances(table, codes)
            all_ords.append(ords)
            all_dist.append(np.clip(d2 / 2.0, 0.0, 2.0))
        if not all_ords:
            return _sets.EMPTY, np.zeros(0), 0
        ords = np.concatenate(all_ords)
        dist = np.concatenate(all_dist)
        order = np.argsort(ords, kind="stable")
        return ords[order], dist[order], scanned

    def knn(self, query, k, nprobe=None, dead=_sets.EMPTY, tie_keys=None):
        """Top-k ``(ordinals, distances, scanned)`` by estimated distance.

        ``tie_keys`` maps ordinal -> sort key used to break distance ties
        (doc ids in the index); ordinals are used when absent.
        """
        nprobe = self.num_clusters if nprobe is None else min(nprobe, self.num_clusters)
        qt = self.prepare(query)[0]
        ords, dist, scanned = self.scan(qt, self.probes(qt, nprobe), dead)
        order = _rank(ords, dist, tie_keys)[:k]
        return ords[order], dist[order], scanned


def _rank(ords, dist, tie_keys):
    if tie_keys is None:
        return np.lexsort((ords, dist))
    ties = [tie_keys(int(o)) for o in ords]
    return np.array(sorted(range(len(ords)), key=lambda i: (dist[i], ties[i])), dtype=np.int64)


def _seeds(seed):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(3)]


def build_ann_segment(docs, key, config, ordinals=None):
    """Train transform, coarse quantizer and residual PQ for ``key``.

    ``docs`` is a list of Documents (or raw vectors); ``ordinals`` defaults
    to list positions.
    """
    vectors = [d.embeddings[key] if hasattr(d, "embeddings") else d for d in docs]
    if ordinals is None:
        ordinals = np.arange(len(vectors), dtype=np.int64)
    ordinals = np.asarray(ordinals, dtype=np.int64)
    if len(vectors) < config.num_clusters:
        raise InvalidArgument(
            f"{len(vectors)} vectors for {key!r} but num_clusters={config.num_clusters}")
    dims = {np.asarray(v).shape for v in vectors}
    if len(dims) != 1:
        raise DimensionMismatch(f"inconsistent embedding dims for {key!r}: {sorted(dims)}")
    x = normalize_rows(np.asarray(vectors, dtype=np.float64))
    dim = x.shape[1]
    config.validate(dim)
    s_transform, s_coarse, s_pq = _seeds(config.seed)
    kind = config.transform_kind
    if kind == "identity":
        transform = quant.IdentityTransform(dim)
    elif kind == "pca":
        transform = quant.train_pca(x, config.transformed_dim(dim))
    else:
        transform, _ = quant.train_opq(x, config.pq_bytes, seed=s_transform,
                                       outer_iters=config.opq_iters, max_iters=config.pq_iters)
    xt = transform.apply(x)
    coarse = quant.train_kmeans(xt, config.num_clusters, seed=s_coarse,
                                max_iters=config.kmeans_iters)
    clusters = coarse.assign(xt)
    residuals = xt - coarse.centroids[clusters]
    pq = None
    if config.pq_bytes:
        pq = quant.train_pq(residuals, config.pq_bytes, seed=s_pq, max_iters=config.pq_iters)
        codes = pq.encode(residuals)
    else:
        codes = residuals
    order = np.lexsort((ordinals, clusters))
    ords, cds = [], []
    for c in range(config.num_clusters):
        sel = order[clusters[order] == c]
        ords.append(ordinals[sel])
        cds.append(codes[sel])
    return AnnSegment(key, config, transform, coarse, pq, tuple(ords), tuple(cds))


# -- query-time rewriting ----------------------------------------------------------

@dataclass
class NnPlan:
    """An ``(nn)`` clause rewritten into an Or over probed cluster terms."""
    key: str
    query_t: np.ndarray
    probes: list
    radius: Optional[float]
    top_k: Optional[int]
    segment: AnnSegment = field(repr=False)

    def __str__(self):
        terms = " ".join(f"(term nn.{self.key}:{c})" for c in self.probes)
        verify = f":radius {self.radius!r}" if self.radius is not None else f":topk {self.top_k}"
        return f"(verify {verify} (or {terms}))"

    def execute(self, dead=_sets.EMPTY, tie_keys=None):
        """Matching ``(ordinals, distances, scanned)``, ordinals sorted."""
        ords, dist, scanned = self.segment.scan(self.query_t, self.probes, dead)
        if self.radius is not None:
            keep = dist <= self.radius
            return ords[keep], dist[keep], scanned
        top = np.sort(_rank(ords, dist, tie_keys)[:self.top_k])
        return ords[top], dist[top], scanned


def resolve_nprobe(node, segment):
    if node.nprobe is not None:
        return min(node.nprobe, segment.num_clusters)
    if node.top_k is not None:
        return segment.num_clusters
    return segment.config.nprobe_default


def rewrite_nn(node, query_emb, segment):
    if segment is None or node.key != segment.embedding_key:
        raise UnknownEmbeddingKey(node.key)
    qt = segment.prepare(query_emb)[0]
    return NnPlan(node.key, qt, segment.probes(qt, resolve_nprobe(node, segment)),
                  node.radius, node.top_k, segment)


# -- hybrid evaluation ---------------------------------------------------------------

@dataclass
class SearchResult:
    doc_id: str
    distance: Optional[float]
    matched_via: tuple  # AST paths of the leaves that matched


@dataclass
class SearchResponse:
    results: list
    scanned_documents: int
    elapsed_us: int = 0

    @property
    def ids(self):
        return [r.doc_id for r in self.results]

    def to_json(self):
        return {
            "results": [{"id": r.doc_id, "distance": r.distance} for r in self.results],
            "scanned_documents": self.scanned_documents,
            "elapsed_us": self.elapsed_us,
        }


def search(q, query_embs, snapshot):
    """Evaluate a hybrid query against an index snapshot."""
    t0 = time.perf_counter()
    diags = validate_query(q, set(snapshot.ann_segments))
    if diags:
        raise QueryValidationError(diags)
    query_embs = query_embs or {}
    tie = snapshot.doc_id_of
    matches = {}  # path -> ordinal array
    nn_dist = {}  # path -> {ordinal: distance}
    scanned = 0

    def ev(node, path):
        nonlocal scanned
        if isinstance(node, Term):
            out = snapshot.term_ordinals(node.key)
        elif isinstance(node, Nn):
            if node.key not in query_embs:
                raise UnknownEmbeddingKey(f"no query embedding supplied for {node.key!r}")
            plan = rewrite_nn(node, query_embs[node.key], snapshot.ann_segments[node.key])
            out, dist, n = plan.execute(snapshot.dead, tie)
            scanned += n
            nn_dist[path] = dict(zip(out.tolist(), dist.tolist()))
        else:
            parts = [ev(c, f"{path}/{i}") for i, c in enumerate(node.children)]
            out = _sets.intersect(parts) if isinstance(node, And) else _sets.union(parts)
        matches[path] = out
        return out

    root = ev(q, "root")
    results = []
    for o in root.tolist():
        leaves = _matched_leaves(q, "root", o, matches)
        dists = [nn_dist[p][o] for p in leaves if p in nn_dist]
        results.append(SearchResult(snapshot.doc_id_of(o), min(dists) if dists else None,
                                    tuple(leaves)))
    results.sort(key=lambda r: (r.distance is None, r.distance or 0.0, r.doc_id))
    elapsed = int((time.perf_counter() - t0) * 1e6)
    return SearchResponse(results, scanned, elapsed)


def _contains(arr, o):
    i = np.searchsorted(arr, o)
    return i < arr.shape[0] and arr[i] == o


def _matched_leaves(node, path, o, matches):
    if not _contains(matches[path], o):
        return []
    if isinstance(node, (Term, Nn)):
        return [path]
    out = []
    for i, c in enumerate(node.children):
        out.extend(_matched_leaves(c, f"{path}/{i}", o, matches))
    return out


def nn_keys(q):
    return {n.key for _, n in iter_nodes(q) if isinstance(n, Nn)}


# -- persistence ---------------------------------------------------------------------

POSTINGS_MAGIC = b"EBRANNPL"
POSTINGS_VERSION = 1


def pack_segment_postings(seg):
    w = storage.Writer()
    w.u32(seg.num_clusters)
    w.u8(1 if seg.flat else 0)
    for o, c in zip(seg.cluster_ordinals, seg.cluster_codes):
        w.array(o, "<i8")
        w.array(c, "<f8" if seg.flat else "<u1")
    return storage.pack_file(POSTINGS_MAGIC, POSTINGS_VERSION, w.getvalue())


def unpack_segment(key, config, quantizer_bytes, postings_bytes):
    transform, coarse, pq = quant.unpack_quantizers(quantizer_bytes)
    r = storage.Reader(storage.unpack_file(postings_bytes, POSTINGS_MAGIC, POSTINGS_VERSION,
                                           f"ann/{key}/postings.bin"))
    k = r.u32()
    flat = r.u8() == 1
    ords, cds = [], []
    for _ in range(k):
        ords.append(r.array("<i8"))
        cds.append(r.array("<f8" if flat else "<u1"))
    return AnnSegment(key, config, transform, coarse, pq, tuple(ords), tuple(cds))
