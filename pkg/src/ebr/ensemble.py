"""Model ensembles: weighted-concatenation serving embeddings and cascade reranking."""
import hashlib
import itertools
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, UnknownEmbeddingKey
from .querylang import And, Nn
from .vecmath import l2_normalize, normalize_rows

MODES = ("weighted_concat", "cascade")


@dataclass(frozen=True)
class EnsembleMember:
    model_id: str
    model_q: object = field(repr=False)
    model_d: object = field(repr=False)


@dataclass(frozen=True)
class EnsembleSpec:
    """``models`` are ordered; for a cascade the first is stage 1, the second stage 2.

    ``keys`` name each model's document-embedding key in the index (default:
    the model ids).
    """
    models: tuple
    weights: tuple = ()
    mode: str = "weighted_concat"
    rerank_depth: int = 100
    keys: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        weights = tuple(float(w) for w in self.weights) or (1.0,) * len(self.models)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "keys", tuple(self.keys) or tuple(m.model_id for m in self.models))
        if self.mode not in MODES:
            raise InvalidArgument(f"unknown ensemble mode {self.mode!r}")
        if len(weights) != len(self.models) or len(self.keys) != len(self.models):
            raise InvalidArgument("one weight and one key per model")
        if not all(np.isfinite(w) and w > 0 for w in weights):
            raise InvalidArgument(f"weights must be positive, got {weights}")
        if self.mode == "weighted_concat" and len(self.models) < 2:
            raise InvalidArgument("weighted_concat needs at least two models")
        if self.mode == "cascade" and len(self.models) != 2:
            raise InvalidArgument("cascade takes exactly two stages")
        if int(self.rerank_depth) < 1:
            raise InvalidArgument("rerank_depth must be >= 1")

    def to_json(self):
        return {"mode": self.mode, "models": [m.model_id for m in self.models],
                "weights": list(self.weights), "rerank_depth": int(self.rerank_depth),
                "keys": list(self.keys)}


def spec_hash(spec):
    blob = json.dumps(spec.to_json(), sort_keys=True).encode()
    return hashlib.blake2b(blob, digest_size=8).hexdigest()


def embedding_key(spec):
    """Index key for this ensemble's serving embeddings."""
    return f"ensemble:{spec_hash(spec)}"


# -- weighted concatenation -----------------------------------------------------------

def weighted_concat(vectors, weights):
    """Concatenation of ``alpha_i * normalize(v_i)`` (query side)."""
    if len(vectors) != len(weights):
        raise InvalidArgument("one weight per vector")
    return np.concatenate([w * l2_normalize(v) for v, w in zip(vectors, weights)])


def normalized_concat(vectors):
    """Concatenation of normalized sub-vectors (document side)."""
    return np.concatenate([l2_normalize(v) for v in vectors])


def weighted_score(query_vectors, doc_vectors, weights):
    """``S_w``: the weighted sum of per-model cosine similarities."""
    return float(sum(w * (l2_normalize(q) @ l2_normalize(d))
                     for q, d, w in zip(query_vectors, doc_vectors, weights)))


def ensemble_query_embedding(spec, record):
    return weighted_concat([m.model_q.encode([record])[0] for m in spec.models], spec.weights)


def ensemble_document_embedding(spec, record):
    return normalized_concat([m.model_d.encode([record])[0] for m in spec.models])


def ensemble_document_embeddings(spec, records):
    """Batched document side; rows match :func:`ensemble_document_embedding`."""
    return np.concatenate([normalize_rows(m.model_d.encode(records)) for m in spec.models], axis=1)


# -- cascade -----------------------------------------------------------------------------

def cascade_rerank(snapshot, stage1_key, stage1_emb, stage2_key, stage2_emb, depth,
                   radius=None, constraint=None, nprobe=None):
    """Stage-1 retrieval through the index, then exact stage-2 cosine rerank.

    Stage 1 is ``(nn stage1_key :topk depth)`` or, when ``radius`` is given,
    a radius clause truncated to the ``depth`` nearest. ``constraint`` is an
    optional Boolean AST ANDed with the clause. Returns ``[(doc_id, sim)]``
    sorted by descending stage-2 similarity, ties by doc id.
    """
    nn = Nn(stage1_key, radius=radius, nprobe=nprobe) if radius is not None else \
        Nn(stage1_key, top_k=int(depth), nprobe=nprobe)
    q = And((constraint, nn)) if constraint is not None else nn
    resp = snapshot.search(q, {stage1_key: stage1_emb})
    cands = resp.ids[:int(depth)]
    q2 = l2_normalize(stage2_emb)
    out = []
    for doc_id in cands:
        emb = snapshot.get(doc_id).embeddings.get(stage2_key)
        if emb is None:
            raise UnknownEmbeddingKey(f"document {doc_id!r} has no {stage2_key!r} embedding")
        out.append((doc_id, float(q2 @ l2_normalize(emb))))
    out.sort(key=lambda r: (-r[1], r[0]))
    return out


def cascade_search(spec, query, snapshot, radius=None, constraint=None, nprobe=None):
    """Run the two-stage cascade for a query FeatureRecord."""
    if spec.mode != "cascade":
        raise InvalidArgument("cascade_search needs a cascade spec")
    first, second = spec.models
    return cascade_rerank(snapshot, spec.keys[0], first.model_q.encode([query])[0],
                          spec.keys[1], second.model_q.encode([query])[0],
                          spec.rerank_depth, radius, constraint, nprobe)


# -- spec files and weight tuning -----------------------------------------------------------

def load_spec(path):
    """Read a JSON spec file; checkpoint paths are relative to the spec file."""
    from .trainer.model import load_checkpoint

    with open(path, encoding="utf-8") as f:
        try:
            obj = json.load(f)
        except ValueError as exc:
            raise InvalidArgument(f"{path}: {exc}") from None
    base = os.path.dirname(os.path.abspath(path))
    members = []
    for p in obj.get("models", []):
        q, d, _ = load_checkpoint(os.path.join(base, p))
        members.append(EnsembleMember(os.path.splitext(os.path.basename(p))[0], q, d))
    return EnsembleSpec(tuple(members), tuple(obj.get("weights", ())),
                        obj.get("mode", "weighted_concat"), int(obj.get("rerank_depth", 100)),
                        tuple(obj.get("keys", ())))


def grid_search_weights(members, corpus_records, sessions, grid=(0.5, 1.0, 2.0), k=10):
    """Pick weights maximizing mean recall@k of ``S_w`` under exact ranking.

    ``grid`` lists candidate values per weight; the first weight is pinned to
    1 since rankings only depend on weight ratios. Returns ``(best, table)``
    with ``table`` a list of ``(weights, recall)`` in grid order.
    """
    ids = sorted(corpus_records)
    docs = [corpus_records[i] for i in ids]
    tie = np.arange(len(ids))  # ids are sorted, so position is the tie-break
    sims = [normalize_rows(m.model_q.encode([s.query for s in sessions]))
            @ normalize_rows(m.model_d.encode(docs)).T for m in members]
    table = []
    for rest in itertools.product(grid, repeat=len(members) - 1):
        w = (1.0, *rest)
        score = sum(a * s for a, s in zip(w, sims))
        rec = 0.0
        for row, s in zip(score, sessions):
            top = np.lexsort((tie, -row))[:k]
            rec += len(s.target_ids.intersection(ids[i] for i in top)) / len(s.target_ids)
        table.append((w, rec / len(sessions)))
    best = max(table, key=lambda t: t[1])[0]
    return best, table
