"""Single-node inverted index over bags of namespaced terms.

Writers build the next :class:`IndexSnapshot` copy-on-write and publish it
by swapping one reference, so readers holding an older snapshot are never
affected by later mutations.
"""
import base64
import json
import os
import shutil
import threading
import urllib.parse
from dataclasses import dataclass, field, replace

import numpy as np

from . import _sets, annsearch, quant, storage
from .errors import (ChecksumError, DimensionMismatch, DuplicateDocument, FormatError,
                     InvalidArgument, UnknownDocument)
from .querylang import And, Or, Term, has_nn
from .vecmath import as_vector


@dataclass
class Document:
    doc_id: str
    terms: dict = field(default_factory=dict)  # "ns:value" -> payload bytes or None
    embeddings: dict = field(default_factory=dict)  # key -> float64 vector
    features: dict = field(default_factory=dict)  # raw feature record

    def __post_init__(self):
        if not self.doc_id:
            raise InvalidArgument("doc_id must be nonempty")
        if not isinstance(self.terms, dict):
            self.terms = {t: None for t in self.terms}
        for t in self.terms:
            ns, sep, value = t.partition(":")
            if not (ns and sep and value):
                raise InvalidArgument(f"malformed term {t!r} in document {self.doc_id!r}")
        self.embeddings = {k: as_vector(v) for k, v in self.embeddings.items()}

    @classmethod
    def from_json(cls, obj):
        if not isinstance(obj, dict) or not isinstance(obj.get("id"), str):
            raise InvalidArgument("document needs a string 'id'")
        terms = {t: None for t in obj.get("terms", [])}
        for t, b64 in (obj.get("payloads") or {}).items():
            terms[t] = base64.b64decode(b64, validate=True)
        return cls(obj["id"], terms, dict(obj.get("embeddings") or {}),
                   dict(obj.get("features") or {}))

    def to_json(self):
        out = {"id": self.doc_id, "terms": list(self.terms)}
        payloads = {t: base64.b64encode(p).decode("ascii")
                    for t, p in self.terms.items() if p is not None}
        if payloads:
            out["payloads"] = payloads
        if self.embeddings:
            out["embeddings"] = {k: v.tolist() for k, v in self.embeddings.items()}
        if self.features:
            out["features"] = self.features
        return out


def read_jsonl_documents(path):
    """Yield ``(line_number, Document)``; malformed lines raise with the line number."""
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                doc = Document.from_json(json.loads(line))
            except (ValueError, TypeError) as exc:
                raise InvalidArgument(f"{path}:{lineno}: {exc}") from None
            yield lineno, doc


def write_jsonl_documents(path, docs):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        for d in docs:
            f.write(json.dumps(d.to_json(), sort_keys=True) + "\n")
    os.replace(tmp, path)


@dataclass(frozen=True)
class PostingList:
    term: str
    ordinals: np.ndarray  # strictly ascending int64
    payloads: tuple  # parallel to ordinals


@dataclass(frozen=True)
class IndexSnapshot:
    documents: dict  # ordinal -> Document (live and tombstoned)
    ordinals: dict  # doc_id -> ordinal (live only)
    postings: dict  # term -> PostingList
    ann_segments: dict  # embedding key -> AnnSegment
    dims: dict  # embedding key -> dim
    generation: int = 0
    next_ordinal: int = 0
    dead: np.ndarray = field(default_factory=lambda: _sets.EMPTY)

    def __len__(self):
        return len(self.ordinals)

    def doc_id_of(self, ordinal):
        return self.documents[ordinal].doc_id

    def get(self, doc_id):
        return self.documents[self.ordinals[doc_id]]

    def live_documents(self):
        return [self.documents[o] for o in sorted(self.ordinals.values())]

    def term_ordinals(self, term):
        pl = self.postings.get(term)
        if pl is None:
            return _sets.EMPTY
        return _sets.remove(pl.ordinals, self.dead)

    def search(self, q, query_embs=None):
        return annsearch.search(q, query_embs, self)


def empty_snapshot(dims=None):
    return IndexSnapshot({}, {}, {}, {}, dict(dims or {}))


def _eval(q, snap):
    if isinstance(q, Term):
        return snap.term_ordinals(q.key)
    if isinstance(q, And):
        return _sets.intersect([_eval(c, snap) for c in q.children])
    if isinstance(q, Or):
        return _sets.union([_eval(c, snap) for c in q.children])
    raise InvalidArgument(f"cannot evaluate {type(q).__name__} as a Boolean node")


def evaluate_boolean(q, snapshot):
    """Doc ids matching a term-only query (no ``nn`` clauses)."""
    if has_nn(q):
        raise InvalidArgument("evaluate_boolean does not handle nn clauses; use search()")
    return {snapshot.doc_id_of(o) for o in _eval(q, snapshot).tolist()}


def doc_matches(q, terms):
    """Whether a single document's term set satisfies a term-only query."""
    if isinstance(q, Term):
        return q.key in terms
    if isinstance(q, And):
        return all(doc_matches(c, terms) for c in q.children)
    if isinstance(q, Or):
        return any(doc_matches(c, terms) for c in q.children)
    raise InvalidArgument("ingestion filters cannot contain nn clauses")


class Index:
    """Mutable handle over a sequence of immutable snapshots.

    ``filter`` is an optional term-only query; documents that fail it are
    skipped at ingestion (index selection).
    """

    def __init__(self, dims=None, filter=None, snapshot=None):
        if filter is not None and has_nn(filter):
            raise InvalidArgument("ingestion filters cannot contain nn clauses")
        self.filter = filter
        self._snapshot = snapshot if snapshot is not None else empty_snapshot(dims)
        self._lock = threading.Lock()

    @property
    def snapshot(self):
        return self._snapshot

    @property
    def generation(self):
        return self._snapshot.generation

    def accepts(self, doc):
        return self.filter is None or doc_matches(self.filter, doc.terms)

    # -- mutations -------------------------------------------------------------

    def add_document(self, doc):
        return self.add_documents([doc])

    def add_documents(self, docs):
        """Add a batch as one mutation; returns the new generation.

        Documents rejected by the ingestion filter are skipped silently; use
        :meth:`accepts` to count them.
        """
        with self._lock:
            snap = self._snapshot
            docs = [d for d in docs if self.accepts(d)]
            seen = set()
            dims = dict(snap.dims)
            for d in docs:
                if d.doc_id in snap.ordinals or d.doc_id in seen:
                    raise DuplicateDocument(d.doc_id)
                seen.add(d.doc_id)
                for k, v in d.embeddings.items():
                    if dims.setdefault(k, v.shape[0]) != v.shape[0]:
                        raise DimensionMismatch(
                            f"document {d.doc_id!r}: embedding {k!r} has dim {v.shape[0]},"
                            f" index expects {dims[k]}")
            self._snapshot = _with_added(snap, docs, dims)
            return self._snapshot.generation

    def remove_document(self, doc_id):
        with self._lock:
            snap = self._snapshot
            if doc_id not in snap.ordinals:
                raise UnknownDocument(doc_id)
            ords = dict(snap.ordinals)
            o = ords.pop(doc_id)
            dead = np.union1d(snap.dead, np.array([o], dtype=np.int64))
            self._snapshot = replace(snap, ordinals=ords, dead=dead,
                                     generation=snap.generation + 1)
            return self._snapshot.generation

    def update_document(self, doc):
        """Replace a document in a single mutation batch."""
        with self._lock:
            snap = self._snapshot
            if doc.doc_id not in snap.ordinals:
                raise UnknownDocument(doc.doc_id)
            ords = dict(snap.ordinals)
            o = ords.pop(doc.doc_id)
            dead = np.union1d(snap.dead, np.array([o], dtype=np.int64))
            base = replace(snap, ordinals=ords, dead=dead)
            self._snapshot = _with_added(base, [doc] if self.accepts(doc) else [], snap.dims)
            return self._snapshot.generation

    def set_embeddings(self, key, vectors):
        """Attach ``{doc_id: vector}`` under ``key`` in one mutation.

        Ordinals and postings are kept; an existing segment for ``key`` is
        dropped since its codes are stale.
        """
        with self._lock:
            snap = self._snapshot
            documents = dict(snap.documents)
            dims = dict(snap.dims)
            for doc_id, v in vectors.items():
                if doc_id not in snap.ordinals:
                    raise UnknownDocument(doc_id)
                v = as_vector(v)
                if dims.setdefault(key, v.shape[0]) != v.shape[0]:
                    raise DimensionMismatch(f"embedding {key!r} has dim {v.shape[0]},"
                                            f" index expects {dims[key]}")
                o = snap.ordinals[doc_id]
                documents[o] = replace(documents[o], embeddings={**documents[o].embeddings, key: v})
            segs = {k: s for k, s in snap.ann_segments.items() if k != key}
            self._snapshot = replace(snap, documents=documents, dims=dims, ann_segments=segs,
                                     generation=snap.generation + 1)
            return self._snapshot.generation

    def compact(self):
        """Drop tombstones and renumber ordinals densely."""
        with self._lock:
            self._snapshot = _compacted(self._snapshot)
            return self._snapshot.generation

    def build_ann(self, key, config):
        """Train an ANN segment over every live document carrying ``key``."""
        with self._lock:
            snap = self._snapshot
            ords = sorted(o for o in snap.ordinals.values()
                          if key in snap.documents[o].embeddings)
            docs = [snap.documents[o] for o in ords]
            seg = annsearch.build_ann_segment(docs, key, config, ordinals=ords)
            segs = dict(snap.ann_segments)
            segs[key] = seg
            self._snapshot = replace(snap, ann_segments=segs, generation=snap.generation + 1)
            return self._snapshot.generation

    # -- reads -----------------------------------------------------------------

    def search(self, q, query_embs=None):
        return annsearch.search(q, query_embs, self._snapshot)

    def evaluate_boolean(self, q):
        return evaluate_boolean(q, self._snapshot)

    def save(self, path):
        save_index(self._snapshot, path)

    @classmethod
    def open(cls, path, filter=None):
        return cls(filter=filter, snapshot=load_index(path))


def _with_added(snap, docs, dims):
    documents = dict(snap.documents)
    ordinals = dict(snap.ordinals)
    postings = dict(snap.postings)
    grow = {}
    nxt = snap.next_ordinal
    for d in docs:
        documents[nxt] = d
        ordinals[d.doc_id] = nxt
        for t, p in d.terms.items():
            grow.setdefault(t, ([], []))
            grow[t][0].append(nxt)
            grow[t][1].append(p)
        nxt += 1
    for t, (o, p) in grow.items():
        old = postings.get(t)
        new_o = np.asarray(o, dtype=np.int64)
        if old is not None:
            new_o = np.concatenate([old.ordinals, new_o])
            p = old.payloads + tuple(p)
        postings[t] = PostingList(t, new_o, tuple(p))
    segs = dict(snap.ann_segments)
    for key, seg in segs.items():
        with_key = [(snap.next_ordinal + i, d.embeddings[key])
                    for i, d in enumerate(docs) if key in d.embeddings]
        if with_key:
            segs[key] = seg.with_added([o for o, _ in with_key], [v for _, v in with_key])
    return replace(snap, documents=documents, ordinals=ordinals, postings=postings,
                   ann_segments=segs, dims=dims, next_ordinal=nxt,
                   generation=snap.generation + 1)


def _compacted(snap):
    live = sorted(snap.ordinals.values())
    mapping = {old: new for new, old in enumerate(live)}
    documents = {mapping[o]: snap.documents[o] for o in live}
    ordinals = {d.doc_id: o for o, d in documents.items()}
    postings = {}
    for t, pl in snap.postings.items():
        keep = [(mapping[o], p) for o, p in zip(pl.ordinals.tolist(), pl.payloads) if o in mapping]
        if keep:
            postings[t] = PostingList(t, np.array([o for o, _ in keep], dtype=np.int64),
                                      tuple(p for _, p in keep))
    segs = {k: s.remapped(mapping) for k, s in snap.ann_segments.items()}
    return IndexSnapshot(documents, ordinals, postings, segs, dict(snap.dims),
                         snap.generation + 1, len(live), _sets.EMPTY)


# -- persistence -------------------------------------------------------------------

FORMAT_VERSION = 1
DOCS_MAGIC = b"EBRDOCS\x00"
POSTINGS_MAGIC = b"EBRPOST\x00"


def _key_dir(key):
    return urllib.parse.quote(key, safe="")


def _pack_docs(snap):
    w = storage.Writer()
    w.u64(len(snap.documents))
    dead = set(snap.dead.tolist())
    for o in sorted(snap.documents):
        d = snap.documents[o]
        w.u64(o)
        w.u8(1 if o in dead else 0)
        w.str(d.doc_id)
        w.u64(len(d.terms))
        for t, p in d.terms.items():
            w.str(t)
            w.u8(0 if p is None else 1)
            if p is not None:
                w.raw(p)
        w.u64(len(d.embeddings))
        for k, v in d.embeddings.items():
            w.str(k)
            w.array(v)
        w.str(json.dumps(d.features, sort_keys=True))
    return storage.pack_file(DOCS_MAGIC, FORMAT_VERSION, w.getvalue())


def _unpack_docs(data):
    r = storage.Reader(storage.unpack_file(data, DOCS_MAGIC, FORMAT_VERSION, "docs.bin"))
    documents, dead = {}, []
    for _ in range(r.u64()):
        o = r.u64()
        if r.u8():
            dead.append(o)
        doc_id = r.str()
        terms = {}
        for _ in range(r.u64()):
            t = r.str()
            terms[t] = r.raw() if r.u8() else None
        emb = {}
        for _ in range(r.u64()):
            k = r.str()
            emb[k] = r.array()
        documents[o] = Document(doc_id, terms, emb, json.loads(r.str()))
    return documents, np.array(sorted(dead), dtype=np.int64)


def _pack_postings(snap):
    w = storage.Writer()
    w.u64(len(snap.postings))
    for t in sorted(snap.postings):
        pl = snap.postings[t]
        w.str(t)
        w.array(pl.ordinals, "<i8")
        for p in pl.payloads:
            w.u8(0 if p is None else 1)
            if p is not None:
                w.raw(p)
    return storage.pack_file(POSTINGS_MAGIC, FORMAT_VERSION, w.getvalue())


def _unpack_postings(data):
    r = storage.Reader(storage.unpack_file(data, POSTINGS_MAGIC, FORMAT_VERSION, "postings.bin"))
    postings = {}
    for _ in range(r.u64()):
        t = r.str()
        ords = r.array("<i8")
        payloads = tuple(r.raw() if r.u8() else None for _ in range(ords.shape[0]))
        postings[t] = PostingList(t, ords, payloads)
    return postings


def _manifest_checksum(manifest):
    body = json.dumps({k: v for k, v in manifest.items() if k != "checksum"},
                      sort_keys=True).encode("utf-8")
    return storage.checksum(body).hex()


def save_index(snapshot, path):
    """Write ``snapshot`` as an index directory, replacing ``path`` atomically."""
    path = os.fspath(path)
    files = {"docs.bin": _pack_docs(snapshot), "postings.bin": _pack_postings(snapshot)}
    ann = {}
    for key, seg in sorted(snapshot.ann_segments.items()):
        sub = f"ann/{_key_dir(key)}"
        files[f"{sub}/quantizer.bin"] = quant.pack_quantizers(seg.transform, seg.coarse, seg.pq)
        files[f"{sub}/postings.bin"] = annsearch.pack_segment_postings(seg)
        ann[key] = {"dir": sub, "config": seg.config.to_dict()}
    manifest = {
        "format_version": FORMAT_VERSION,
        "generation": snapshot.generation,
        "next_ordinal": snapshot.next_ordinal,
        "num_documents": len(snapshot),
        "dims": dict(sorted(snapshot.dims.items())),
        "ann": ann,
        "files": {name: storage.checksum(data).hex() for name, data in sorted(files.items())},
    }
    manifest["checksum"] = _manifest_checksum(manifest)
    tmp = f"{path}.tmp-{os.getpid()}"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    for name, data in files.items():
        os.makedirs(os.path.dirname(os.path.join(tmp, name)), exist_ok=True)
        with open(os.path.join(tmp, name), "wb") as f:
            f.write(data)
    with open(os.path.join(tmp, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    old = f"{path}.old-{os.getpid()}"
    if os.path.exists(path):
        os.replace(path, old)
    os.replace(tmp, path)
    if os.path.exists(old):
        shutil.rmtree(old)


def load_index(path):
    """Read an index directory; nothing is constructed unless every check passes."""
    path = os.fspath(path)
    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as f:
        try:
            manifest = json.load(f)
        except ValueError as exc:
            raise FormatError(f"manifest.json: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"index format version {manifest.get('format_version')},"
                          f" expected {FORMAT_VERSION}")
    if manifest.get("checksum") != _manifest_checksum(manifest):
        raise ChecksumError("manifest.json: checksum mismatch")
    blobs = {}
    for name, digest in manifest["files"].items():
        with open(os.path.join(path, name), "rb") as f:
            blobs[name] = f.read()
        if storage.checksum(blobs[name]).hex() != digest:
            raise ChecksumError(f"{name}: does not match manifest")
    documents, dead = _unpack_docs(blobs["docs.bin"])
    postings = _unpack_postings(blobs["postings.bin"])
    segs = {}
    for key, info in manifest["ann"].items():
        cfg = quant.AnnConfig.from_dict(info["config"])
        segs[key] = annsearch.unpack_segment(key, cfg, blobs[f"{info['dir']}/quantizer.bin"],
                                             blobs[f"{info['dir']}/postings.bin"])
    dead_set = set(dead.tolist())
    ordinals = {d.doc_id: o for o, d in documents.items() if o not in dead_set}
    return IndexSnapshot(documents, ordinals, postings, segs, dict(manifest["dims"]),
                         manifest["generation"], manifest["next_ordinal"], dead)
