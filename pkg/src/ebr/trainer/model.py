"""Two-tower encoder: per-channel embedding tables with weighted-sum pooling,
concatenated with dense channels, a small MLP, and L2-normalized output.

Gradients are hand-derived and vectorized over the batch. Table gradients
are returned sparsely as ``(rows, values)``.
"""
import copy
import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .. import storage
from ..errors import DegenerateInput, FormatError, InvalidArgument
from .features import DEFAULT_WORD_BUCKETS, TRIGRAM_VOCAB, extract_text_features


@dataclass(frozen=True)
class ModelConfig:
    text_fields: tuple = ("name",)
    categorical: tuple = ()  # (channel, vocab_size) pairs
    dense: tuple = ()  # (channel, dim) pairs
    table_dim: int = 16
    hidden_dims: tuple = (64,)
    output_dim: int = 32
    word_buckets: int = DEFAULT_WORD_BUCKETS
    init_scale: float = 0.1

    def channels(self):
        """Categorical channels as an ordered list of ``(name, vocab_size)``."""
        out = []
        for f in sorted(self.text_fields):
            out.append((f"{f}.trigram", TRIGRAM_VOCAB))
            out.append((f"{f}.word", self.word_buckets))
        out.extend(sorted((str(c), int(v)) for c, v in self.categorical))
        return out

    def dense_channels(self):
        return sorted((str(c), int(d)) for c, d in self.dense)

    def input_dim(self):
        return self.table_dim * len(self.channels()) + sum(d for _, d in self.dense_channels())

    def to_json(self):
        return {"text_fields": list(self.text_fields),
                "categorical": [list(x) for x in self.categorical],
                "dense": [list(x) for x in self.dense],
                "table_dim": self.table_dim, "hidden_dims": list(self.hidden_dims),
                "output_dim": self.output_dim, "word_buckets": self.word_buckets,
                "init_scale": self.init_scale}

    @classmethod
    def from_json(cls, d):
        return cls(tuple(d["text_fields"]), tuple(tuple(x) for x in d["categorical"]),
                   tuple(tuple(x) for x in d["dense"]), d["table_dim"], tuple(d["hidden_dims"]),
                   d["output_dim"], d["word_buckets"], d["init_scale"])


@lru_cache(maxsize=200_000)
def _text_features(text, buckets):
    f = extract_text_features(text, buckets)
    return (tuple(f["trigram"]), tuple(f["word"]))


@dataclass
class Batch:
    size: int
    sparse: dict  # channel -> CSR (B, vocab + 1)
    dense: dict  # channel -> (B, dim)


@dataclass
class EncoderModel:
    config: ModelConfig
    tables: dict  # channel -> (vocab + 1, table_dim); last row is OOV
    layers: list  # [W (out, in), b (out,), activation] with activation in {"relu", "linear"}
    name: str = field(default="tower")

    @classmethod
    def init(cls, config, seed=0, name="tower"):
        rng = np.random.default_rng(seed)
        tables = {ch: rng.normal(0.0, config.init_scale, size=(v + 1, config.table_dim))
                  for ch, v in config.channels()}
        layers = []
        dims = [config.input_dim(), *config.hidden_dims, config.output_dim]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            w = rng.normal(0.0, np.sqrt(2.0 / a), size=(b, a))
            act = "relu" if i < len(dims) - 2 else "linear"
            layers.append([w, np.zeros(b), act])
        return cls(config, tables, layers, name)

    @property
    def output_dim(self):
        return self.layers[-1][0].shape[0] if self.layers else self.config.input_dim()

    # -- featurization -----------------------------------------------------------

    def featurize(self, records):
        """Turn FeatureRecords into per-channel sparse matrices."""
        cfg = self.config
        vocab = dict(cfg.channels())
        cat_vocab = {str(c): int(v) for c, v in cfg.categorical}
        dense_dims = dict(cfg.dense_channels())
        rows = {ch: ([], [], []) for ch in vocab}
        dense = {ch: np.zeros((len(records), d)) for ch, d in dense_dims.items()}
        for r, rec in enumerate(records):
            for fname, text in rec.text_fields.items():
                if fname not in cfg.text_fields:
                    raise InvalidArgument(f"{self.name}: unknown text field {fname!r}")
                tri, words = _text_features(text, cfg.word_buckets)
                for ch, items in ((f"{fname}.trigram", tri), (f"{fname}.word", words)):
                    for i, w in items:
                        rows[ch][0].append(r)
                        rows[ch][1].append(i)
                        rows[ch][2].append(w)
            for ch, items in rec.categorical.items():
                if ch not in cat_vocab:
                    raise InvalidArgument(f"{self.name}: unknown channel {ch!r}")
                v = vocab[ch]
                for i, w in items:
                    rows[ch][0].append(r)
                    rows[ch][1].append(i if i < v else v)  # OOV row
                    rows[ch][2].append(w)
            for ch, vec in rec.dense.items():
                if ch not in dense_dims:
                    raise InvalidArgument(f"{self.name}: unknown dense channel {ch!r}")
                if vec.shape != (dense_dims[ch],):
                    raise InvalidArgument(f"{self.name}: dense channel {ch!r} expects dim"
                                          f" {dense_dims[ch]}, got {vec.shape}")
                dense[ch][r] = vec
        sparse = {}
        for ch, (r, c, w) in rows.items():
            m = sp.csr_matrix((np.asarray(w, dtype=np.float64), (np.asarray(r, dtype=np.int64),
                               np.asarray(c, dtype=np.int64))), shape=(len(records), vocab[ch] + 1))
            m.sum_duplicates()  # multi-hot repeats add up
            sparse[ch] = m
        return Batch(len(records), sparse, dense)

    # -- forward / backward ----------------------------------------------------------

    def forward(self, batch):
        """Unit-norm embeddings (B, d) plus a cache for :meth:`backward`."""
        parts = [batch.sparse[ch] @ self.tables[ch] for ch, _ in self.config.channels()]
        parts += [batch.dense[ch] for ch, _ in self.config.dense_channels()]
        h = np.concatenate(parts, axis=1) if parts else np.zeros((batch.size, 0))
        acts = [h]
        for w, b, act in self.layers:
            z = h @ w.T + b
            h = np.maximum(z, 0.0) if act == "relu" else z
            acts.append(h)
        norms = np.sqrt(np.einsum("ij,ij->i", h, h))
        if np.any(norms == 0.0):
            raise DegenerateInput(f"{self.name}: encoder produced a zero embedding")
        y = h / norms[:, None]
        return y, (batch, acts, norms, y)

    def backward(self, cache, dy):
        batch, acts, norms, y = cache
        grads = {}
        dz = (dy - y * np.einsum("ij,ij->i", y, dy)[:, None]) / norms[:, None]
        for li in range(len(self.layers) - 1, -1, -1):
            w, _, act = self.layers[li]
            if act == "relu":
                dz = dz * (acts[li + 1] > 0.0)
            grads[f"layer{li}/W"] = dz.T @ acts[li]
            grads[f"layer{li}/b"] = dz.sum(axis=0)
            dz = dz @ w
        off = 0
        td = self.config.table_dim
        for ch, _ in self.config.channels():
            g = dz[:, off:off + td]
            off += td
            m = batch.sparse[ch]
            if m.nnz == 0:
                continue
            cols = np.unique(m.indices)
            grads[f"table/{ch}"] = (cols, np.asarray(m[:, cols].T @ g))
        return grads

    def encode(self, records):
        return self.forward(self.featurize(records))[0]

    # -- parameter access -------------------------------------------------------------

    def params(self):
        """Name -> array view of every trainable parameter."""
        out = {f"table/{ch}": t for ch, t in self.tables.items()}
        for i, (w, b, _) in enumerate(self.layers):
            out[f"layer{i}/W"] = w
            out[f"layer{i}/b"] = b
        return out

    def apply_grads(self, grads, lr):
        params = self.params()
        for name, g in grads.items():
            if name.startswith("table/"):
                rows, vals = g
                params[name][rows] -= lr * vals
            else:
                params[name] -= lr * g


def encode(model, record):
    """Unit-norm embedding of a single FeatureRecord."""
    return model.encode([record])[0]


def dense_grads(model, grads):
    """Expand sparse table gradients to full arrays (for testing)."""
    out = {}
    for name, p in model.params().items():
        g = grads.get(name)
        full = np.zeros_like(p)
        if g is None:
            pass
        elif name.startswith("table/"):
            full[g[0]] = g[1]
        else:
            full = g
        out[name] = full
    return out


def init_towers(query_config, doc_config=None, seed=0, shared=()):
    """Independent query/document towers; ``shared`` channels use one table."""
    doc_config = doc_config or query_config
    seeds = np.random.SeedSequence(seed).spawn(2)
    q = EncoderModel.init(query_config, int(seeds[0].generate_state(1)[0]), "query")
    d = EncoderModel.init(doc_config, int(seeds[1].generate_state(1)[0]), "document")
    for ch in shared:
        if ch not in q.tables or ch not in d.tables or q.tables[ch].shape != d.tables[ch].shape:
            raise InvalidArgument(f"cannot share channel {ch!r}: missing or shape mismatch")
        d.tables[ch] = q.tables[ch]
    return q, d


def shared_channels(model_q, model_d):
    return sorted(ch for ch in model_q.tables if model_d.tables.get(ch) is model_q.tables[ch])


def copy_towers(model_q, model_d):
    # deepcopy of the pair keeps shared tables shared
    return copy.deepcopy((model_q, model_d))


# -- checkpoint file ---------------------------------------------------------------

CKPT_MAGIC = b"EBRCKPT\x00"
CKPT_VERSION = 1


def _tower_header(m):
    return {"name": m.name, "config": m.config.to_json(),
            "activations": [a for _, _, a in m.layers]}


def save_checkpoint(path, model_q, model_d, metadata=None):
    shared = shared_channels(model_q, model_d)
    header = {"query": _tower_header(model_q), "document": _tower_header(model_d),
              "shared": shared, "metadata": metadata or {}}
    w = storage.Writer()
    w.str(json.dumps(header, sort_keys=True))
    for tower in (model_q, model_d):
        for name, p in sorted(tower.params().items()):
            if tower is model_d and name.startswith("table/") and name[6:] in shared:
                continue
            w.str(name)
            w.array(p)
    storage.write_file(path, CKPT_MAGIC, CKPT_VERSION, w.getvalue())


def _tower_from(header, arrays):
    cfg = ModelConfig.from_json(header["config"])
    tables = {ch: arrays[f"table/{ch}"] for ch, _ in cfg.channels()}
    layers = [[arrays[f"layer{i}/W"], arrays[f"layer{i}/b"], act]
              for i, act in enumerate(header["activations"])]
    return EncoderModel(cfg, tables, layers, header["name"])


def load_checkpoint(path):
    """Return ``(model_q, model_d, metadata)``."""
    r = storage.Reader(storage.read_file(path, CKPT_MAGIC, CKPT_VERSION))
    header = json.loads(r.str())
    towers = []
    for side in ("query", "document"):
        expect = len(ModelConfig.from_json(header[side]["config"]).channels())
        expect += 2 * len(header[side]["activations"])
        if side == "document":
            expect -= len(header["shared"])
        arrays = {}
        for _ in range(expect):
            name = r.str()
            arrays[name] = r.array()
        if side == "document":
            for ch in header["shared"]:
                arrays[f"table/{ch}"] = towers[0].tables[ch]
        towers.append(_tower_from(header[side], arrays))
    if not r.done():
        raise FormatError(f"{path}: trailing data in checkpoint")
    return towers[0], towers[1], header["metadata"]
