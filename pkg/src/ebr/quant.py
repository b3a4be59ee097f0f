"""Vector quantization: k-means coarse quantizer, product quantizer, OPQ and
PCA transforms, asymmetric distance tables, and their on-disk format."""
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import storage
from .errors import DimensionMismatch, InvalidArgument
from .vecmath import pairwise_sq_l2

KSUB = 256  # 8-bit codes
_CHUNK = 2048


def _as_matrix(vectors):
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidArgument("expected a non-empty (n, d) collection of vectors")
    if not np.all(np.isfinite(x)):
        raise InvalidArgument("training vectors contain non-finite values")
    return x


def _nearest(x, centroids):
    """Exact nearest centroid per row by direct differences; ties -> lower id."""
    labels = np.empty(x.shape[0], dtype=np.int64)
    dist = np.empty(x.shape[0])
    for s in range(0, x.shape[0], _CHUNK):
        diff = x[s:s + _CHUNK, None, :] - centroids[None, :, :]
        d = np.einsum("ijk,ijk->ij", diff, diff)
        labels[s:s + _CHUNK] = np.argmin(d, axis=1)
        dist[s:s + _CHUNK] = d[np.arange(d.shape[0]), labels[s:s + _CHUNK]]
    return labels, dist


def _nearest_fast(x, centroids):
    # expansion-based argmin, then exact distance to the chosen centroid
    labels = np.argmin(pairwise_sq_l2(x, centroids), axis=1)
    diff = x - centroids[labels]
    return labels, np.einsum("ij,ij->i", diff, diff)


def _kmeans_pp(x, k, rng):
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.einsum("ij,ij->i", x - x[chosen[0]], x - x[chosen[0]])
    for _ in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining points coincide with a chosen centroid
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rest[rng.integers(rest.shape[0])])
        chosen.append(idx)
        diff = x - x[idx]
        np.minimum(d2, np.einsum("ij,ij->i", diff, diff), out=d2)
    return x[chosen].copy()


def _update(x, labels, dist, k, centroids):
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros_like(centroids)
    np.add.at(sums, labels, x)
    new = centroids.copy()
    live = counts > 0
    new[live] = sums[live] / counts[live, None]
    if not live.all():
        # re-seed each empty cluster from the worst-served point
        dist = dist.copy()
        for c in np.flatnonzero(~live):
            far = int(np.argmax(dist))
            new[c] = x[far]
            dist[far] = -1.0
    return new


def _lloyd(x, centroids, max_iters, tol=1e-6, fast=True):
    nearest = _nearest_fast if fast else _nearest
    k = centroids.shape[0]
    history = []
    for _ in range(max_iters):
        labels, dist = nearest(x, centroids)
        sse = float(dist.sum())
        history.append(sse)
        if sse == 0.0:
            break
        if len(history) > 1 and history[-2] - sse <= tol * history[-2]:
            break
        centroids = _update(x, labels, dist, k, centroids)
    return centroids, history


@dataclass
class CoarseQuantizer:
    centroids: np.ndarray
    sse_history: list = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float64)

    @property
    def num_clusters(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]

    def assign(self, x):
        """Nearest cluster id for each row of ``x``."""
        return _nearest(np.atleast_2d(np.asarray(x, dtype=np.float64)), self.centroids)[0]


def train_kmeans(vectors, k, seed=0, max_iters=25):
    """Lloyd's algorithm with k-means++ seeding."""
    x = _as_matrix(vectors)
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    if k > x.shape[0]:
        raise InvalidArgument(f"k={k} exceeds the number of vectors ({x.shape[0]})")
    rng = np.random.default_rng(seed)
    init = _kmeans_pp(x, k, rng)
    centroids, history = _lloyd(x, init, max_iters)
    return CoarseQuantizer(centroids, history)


def assign_coarse(cq, v, n):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != cq.dim:
        raise DimensionMismatch(f"vector dim {v.shape} does not match quantizer dim {cq.dim}")
    if not 1 <= n <= cq.num_clusters:
        raise InvalidArgument(f"n={n} outside [1, {cq.num_clusters}]")
    diff = cq.centroids - v
    d = np.einsum("ij,ij->i", diff, diff)
    return [int(i) for i in np.argsort(d, kind="stable")[:n]]


# -- product quantization ----------------------------------------------------

@dataclass
class ProductQuantizer:
    codebooks: np.ndarray  # (M, 256, dsub)

    def __post_init__(self):
        self.codebooks = np.ascontiguousarray(self.codebooks, dtype=np.float64)

    @property
    def pq_bytes(self):
        return self.codebooks.shape[0]

    @property
    def dsub(self):
        return self.codebooks.shape[2]

    @property
    def dim(self):
        return self.pq_bytes * self.dsub

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"vector dim {x.shape[-1]} != quantizer dim {self.dim}")
        return x

    def encode(self, x):
        """Codes for each row of ``x`` as a (n, M) uint8 array."""
        x = np.atleast_2d(self._check(x))
        codes = np.empty((x.shape[0], self.pq_bytes), dtype=np.uint8)
        for m in range(self.pq_bytes):
            sub = x[:, m * self.dsub:(m + 1) * self.dsub]
            codes[:, m] = _nearest(sub, self.codebooks[m])[0]
        return codes

    def decode(self, codes):
        codes = np.atleast_2d(np.asarray(codes))
        if codes.shape[1] != self.pq_bytes:
            raise InvalidArgument(f"code length {codes.shape[1]} != pq_bytes {self.pq_bytes}")
        parts = [self.codebooks[m][codes[:, m]] for m in range(self.pq_bytes)]
        return np.concatenate(parts, axis=1)


def pq_encode(pq, v):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise InvalidArgument("pq_encode takes a single vector")
    return pq.encode(v)[0].tobytes()


def pq_decode(pq, code):
    code = np.frombuffer(bytes(code), dtype=np.uint8)
    if code.shape[0] != pq.pq_bytes:
        raise InvalidArgument(f"code length {code.shape[0]} != pq_bytes {pq.pq_bytes}")
    return pq.decode(code[None, :])[0]


def _subspace_seeds(seed, m):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(m)]


def _pad_codebook(cb):
    if cb.shape[0] == KSUB:
        return cb
    reps = -(-KSUB // cb.shape[0])
    return np.tile(cb, (reps, 1))[:KSUB].copy()


def train_pq(residuals, pq_bytes, seed=0, max_iters=20):
    x = _as_matrix(residuals)
    d = x.shape[1]
    if pq_bytes < 1 or d % pq_bytes != 0:
        raise InvalidArgument(f"pq_bytes={pq_bytes} does not divide dimension {d}")
    if x.shape[0] < KSUB:
        warnings.warn(f"training PQ on {x.shape[0]} < {KSUB} vectors; codebooks will repeat",
                      stacklevel=2)
    dsub = d // pq_bytes
    books = []
    for m, s in enumerate(_subspace_seeds(seed, pq_bytes)):
        sub = x[:, m * dsub:(m + 1) * dsub]
        k = min(KSUB, sub.shape[0])
        books.append(_pad_codebook(train_kmeans(sub, k, seed=s, max_iters=max_iters).centroids))
    return ProductQuantizer(np.stack(books))


def _refine_pq(pq, x, iters):
    """Warm-started Lloyd passes on every subspace; never increases error."""
    books = pq.codebooks.copy()
    dsub = pq.dsub
    for m in range(pq.pq_bytes):
        sub = x[:, m * dsub:(m + 1) * dsub]
        cb = books[m]
        for _ in range(iters):
            labels, dist = _nearest_fast(sub, cb)
            cb = _update(sub, labels, dist, KSUB, cb)
        books[m] = cb
    return ProductQuantizer(books)


def reconstruction_error(pq, x):
    """Mean squared reconstruction error of ``x`` under ``pq``."""
    diff = x - pq.decode(pq.encode(x))
    return float(np.einsum("ij,ij->", diff, diff) / x.shape[0])


# -- transforms ----------------------------------------------------------------

@dataclass
class IdentityTransform:
    dim: int
    tag = "identity"

    @property
    def out_dim(self):
        return self.dim

    def apply(self, x):
        return np.asarray(x, dtype=np.float64)


@dataclass
class PCATransform:
    matrix: np.ndarray  # (out_dim, d), orthonormal rows
    mean: np.ndarray
    tag = "pca"

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        self.mean = np.ascontiguousarray(self.mean, dtype=np.float64)

    @property
    def dim(self):
        return self.matrix.shape[1]

    @property
    def out_dim(self):
        return self.matrix.shape[0]

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.matrix.T

    def inverse(self, y):
        return y @ self.matrix + self.mean


@dataclass
class OPQTransform:
    rotation: np.ndarray  # (d, d), orthonormal
    error_history: list = field(default_factory=list, compare=False, repr=False)
    tag = "opq"

    def __post_init__(self):
        self.rotation = np.ascontiguousarray(self.rotation, dtype=np.float64)

    @property
    def dim(self):
        return self.rotation.shape[0]

    @property
    def out_dim(self):
        return self.dim

    def apply(self, x):
        return np.asarray(x, dtype=np.float64) @ self.rotation.T


def train_pca(vectors, out_dim):
    x = _as_matrix(vectors)
    n, d = x.shape
    if out_dim < 1 or out_dim > d:
        raise InvalidArgument(f"out_dim={out_dim} must lie in [1, {d}]")
    if n < out_dim:
        raise InvalidArgument(f"need at least {out_dim} samples, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    evals, evecs = np.linalg.eigh(xc.T @ xc / n)
    order = np.argsort(-evals, kind="stable")[:out_dim]
    rows = evecs[:, order].T.copy()
    # sign convention: largest-magnitude entry of each row is positive
    flip = rows[np.arange(out_dim), np.argmax(np.abs(rows), axis=1)] < 0
    rows[flip] *= -1.0
    return PCATransform(rows, mean)


def _procrustes(x, y):
    """Orthonormal R minimizing ||x R^T - y||_F."""
    u, _, vt = np.linalg.svd(x.T @ y)
    return (u @ vt).T


def train_opq(vectors, pq_bytes, seed=0, outer_iters=8, pq_iters=4, max_iters=20):
    """Alternate PQ training on rotated data with Procrustes rotation updates."""
    x = _as_matrix(vectors)
    d = x.shape[1]
    pq = train_pq(x, pq_bytes, seed=seed, max_iters=max_iters)
    rotation = np.eye(d)
    xr = x
    history = [reconstruction_error(pq, xr)]
    for _ in range(outer_iters):
        y = pq.decode(pq.encode(xr))
        rotation = _procrustes(x, y)
        xr = x @ rotation.T
        pq = _refine_pq(pq, xr, pq_iters)
        history.append(reconstruction_error(pq, xr))
    return OPQTransform(rotation, history), pq


# -- asymmetric distance computation ---------------------------------------------

def adc_table(pq, query_residual):
    q = pq._check(query_residual)
    if q.ndim != 1:
        raise InvalidArgument("adc_table takes a single query vector")
    sub = q.reshape(pq.pq_bytes, 1, pq.dsub)
    diff = pq.codebooks - sub
    return np.einsum("mjk,mjk->mj", diff, diff)


def adc_distances(table, codes):
    """Sum of per-subspace table lookups for each row of ``codes``."""
    codes = np.asarray(codes)
    if codes.shape[0] == 0:
        return np.zeros(0)
    return table[np.arange(table.shape[0])[None, :], codes].sum(axis=1)


# -- persistence -------------------------------------------------------------------

QUANTIZER_MAGIC = b"EBRQUANT"
QUANTIZER_VERSION = 1
_TAGS = {"identity": 0, "pca": 1, "opq": 2}


def pack_quantizers(transform, coarse, pq):
    """Serialize (transform, coarse, pq-or-None) to checksummed bytes."""
    w = storage.Writer()
    w.u32(transform.dim)
    w.u32(transform.out_dim)
    w.u32(coarse.num_clusters)
    w.u32(0 if pq is None else pq.pq_bytes)
    w.u8(_TAGS[transform.tag])
    if transform.tag == "pca":
        w.array(transform.matrix)
        w.array(transform.mean)
    elif transform.tag == "opq":
        w.array(transform.rotation)
    w.array(coarse.centroids)
    if pq is not None:
        w.array(pq.codebooks)
    return storage.pack_file(QUANTIZER_MAGIC, QUANTIZER_VERSION, w.getvalue())


def unpack_quantizers(data):
    r = storage.Reader(storage.unpack_file(data, QUANTIZER_MAGIC, QUANTIZER_VERSION, "quantizer"))
    d = r.u32()
    r.u32(), r.u32()  # output dim and cluster count; both implied by the arrays below
    m = r.u32()
    tag = r.u8()
    if tag == 0:
        transform = IdentityTransform(d)
    elif tag == 1:
        transform = PCATransform(r.array(), r.array())
    else:
        transform = OPQTransform(r.array())
    coarse = CoarseQuantizer(r.array())
    pq = ProductQuantizer(r.array()) if m else None
    return transform, coarse, pq


# -- configuration -------------------------------------------------------------------

@dataclass(frozen=True)
class AnnConfig:
    """Quantization settings for one embedding key.

    ``pq_bytes == 0`` selects Flat storage: full-precision residuals, no PQ.
    ``transform`` is ``"identity"``, ``"opq"``, ``"pca"`` or ``"pca:<out_dim>"``.
    """
    num_clusters: int
    nprobe_default: int = 1
    pq_bytes: int = 0
    transform: str = "identity"
    seed: int = 0
    coarse_metric: str = "L2"
    kmeans_iters: int = 25
    pq_iters: int = 20
    opq_iters: int = 8

    @property
    def transform_kind(self):
        return self.transform.split(":", 1)[0]

    def transformed_dim(self, dim):
        kind, _, arg = self.transform.partition(":")
        if kind == "pca" and arg:
            return int(arg)
        return dim

    def validate(self, dim=None):
        if self.num_clusters < 1:
            raise InvalidArgument("num_clusters must be >= 1")
        if not 1 <= self.nprobe_default <= self.num_clusters:
            raise InvalidArgument(
                f"nprobe_default={self.nprobe_default} outside [1, {self.num_clusters}]")
        if self.coarse_metric != "L2":
            raise InvalidArgument("only the L2 coarse metric is supported")
        kind, _, arg = self.transform.partition(":")
        if kind not in ("identity", "opq", "pca") or (arg and kind != "pca"):
            raise InvalidArgument(f"unknown transform {self.transform!r}")
        if arg and (not arg.isdigit() or int(arg) < 1):
            raise InvalidArgument(f"bad PCA output dimension in {self.transform!r}")
        if self.pq_bytes < 0:
            raise InvalidArgument("pq_bytes must be >= 0")
        if kind == "opq" and self.pq_bytes == 0:
            raise InvalidArgument("OPQ needs pq_bytes > 0")
        if dim is not None:
            out = self.transformed_dim(dim)
            if out > dim:
                raise InvalidArgument(f"PCA output dim {out} exceeds input dim {dim}")
            if self.pq_bytes and out % self.pq_bytes:
                raise InvalidArgument(f"pq_bytes={self.pq_bytes} does not divide dimension {out}")
        return self

    def label(self):
        """Faiss-style description, e.g. ``OPQ8,IVF16,PQ8``."""
        parts = []
        kind = self.transform_kind
        if kind == "opq":
            parts.append(f"OPQ{self.pq_bytes}")
        elif kind == "pca":
            parts.append("PCA" + self.transform.partition(":")[2])
        parts.append(f"IVF{self.num_clusters}")
        parts.append(f"PQ{self.pq_bytes}" if self.pq_bytes else "Flat")
        return ",".join(parts)

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)
