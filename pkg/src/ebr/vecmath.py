"""Dense vector helpers shared by every other module.

Vectors are plain 1-D ``numpy.float64`` arrays. All similarity math runs in
float64 regardless of how the inputs were stored.
"""
import numpy as np

from .errors import DegenerateInput, DimensionMismatch, InvalidArgument


def as_vector(values):
    """Validate ``values`` and return it as a 1-D float64 array."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] == 0:
        raise InvalidArgument(f"expected a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidArgument("vector has non-finite entries")
    return v


def _pair(u, v):
    u = as_vector(u)
    v = as_vector(v)
    if u.shape != v.shape:
        raise DimensionMismatch(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    return u, v


def norm(u):
    return float(np.sqrt(np.dot(u, u)))


def cosine_similarity(u, v):
    u, v = _pair(u, v)
    nu, nv = norm(u), norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInput("cosine similarity of a zero vector is undefined")
    c = float(np.dot(u, v)) / (nu * nv)
    return min(1.0, max(-1.0, c))


def cosine_distance(u, v):
    return 1.0 - cosine_similarity(u, v)


def l2_normalize(u):
    u = as_vector(u)
    n = norm(u)
    if n == 0.0:
        raise DegenerateInput("cannot normalize a zero vector")
    return u / n


def euclidean_distance_sq(u, v):
    u, v = _pair(u, v)
    d = u - v
    return float(np.dot(d, d))


def normalize_rows(x):
    """Row-wise L2 normalization of a 2-D array; zero rows are an error."""
    x = np.asarray(x, dtype=np.float64)
    n = np.sqrt(np.einsum("ij,ij->i", x, x))
    if np.any(n == 0.0):
        raise DegenerateInput("cannot normalize a zero row")
    return x / n[:, None]


def pairwise_sq_l2(x, y):
    """Squared L2 distances between rows of ``x`` (n, d) and ``y`` (m, d)."""
    xx = np.einsum("ij,ij->i", x, x)[:, None]
    yy = np.einsum("ij,ij->i", y, y)[None, :]
    d = xx - 2.0 * (x @ y.T) + yy
    np.maximum(d, 0.0, out=d)
    return d
