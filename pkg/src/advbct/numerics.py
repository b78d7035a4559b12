"""Dense float64 helpers, seeded random streams and a finite-difference oracle.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

from .errors import DegenerateVectorError, NumericError, ShapeError

EPS_NORM = 1e-12


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce ``values`` to a finite 2-D float64 array, optionally reshaping."""
    arr = np.asarray(values, dtype=np.float64)
    if rows is not None and cols is not None:
        if arr.size != rows * cols:
            raise ShapeError(f"{arr.size} values cannot fill a {rows}x{cols} matrix")
        arr = arr.reshape(rows, cols)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {arr.ndim} dims")
    check_finite(arr)
    return arr


def check_finite(arr: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite values")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "product")


def euclidean_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"length mismatch: {u.size} vs {v.size}")
    diff = u - v
    return float(np.sqrt(np.dot(diff, diff)))


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances between every row of ``a`` and every row of ``b``.

    Computed from explicit differences rather than the expanded
    ``|a|^2 + |b|^2 - 2ab`` form, so zero distances stay exactly zero.
    """
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.sqrt(np.dot(v.ravel(), v.ravel())))
    if not norm > EPS_NORM:
        raise DegenerateVectorError(f"cannot normalize a vector of norm {norm:g}")
    return v / norm


def logistic(x):
    """Numerically stable 1 / (1 + exp(-x)); works on scalars and arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> float:
    """Norm-wise ``|a-b| / max(|a|, |b|, floor)`` over whole tensors.

    Elementwise ratios blow up on entries that are exactly zero analytically
    (dead ReLUs) but carry O(h^2) noise numerically.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare {a.shape} with {b.shape}")
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / denom


def _stream_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def seeded_rng(seed: int, stream: str = "") -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and a stream name.

    Distinct stream names give independent sequences for the same seed, so
    e.g. the old and the new model never share an initialization.
    """
    if not 0 <= int(seed) < 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    key = np.array([int(seed), _stream_key(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
