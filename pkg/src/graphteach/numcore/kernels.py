"""Dense float64 kernels over row-major 2-D arrays.

Everything downstream (encoders, graph layers, losses) is built from these.
All arithmetic is 64-bit even though banks are stored 32-bit: it keeps the
finite-difference gradient checks sharp.
"""

import numpy as np
from scipy.special import erf

from ..errors import DegenerateRowError, DimensionError, NormalizationError

LN_EPS = 1e-5
NORM_EPS = 1e-12

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_tensor2d(x, name="tensor"):
    """Coerce to a finite, C-contiguous float64 2-D array."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name}: expected 2-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise DimensionError(f"{name}: contains non-finite entries")
    return a


def matmul(a, b):
    a = as_tensor2d(a, "matmul lhs")
    b = as_tensor2d(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims differ ({a.shape} x {b.shape})")
    return a @ b


def softmax_rows(x, mask=None):
    """Row-wise softmax with max subtraction; masked entries are exactly 0.

    mask, if given, is a boolean array of the same shape; each row must keep
    at least one True entry.
    """
    x = as_tensor2d(x, "softmax input")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError("softmax mask shape mismatch")
        if not mask.any(axis=1).all():
            raise DegenerateRowError("softmax: fully masked row")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=1, keepdims=True)
    ex = np.exp(x - m)
    if mask is not None:
        ex = np.where(mask, ex, 0.0)
    return ex / ex.sum(axis=1, keepdims=True)


def layer_norm(x, gamma, beta, eps=LN_EPS):
    """Per-row standardization followed by the (gamma, beta) affine."""
    x = as_tensor2d(x, "layer_norm input")
    gamma = np.asarray(gamma, dtype=np.float64).reshape(1, -1)
    beta = np.asarray(beta, dtype=np.float64).reshape(1, -1)
    if gamma.shape[1] != x.shape[1] or beta.shape[1] != x.shape[1]:
        raise DimensionError("layer_norm: gamma/beta length must equal cols")
    if eps <= 0:
        raise DimensionError("layer_norm: eps must be positive")
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return gamma * xhat + beta


def l2_normalize(v):
    """Scale a vector to unit norm; near-zero vectors are rejected."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n <= NORM_EPS:
        raise NormalizationError(f"cannot normalize vector with norm {n:.3e}")
    return v / n


def l2_normalize_rows(x):
    x = as_tensor2d(x, "normalize input")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms <= NORM_EPS).any():
        raise NormalizationError("cannot normalize row with near-zero norm")
    return x / norms


def cosine(a, b):
    """Dot product of two unit vectors, clipped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError("cosine: length mismatch")
    return float(np.clip(a @ b, -1.0, 1.0))


def gelu(x):
    """Exact (erf-based) GELU."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI
