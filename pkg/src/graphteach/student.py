"""The permanent few-shot model: zero-shot logits plus a key-value cache
behind a trainable adapter. This file is the whole inference path; nothing
here references the training-time teacher.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError, NormalizationError, ValidationError
from .numcore import NORM_EPS

MAGIC = b"TOGS"
VERSION = 1

DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 5.5
DEFAULT_TAU = 100.0


@dataclass(eq=False)
class CacheModel:
    """Support keys, one-hot values, adapter matrix and the three scalars
    needed at test time. Standalone by construction."""

    keys: np.ndarray      # (N, D) unit rows
    values: np.ndarray    # (N, C) one-hot rows
    adapter: np.ndarray   # (D, D)
    alpha: float
    beta: float
    tau: float

    def __post_init__(self):
        self.keys = np.ascontiguousarray(self.keys, dtype=np.float64)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.adapter = np.ascontiguousarray(self.adapter, dtype=np.float64)
        self.validate()

    def validate(self):
        n, d = self.keys.shape
        if self.values.shape[0] != n:
            raise ValidationError("keys/values row counts differ")
        if self.adapter.shape != (d, d):
            raise ValidationError("adapter must be DxD")
        if np.abs(np.linalg.norm(self.keys, axis=1) - 1.0).max() > 1e-6:
            raise ValidationError("cache keys must be unit norm")
        if not ((self.values.sum(axis=1) == 1.0).all()
                and np.isin(self.values, [0.0, 1.0]).all()):
            raise ValidationError("value rows must be one-hot")
        if self.alpha < 0 or self.beta <= 0 or self.tau <= 0:
            raise ValidationError(
                "beta and tau must be positive and alpha non-negative")

    @property
    def num_supports(self):
        return self.keys.shape[0]

    @property
    def num_classes(self):
        return self.values.shape[1]

    @property
    def dim(self):
        return self.keys.shape[1]


def build_cache(bank, episode):
    """Keys are the supports' global features, values their one-hot labels,
    in episode support order."""
    ids = np.asarray(episode.support_ids)
    keys = bank.global_features()[ids]
    values = np.zeros((len(ids), bank.num_classes))
    values[np.arange(len(ids)), bank.labels[ids]] = 1.0
    return keys, values


def identity_model(bank, episode, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA,
                   tau=DEFAULT_TAU):
    """Training-free model: identity adapter over a fresh cache."""
    keys, values = build_cache(bank, episode)
    return CacheModel(keys=keys, values=values, adapter=np.eye(bank.dim),
                      alpha=alpha, beta=beta, tau=tau)


def zero_shot_logits(z, prompts, tau):
    """tau * cos(z, prompt_c) per class for a unit query feature."""
    z = np.asarray(z, dtype=np.float64).ravel()
    prompts = np.asarray(prompts, dtype=np.float64)
    if prompts.shape[1] != z.shape[0]:
        raise DimensionError("query/prompt dims differ")
    return tau * (prompts @ z)


def adapter_apply(adapter, z):
    """W_A z; the identity adapter returns z unchanged."""
    z = np.asarray(z, dtype=np.float64).ravel()
    if adapter.shape[1] != z.shape[0]:
        raise DimensionError("adapter/query dims differ")
    return adapter @ z


def cache_logits(az, keys, values, beta):
    """exp(-beta (1 - s))^T V with s the cosines between the (re-normalized)
    adapted query and the cache keys."""
    az = np.asarray(az, dtype=np.float64).ravel()
    n = np.linalg.norm(az)
    if n <= NORM_EPS:
        raise NormalizationError("adapted query has near-zero norm")
    s = keys @ (az / n)
    return np.exp(-beta * (1.0 - s)) @ values


def test_logits(z, model, prompts):
    """The inference rule: zero-shot logits plus alpha times cache logits of
    the adapted query. Touches no teacher state."""
    zs = zero_shot_logits(z, prompts, model.tau)
    return zs + model.alpha * cache_logits(
        adapter_apply(model.adapter, z), model.keys, model.values, model.beta)


def test_logits_batch(queries, model, prompts):
    """(n, C) logits for n unit query rows (vectorized test path)."""
    queries = np.asarray(queries, dtype=np.float64)
    zs = model.tau * (queries @ prompts.T)
    adapted = queries @ model.adapter.T
    norms = np.linalg.norm(adapted, axis=1, keepdims=True)
    if (norms <= NORM_EPS).any():
        raise NormalizationError("adapted query has near-zero norm")
    sims = (adapted / norms) @ model.keys.T
    return zs + model.alpha * (np.exp(-model.beta * (1.0 - sims)) @ model.values)


# ---------------------------------------------------------------------------
# TOGS serialization: magic, little-endian u32 (version, D, C, N), f64
# (tau, alpha, beta), then keys, values, adapter as f64 blocks.


def save_student(model, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", VERSION, model.dim, model.num_classes,
                             model.num_supports))
        fh.write(struct.pack("<3d", model.tau, model.alpha, model.beta))
        fh.write(model.keys.astype("<f8").tobytes())
        fh.write(model.values.astype("<f8").tobytes())
        fh.write(model.adapter.astype("<f8").tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise EOFError(f"truncated student file while reading {what}")
    return buf


def load_student(path):
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, d, c, n = struct.unpack("<4I", _read_exact(fh, 16, "header"))
        if version != VERSION:
            raise FormatError(f"unsupported student version {version}")
        tau, alpha, beta = struct.unpack("<3d", _read_exact(fh, 24, "scalars"))
        keys = np.frombuffer(_read_exact(fh, 8 * n * d, "keys"),
                             dtype="<f8").reshape(n, d)
        values = np.frombuffer(_read_exact(fh, 8 * n * c, "values"),
                               dtype="<f8").reshape(n, c)
        adapter = np.frombuffer(_read_exact(fh, 8 * d * d, "adapter"),
                                dtype="<f8").reshape(d, d)
        if fh.read(1):
            raise FormatError("trailing bytes after adapter block")
    return CacheModel(keys=keys, values=values, adapter=adapter,
                      alpha=alpha, beta=beta, tau=tau)
