"""Numpy reference implementations of the per-edge graph kernels.

These are the fallback backend when the compiled extension is unavailable.
All accumulations run in ascending edge order (``np.add.at`` / ``np.maximum.at``
are unbuffered and sequential), so results are deterministic run to run. The
compiled twins use the same accumulation order; the two backends agree to
within one ulp (numpy's vectorized exp and libm's exp may differ in the last
bit).
"""

import numpy as np


def segment_softmax(scores, seg, n):
    """Softmax over rows of `scores` grouped by segment id, per column.

    scores: (E, H) float64, seg: (E,) int64 with values in [0, n).
    Rows in the same segment compete; empty segments are allowed (they simply
    own no rows). Uses per-segment max subtraction for stability.
    """
    m = np.full((n, scores.shape[1]), -np.inf)
    np.maximum.at(m, seg, scores)
    ex = np.exp(scores - m[seg])
    denom = np.zeros((n, scores.shape[1]))
    np.add.at(denom, seg, ex)
    return ex / denom[seg]


def segment_softmax_backward(probs, grad, seg, n):
    """Vector-Jacobian product of segment_softmax.

    Given probs = segment_softmax(e) and dL/dprobs, returns dL/de:
    p * (g - sum_over_segment(p * g)).
    """
    pg = probs * grad
    tot = np.zeros((n, probs.shape[1]))
    np.add.at(tot, seg, pg)
    return pg - probs * tot[seg]


def segment_sum(values, seg, n):
    """Sum rows of `values` (E, K) into (n, K) buckets given by seg."""
    out = np.zeros((n, values.shape[1]))
    np.add.at(out, seg, values)
    return out


def scatter_add_rows(acc, idx, values):
    """acc[idx[e]] += values[e] for each row e, in ascending e order (in place)."""
    np.add.at(acc, idx, values)
