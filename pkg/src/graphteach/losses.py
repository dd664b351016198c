"""Training objectives: the three-branch logit mixture, cross-entropy, the
focal teacher-forcing term, and their weighted total.

All cosine-derived logit branches are scaled by a single temperature before
any softmax; raw cosines in [-1, 1] would make cross-entropy nearly flat.
"""

from dataclasses import dataclass

from .errors import ConfigError, DimensionError
from .numcore import constant, tape

DEFAULT_TAU = 100.0


@dataclass(frozen=True)
class LossWeights:
    """alpha scales the cache branch, delta the teacher branch inside the
    training mixture, lam the focal teacher-forcing term."""

    alpha: float = 1.0
    delta: float = 1.0
    lam: float = 1.0
    gamma_focal: float = 2.0
    tau: float = DEFAULT_TAU

    def validate(self):
        if min(self.alpha, self.delta, self.lam, self.gamma_focal) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")


def _check_lengths(*nodes):
    widths = {n.value.shape for n in nodes if n is not None}
    if len(widths) > 1:
        raise DimensionError(f"logit branches disagree on shape: {widths}")


def train_logits(l_zs, l_cache, l_graph, weights):
    """Training mixture: zero-shot + alpha * cache + delta * (tau * graph).

    The graph branch enters as raw cosines, so tau puts it on the zero-shot
    scale. With delta = 0 this reduces exactly to the test-time logits.
    """
    _check_lengths(l_zs, l_cache, l_graph)
    out = tape.add(l_zs, tape.scale(l_cache, weights.alpha))
    if weights.delta != 0.0 and l_graph is not None:
        out = tape.add(out, tape.scale(l_graph, weights.delta * weights.tau))
    return out


def cross_entropy(logits, y):
    """-log softmax(logits)[y], stable via log-sum-exp."""
    return tape.cross_entropy_logits(logits, y)


def focal_loss(graph_logits, y, gamma, tau):
    """Focal term on the teacher branch alone: -(1 - p)^gamma log p with
    p the softmax probability of the true class under tau-scaled cosines.

    Computed through ce = -log p, so p = exp(-ce) stays stable; gamma = 0
    reproduces plain cross-entropy exactly.
    """
    if gamma < 0:
        raise ConfigError("gamma must be non-negative")
    ce = cross_entropy(tape.scale(graph_logits, tau), y)
    if gamma == 0.0:
        return ce
    p_t = tape.exp(tape.neg(ce))
    return tape.mul(tape.pow_const(tape.sub(constant([[1.0]]), p_t), gamma), ce)


def total_loss(l_zs, l_cache, l_graph, y, weights):
    """Joint mixture cross-entropy plus lam-weighted focal teacher forcing.

    Gradients reach the adapter through the cache branch and the teacher
    through the graph branch; delta = lam = 0 detaches the teacher entirely.
    """
    weights.validate()
    loss = cross_entropy(train_logits(l_zs, l_cache, l_graph, weights), y)
    if weights.lam != 0.0 and l_graph is not None:
        focal = focal_loss(l_graph, y, weights.gamma_focal, weights.tau)
        loss = tape.add(loss, tape.scale(focal, weights.lam))
    return loss
