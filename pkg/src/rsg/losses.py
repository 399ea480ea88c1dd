"""Pluggable classification losses and the combined training objective.

Any scalar-valued classification loss can be slotted in; cross-entropy and
an optional focal variant ship by default.  Gradient routing between the
objective's components is enforced by detachments inside the sample
generator, not here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.01

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")


def _true_class_probs(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    n_cls = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_cls:
        raise ValueError(
            f"labels must lie in [0, {n_cls}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return ad.take_per_row(ad.softmax(logits), labels)


def cross_entropy(logits, labels):
    """Mean negative log-probability of the true class."""
    p = _true_class_probs(logits, labels)
    return ad.neg(ad.mean_all(ad.log(ad.clamp_min(p, 1e-12))))


def focal_loss(logits, labels, gamma_focal=2.0):
    """Focal reweighting (1 - p_t)^gamma of the per-sample cross-entropy."""
    p = _true_class_probs(logits, labels)
    nll = ad.neg(ad.log(ad.clamp_min(p, 1e-12)))
    weight = ad.pow_scalar(ad.shift(ad.neg(p), 1.0), gamma_focal)
    return ad.mean_all(ad.mul(weight, nll))


def total_loss(l_cls, l_cesc, l_mv, w):
    """l_cls + lambda1 * l_cesc + lambda2 * l_mv; a missing l_mv contributes 0."""
    out = ad.add(l_cls, ad.scale(l_cesc, w.lambda1))
    if l_mv is not None:
        out = ad.add(out, ad.scale(l_mv, w.lambda2))
    return out
