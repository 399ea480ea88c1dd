"""Finite-difference validation of every loss the trainer optimizes.

Checks analytic gradients of the center-estimation loss, the mv loss, the
classification losses, and the full composed objective against central
differences on small randomized tensors.  Large convolution weights are
checked on a seeded subset of coordinates; every active parameter of each
loss is covered.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import core, losses
from .backbone import Backbone, BackboneSpec

TOLERANCE = 1e-4


def _check_param(make_loss, holder, attr, step=1e-5, max_coords=40, seed=0):
    """FD error for one parameter tensor, temporarily swapped into its module."""
    param = getattr(holder, attr)

    def f(t):
        setattr(holder, attr, t)
        try:
            return make_loss()
        finally:
            setattr(holder, attr, param)

    coords = None
    if param.values.size > max_coords:
        coords = np.random.default_rng(seed).choice(
            param.values.size, size=max_coords, replace=False)
    return ad.finite_difference_check(f, param, step, coords=coords)


def run_gradcheck(seed=7, max_coords=40):
    """Max relative FD error per loss; all must come in under TOLERANCE."""
    rng = np.random.default_rng(seed)
    n_cls, k, d, h, w, s = 3, 3, 4, 2, 2, 8

    centers = core.ClassCenters(n_cls, k, d, rng)
    ce = core.CenterEstimator(n_cls, k, d, rng)
    cm = core.ContrastiveModule(d, rng)
    vt = core.VectorTransform(d, rng, init="uniform")

    x = rng.normal(size=(s, d, h, w))
    labels = np.array([0, 0, 0, 1, 1, 2, 2, 2])
    batch = core.MiniBatch(x=x, labels=labels)
    split = core.split_freq_rare([30, 20, 4], 0.67)

    results = {}

    def cesc():
        return core.cesc_loss(batch, centers, ce, cm, np.random.default_rng(11))

    results["cesc"] = max(
        _check_param(cesc, centers, "centers"),
        _check_param(cesc, ce, "weight"),
        _check_param(cesc, ce, "bias"),
        _check_param(cesc, cm, "conv1_w", max_coords=max_coords),
        _check_param(cesc, cm, "conv2_w", max_coords=max_coords),
        _check_param(cesc, cm, "head_w", max_coords=max_coords),
    )

    cm.freeze()
    gen = core.generate_samples(batch, split, 1.0, vt, centers, ce,
                                np.random.default_rng(12))
    fmask = split.frequent_mask(labels)

    def mv():
        return core.mv_loss(x[fmask], x[~fmask], gen.pairing, vt, cm, centers, ce)

    results["mv"] = _check_param(mv, vt, "w", max_coords=160)

    logits0 = rng.normal(size=(s, n_cls))
    cls_labels = rng.integers(0, n_cls, size=s)
    results["cross_entropy"] = ad.finite_difference_check(
        lambda t: losses.cross_entropy(t, cls_labels), ad.Tensor(logits0), 1e-5)
    results["focal"] = ad.finite_difference_check(
        lambda t: losses.focal_loss(t, cls_labels, 2.0), ad.Tensor(logits0), 1e-5)

    # composed objective on a one-stage backbone whose hook features are
    # (batch, d, h, w); contrastive module stays frozen, as after the epoch
    # threshold, so the active parameters are everything else
    spec = BackboneSpec(n_cls=n_cls, stage_channels=[d], blocks_per_stage=1,
                        insertion_stage=1, in_channels=1)
    net = Backbone(spec, np.random.default_rng(seed + 1))
    images = rng.normal(size=(s, 1, h, w))
    weights = losses.LossWeights(0.1, 0.01)

    def total():
        feats = net.forward_to_hook(images)
        fb = core.MiniBatch(x=feats, labels=labels)
        l_cesc = core.cesc_loss(fb, centers, ce, cm, np.random.default_rng(13))
        g = core.generate_samples(fb, split, 1.0, vt, centers, ce,
                                  np.random.default_rng(14))
        aug = ad.concat([feats, g.features], axis=0)
        logits = net.forward_from_hook(aug)
        l_cls = losses.cross_entropy(logits, np.concatenate([labels, g.labels]))
        fv = feats.values
        l_mv = core.mv_loss(fv[fmask], fv[~fmask], g.pairing, vt, cm, centers, ce)
        return losses.total_loss(l_cls, l_cesc, l_mv, weights)

    results["total"] = max(
        _check_param(total, net.stem, "w", max_coords=max_coords),
        _check_param(total, net, "head_w"),
        _check_param(total, vt, "w", max_coords=max_coords),
        _check_param(total, centers, "centers"),
        _check_param(total, ce, "weight"),
    )
    return results
