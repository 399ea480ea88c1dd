import numpy as np
import pytest

from rsg import core


@pytest.fixture
def toy_modules():
    """Small module set: 3 classes, K=3 centers, D=4 channels, 8-channel cm."""
    rng = np.random.default_rng(1234)
    n_cls, k, d = 3, 3, 4
    centers = core.ClassCenters(n_cls, k, d, rng)
    ce = core.CenterEstimator(n_cls, k, d, rng)
    cm = core.ContrastiveModule(d, rng, channels=8)
    vt = core.VectorTransform(d)
    return centers, ce, cm, vt


def make_batch(rng, labels, d=4, h=2, w=2, split=None):
    labels = np.asarray(labels, dtype=np.int64)
    x = rng.normal(size=(len(labels), d, h, w))
    return core.MiniBatch(x=x, labels=labels, split=split)
