"""Rare-class sample generation in feature space.

Per class, a bank of learnable centers is fit by a soft-assignment squared
distance; the displacement of a frequent-class sample from its closest
center is treated as class-irrelevant variation, reoriented by a learned
3x3 convolution, and added to rare-class samples to synthesize new
training features.  Two losses drive the modules: the center-estimation
with sample-contrastive loss (cesc) and the maximized-vector loss (mv).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


def fan_in_uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _values(x):
    return x.values if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)


@dataclass
class FreqRareSplit:
    """Partition of class ids into frequent (largest counts) and rare."""

    frequent_classes: set
    rare_classes: set
    alpha: float

    def frequent_mask(self, labels):
        freq = np.array(sorted(self.frequent_classes), dtype=np.int64)
        return np.isin(np.asarray(labels), freq)


def split_freq_rare(class_counts, alpha):
    """The max(1, round(alpha * n_cls)) classes with largest counts are frequent.

    Ties are broken by lower class id.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    counts = list(class_counts)
    if any(c < 0 for c in counts):
        raise ValueError("class counts must be nonnegative")
    if all(c == 0 for c in counts):
        raise ValueError("all class counts are zero")
    n_cls = len(counts)
    n_freq = max(1, int(math.floor(alpha * n_cls + 0.5)))
    order = sorted(range(n_cls), key=lambda l: (-counts[l], l))
    frequent = set(order[:n_freq])
    rare = set(order[n_freq:])
    return FreqRareSplit(frequent_classes=frequent, rare_classes=rare, alpha=alpha)


@dataclass
class MiniBatch:
    """One training batch: feature maps or images, labels, and the class split."""

    x: object  # Tensor (N, C, H, W) or float ndarray
    labels: np.ndarray
    split: FreqRareSplit | None = None

    def __len__(self):
        return len(self.labels)


class ClassCenters:
    """Learnable per-class bank of center vectors, shape (n_cls, K, D).

    Updated only by gradients of the cesc loss; every other consumer reads
    the values as constants.
    """

    def __init__(self, n_cls, k, d, rng, init_std=0.1):
        self.n_cls = n_cls
        self.k = k
        self.d = d
        self.centers = ad.parameter(rng.normal(0.0, init_std, size=(n_cls, k, d)))

    def parameters(self):
        return [("centers", self.centers)]

    def class_bank(self, label):
        """Graph view of one class's centers, shape (K, D)."""
        return ad.reshape(ad.index_select(self.centers, [label]), (self.k, self.d))

    def values_for(self, labels, kappas):
        """Center vectors as constants, shape (N, D)."""
        return self.centers.values[np.asarray(labels), np.asarray(kappas)]


class CenterEstimator:
    """Per-class affine maps assigning a sample to its closest center.

    weight[l] (K, D) and bias[l] (K,) produce K logits from the pooled
    feature vector of a class-l sample; softmax gives the assignment
    distribution.
    """

    def __init__(self, n_cls, k, d, rng):
        self.n_cls = n_cls
        self.k = k
        self.d = d
        self.weight = ad.parameter(fan_in_uniform(rng, (n_cls, k, d), d))
        self.bias = ad.parameter(np.zeros((n_cls, k)))

    def parameters(self):
        return [("ce.weight", self.weight), ("ce.bias", self.bias)]

    def logits_for_class(self, pooled, label):
        """Graph logits (M, K) for pooled features (M, D) of one class."""
        w = ad.reshape(ad.index_select(self.weight, [label]), (self.k, self.d))
        b = ad.reshape(ad.index_select(self.bias, [label]), (self.k,))
        return ad.linear(pooled, w, b)

    def assign_values(self, x_vals, labels):
        """Closest-center indices (no graph) for features (N, D, H, W)."""
        pooled = x_vals.mean(axis=(2, 3))
        w = self.weight.values[labels]  # (N, K, D)
        b = self.bias.values[labels]  # (N, K)
        logits = np.einsum("nd,nkd->nk", pooled, w) + b
        return logits.argmax(axis=1)


def center_assign(x, label, ce):
    """Assignment distribution over one class's centers and its argmax.

    Returns (gamma, kappa) where gamma sums to 1 and kappa is the index of
    the closest center; ties break to the lowest index.
    """
    if not 0 <= label < ce.n_cls:
        raise ValueError(f"label {label} out of range [0, {ce.n_cls})")
    xv = _values(x)
    pooled = xv.mean(axis=(1, 2)) if xv.ndim == 3 else np.asarray(xv, dtype=np.float64)
    logits = ce.weight.values[label] @ pooled + ce.bias.values[label]
    shifted = np.exp(logits - logits.max())
    gamma = shifted / shifted.sum()
    return gamma, int(logits.argmax())


class ContrastiveModule:
    """Binary same-class/different-class discriminator on feature-map pairs.

    Two 3x3 convolutions (ReLU between) over the channel concatenation of a
    pair, pooled and mapped to 2 logits; the returned score is the softmax
    probability of the different-class logit.  Once frozen, the parameters
    stop receiving updates but the module still passes gradients through to
    its inputs.
    """

    def __init__(self, d, rng, channels=256):
        self.d = d
        self.channels = channels
        c = channels
        self.conv1_w = ad.parameter(fan_in_uniform(rng, (c, 2 * d, 3, 3), 2 * d * 9))
        self.conv1_b = ad.parameter(np.zeros(c))
        self.conv2_w = ad.parameter(fan_in_uniform(rng, (c, c, 3, 3), c * 9))
        self.conv2_b = ad.parameter(np.zeros(c))
        self.head_w = ad.parameter(fan_in_uniform(rng, (2, c), c))
        self.head_b = ad.parameter(np.zeros(2))
        self.frozen = False

    def parameters(self):
        return [
            ("cm.conv1_w", self.conv1_w), ("cm.conv1_b", self.conv1_b),
            ("cm.conv2_w", self.conv2_w), ("cm.conv2_b", self.conv2_b),
            ("cm.head_w", self.head_w), ("cm.head_b", self.head_b),
        ]

    def freeze(self):
        self.frozen = True
        for _, p in self.parameters():
            p.requires_grad = False

    def gamma_star(self, x1, x2):
        """Batched different-class probabilities, shape (N,), in the graph."""
        if not isinstance(x1, ad.Tensor):
            x1 = ad.constant(x1)
        if not isinstance(x2, ad.Tensor):
            x2 = ad.constant(x2)
        paired = ad.concat([x1, x2], axis=1)
        h = ad.relu(ad.conv2d(paired, self.conv1_w, self.conv1_b))
        h = ad.conv2d(h, self.conv2_w, self.conv2_b)
        logits = ad.linear(ad.global_avg_pool(h), self.head_w, self.head_b)
        probs = ad.softmax(logits)
        n = probs.shape[0]
        return ad.take_per_row(probs, np.ones(n, dtype=np.int64))


def contrastive_score(x1, x2, cm):
    """Probability that two feature maps come from different classes."""
    with ad.no_grad():
        out = cm.gamma_star(_values(x1)[None], _values(x2)[None])
    return float(out.values[0])


class VectorTransform:
    """Single 3x3 convolution reorienting donor displacements, shape-preserving.

    Initialized to the identity kernel so it starts as direct addition.
    """

    def __init__(self, d, rng=None, init="identity"):
        self.d = d
        w = np.zeros((d, d, 3, 3))
        if init == "identity":
            for i in range(d):
                w[i, i, 1, 1] = 1.0
        elif init == "uniform":
            w = fan_in_uniform(rng, (d, d, 3, 3), d * 9)
        else:
            raise ValueError(f"unknown vector-transform init '{init}'")
        self.w = ad.parameter(w)

    def parameters(self):
        return [("vt.w", self.w)]

    def apply(self, x):
        if not isinstance(x, ad.Tensor):
            x = ad.constant(x)
        return ad.conv2d(x, self.w, stride=1, padding=1)


def feature_displacement(x, label, centers, ce):
    """Sample minus the spatial broadcast of its closest center.

    The center values enter as constants: gradients through the result
    never reach the center bank.
    """
    if not isinstance(x, ad.Tensor):
        x = ad.constant(x)
    _, kappa = center_assign(x, label, ce)
    c = ad.constant(centers.centers.values[label, kappa])
    up = ad.upsample_vector(c, x.shape[1], x.shape[2])
    return ad.sub(x, up)


def _displacement_values(x_vals, labels, centers, ce):
    """Batched constant displacements (N, D, H, W) via each sample's closest center."""
    kappas = ce.assign_values(x_vals, labels)
    c = centers.values_for(labels, kappas)
    return x_vals - c[:, :, None, None]


@dataclass
class GenerationPairing:
    """Which donor displacement went into which rare sample this step.

    Indices are relative to the batch-order subsequences of frequent and
    rare samples.
    """

    freq_idx: np.ndarray
    rare_idx: np.ndarray
    freq_labels: np.ndarray
    rare_labels: np.ndarray


@dataclass
class GeneratedSamples:
    features: object  # Tensor (s_new, D, H, W), None when skipped
    labels: np.ndarray
    pairing: GenerationPairing | None
    skipped: bool

    @property
    def count(self):
        return 0 if self.skipped else len(self.labels)


def generation_count(beta, s_freq, s_rare):
    """max(floor(beta * s_freq / s_rare), 1) * s_rare."""
    return max(int(math.floor(beta * s_freq / s_rare)), 1) * s_rare


def generate_samples(batch, split, beta, vt, centers, ce, rng, *,
                     mode="transform", target="sample",
                     backprop_to_backbone=False):
    """Synthesize rare-class features from frequent-class displacements.

    Each rare sample in the batch receives the same number of generated
    copies; donors are drawn uniformly without replacement from the batch's
    frequent samples while they last, with replacement beyond that.  A batch
    missing either side yields a skipped (empty) result rather than an error.

    mode "direct_add" bypasses the vector transform; target "center" adds
    the transferred displacement to the rare sample's closest center instead
    of the sample itself.
    """
    labels = np.asarray(batch.labels)
    fmask = split.frequent_mask(labels)
    freq_pos = np.flatnonzero(fmask)
    rare_pos = np.flatnonzero(~fmask)
    if len(freq_pos) == 0 or len(rare_pos) == 0:
        return GeneratedSamples(None, np.empty(0, dtype=np.int64), None, skipped=True)

    s_freq, s_rare = len(freq_pos), len(rare_pos)
    s_new = generation_count(beta, s_freq, s_rare)
    m = s_new // s_rare
    donors = rng.choice(s_freq, size=s_new, replace=s_new > s_freq)
    rare_rep = np.repeat(np.arange(s_rare), m)

    x_vals = _values(batch.x)
    freq_vals, rare_vals = x_vals[freq_pos], x_vals[rare_pos]
    freq_labels, rare_labels = labels[freq_pos], labels[rare_pos]

    fd_freq = _displacement_values(freq_vals[donors], freq_labels[donors], centers, ce)
    moved = vt.apply(fd_freq) if mode == "transform" else ad.constant(fd_freq)

    if target == "center":
        kap = ce.assign_values(rare_vals[rare_rep], rare_labels[rare_rep])
        base_vals = np.broadcast_to(
            centers.values_for(rare_labels[rare_rep], kap)[:, :, None, None],
            fd_freq.shape,
        ).copy()
        base = ad.constant(base_vals)
    elif backprop_to_backbone and isinstance(batch.x, ad.Tensor):
        base = ad.index_select(batch.x, rare_pos[rare_rep])
    else:
        base = ad.constant(rare_vals[rare_rep])

    features = ad.add(moved, base)
    new_labels = rare_labels[rare_rep]
    pairing = GenerationPairing(
        freq_idx=donors, rare_idx=rare_rep,
        freq_labels=freq_labels, rare_labels=rare_labels,
    )
    return GeneratedSamples(features, new_labels, pairing, skipped=False)


def cesc_loss(batch, centers, ce, cm, rng, *, detach_gamma=False):
    """Center-estimation with sample-contrastive loss over one batch.

    Soft-assignment squared distances to the class centers (mean over the
    batch) minus the log-likelihood of a binary same/different-class
    discriminator scored on floor(s/2) disjoint random pairs.  Feature maps
    enter as constants, so no gradient reaches the backbone.
    """
    x_vals = _values(batch.x)
    labels = np.asarray(batch.labels)
    s, _, h, w = x_vals.shape
    hw = float(h * w)

    term1 = None
    for label in np.unique(labels):
        idx = np.flatnonzero(labels == label)
        xs = x_vals[idx]
        pooled = ad.constant(xs.mean(axis=(2, 3)))
        xsq = ad.constant((xs * xs).sum(axis=(1, 2, 3)))
        sx = ad.constant(xs.sum(axis=(2, 3)))

        gamma = ad.softmax(ce.logits_for_class(pooled, int(label)))
        if detach_gamma:
            gamma = gamma.detach()
        bank = centers.class_bank(int(label))
        cross = ad.matmul(sx, ad.transpose2d(bank))
        csq = ad.sum_per_sample(ad.mul(bank, bank))
        sqdist = ad.add_colvec(
            ad.add_rowvec(ad.scale(cross, -2.0), ad.scale(csq, hw)), xsq
        )
        contrib = ad.sum_all(ad.mul(gamma, sqdist))
        term1 = contrib if term1 is None else ad.add(term1, contrib)
    term1 = ad.scale(term1, 1.0 / s)

    if s < 2:
        return term1

    perm = rng.permutation(s)
    n_pairs = s // 2
    a, b = perm[0:2 * n_pairs:2], perm[1:2 * n_pairs:2]
    y = (labels[a] != labels[b]).astype(np.float64)

    gstar = cm.gamma_star(x_vals[a], x_vals[b])
    log_diff = ad.log(ad.clamp_min(gstar, 1e-12))
    log_same = ad.log(ad.clamp_min(ad.shift(ad.neg(gstar), 1.0), 1e-12))
    pair_ll = ad.add(
        ad.mul(ad.constant(y), log_diff),
        ad.mul(ad.constant(1.0 - y), log_same),
    )
    term2 = ad.scale(ad.sum_all(pair_ll), 1.0 / n_pairs)
    return ad.sub(term1, term2)


def mv_loss(freq_samples, rare_samples, pairing, vt, cm, centers, ce, *,
            terms=(True, True, True)):
    """Maximized-vector loss over the generated pairs of one step.

    Mean, over generated samples, of: per-location deviation of the
    transformed donor displacement from co-linearity with the rare sample's
    own displacement; per-location change in the displacement's length under
    the transform; and the discriminator's log-probability that the
    transformed displacement still looks like its frequent donor.  Gradients
    reach only the vector transform.
    """
    freq_vals = _values(freq_samples)
    rare_vals = _values(rare_samples)
    fi, ri = pairing.freq_idx, pairing.rare_idx

    fd_freq = _displacement_values(
        freq_vals[fi], pairing.freq_labels[fi], centers, ce)
    fd_rare = _displacement_values(
        rare_vals[ri], pairing.rare_labels[ri], centers, ce)

    moved = vt.apply(fd_freq)
    parts = []
    if terms[0]:
        norm_moved = ad.channel_norm(moved)
        norm_rare = np.sqrt((fd_rare * fd_rare).sum(axis=1))
        denom = ad.clamp_min(ad.mul(norm_moved, ad.constant(norm_rare)), 1e-8)
        cos = ad.div(ad.channel_dot(moved, ad.constant(fd_rare)), denom)
        parts.append(ad.mean_all(ad.sum_per_sample(ad.absolute(ad.shift(cos, -1.0)))))
    if terms[1]:
        norm_moved = ad.channel_norm(moved)
        norm_orig = np.sqrt((fd_freq * fd_freq).sum(axis=1))
        parts.append(ad.mean_all(ad.sum_per_sample(
            ad.absolute(ad.sub(norm_moved, ad.constant(norm_orig))))))
    if terms[2]:
        gstar = cm.gamma_star(moved, freq_vals[fi])
        parts.append(ad.neg(ad.mean_all(ad.log(ad.clamp_min(gstar, 1e-12)))))

    if not parts:
        return ad.constant(0.0)
    loss = parts[0]
    for p in parts[1:]:
        loss = ad.add(loss, p)
    return loss
