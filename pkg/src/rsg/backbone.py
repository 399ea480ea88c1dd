"""Small residual CNN classifier with a feature-injection hook.

The network is split at a configurable down-sampling boundary so that
synthesized feature maps can be concatenated with real ones and forwarded
through the remaining layers.  The default configuration uses no batch
normalization, keeping per-sample logits independent of the rest of the
batch; an optional batch-norm mode exists for fidelity experiments (with
the caveat that injected samples then perturb real-sample statistics).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .core import fan_in_uniform


@dataclass
class BackboneSpec:
    """Architecture knobs for the classifier.

    insertion_stage selects the down-sampling boundary where generated
    samples enter: stage k means "just before the k-th down-sampling",
    with global average pooling counting as the last one.
    """

    n_cls: int
    stage_channels: list = field(default_factory=lambda: [16, 32, 64])
    blocks_per_stage: int = 2
    insertion_stage: int = 2
    in_channels: int = 3
    use_batchnorm: bool = False

    def __post_init__(self):
        n_stages = len(self.stage_channels)
        if not 1 <= self.insertion_stage <= n_stages:
            raise ValueError(
                f"insertion_stage must be in [1, {n_stages}], "
                f"got {self.insertion_stage}"
            )
        if self.blocks_per_stage < 1 or self.n_cls < 2:
            raise ValueError("need at least one block per stage and two classes")

    def hook_channels(self):
        return self.stage_channels[self.insertion_stage - 1]

    def hook_spatial(self, h, w):
        for _ in range(self.insertion_stage - 1):
            h = (h + 1) // 2
            w = (w + 1) // 2
        return h, w


class BatchNorm:
    """Per-channel batch normalization with running statistics."""

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = ad.parameter(np.ones(channels))
        self.beta = ad.parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def parameters(self, prefix):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]

    def forward(self, x, training):
        n, c, h, w = x.shape
        if training:
            mu = ad.channel_mean(x)
            xc = ad.sub(x, ad.broadcast_channels(mu, n, h, w))
            var = ad.channel_mean(ad.mul(xc, xc))
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.values
            self.running_var = (1 - m) * self.running_var + m * var.values
            inv = ad.pow_scalar(ad.shift(var, self.eps), -0.5)
            normed = ad.mul(xc, ad.broadcast_channels(inv, n, h, w))
            return ad.channel_affine(normed, self.gamma, self.beta)
        inv = ad.constant(1.0 / np.sqrt(self.running_var + self.eps))
        mean = ad.constant(self.running_mean)
        scale = ad.mul(self.gamma, inv)
        shift = ad.sub(self.beta, ad.mul(scale, mean))
        return ad.channel_affine(x, scale, shift)


class _Conv:
    def __init__(self, rng, cin, cout, stride=1, use_bn=False):
        self.w = ad.parameter(fan_in_uniform(rng, (cout, cin, 3, 3), cin * 9))
        self.b = None if use_bn else ad.parameter(np.zeros(cout))
        self.bn = BatchNorm(cout) if use_bn else None
        self.stride = stride

    def parameters(self, prefix):
        out = [(f"{prefix}.w", self.w)]
        if self.b is not None:
            out.append((f"{prefix}.b", self.b))
        if self.bn is not None:
            out.extend(self.bn.parameters(f"{prefix}.bn"))
        return out

    def forward(self, x, training):
        out = ad.conv2d(x, self.w, self.b, stride=self.stride, padding=1)
        if self.bn is not None:
            out = self.bn.forward(out, training)
        return out


class _ResidualBlock:
    """Two 3x3 convolutions with a skip connection, ReLU activations."""

    def __init__(self, rng, channels, use_bn):
        self.conv1 = _Conv(rng, channels, channels, use_bn=use_bn)
        self.conv2 = _Conv(rng, channels, channels, use_bn=use_bn)

    def parameters(self, prefix):
        return (self.conv1.parameters(f"{prefix}.conv1")
                + self.conv2.parameters(f"{prefix}.conv2"))

    def forward(self, x, training):
        h = ad.relu(self.conv1.forward(x, training))
        h = self.conv2.forward(h, training)
        return ad.relu(ad.add(h, x))


class Backbone:
    """Residual CNN split into a below-hook and an above-hook part.

    forward_from_hook(forward_to_hook(x)) equals a monolithic forward;
    generated feature maps pass through forward_from_hook identically to
    real ones.
    """

    def __init__(self, spec, rng):
        self.spec = spec
        self.training = True
        bn = spec.use_batchnorm
        ch = spec.stage_channels
        self.stem = _Conv(rng, spec.in_channels, ch[0], use_bn=bn)
        self.stages = []
        self.downsamples = []
        for i, c in enumerate(ch):
            blocks = [_ResidualBlock(rng, c, bn) for _ in range(spec.blocks_per_stage)]
            self.stages.append(blocks)
            if i + 1 < len(ch):
                self.downsamples.append(_Conv(rng, c, ch[i + 1], stride=2, use_bn=bn))
        self.head_w = ad.parameter(fan_in_uniform(rng, (spec.n_cls, ch[-1]), ch[-1]))
        self.head_b = ad.parameter(np.zeros(spec.n_cls))

    def parameters(self):
        params = self.stem.parameters("stem")
        for i, blocks in enumerate(self.stages):
            for j, blk in enumerate(blocks):
                params.extend(blk.parameters(f"stage{i + 1}.block{j + 1}"))
            if i < len(self.downsamples):
                params.extend(self.downsamples[i].parameters(f"down{i + 1}"))
        params.extend([("head.w", self.head_w), ("head.b", self.head_b)])
        return params

    def train(self):
        self.training = True

    def eval(self):
        self.training = False

    def _stage(self, x, i):
        for blk in self.stages[i]:
            x = blk.forward(x, self.training)
        return x

    def forward_to_hook(self, images):
        """Feature maps at the insertion point for a (N, C, H, W) image batch."""
        if not isinstance(images, ad.Tensor):
            images = ad.constant(images)
        if images.ndim != 4 or images.shape[1] != self.spec.in_channels:
            raise ad.ShapeError(
                f"op 'forward_to_hook': expected (N, {self.spec.in_channels}, H, W) "
                f"images (got shapes {images.shape})"
            )
        x = ad.relu(self.stem.forward(images, self.training))
        x = self._stage(x, 0)
        for i in range(1, self.spec.insertion_stage):
            x = ad.relu(self.downsamples[i - 1].forward(x, self.training))
            x = self._stage(x, i)
        return x

    def forward_from_hook(self, features):
        """Logits from insertion-point feature maps (real or generated)."""
        want = self.spec.hook_channels()
        if features.ndim != 4 or features.shape[1] != want:
            raise ad.ShapeError(
                f"op 'forward_from_hook': expected (N, {want}, H', W') features "
                f"(got shapes {features.shape})"
            )
        x = features
        for i in range(self.spec.insertion_stage, len(self.stages)):
            x = ad.relu(self.downsamples[i - 1].forward(x, self.training))
            x = self._stage(x, i)
        pooled = ad.global_avg_pool(x)
        return ad.linear(pooled, self.head_w, self.head_b)

    def forward(self, images):
        return self.forward_from_hook(self.forward_to_hook(images))
