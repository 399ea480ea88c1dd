"""Phase-switched training loop with routed gradients.

Every step estimates class centers on the real batch.  Before the epoch
threshold the classifier trains on real samples only and the contrastive
module co-trains with the center loss; from the threshold on, the
contrastive module freezes, displacements harvested from frequent-class
samples are transformed and injected into rare-class samples, and the
classifier consumes the augmented batch while the vector transform takes
gradient from both the mv loss and the classification loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import core, losses, metrics
from .backbone import Backbone, BackboneSpec
from .data import (DatasetSpec, augment_pad_crop_flip, batch_sampler,
                   build_dataset, load_array, save_array)


class ConfigError(ValueError):
    """Invalid or unknown fields in a run configuration."""


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch, step, detail, checkpoint=None):
        super().__init__(
            f"non-finite loss at epoch {epoch}, step {step}: {detail}"
            + (f" (last good checkpoint: {checkpoint})" if checkpoint else ""))
        self.epoch = epoch
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class RsgConfig:
    """All run hyperparameters (see docs/config.schema.json)."""

    T: int
    T_th: int
    K: int = 15
    alpha: float = 0.5
    beta: float = 0.01
    lambda1: float = 0.1
    lambda2: float = 0.01
    lr: float = 0.1
    lr_schedule: list = field(default_factory=list)  # [(epoch, multiplier)]
    momentum: float = 0.9
    weight_decay: float = 2e-4
    batch_size: int = 128
    seed: int = 0
    insertion_stage: int = 2
    backprop_generated_to_backbone: bool = False
    generation_enabled: bool = True
    generation_mode: str = "transform"  # transform | direct_add
    generation_target: str = "sample"  # sample | center
    mv_terms: list = field(default_factory=lambda: [True, True, True])
    cesc_detach_gamma: bool = False
    cm_channels: int = 256
    vt_init: str = "identity"
    cls_loss: str = "cross_entropy"  # cross_entropy | focal
    focal_gamma: float = 2.0
    stage_channels: list = field(default_factory=lambda: [16, 32, 64])
    blocks_per_stage: int = 2
    use_batchnorm: bool = False
    eval_batch_size: int = 256

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must be in (0, 1], got {self.beta}")
        if not self.T_th < self.T:
            raise ConfigError(f"need T_th < T, got T_th={self.T_th}, T={self.T}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.generation_mode not in ("transform", "direct_add"):
            raise ConfigError(f"unknown generation_mode '{self.generation_mode}'")
        if self.generation_target not in ("sample", "center"):
            raise ConfigError(f"unknown generation_target '{self.generation_target}'")
        if self.cls_loss not in ("cross_entropy", "focal"):
            raise ConfigError(f"unknown cls_loss '{self.cls_loss}'")
        if len(self.mv_terms) != 3:
            raise ConfigError("mv_terms must list exactly three booleans")
        self.lr_schedule = [(int(e), float(m)) for e, m in self.lr_schedule]


_SCHEMA_TYPES = {"int": "integer", "float": "number", "str": "string",
                 "bool": "boolean", "list": "array"}

_DATASET_SCHEMA = {
    "type": "object",
    "properties": {
        "source": {"type": "string"},
        "n_cls": {"type": "integer"},
        "imbalance_type": {"type": "string"},
        "rho": {"type": "number"},
        "seed": {"type": "integer"},
        "n_max": {"type": "integer"},
        "dim": {"type": "integer"},
        "class_sep": {"type": "number"},
        "val_per_class": {"type": "integer"},
        "data_dir": {"type": "string"},
        "augment": {"type": "boolean"},
    },
    "additionalProperties": False,
}


def config_schema():
    """JSON schema for the run-configuration document."""
    props = {}
    for f in fields(RsgConfig):
        tname = f.type if isinstance(f.type, str) else f.type.__name__
        props[f.name] = {"type": _SCHEMA_TYPES[tname.split(" | ")[0]]}
    props["dataset"] = _DATASET_SCHEMA
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "type": "object",
        "properties": props,
        "required": ["T", "T_th"],
        "additionalProperties": False,
    }


def load_config(path):
    """Parse a JSON config into (RsgConfig, DatasetSpec); unknown keys rejected."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    import jsonschema
    try:
        jsonschema.validate(doc, config_schema())
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config {path}: {exc.message}") from exc
    dataset_doc = doc.pop("dataset", {})
    try:
        cfg = RsgConfig(**doc)
        dataset = DatasetSpec(**dataset_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config {path}: {exc}") from exc
    return cfg, dataset


def lr_at(epoch, cfg):
    """Base lr times the product of multipliers whose boundaries have passed."""
    lr = cfg.lr
    for boundary, mult in cfg.lr_schedule:
        if epoch >= boundary:
            lr *= mult
    return lr


class SGD:
    """Classical momentum: v <- momentum*v + g, p <- p - lr*v.

    Parameters without a gradient this step (or frozen ones) are skipped,
    leaving both values and buffers untouched.  Weight decay adds wd*p to
    the gradient of parameters registered with decay (backbone only).
    """

    def __init__(self, groups, momentum=0.9):
        # groups: list of (name, tensor, weight_decay)
        self.groups = list(groups)
        self.momentum = momentum
        self.buffers = {name: np.zeros_like(p.values) for name, p, _ in self.groups}

    def step(self, lr):
        for name, p, wd in self.groups:
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad + wd * p.values if wd else p.grad
            buf = self.buffers[name]
            buf *= self.momentum
            buf += g
            p.values -= lr * buf

    def zero_grad(self):
        for _, p, _ in self.groups:
            p.grad = None


@dataclass
class StepRecord:
    l_cls: float
    l_cesc: float
    l_mv: float | None
    s_new: int
    lr: float
    generation_skipped: bool = False


class TrainState:
    """Everything one run owns: modules, optimizer, samplers, rng streams."""

    def __init__(self, cfg, dataset):
        self.cfg = cfg
        self.dataset = dataset
        img = dataset.train[0].image
        in_channels, h, w = img.shape
        self.backbone_spec = BackboneSpec(
            n_cls=dataset.n_cls,
            stage_channels=list(cfg.stage_channels),
            blocks_per_stage=cfg.blocks_per_stage,
            insertion_stage=cfg.insertion_stage,
            in_channels=in_channels,
            use_batchnorm=cfg.use_batchnorm,
        )
        seeds = np.random.SeedSequence(cfg.seed).spawn(3)
        self.backbone = Backbone(self.backbone_spec, np.random.default_rng(seeds[0]))
        d = self.backbone_spec.hook_channels()
        rsg_rng = np.random.default_rng(seeds[1])
        self.centers = core.ClassCenters(dataset.n_cls, cfg.K, d, rsg_rng)
        self.ce = core.CenterEstimator(dataset.n_cls, cfg.K, d, rsg_rng)
        self.cm = core.ContrastiveModule(d, rsg_rng, channels=cfg.cm_channels)
        self.vt = core.VectorTransform(d, rsg_rng, init=cfg.vt_init)
        self.rsg_rng = np.random.default_rng(seeds[2])

        self.split = core.split_freq_rare(dataset.train_counts, cfg.alpha)
        transform = None
        self.eval_transform = None
        if dataset.channel_mean is not None:
            mean = dataset.channel_mean[:, None, None]
            std = dataset.channel_std[:, None, None]
            aug = getattr(dataset, "augment", True)

            def transform(image, rng, _m=mean, _s=std, _aug=aug):
                if _aug:
                    image = augment_pad_crop_flip(image, rng)
                return (image - _m) / _s

            self.eval_transform = lambda image, _m=mean, _s=std: (image - _m) / _s
        self.sampler = batch_sampler(dataset.train, cfg.batch_size, cfg.seed,
                                     split=self.split, transform=transform)

        groups = [(n, p, cfg.weight_decay) for n, p in self.backbone.parameters()]
        for module in (self.centers, self.ce, self.cm, self.vt):
            groups.extend((n, p, 0.0) for n, p in module.parameters())
        self.optimizer = SGD(groups, momentum=cfg.momentum)
        self.weights = losses.LossWeights(cfg.lambda1, cfg.lambda2)

    def parameters(self):
        return [(n, p) for n, p, _ in self.optimizer.groups]

    def cls_loss(self, logits, labels):
        if self.cfg.cls_loss == "focal":
            return losses.focal_loss(logits, labels, self.cfg.focal_gamma)
        return losses.cross_entropy(logits, labels)


def _compose_step(state, batch, epoch):
    """Forward pass of one step; returns (l_cls, l_cesc, l_mv, s_new, skipped)."""
    cfg = state.cfg
    feats = state.backbone.forward_to_hook(batch.x)
    rsg_active = cfg.lambda1 > 0 or cfg.lambda2 > 0

    l_cesc = None
    feat_batch = core.MiniBatch(x=feats, labels=batch.labels, split=batch.split)
    if rsg_active:
        if epoch >= cfg.T_th and not state.cm.frozen:
            state.cm.freeze()
        l_cesc = core.cesc_loss(feat_batch, state.centers, state.ce, state.cm,
                                state.rsg_rng, detach_gamma=cfg.cesc_detach_gamma)

    gen = None
    generation_skipped = False
    if cfg.generation_enabled and epoch >= cfg.T_th:
        gen = core.generate_samples(
            feat_batch, batch.split, cfg.beta, state.vt, state.centers,
            state.ce, state.rsg_rng, mode=cfg.generation_mode,
            target=cfg.generation_target,
            backprop_to_backbone=cfg.backprop_generated_to_backbone)
        if gen.skipped:
            gen, generation_skipped = None, True

    l_mv = None
    if gen is None:
        logits = state.backbone.forward_from_hook(feats)
        l_cls = state.cls_loss(logits, batch.labels)
        s_new = 0
    else:
        aug = ad.concat([feats, gen.features], axis=0)
        aug_labels = np.concatenate([batch.labels, gen.labels])
        logits = state.backbone.forward_from_hook(aug)
        l_cls = state.cls_loss(logits, aug_labels)
        s_new = gen.count
        if cfg.lambda2 > 0 and cfg.generation_mode == "transform":
            fmask = batch.split.frequent_mask(batch.labels)
            fvals = feats.values
            l_mv = core.mv_loss(fvals[fmask], fvals[~fmask], gen.pairing,
                                state.vt, state.cm, state.centers, state.ce,
                                terms=tuple(cfg.mv_terms))
    return l_cls, l_cesc, l_mv, s_new, generation_skipped


def train_step(batch, epoch, state, cfg=None):
    """One optimizer step of the phase-switched procedure."""
    cfg = cfg or state.cfg
    lr = lr_at(epoch, cfg)
    l_cls, l_cesc, l_mv, s_new, skipped = _compose_step(state, batch, epoch)
    total = losses.total_loss(
        l_cls, l_cesc if l_cesc is not None else ad.constant(0.0),
        l_mv, state.weights)
    state.optimizer.zero_grad()
    ad.backpropagate(total)
    state.optimizer.step(lr)
    return StepRecord(
        l_cls=l_cls.item(),
        l_cesc=l_cesc.item() if l_cesc is not None else 0.0,
        l_mv=l_mv.item() if l_mv is not None else None,
        s_new=s_new, lr=lr, generation_skipped=skipped)


def routing_probe(state, batch, epoch):
    """Max |gradient| for each routing identity on one instrumented step.

    All five values must be exactly zero: the center loss and the mv loss
    never touch the backbone, the mv loss never touches the frozen
    contrastive module, and the classification loss never touches the
    center estimator or the centers.
    """
    cfg = state.cfg

    def max_abs(params):
        vals = [0.0 if p.grad is None else float(np.abs(p.grad).max())
                for _, p in params]
        return max(vals) if vals else 0.0

    out = {}
    backbone_params = state.backbone.parameters()

    state.optimizer.zero_grad()
    l_cls, l_cesc, l_mv, _, _ = _compose_step(state, batch, epoch)

    if l_cesc is not None:
        ad.backpropagate(l_cesc)
        out["cesc_to_backbone"] = max_abs(backbone_params)
        state.optimizer.zero_grad()
    if l_mv is not None:
        ad.backpropagate(l_mv)
        out["mv_to_backbone"] = max_abs(backbone_params)
        out["mv_to_cm"] = max_abs(state.cm.parameters())
        state.optimizer.zero_grad()
    ad.backpropagate(l_cls)
    out["cls_to_ce"] = max_abs(state.ce.parameters())
    out["cls_to_centers"] = max_abs(state.centers.parameters())
    state.optimizer.zero_grad()
    return out


def evaluate_logits(state, examples):
    """Stacked eval-mode logits and labels over a list of examples."""
    backbone = state.backbone
    was_training = backbone.training
    backbone.eval()
    chunks, labels = [], []
    bs = state.cfg.eval_batch_size
    try:
        with ad.no_grad():
            for start in range(0, len(examples), bs):
                part = examples[start:start + bs]
                imgs = np.stack([
                    ex.image if state.eval_transform is None
                    else state.eval_transform(ex.image)
                    for ex in part])
                chunks.append(backbone.forward(imgs).values)
                labels.extend(ex.label for ex in part)
    finally:
        if was_training:
            backbone.train()
    return np.concatenate(chunks), np.asarray(labels, dtype=np.int64)


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(named_params, path):
    """All parameters as one flat float array plus a JSON shape manifest."""
    flat = np.concatenate([p.values.ravel() for _, p in named_params])
    save_array(path, flat)
    manifest = {name: list(p.shape) for name, p in named_params}
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(named_params, path):
    flat = load_array(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    offset = 0
    for name, p in named_params:
        if name not in manifest or tuple(manifest[name]) != p.shape:
            raise ConfigError(
                f"checkpoint {path}: parameter '{name}' missing or shaped "
                f"{manifest.get(name)} instead of {list(p.shape)}")
        size = p.values.size
        p.values = flat[offset:offset + size].reshape(p.shape).copy()
        offset += size
    if offset != flat.size:
        raise ConfigError(
            f"checkpoint {path}: {flat.size} values for {offset} parameters")


def run_training(cfg, dataset, out_dir=None):
    """Execute the full schedule and return the TrainingReport.

    ``dataset`` may be a DatasetSpec (materialized here) or a built Dataset.
    Aborts with NonFiniteLossError on a non-finite loss, after writing the
    last epoch-end checkpoint when an output directory is available.
    """
    if isinstance(dataset, DatasetSpec):
        dataset = build_dataset(dataset)
    state = TrainState(cfg, dataset)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    report = metrics.TrainingReport(config=_config_echo(cfg, dataset),
                                    seed=cfg.seed,
                                    train_counts=list(dataset.train_counts))
    last_good = [(n, p.values.copy()) for n, p in state.parameters()]

    for epoch in range(cfg.T):
        sums = {"l_cls": 0.0, "l_cesc": 0.0}
        mv_sum, mv_steps, s_new_total, steps = 0.0, 0, 0, 0
        for step_idx, batch in enumerate(state.sampler.epoch(epoch)):
            rec = train_step(batch, epoch, state)
            bad = [k for k, v in (("l_cls", rec.l_cls), ("l_cesc", rec.l_cesc),
                                  ("l_mv", rec.l_mv)) if v is not None
                   and not math.isfinite(v)]
            if bad:
                ckpt = None
                if out is not None:
                    ckpt = out / "abort-checkpoint.bin"
                    named = [(n, ad.Tensor(v)) for n, v in last_good]
                    save_checkpoint(named, ckpt)
                raise NonFiniteLossError(epoch, step_idx, ", ".join(bad),
                                         checkpoint=str(ckpt) if ckpt else None)
            sums["l_cls"] += rec.l_cls
            sums["l_cesc"] += rec.l_cesc
            if rec.l_mv is not None:
                mv_sum += rec.l_mv
                mv_steps += 1
            s_new_total += rec.s_new
            steps += 1

        logits, labels = evaluate_logits(state, dataset.val)
        report.epochs.append(metrics.EpochRow(
            epoch=epoch,
            lr=lr_at(epoch, cfg),
            l_cls=sums["l_cls"] / steps,
            l_cesc=sums["l_cesc"] / steps,
            l_mv=mv_sum / mv_steps if mv_steps else 0.0,
            s_new=s_new_total,
            val_top1=metrics.top1_error(logits, labels)))
        last_good = [(n, p.values.copy()) for n, p in state.parameters()]

    logits, labels = evaluate_logits(state, dataset.val)
    report.per_class_error = metrics.per_class_error(logits, labels)
    report.top1_error = metrics.top1_error(logits, labels)
    report.shot_acc = metrics.shot_split_report(report.per_class_error,
                                                dataset.train_counts)
    if out is not None:
        save_checkpoint(state.parameters(), out / "checkpoint.bin")
        report.checkpoint = "checkpoint.bin"
    return report


def _config_echo(cfg, dataset):
    echo = asdict(cfg)
    echo["lr_schedule"] = [[e, m] for e, m in cfg.lr_schedule]
    echo["n_cls"] = dataset.n_cls
    return echo
