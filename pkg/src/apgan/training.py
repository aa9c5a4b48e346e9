"""Alternating adversarial training with checkpointing and exact resume."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import serialization
from .attributes import AttributeNet, AttrNetConfig, predict_attributes
from .data import MODALITIES, Corpus, stack
from .discriminator import (
    DiscriminatorConfig,
    TripletPairDiscriminator,
    build_discriminator,
    discriminator_loss,
    sample_wrong_attributes,
)
from .errors import NonFiniteLossError, PreconditionError
from .generator import GeneratorConfig, UNetGenerator, build_generator
from .losses import (
    FeatureExtractorSpec,
    LossWeights,
    adversarial_g_loss,
    attribute_loss,
    feature_losses,
    l1_loss,
    total_generator_loss,
)
from .mcb import CountSketchPlan

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "L_D", "L_G", "L_1", "L_P", "L_I", "L_A", "total", "lr", "heldout_L1"]


def desk_generator_config(image_size=32):
    stages = int(math.log2(image_size))
    ch = [32, 64, 128, 256, 256, 256, 256, 256][:stages]
    return GeneratorConfig(base_image_size=image_size, encoder_channels=ch)


def desk_discriminator_config():
    return DiscriminatorConfig(block_channels=[32, 64, 128, 256, 256], strides=[2, 2, 1, 1, 1])


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 5e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 8
    decay_start_epoch: int = 15
    lr_decay: str = "linear"
    modality: str = "polar"
    image_size: int = 32
    seed: int = 0
    adversarial: bool = True
    non_saturating: bool = False
    use_gt_attributes: bool = False
    feature_reduction: str = "mean"
    attr_loss_squared: bool = False
    attr_loss_divide_by_n: bool = True  # RMS over the 10 outputs, matching the mean-reduced pixel terms
    perceptual_layer: str = "block1"
    identity_layer: str = "block2"
    checkpoint_every: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    generator: GeneratorConfig = field(default_factory=desk_generator_config)
    discriminator: DiscriminatorConfig = field(default_factory=desk_discriminator_config)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.decay_start_epoch <= self.epochs:
            raise ValueError("decay_start_epoch must lie in [0, epochs]")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")
        if self.lr_decay not in ("linear", "multiplicative"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")
        if self.generator.base_image_size != self.image_size:
            raise ValueError("generator.base_image_size must equal image_size")
        if self.feature_reduction not in ("mean", "sum"):
            raise ValueError("feature_reduction must be 'mean' or 'sum'")

    @classmethod
    def full_scale(cls, **overrides):
        """Full-scale settings: 256x256, batch 3, lr 2e-4, 200 epochs, decay after 100, literal attribute norm."""
        cfg = dict(
            epochs=200,
            lr=2e-4,
            attr_loss_divide_by_n=False,
            batch_size=3,
            decay_start_epoch=100,
            image_size=256,
            generator=GeneratorConfig(),
            discriminator=DiscriminatorConfig(),
        )
        cfg.update(overrides)
        return cls(**cfg)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Build from a nested dict; unknown keys raise ``KeyError`` naming the key."""
        d = dict(d)
        nested = {"weights": LossWeights, "generator": GeneratorConfig, "discriminator": DiscriminatorConfig}
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise KeyError(k)
        kwargs = {}
        for k, v in d.items():
            if k in nested:
                sub_known = {f.name for f in fields(nested[k])}
                for sk in v:
                    if sk not in sub_known:
                        raise KeyError(f"{k}.{sk}")
                kwargs[k] = nested[k](**v)
            else:
                kwargs[k] = v
        if "generator" not in kwargs and "image_size" in kwargs:
            kwargs["generator"] = desk_generator_config(kwargs["image_size"])
        return cls(**kwargs)

    def hash(self) -> str:
        """Digest of everything that affects the trajectory (everything except checkpoint cadence)."""
        d = self.to_dict()
        d.pop("checkpoint_every")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.decay_start_epoch:
        return cfg.lr
    k = epoch - cfg.decay_start_epoch + 1
    if cfg.lr_decay == "multiplicative":
        return cfg.lr * 0.99**k
    return cfg.lr * (1.0 - k / (cfg.epochs - cfg.decay_start_epoch))


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, 7, epoch]).generate_state(1)[0])


def make_batches(n: int, batch_size: int, generator: torch.Generator):
    """Shuffled indices split into ceil(n / batch_size) near-equal batches."""
    perm = torch.randperm(n, generator=generator).numpy()
    return [b for b in np.array_split(perm, math.ceil(n / batch_size)) if len(b)]


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    config: dict
    config_hash: str
    epoch: int  # last completed epoch, -1 before training
    generator_state: dict
    discriminator_state: dict
    plans: dict
    optimizer_g: dict | None = None
    optimizer_d: dict | None = None
    rng_state: torch.Tensor | None = None
    metrics: list = field(default_factory=list)
    train_subjects: list | None = None
    initial_heldout_l1: float | None = None  # before any update

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def build_generator(self) -> UNetGenerator:
        cfg = self.train_config()
        g = UNetGenerator(
            cfg.generator,
            CountSketchPlan.from_dict(self.plans["image"]),
            CountSketchPlan.from_dict(self.plans["attribute"]),
        )
        g.load_state_dict(self.generator_state)
        g.eval()
        return g

    def build_discriminator(self) -> TripletPairDiscriminator:
        d = TripletPairDiscriminator(self.train_config().discriminator)
        d.load_state_dict(self.discriminator_state)
        d.eval()
        return d

    def to_state(self) -> dict:
        return {"kind": "apgan", **{f.name: getattr(self, f.name) for f in fields(self)}}

    def save(self, path) -> bytes:
        return serialization.save(path, self.to_state())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        state = serialization.load(path)
        if state.get("kind") != "apgan":
            raise PreconditionError(f"{path} is not an AP-GAN checkpoint")
        state.pop("kind")
        return cls(**state)


def save_attribute_net(model: AttributeNet, path):
    state = {"kind": "attribute_net", "config": model.cfg.to_dict(), "state": model.state_dict()}
    return serialization.save(path, state)


def load_attribute_net(path) -> AttributeNet:
    state = serialization.load(path)
    if state.get("kind") != "attribute_net":
        raise PreconditionError(f"{path} is not an attribute-net checkpoint")
    model = AttributeNet(AttrNetConfig(**state["config"]))
    model.load_state_dict(state["state"])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else repr(r[k]) if isinstance(r[k], float) else r[k]) for k in METRIC_COLUMNS})


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list
    generator: UNetGenerator
    discriminator: TripletPairDiscriminator
    initial_heldout_l1: float | None = None


class Trainer:
    """Owns the two networks, their optimizers and the per-batch update."""

    def __init__(self, cfg: TrainConfig, attr_net: AttributeNet, dtype=torch.float32):
        self.cfg = cfg
        self.attr_net = attr_net.to(dtype)
        self.attr_net.eval()
        for p in self.attr_net.parameters():
            p.requires_grad_(False)
        self.G = build_generator(cfg.generator, cfg.seed).to(dtype)
        self.D = build_discriminator(cfg.discriminator, cfg.seed + 1000).to(dtype)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=cfg.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=cfg.lr, betas=betas)
        self.features = FeatureExtractorSpec(attr_net, cfg.perceptual_layer, cfg.identity_layer)
        self.dtype = dtype

    def set_lr(self, lr):
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

    def attributes_for(self, visible, labels):
        if self.cfg.use_gt_attributes:
            return labels.to(self.dtype)
        return predict_attributes(self.attr_net, visible).to(self.dtype)

    def d_step(self, real, fake, attr, generator):
        wrong = sample_wrong_attributes(attr, generator)
        loss = discriminator_loss(self.D, real, fake, attr, wrong, noisy=True, generator=generator)
        self.opt_d.zero_grad()
        loss.backward()
        self.opt_d.step()
        return loss.detach()

    def generator_terms(self, fake, real, attr, generator=None):
        cfg = self.cfg
        w = cfg.weights
        terms = {"L_1": l1_loss(fake, real, cfg.feature_reduction)}
        if cfg.adversarial:
            terms["L_G"] = adversarial_g_loss(self.D, fake, attr, cfg.non_saturating, noisy=generator is not None, generator=generator)
        if w.lambda_P > 0 or w.lambda_I > 0:
            fl = feature_losses(self.features, fake, real, reduction=cfg.feature_reduction)
            terms["L_P"] = fl[cfg.perceptual_layer]
            terms["L_I"] = fl[cfg.identity_layer]
        if w.lambda_A > 0:
            terms["L_A"] = attribute_loss(self.attr_net, fake, real, cfg.attr_loss_squared, cfg.attr_loss_divide_by_n)
        return terms

    def g_step(self, fake, real, attr, generator):
        terms = self.generator_terms(fake, real, attr, generator)
        total = total_generator_loss(terms, self.cfg.weights)
        self.opt_g.zero_grad()
        total.backward()
        self.opt_g.step()
        out = {k: v.detach() for k, v in terms.items()}
        out["total"] = total.detach()
        return out

    @torch.no_grad()
    def heldout_l1(self, thermal, visible, labels, batch=64):
        self.G.eval()
        total = 0.0
        for i in range(0, len(thermal), batch):
            x, y = thermal[i : i + batch], visible[i : i + batch]
            attr = self.attributes_for(y, labels[i : i + batch])
            total += (self.G(x, attr) - y).abs().mean(dim=(1, 2, 3)).sum().item()
        self.G.train()
        return total / len(thermal)

    def checkpoint(self, epoch, metrics, rng_state=None, train_subjects=None, initial=None) -> Checkpoint:
        return Checkpoint(
            config=self.cfg.to_dict(),
            config_hash=self.cfg.hash(),
            epoch=epoch,
            generator_state=self.G.state_dict(),
            discriminator_state=self.D.state_dict(),
            plans={"image": self.G.fusion.plan_a.to_dict(), "attribute": self.G.fusion.plan_b.to_dict()},
            optimizer_g=self.opt_g.state_dict(),
            optimizer_d=self.opt_d.state_dict(),
            rng_state=rng_state,
            metrics=[dict(r) for r in metrics],
            train_subjects=None if train_subjects is None else sorted(int(i) for i in train_subjects),
            initial_heldout_l1=initial,
        )

    def restore(self, ckpt: Checkpoint):
        if ckpt.config_hash != self.cfg.hash():
            raise PreconditionError(
                f"checkpoint config hash {ckpt.config_hash} does not match {self.cfg.hash()}"
            )
        self.G.load_state_dict(ckpt.generator_state)
        self.D.load_state_dict(ckpt.discriminator_state)
        self.opt_g.load_state_dict(ckpt.optimizer_g)
        self.opt_d.load_state_dict(ckpt.optimizer_d)


def _tensors(samples, modality, dtype):
    x = torch.as_tensor(stack(samples, "thermal", modality), dtype=dtype)
    y = torch.as_tensor(stack(samples, "visible"), dtype=dtype)
    a = torch.as_tensor(stack(samples, "attributes"), dtype=dtype)
    return x, y, a


def _dump_batch(out_dir, epoch, batch_idx, x, y, attr, terms):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"nonfinite_epoch{epoch}_batch{batch_idx}.apgan"
    serialization.save(path, {"thermal": x, "visible": y, "attributes": attr, "terms": {k: float(v) for k, v in terms.items()}})
    return path


def train(
    corpus: Corpus,
    train_subjects,
    cfg: TrainConfig,
    attr_net: AttributeNet | None,
    heldout_subjects=None,
    out_dir=None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    dtype=torch.float32,
) -> TrainResult:
    """Train G and D on the samples of ``train_subjects``.

    ``stop_after`` ends the run after that epoch index (used to produce a
    mid-run checkpoint); ``resume`` continues from a checkpoint's epoch.
    """
    if attr_net is None:
        raise PreconditionError("a trained attribute predictor is required")
    if corpus.size != cfg.image_size:
        raise ValueError(f"corpus size {corpus.size} != config image_size {cfg.image_size}")
    samples = corpus.select(train_subjects)
    if not samples:
        raise ValueError("no training samples for the given subjects")
    torch.manual_seed(cfg.seed)
    trainer = Trainer(cfg, attr_net, dtype)
    x_all, y_all, a_all = _tensors(samples, cfg.modality, dtype)
    held = None
    if heldout_subjects:
        held = _tensors(corpus.select(heldout_subjects), cfg.modality, dtype)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    metrics = []
    start = 0
    initial = None
    if resume is not None:
        trainer.restore(resume)
        metrics = [dict(r) for r in resume.metrics]
        start = resume.epoch + 1
        initial = resume.initial_heldout_l1
    elif held is not None:
        initial = trainer.heldout_l1(*held)

    last = cfg.epochs - 1 if stop_after is None else min(stop_after, cfg.epochs - 1)
    rng_state = None
    for epoch in range(start, last + 1):
        lr = lr_schedule(epoch, cfg)
        trainer.set_lr(lr)
        g = torch.Generator().manual_seed(epoch_seed(cfg.seed, epoch))
        sums = {k: 0.0 for k in ("L_D", "L_G", "L_1", "L_P", "L_I", "L_A", "total")}
        batches = make_batches(len(samples), cfg.batch_size, g)
        for b_idx, idx in enumerate(batches):
            idx = torch.as_tensor(idx)
            x, y, labels = x_all[idx], y_all[idx], a_all[idx]
            attr = trainer.attributes_for(y, labels)
            fake = trainer.G(x, attr)
            step_terms = {}
            if cfg.adversarial:
                step_terms["L_D"] = trainer.d_step(y, fake, attr, g)
            terms = trainer.g_step(fake, y, attr, g)
            step_terms.update(terms)
            if not all(torch.isfinite(v).all() for v in step_terms.values()):
                path = _dump_batch(out, epoch, b_idx, x, y, attr, step_terms)
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch} batch {b_idx}: "
                    + ", ".join(f"{k}={float(v):.4g}" for k, v in step_terms.items()),
                    dump_path=path,
                )
            for k, v in step_terms.items():
                sums[k] += float(v) * len(idx)
        row = {"epoch": epoch}
        row.update({k: v / len(samples) for k, v in sums.items()})
        row["lr"] = lr
        row["heldout_L1"] = trainer.heldout_l1(*held) if held is not None else None
        metrics.append(row)
        logger.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in row.items() if isinstance(v, float)})
        rng_state = g.get_state()
        if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            trainer.checkpoint(epoch, metrics, rng_state, train_subjects, initial).save(out / f"checkpoint_epoch{epoch}.apgan")

    ckpt = trainer.checkpoint(last, metrics, rng_state, train_subjects, initial)
    if out is not None:
        ckpt.save(out / "checkpoint.apgan")
        write_metrics_csv(metrics, out / "metrics.csv")
    trainer.G.eval()
    trainer.D.eval()
    return TrainResult(ckpt, metrics, trainer.G, trainer.D, initial)
