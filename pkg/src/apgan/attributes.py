"""Facial attribute predictor.

A small CNN trained with MSE against +/-1 labels. Its first two conv blocks
double as the perceptual / identity feature layers and its hidden dense
layer is the embedding used for verification.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ATTRIBUTE_NAMES

NUM_ATTRIBUTES = len(ATTRIBUTE_NAMES)


@dataclass
class AttrNetConfig:
    image_size: int = 32
    channels: list = field(default_factory=lambda: [32, 64, 128, 128])
    embed_dim: int = 256
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32
    flip_augment: bool = True
    noise_augment: float = 0.1  # std of additive Gaussian noise on training images
    weight_decay: float = 0.0

    def validate(self):
        if len(self.channels) != 4:
            raise ValueError("attribute net has exactly 4 conv blocks")
        if self.image_size % 16:
            raise ValueError("image_size must be divisible by 16")

    def to_dict(self):
        return asdict(self)


class AttributeNet(nn.Module):
    layer_names = ("block1", "block2", "block3", "block4", "embedding", "attributes")

    def __init__(self, cfg: AttrNetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        blocks = []
        c_in = 3
        for c in cfg.channels:
            blocks.append(nn.Sequential(nn.Conv2d(c_in, c, 4, 2, 1), nn.ReLU()))
            c_in = c
        self.blocks = nn.ModuleList(blocks)
        self.hidden = nn.Linear(c_in, cfg.embed_dim)
        self.head = nn.Linear(cfg.embed_dim, NUM_ATTRIBUTES)

    def activations(self, x, upto: str = "attributes") -> dict:
        """All named activations up to and including ``upto`` from one forward pass."""
        if upto not in self.layer_names:
            raise ValueError(f"unknown layer {upto!r}; known: {self.layer_names}")
        out = {}
        h = x
        for i, block in enumerate(self.blocks):
            h = block(h)
            out[f"block{i + 1}"] = h
            if upto == f"block{i + 1}":
                return out
        h = F.relu(self.hidden(h.mean(dim=(2, 3))))
        out["embedding"] = h
        if upto == "embedding":
            return out
        out["attributes"] = torch.tanh(self.head(h))
        return out

    def forward(self, x):
        return self.activations(x)["attributes"]


def _check_images(model, images):
    images = torch.as_tensor(images)
    single = images.dim() == 3
    if single:
        images = images.unsqueeze(0)
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError(f"expected 3-channel visible images, got shape {tuple(images.shape)}")
    dtype = next(model.parameters()).dtype
    return images.to(dtype), single


def build_attribute_net(cfg: AttrNetConfig, seed: int) -> AttributeNet:
    model = AttributeNet(cfg)
    g = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * np.sqrt(2.0 / fan_in))
                m.bias.zero_()
    return model


def train_attribute_predictor(images, labels, cfg: AttrNetConfig | None = None, seed: int = 0, log=None) -> AttributeNet:
    """Fit the predictor on (N, 3, H, W) visible images and (N, 10) +/-1 labels."""
    cfg = cfg or AttrNetConfig()
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.float32)
    if len(images) == 0:
        raise ValueError("empty training corpus")
    if labels.shape != (len(images), NUM_ATTRIBUTES):
        raise ValueError(f"labels must be ({len(images)}, {NUM_ATTRIBUTES}), got {tuple(labels.shape)}")
    if not torch.all(labels.abs() == 1):
        raise ValueError("attribute labels must be +/-1")
    model = build_attribute_net(cfg, seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    g = torch.Generator().manual_seed(seed + 1)
    n = len(images)
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=g)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            x = images[idx]
            if cfg.flip_augment:
                flip = torch.rand(len(idx), generator=g) < 0.5
                x = torch.where(flip[:, None, None, None], x.flip(-1), x)
            if cfg.noise_augment > 0:
                x = x + cfg.noise_augment * torch.randn(x.shape, generator=g)
            loss = F.mse_loss(model(x), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        if log is not None:
            log(f"attr epoch {epoch}: mse {total / n:.4f}")
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@torch.no_grad()
def predict_attributes(model: AttributeNet, images) -> torch.Tensor:
    x, single = _check_images(model, images)
    out = model(x)
    return out[0] if single else out


@torch.no_grad()
def attribute_feature(model: AttributeNet, images) -> torch.Tensor:
    x, single = _check_images(model, images)
    out = model.activations(x, "embedding")["embedding"]
    return out[0] if single else out


def sign_accuracy(pred, labels) -> np.ndarray:
    """Per-attribute fraction of predictions whose sign matches the label."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    return (np.sign(pred) == np.sign(labels)).mean(axis=0)
