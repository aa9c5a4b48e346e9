"""Generator-side objective terms and their weighted sum."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .discriminator import clamped_log as _log


@dataclass
class LossWeights:
    lambda_1: float = 10.0
    lambda_P: float = 2.5
    lambda_I: float = 0.5
    lambda_A: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative, got {v}")

    def to_dict(self):
        return asdict(self)


@dataclass
class FeatureExtractorSpec:
    """Network exposing ``activations(x, upto) -> {layer: tensor}`` plus the two layer names."""

    network: object
    perceptual_layer: str = "block1"
    identity_layer: str = "block2"

    def __post_init__(self):
        names = getattr(self.network, "layer_names", None)
        if names is not None:
            for layer in (self.perceptual_layer, self.identity_layer):
                if layer not in names:
                    raise ValueError(f"layer {layer!r} not in extractor ({names})")

    def deepest(self, layers):
        order = list(getattr(self.network, "layer_names", layers))
        return max(layers, key=order.index)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def adversarial_g_loss(disc, fake, attr, non_saturating=False, noisy=False, generator=None):
    """Generator adversarial term over both discriminator streams.

    The default is the literal minimax form, which the generator minimizes
    by pushing ``log(1 - D)`` down.
    """
    if attr.shape[0] != fake.shape[0]:
        raise ValueError("attribute batch does not match image batch")
    h = disc.features(fake, noisy, generator)
    d_fake = disc.head(h)
    d_fake_attr = disc.head(h, attr)
    return adversarial_g_loss_from_scores(d_fake, d_fake_attr, non_saturating)


def adversarial_g_loss_from_scores(d_fake, d_fake_attr, non_saturating=False):
    if d_fake.shape != d_fake_attr.shape:
        raise ValueError("stream score maps differ in shape")
    if non_saturating:
        return -0.5 * _log(d_fake).mean() - 0.5 * _log(d_fake_attr).mean()
    return 0.5 * _log(1 - d_fake).mean() + 0.5 * _log(1 - d_fake_attr).mean()


def _reduce(diff, reduction):
    if reduction == "mean":
        return diff.mean()
    if reduction == "sum":
        # per-sample sum, averaged over the batch
        return diff.sum() / diff.shape[0]
    raise ValueError(f"unknown reduction {reduction!r}")


def feature_losses(spec: FeatureExtractorSpec, generated, target, layers=None, reduction="mean") -> dict:
    """Squared activation differences at each layer from one extractor pass per image."""
    _same_shape(generated, target)
    layers = list(layers or (spec.perceptual_layer, spec.identity_layer))
    deepest = spec.deepest(layers)
    act_g = spec.network.activations(generated, deepest)
    act_t = spec.network.activations(target, deepest)
    out = {}
    for layer in layers:
        if layer not in act_g:
            raise ValueError(f"unknown layer {layer!r}")
        out[layer] = _reduce((act_g[layer] - act_t[layer]) ** 2, reduction)
    return out


def feature_loss(spec: FeatureExtractorSpec, layer: str, generated, target, reduction="mean"):
    return feature_losses(spec, generated, target, [layer], reduction)[layer]


def l1_loss(generated, target, reduction="mean"):
    _same_shape(generated, target)
    return _reduce((generated - target).abs(), reduction)


def attribute_loss(attr_net, generated, target, squared=False, divide_by_n=False):
    """Euclidean distance between predictor outputs, averaged over the batch."""
    _same_shape(generated, target)
    diff = attr_net(generated) - attr_net(target)
    sq = (diff**2).sum(dim=1)
    if divide_by_n:
        sq = sq / diff.shape[1]
    if not squared:
        # zero subgradient at identical outputs instead of NaN
        positive = sq > 0
        sq = torch.where(positive, torch.sqrt(torch.where(positive, sq, torch.ones_like(sq))), torch.zeros_like(sq))
    return sq.mean()


def total_generator_loss(terms: dict, weights: LossWeights):
    """Weighted sum; ``terms`` holds L_G, L_A, L_P, L_I, L_1 (missing ones count as 0)."""
    return (
        terms.get("L_G", 0.0)
        + weights.lambda_A * terms.get("L_A", 0.0)
        + weights.lambda_P * terms.get("L_P", 0.0)
        + weights.lambda_I * terms.get("L_I", 0.0)
        + weights.lambda_1 * terms.get("L_1", 0.0)
    )
