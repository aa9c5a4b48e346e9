"""U-net generator with MCB fusion of the attribute vector at the bottleneck."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .mcb import CountSketchPlan, MCBFusion, make_sketch_plan

FULL_SCALE_ENCODER_CHANNELS = [64, 128, 256, 512, 512, 512, 512, 512]


@dataclass
class GeneratorConfig:
    input_channels: int = 3
    base_image_size: int = 256
    encoder_channels: list = field(default_factory=lambda: list(FULL_SCALE_ENCODER_CHANNELS))
    sketch_dim: int = 512
    attribute_dim: int = 10
    skip_connections: bool = True
    normalize_fusion: bool = True
    instance_norm: bool = False

    def validate(self):
        stages = len(self.encoder_channels)
        if stages < 1:
            raise ValueError("encoder_channels must be non-empty")
        if self.base_image_size != 2**stages:
            raise ValueError(
                f"base_image_size {self.base_image_size} does not reduce to a 1x1 "
                f"bottleneck over {stages} stride-2 stages"
            )
        if self.input_channels < 1 or self.attribute_dim < 1 or self.sketch_dim < 1:
            raise ValueError("channel and attribute dimensions must be positive")

    def to_dict(self):
        return asdict(self)


def _norm(channels, instance):
    if instance:
        return nn.InstanceNorm2d(channels, affine=True)
    return nn.BatchNorm2d(channels)


def init_weights(module: nn.Module, generator: torch.Generator):
    """N(0, 0.02) for conv weights, N(1, 0.02) for norm scales, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)) and m.affine:
            with torch.no_grad():
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=generator) * 0.02)
                m.bias.zero_()


class UNetGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig, plan_image: CountSketchPlan, plan_attr: CountSketchPlan):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.encoder_channels
        self.encoder = nn.ModuleList()
        c_in = cfg.input_channels
        for i, c_out in enumerate(ch):
            layers = [nn.Conv2d(c_in, c_out, 4, 2, 1)]
            # instance norm over a single 1x1 bottleneck pixel is undefined, so skip it there
            if i > 0 and not (cfg.instance_norm and i == len(ch) - 1):
                layers.append(_norm(c_out, cfg.instance_norm))
            layers.append(nn.LeakyReLU(0.02))
            self.encoder.append(nn.Sequential(*layers))
            c_in = c_out

        self.fusion = MCBFusion(plan_image, plan_attr, normalize=cfg.normalize_fusion)

        self.decoder = nn.ModuleList()
        c_prev = cfg.sketch_dim
        dec_channels = list(reversed(ch[:-1]))
        for i, c_out in enumerate(dec_channels):
            c_in = c_prev
            if i > 0 and cfg.skip_connections:
                c_in += ch[len(ch) - 1 - i]
            self.decoder.append(
                nn.Sequential(
                    nn.ConvTranspose2d(c_in, c_out, 4, 2, 1),
                    _norm(c_out, cfg.instance_norm),
                    nn.ReLU(),
                )
            )
            c_prev = c_out
        c_in = c_prev + (ch[0] if cfg.skip_connections and len(ch) > 1 else 0)
        self.output = nn.Sequential(nn.ConvTranspose2d(c_in, 3, 4, 2, 1), nn.Tanh())

    def encode(self, x):
        feats = []
        h = x
        for block in self.encoder:
            h = block(h)
            feats.append(h)
        return feats

    def forward(self, x: torch.Tensor, attr: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if x.dim() != 4 or x.shape[1] != cfg.input_channels or x.shape[-2:] != (
            cfg.base_image_size,
            cfg.base_image_size,
        ):
            raise ValueError(
                f"expected input (N, {cfg.input_channels}, {cfg.base_image_size}, "
                f"{cfg.base_image_size}), got {tuple(x.shape)}"
            )
        if attr.dim() != 2 or attr.shape != (x.shape[0], cfg.attribute_dim):
            raise ValueError(f"expected attributes ({x.shape[0]}, {cfg.attribute_dim}), got {tuple(attr.shape)}")
        feats = self.encode(x)
        bottleneck = feats[-1].flatten(1)
        h = self.fusion(bottleneck, attr.to(bottleneck.dtype))
        h = h.view(h.shape[0], cfg.sketch_dim, 1, 1)
        n = len(feats)
        for i, block in enumerate(self.decoder):
            if i > 0 and cfg.skip_connections:
                h = torch.cat([h, feats[n - 1 - i]], dim=1)
            h = block(h)
        if cfg.skip_connections and n > 1:
            h = torch.cat([h, feats[0]], dim=1)
        return self.output(h)


def build_generator(cfg: GeneratorConfig, seed: int) -> UNetGenerator:
    cfg.validate()
    bottleneck_dim = cfg.encoder_channels[-1]
    plan_image = make_sketch_plan(bottleneck_dim, cfg.sketch_dim, seed * 2 + 1)
    plan_attr = make_sketch_plan(cfg.attribute_dim, cfg.sketch_dim, seed * 2 + 2)
    model = UNetGenerator(cfg, plan_image, plan_attr)
    init_weights(model, torch.Generator().manual_seed(seed))
    return model


def _batched(t: torch.Tensor, ndim: int):
    return (t.unsqueeze(0), True) if t.dim() == ndim - 1 else (t, False)


@torch.no_grad()
def generate(model: UNetGenerator, x, attr) -> torch.Tensor:
    """Inference-mode synthesis. Accepts a single (C, H, W) image or a batch."""
    x = torch.as_tensor(x)
    attr = torch.as_tensor(attr)
    x, single = _batched(x, 4)
    attr, _ = _batched(attr, 2)
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    try:
        out = model(x.to(dtype), attr.to(dtype))
    finally:
        model.train(was_training)
    return out[0] if single else out


def parameter_checksum(model: nn.Module) -> str:
    """SHA-256 over every parameter and buffer in state-dict order."""
    import hashlib

    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
