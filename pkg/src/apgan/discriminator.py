"""Triplet-pair patch discriminator with unconditional and conditional streams."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .generator import init_weights

LOG_CLAMP = 1e-7


@dataclass
class DiscriminatorConfig:
    input_channels: int = 3
    block_channels: list = field(default_factory=lambda: [64, 128, 256, 512, 512])
    noise_std: float = 0.01
    attr_dim: int = 10
    attr_inject_block: int = 5
    strides: list = field(default_factory=lambda: [2, 2, 2, 1, 1])
    # "literal" keeps the two-pair conditional term exactly as printed;
    # "triplet" adds the (real image, wrong attributes) pair.
    cond_loss: str = "triplet"

    def validate(self):
        if len(self.block_channels) != 5 or len(self.strides) != 5:
            raise ValueError("discriminator needs exactly 5 conv blocks before the output conv")
        if self.attr_inject_block != 5:
            raise ValueError("attributes are injected at block 5")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if any(s < 1 for s in self.strides):
            raise ValueError("strides must be positive")
        if self.cond_loss not in ("triplet", "literal"):
            raise ValueError(f"unknown cond_loss {self.cond_loss!r}")

    def to_dict(self):
        return asdict(self)

    def patch_size(self, image_size: int) -> int:
        n = image_size
        for s in self.strides:
            n = (n + 2 - 4) // s + 1
        return n


class GaussianNoise(nn.Module):
    def __init__(self, std):
        super().__init__()
        self.std = std

    def forward(self, x, active: bool, generator: torch.Generator | None = None):
        if not active or self.std == 0:
            return x
        noise = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
        return x + self.std * noise


class TripletPairDiscriminator(nn.Module):
    """NCL-NCBL-NCBL-NCBL trunk shared by both streams, then a CBL-CS head per stream."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.block_channels
        self.noise = nn.ModuleList(GaussianNoise(cfg.noise_std) for _ in range(4))
        self.trunk = nn.ModuleList()
        c_in = cfg.input_channels
        for i in range(4):
            layers = [nn.Conv2d(c_in, ch[i], 4, cfg.strides[i], 1)]
            if i > 0:
                layers.append(nn.BatchNorm2d(ch[i]))
            layers.append(nn.LeakyReLU(0.2))
            self.trunk.append(nn.Sequential(*layers))
            c_in = ch[i]
        self.uncond_head = self._head(c_in, ch[4], cfg.strides[4])
        self.cond_head = self._head(c_in + cfg.attr_dim, ch[4], cfg.strides[4])

    @staticmethod
    def _head(c_in, c_mid, stride):
        # Size-preserving 3x3 output conv keeps the patch map at the block-5 size.
        return nn.Sequential(
            nn.Conv2d(c_in, c_mid, 4, stride, 1),
            nn.BatchNorm2d(c_mid),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c_mid, 1, 3, 1, 1),
            nn.Sigmoid(),
        )

    def features(self, image, noisy=False, generator=None):
        h = image
        for noise, block in zip(self.noise, self.trunk):
            h = block(noise(h, noisy, generator))
        return h

    def head(self, h, attr=None):
        if attr is None:
            return self.uncond_head(h)
        tiled = attr.to(h.dtype)[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
        return self.cond_head(torch.cat([h, tiled], dim=1))

    def forward(self, image, attr=None, noisy=False, generator=None):
        return self.head(self.features(image, noisy, generator), attr)


def build_discriminator(cfg: DiscriminatorConfig, seed: int) -> TripletPairDiscriminator:
    model = TripletPairDiscriminator(cfg)
    init_weights(model, torch.Generator().manual_seed(seed))
    return model


def score(model: TripletPairDiscriminator, image, attr=None, training: bool = False, generator=None):
    """Patch score map in (0, 1); noise layers are active only when ``training``.

    Batch-norm mode follows ``model.training`` and is independent of the flag.
    """
    image = torch.as_tensor(image)
    single = image.dim() == 3
    if single:
        image = image.unsqueeze(0)
        if attr is not None:
            attr = torch.as_tensor(attr).unsqueeze(0)
    if image.shape[1] != model.cfg.input_channels:
        raise ValueError(f"expected {model.cfg.input_channels} channels, got {image.shape[1]}")
    if attr is not None:
        attr = torch.as_tensor(attr)
        if attr.shape != (image.shape[0], model.cfg.attr_dim):
            raise ValueError(f"attribute batch shape {tuple(attr.shape)} does not match images")
    dtype = next(model.parameters()).dtype
    out = model(image.to(dtype), None if attr is None else attr.to(dtype), training, generator)
    return out[0, 0] if single else out[:, 0]


def clamped_log(p):
    return torch.log(torch.clamp(p, LOG_CLAMP, 1 - LOG_CLAMP))


def triplet_loss_from_scores(d_real, d_fake, d_real_true, d_fake_true, d_real_wrong=None, literal=False):
    """Discriminator objective from the five patch score maps.

    ``literal`` drops the (real, wrong attribute) pair and puts the whole
    fake weight of the conditional term on (fake, true attribute).
    """
    l_uncond = -0.5 * clamped_log(d_real).mean() - 0.5 * clamped_log(1 - d_fake).mean()
    if literal:
        l_cond = -0.5 * clamped_log(d_real_true).mean() - 0.5 * clamped_log(1 - d_fake_true).mean()
    else:
        if d_real_wrong is None:
            raise ValueError("triplet form needs the (real, wrong attribute) scores")
        l_cond = (
            -0.5 * clamped_log(d_real_true).mean()
            - 0.25 * clamped_log(1 - d_fake_true).mean()
            - 0.25 * clamped_log(1 - d_real_wrong).mean()
        )
    return l_uncond + l_cond


def discriminator_loss(model, real, fake, attr_true, attr_wrong, noisy=False, generator=None):
    """Triplet-pair loss; ``fake`` is detached so no gradient reaches the generator."""
    if real.shape != fake.shape:
        raise ValueError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ in shape")
    if attr_true.shape != attr_wrong.shape or attr_true.shape[0] != real.shape[0]:
        raise ValueError("attribute batches must match the image batch")
    fake = fake.detach()
    literal = model.cfg.cond_loss == "literal"
    h_real = model.features(real, noisy, generator)
    h_fake = model.features(fake, noisy, generator)
    d_real = model.head(h_real)
    d_fake = model.head(h_fake)
    d_real_true = model.head(h_real, attr_true)
    d_fake_true = model.head(h_fake, attr_true)
    d_real_wrong = None if literal else model.head(h_real, attr_wrong)
    return triplet_loss_from_scores(d_real, d_fake, d_real_true, d_fake_true, d_real_wrong, literal)


def sample_wrong_attributes(attrs: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Mismatched attributes for the (real image, wrong attribute) pair.

    Rows are permuted within the batch with fixed points (and any row that
    lands on an identical vector) sign-flipped at one random position.
    """
    n = attrs.shape[0]
    out = attrs.clone()
    if n > 1:
        perm = torch.randperm(n, generator=generator)
        for _ in range(8):
            fixed = perm == torch.arange(n)
            if not fixed.any():
                break
            perm = torch.randperm(n, generator=generator)
        out = attrs[perm].clone()
    same = (out == attrs).all(dim=1)
    for i in torch.nonzero(same).flatten().tolist():
        j = int(torch.randint(0, attrs.shape[1], (1,), generator=generator))
        out[i, j] = -attrs[i, j]
        if out[i, j] == attrs[i, j]:  # zero entry
            out[i, j] = 1.0
    return out

