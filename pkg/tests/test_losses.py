import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from apgan.attributes import AttrNetConfig, build_attribute_net
from apgan.discriminator import DiscriminatorConfig, build_discriminator
from apgan.generator import GeneratorConfig, build_generator
from apgan.losses import (
    FeatureExtractorSpec,
    LossWeights,
    adversarial_g_loss,
    adversarial_g_loss_from_scores,
    attribute_loss,
    feature_loss,
    feature_losses,
    l1_loss,
    total_generator_loss,
)

from .helpers import fd_check_parameters


class PassThrough(torch.nn.Module):
    """Stand-in predictor whose outputs are the spatial means of the 10 input channels."""

    def forward(self, x):
        return x.mean(dim=(2, 3))


def _const(v, shape=(2, 1, 4, 4)):
    return torch.full(shape, v, dtype=torch.float64)


def _small_attr_net(seed=0, dtype=torch.float64):
    return build_attribute_net(AttrNetConfig(channels=[4, 8, 8, 8], embed_dim=16), seed).to(dtype).requires_grad_(False)


def test_default_weights():
    w = LossWeights()
    assert (w.lambda_1, w.lambda_P, w.lambda_I, w.lambda_A) == (10.0, 2.5, 0.5, 1.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_P=-1)


def test_lg_constants():
    half = _const(0.5)
    assert float(adversarial_g_loss_from_scores(half, half)) == pytest.approx(-0.693147, abs=1e-6)
    assert float(adversarial_g_loss_from_scores(half, half)) == pytest.approx(math.log(0.5), abs=1e-6)
    fooled = _const(1 - 1e-7)
    assert float(adversarial_g_loss_from_scores(fooled, fooled)) == pytest.approx(math.log(1e-7), abs=1e-6)
    assert float(adversarial_g_loss_from_scores(_const(1.0), _const(1.0))) == pytest.approx(-16.118, abs=1e-3)
    mixed = adversarial_g_loss_from_scores(_const(0.2), _const(0.4))
    assert float(mixed) == pytest.approx(0.5 * math.log(0.8) + 0.5 * math.log(0.6), abs=1e-12)
    assert float(mixed) == pytest.approx(-0.367, abs=1e-3)


def test_lg_non_saturating():
    out = adversarial_g_loss_from_scores(_const(0.2), _const(0.4), non_saturating=True)
    assert float(out) == pytest.approx(-0.5 * math.log(0.2) - 0.5 * math.log(0.4), abs=1e-12)


def test_lg_shape_checks():
    with pytest.raises(ValueError):
        adversarial_g_loss_from_scores(_const(0.5), _const(0.5, (2, 1, 3, 3)))
    disc = build_discriminator(DiscriminatorConfig(block_channels=[4, 4, 4, 4, 4], strides=[2, 2, 1, 1, 1]), 0)
    with pytest.raises(ValueError):
        adversarial_g_loss(disc, torch.zeros(2, 3, 32, 32), torch.zeros(3, 10))


def test_l1_examples():
    rng = np.random.default_rng(0)
    y = torch.from_numpy(rng.uniform(-1, 1, size=(2, 3, 8, 8)))
    assert float(l1_loss(y, y)) == 0.0
    assert float(l1_loss(y + 0.5, y)) == pytest.approx(0.5, abs=1e-12)
    x = torch.from_numpy(rng.uniform(-1, 1, size=(2, 3, 8, 8)))
    brute = sum(abs(a - b) for a, b in zip(x.numpy().ravel(), y.numpy().ravel())) / x.numel()
    assert float(l1_loss(x, y)) == pytest.approx(brute, abs=1e-9)
    # per-sample sums averaged over the batch
    assert float(l1_loss(x, y, reduction="sum")) == pytest.approx(brute * x.numel() / 2, rel=1e-12)
    with pytest.raises(ValueError):
        l1_loss(x, y[:, :2])
    with pytest.raises(ValueError):
        l1_loss(x, y, reduction="max")


def test_attribute_loss_examples():
    net = PassThrough()
    q = -torch.ones(1, 10, 2, 2, dtype=torch.float64)
    assert float(attribute_loss(net, q, q)) == 0.0
    other = q.clone()
    other[:, 5] = 1.0  # Mustache -1 -> +1
    assert float(attribute_loss(net, other, q)) == pytest.approx(2.0, abs=1e-12)
    assert float(attribute_loss(net, other, q, squared=True)) == pytest.approx(4.0, abs=1e-12)
    assert float(attribute_loss(net, other, q, divide_by_n=True)) == pytest.approx(2.0 / math.sqrt(10), abs=1e-12)
    with pytest.raises(ValueError):
        attribute_loss(net, q, q[:, :9])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_attribute_loss_norm_oracle(seed):
    rng = np.random.default_rng(seed)
    a = torch.from_numpy(rng.uniform(-1, 1, size=(3, 10, 1, 1)))
    b = torch.from_numpy(rng.uniform(-1, 1, size=(3, 10, 1, 1)))
    d = (a - b).numpy()[:, :, 0, 0]
    expected = np.mean([math.sqrt(sum(v * v for v in row)) for row in d])
    assert float(attribute_loss(PassThrough(), a, b)) == pytest.approx(expected, abs=1e-9)


def test_attribute_loss_gradient_finite_at_equality():
    net = PassThrough()
    x = torch.zeros(1, 10, 2, 2, dtype=torch.float64, requires_grad=True)
    attribute_loss(net, x, torch.zeros_like(x)).backward()
    assert torch.isfinite(x.grad).all()


def test_feature_loss_properties():
    spec = FeatureExtractorSpec(_small_attr_net())
    g = torch.Generator().manual_seed(0)
    x = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64) * 2 - 1
    y = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64) * 2 - 1
    for layer in ("block1", "block2"):
        assert float(feature_loss(spec, layer, x, x)) == 0.0
        assert float(feature_loss(spec, layer, x, y)) == pytest.approx(float(feature_loss(spec, layer, y, x)), rel=1e-12)
        assert float(feature_loss(spec, layer, x, y)) > 0
    with pytest.raises(ValueError):
        feature_loss(spec, "block1", x, y[:, :, :16, :16])


def test_feature_loss_quadruples_when_differences_double():
    # block1 is conv + ReLU; scaling inputs by 2 (zero bias) scales activations by 2
    net = _small_attr_net()
    spec = FeatureExtractorSpec(net)
    g = torch.Generator().manual_seed(1)
    x = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64) * 2 - 1
    y = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64) * 2 - 1
    base = float(feature_loss(spec, "block1", x, y))
    assert float(feature_loss(spec, "block1", 2 * x, 2 * y)) == pytest.approx(4 * base, rel=1e-10)


def test_feature_loss_mean_oracle():
    net = _small_attr_net()
    spec = FeatureExtractorSpec(net)
    g = torch.Generator().manual_seed(2)
    x = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64)
    y = torch.rand(2, 3, 32, 32, generator=g, dtype=torch.float64)
    ax = net.blocks[0](x).detach().numpy()
    ay = net.blocks[0](y).detach().numpy()
    assert float(feature_loss(spec, "block1", x, y)) == pytest.approx(((ax - ay) ** 2).mean(), rel=1e-12)


def test_unknown_layer_rejected():
    net = _small_attr_net()
    with pytest.raises(ValueError):
        FeatureExtractorSpec(net, perceptual_layer="relu1_1")
    spec = FeatureExtractorSpec(net)
    x = torch.zeros(1, 3, 32, 32, dtype=torch.float64)
    with pytest.raises(ValueError):
        feature_loss(spec, "nope", x, x)


def test_feature_terms_share_one_pass():
    net = _small_attr_net()
    calls = []
    original = net.activations

    def counting(x, upto="attributes"):
        calls.append(upto)
        return original(x, upto)

    net.activations = counting
    spec = FeatureExtractorSpec(net)
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    out = feature_losses(spec, x, x * 0.5)
    assert set(out) == {"block1", "block2"}
    # one pass over the generated image and one over the target, each stopping at block2
    assert calls == ["block2", "block2"]


def test_total_examples():
    w = LossWeights()
    assert float(total_generator_loss({"L_1": torch.tensor(0.2, dtype=torch.float64)}, w)) == pytest.approx(2.0)
    zero = LossWeights(0, 0, 0, 0)
    terms = {"L_G": -0.693, "L_A": 1.0, "L_P": 2.0, "L_I": 2.0, "L_1": 0.1}
    assert total_generator_loss(terms, zero) == pytest.approx(-0.693)
    assert total_generator_loss(terms, w) == pytest.approx(7.307, abs=1e-12)


def test_total_loss_fd_gradient():
    torch.manual_seed(0)
    gen = build_generator(GeneratorConfig(base_image_size=32, encoder_channels=[4, 8, 8, 8, 8], sketch_dim=16), 0).double()
    gen.train()
    disc = build_discriminator(DiscriminatorConfig(block_channels=[4, 8, 8, 8, 8], strides=[2, 2, 1, 1, 1]), 1).double().eval()
    attr_net = _small_attr_net(2)
    spec = FeatureExtractorSpec(attr_net)
    g = torch.Generator().manual_seed(3)
    x = (torch.rand(2, 3, 32, 32, generator=g) * 2 - 1).double()
    y = (torch.rand(2, 3, 32, 32, generator=g) * 2 - 1).double()
    a = (torch.randint(0, 2, (2, 10), generator=g) * 2 - 1).double()
    w = LossWeights()

    def loss():
        fake = gen(x, a)
        fl = feature_losses(spec, fake, y)
        terms = {
            "L_G": adversarial_g_loss(disc, fake, a),
            "L_A": attribute_loss(attr_net, fake, y),
            "L_P": fl["block1"],
            "L_I": fl["block2"],
            "L_1": l1_loss(fake, y),
        }
        return total_generator_loss(terms, w)

    assert fd_check_parameters(gen, loss, count=10, seed=0) < 1e-3


def test_components_zero_on_identical_images():
    spec = FeatureExtractorSpec(_small_attr_net())
    y = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    fl = feature_losses(spec, y, y.clone())
    assert float(fl["block1"]) == 0 and float(fl["block2"]) == 0
    assert float(l1_loss(y, y.clone())) == 0
    assert float(attribute_loss(spec.network, y, y.clone())) == 0
