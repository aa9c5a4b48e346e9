"""Acceptance criteria, one test per criterion (6 is split into a/b/c).

Each test prints a PASS/FAIL line; the run summary repeats them in order.
"""

import csv
import math
import time
import warnings
from fractions import Fraction

import numpy as np
import pytest
import torch

from apgan import cli
from apgan.data import ATTR_INDEX, make_corpus, split_protocol
from apgan.attributes import AttrNetConfig, build_attribute_net
from apgan.discriminator import (
    DiscriminatorConfig,
    build_discriminator,
    discriminator_loss,
    score,
    triplet_loss_from_scores,
)
from apgan.evaluation import ABLATION_SETTINGS, compute_roc, evaluate_protocol, manipulation_rates, run_ablation
from apgan.generator import GeneratorConfig, build_generator, generate
from apgan.losses import (
    FeatureExtractorSpec,
    LossWeights,
    adversarial_g_loss,
    adversarial_g_loss_from_scores,
    attribute_loss,
    feature_losses,
    l1_loss,
    total_generator_loss,
)
from apgan.mcb import circular_convolve_direct, count_sketch, make_sketch_plan, mcb_backward, mcb_pool
from apgan.training import Checkpoint, TrainConfig, train

from .conftest import record_criterion
from .helpers import fd_check_parameters
from .test_evaluation import brute_auc, brute_eer

DESK_CORPUS = dict(num_subjects=20, per_subject=16, size=32, seed=5)


# ---------------------------------------------------------------- 1


def test_criterion_1_mcb_unbiased_and_fft_exact():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    x = rng.normal(size=64)
    y = x + 0.7 * rng.normal(size=64)
    x /= np.linalg.norm(x)
    y /= np.linalg.norm(y)
    est = np.mean([count_sketch(x, p) @ count_sketch(y, p) for p in (make_sketch_plan(64, 256, s) for s in range(200))])
    rel = abs(est - x @ y) / abs(x @ y)
    worst = 0.0
    for case in range(200):
        r = np.random.default_rng(case)
        D = int(r.integers(1, 65))
        d = int(r.integers(1, 20))
        pa, pb = make_sketch_plan(d, D, 2 * case), make_sketch_plan(d, D, 2 * case + 1)
        a, b = r.normal(size=d), r.normal(size=d)
        direct = circular_convolve_direct(count_sketch(a, pa), count_sketch(b, pb))
        worst = max(worst, np.abs(mcb_pool(a, b, pa, pb) - direct).max() / max(np.abs(direct).max(), 1.0))
    elapsed = time.perf_counter() - t0
    ok = rel <= 0.10 and worst <= 1e-9 and elapsed < 10
    record_criterion("1", ok, f"mean sketch inner product off by {rel:.3%} (<=10%), FFT vs direct {worst:.1e} (<=1e-9), {elapsed:.1f}s (<10s)")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    errors = {}

    # mcb_pool: analytic backward vs central differences on every coordinate
    rng = np.random.default_rng(0)
    pa, pb = make_sketch_plan(12, 32, 0), make_sketch_plan(10, 32, 1)
    a, b, g = rng.normal(size=12), rng.normal(size=10), rng.normal(size=32)
    ga, gb = mcb_backward(g, a, b, pa, pb)
    h = 1e-6
    num_a = np.array([(g @ mcb_pool(a + h * e, b, pa, pb) - g @ mcb_pool(a - h * e, b, pa, pb)) / (2 * h) for e in np.eye(12)])
    num_b = np.array([(g @ mcb_pool(a, b + h * e, pa, pb) - g @ mcb_pool(a, b - h * e, pa, pb)) / (2 * h) for e in np.eye(10)])
    analytic, numeric = np.concatenate([ga, gb]), np.concatenate([num_a, num_b])
    errors["mcb_pool"] = float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(analytic), np.abs(numeric))))

    gcfg = GeneratorConfig(base_image_size=32, encoder_channels=[4, 8, 8, 8, 8], sketch_dim=16)
    gen = build_generator(gcfg, 0).double().train()
    dcfg = DiscriminatorConfig(block_channels=[4, 8, 8, 8, 8], strides=[2, 2, 1, 1, 1])
    disc = build_discriminator(dcfg, 1).double().train()
    attr_net = build_attribute_net(AttrNetConfig(channels=[4, 8, 8, 8], embed_dim=16), 2).double().requires_grad_(False)
    gen_t = torch.Generator().manual_seed(3)
    x = (torch.rand(2, 3, 32, 32, generator=gen_t) * 2 - 1).double()
    y = (torch.rand(2, 3, 32, 32, generator=gen_t) * 2 - 1).double()
    at = (torch.randint(0, 2, (2, 10), generator=gen_t) * 2 - 1).double()

    errors["generator"] = fd_check_parameters(gen, lambda: (gen(x, at) - y).abs().mean(), count=10)

    fake = torch.tanh(x + 0.3)
    errors["discriminator"] = fd_check_parameters(disc, lambda: discriminator_loss(disc, y, fake, at, -at), count=10)

    disc.eval()
    spec = FeatureExtractorSpec(attr_net)

    def total():
        out = gen(x, at)
        fl = feature_losses(spec, out, y)
        terms = {"L_G": adversarial_g_loss(disc, out, at), "L_A": attribute_loss(attr_net, out, y),
                 "L_P": fl["block1"], "L_I": fl["block2"], "L_1": l1_loss(out, y)}
        return total_generator_loss(terms, LossWeights())

    errors["total loss"] = fd_check_parameters(gen, total, count=10)
    elapsed = time.perf_counter() - t0
    ok = all(e < 1e-3 for e in errors.values()) and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    record_criterion("2", ok, f"worst relative FD error: {detail} (<1e-3), {elapsed:.1f}s (<120s)")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_3_analytic_constants():
    half = torch.full((2, 1, 5, 5), 0.5, dtype=torch.float64)
    l_d = float(triplet_loss_from_scores(half, half, half, half, half))
    l_g = float(adversarial_g_loss_from_scores(half, half))
    net = build_attribute_net(AttrNetConfig(channels=[4, 8, 8, 8], embed_dim=16), 0).double().requires_grad_(False)
    img = torch.rand(3, 3, 32, 32, dtype=torch.float64) * 2 - 1
    same = img.clone()
    fl = feature_losses(FeatureExtractorSpec(net), img, same)
    zeros = [float(l1_loss(img, same)), float(fl["block1"]), float(fl["block2"]), float(attribute_loss(net, img, same))]
    ok = abs(l_d - 2 * math.log(2)) <= 1e-6 and abs(l_g - math.log(0.5)) <= 1e-6 and all(z == 0.0 for z in zeros)
    record_criterion("3", ok, f"L_D={l_d:.9f} (2 ln 2), L_G={l_g:.9f} (ln 0.5), L1/LP/LI/LA on identical pairs = {zeros}")
    assert ok


# ---------------------------------------------------------------- 4


def test_criterion_4_metric_oracle():
    rng = np.random.default_rng(44)
    mismatches = 0
    for _ in range(1000):
        n_g, n_i = rng.integers(1, 21, size=2)
        levels = int(rng.integers(2, 12))  # coarse grids force ties
        gen = (rng.integers(0, levels, size=n_g) / levels).tolist()
        imp = (rng.integers(0, levels, size=n_i) / levels).tolist()
        r = compute_roc(gen, imp)
        if Fraction(r.auc).limit_denominator(10_000) != brute_auc(gen, imp):
            mismatches += 1
        elif abs(r.eer - float(brute_eer(gen, imp))) > 1e-12:
            mismatches += 1
    example = compute_roc([0.9, 0.8, 0.4], [0.7, 0.3, 0.2]).auc
    ok = mismatches == 0 and abs(example - 8 / 9) < 1e-12
    record_criterion("4", ok, f"{mismatches}/1000 mismatches against brute-force AUC/EER; example AUC {example:.6f} (8/9)")
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_5_shapes():
    gen = build_generator(GeneratorConfig(), 0).eval()
    x = torch.rand(1, 3, 256, 256) * 2 - 1
    a = -torch.ones(1, 10)
    bottleneck = tuple(gen.encode(x)[-1].shape[1:])
    out = tuple(generate(gen, x, a).shape[1:])
    dcfg = DiscriminatorConfig()
    disc = build_discriminator(dcfg, 0).eval()
    patch = tuple(score(disc, x, a).shape[1:])
    patch_u = tuple(score(disc, x).shape[1:])
    ok = out == (3, 256, 256) and bottleneck == (512, 1, 1) and patch == patch_u == (30, 30) and dcfg.strides == [2, 2, 2, 1, 1]
    record_criterion("5", ok, f"generator {out}, bottleneck {bottleneck}, patch map {patch} (strides {dcfg.strides})")
    assert ok


# ---------------------------------------------------------------- 6


@pytest.fixture(scope="module")
def desk_run(attr_net):
    corpus = make_corpus(**DESK_CORPUS)
    splits = split_protocol(corpus.subject_ids, 1, 0)
    train_ids, test_ids = splits[0]
    cfg = TrainConfig()
    t0 = time.perf_counter()
    res = train(corpus, train_ids, cfg, attr_net, heldout_subjects=test_ids)
    elapsed = time.perf_counter() - t0
    return dict(corpus=corpus, splits=splits, cfg=cfg, res=res, elapsed=elapsed)


@pytest.mark.slow
def test_criterion_6a_heldout_l1_halves(desk_run):
    res, cfg = desk_run["res"], desk_run["cfg"]
    initial, final = res.initial_heldout_l1, res.metrics[-1]["heldout_L1"]
    drop = 1 - final / initial
    ok = drop >= 0.5 and cfg.epochs <= 40 and desk_run["elapsed"] <= 15 * 60
    record_criterion("6a", ok, f"held-out L1 {initial:.4f} -> {final:.4f} ({drop:.1%} drop, >=50%) "
                               f"in {cfg.epochs} epochs, {desk_run['elapsed'] / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_6b_synthesis_beats_raw(desk_run, attr_net):
    report = evaluate_protocol([desk_run["res"].checkpoint], attr_net, desk_run["corpus"], desk_run["splits"], "polar")
    synth = report.summary["synthesized"]["auc"]["mean"]
    raw = report.summary["raw"]["auc"]["mean"]
    ok = synth - raw >= 0.05
    record_criterion("6b", ok, f"AUC synthesized {synth:.4f} vs raw {raw:.4f} (margin {synth - raw:+.4f}, >=0.05)")
    assert ok


@pytest.mark.slow
def test_criterion_6c_manipulation(desk_run, attr_net):
    gen = desk_run["res"].generator
    test_ids = desk_run["splits"][0][1]
    samples = desk_run["corpus"].select(test_ids)
    results = [
        manipulation_rates(gen, attr_net, samples, "polar", ATTR_INDEX[name], value)
        for name, value in (("Mouth_Slightly_Open", 1.0), ("Mustache", -1.0))
    ]
    ok = all(r.direction_rate >= 0.7 for r in results)
    detail = "; ".join(
        f"{r.attribute} -> {r.value:+.0f}: direction {r.direction_rate:.2f} (>=0.70), sign flip {r.sign_flip_rate:.2f}, n={r.images}"
        for r in results
    )
    record_criterion("6c", ok, detail)
    assert ok


# ---------------------------------------------------------------- 7


@pytest.mark.slow
def test_criterion_7_ablation(attr_net, tmp_path):
    corpus = make_corpus(**DESK_CORPUS)
    splits = split_protocol(corpus.subject_ids, 1, 0)
    base = TrainConfig(epochs=4, decay_start_epoch=2)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        results = run_ablation(corpus, splits, base, attr_net, out_dir=tmp_path)
    labels = [r["label"] for r in results]
    configs = [TrainConfig.from_dict(r["config"]) for r in results]
    same_seed = len({c.seed for c in configs}) == 1
    with open(tmp_path / "ablation.csv") as f:
        rows = list(csv.DictReader(f))
    aucs = [r["report"].summary["synthesized"]["auc"]["mean"] for r in results]
    soft = aucs[-1] >= aucs[0]
    ok = (
        labels == [label for label, _ in ABLATION_SETTINGS]
        and same_seed
        and len(rows) == 4
        and all((tmp_path / f).exists() for f in ("ablation.json", "ablation_roc.png"))
        and all(len(r["report"].splits) == len(splits) for r in results)
    )
    table = ", ".join(f"{label.split()[0]} AUC {auc:.3f}" for label, auc in zip(labels, aucs))
    record_criterion("7", ok, f"4 settings on identical split/seed: {table}; "
                              f"soft check full >= L1-only {'holds' if soft else 'does not hold (warning)'} "
                              f"[{len(caught)} warning(s)]")
    assert ok


# ---------------------------------------------------------------- 8


def _cli_pipeline(root):
    tiny = ["epochs=3", "decay_start_epoch=1", "batch_size=4", "generator.encoder_channels=[8,8,8,8,8]",
            "generator.sketch_dim=16", "discriminator.block_channels=[8,8,8,8,8]"]
    sets = [x for item in tiny for x in ("--set", item)]
    steps = [
        ["make-dataset", "--subjects", "4", "--per-subject", "3", "--seed", "11", "--out", root / "corpus"],
        ["train-attr", "--corpus", root / "corpus", "--out", root / "attr",
         "--set", "epochs=3", "--set", "channels=[4,8,8,8]", "--set", "embed_dim=16"],
        ["train", "--corpus", root / "corpus", "--attr-net", root / "attr" / "attribute_net.apgan", "--out", root / "run",
         "--repeats", "1", *sets],
        ["evaluate", "--corpus", root / "corpus", "--attr-net", root / "attr" / "attribute_net.apgan",
         "--checkpoints", root / "run" / "checkpoint.apgan", "--out", root / "eval"],
    ]
    for argv in steps:
        assert cli.main([str(a) for a in argv]) == 0
    return sets


def test_criterion_8_reproducibility(tmp_path, capsys):
    sets = _cli_pipeline(tmp_path / "a")
    _cli_pipeline(tmp_path / "b")
    same_metrics = (tmp_path / "a/run/metrics.csv").read_bytes() == (tmp_path / "b/run/metrics.csv").read_bytes()
    same_report = (tmp_path / "a/eval/report.csv").read_bytes() == (tmp_path / "b/eval/report.csv").read_bytes()

    ckpt_path = tmp_path / "a/run/checkpoint.apgan"
    resaved = Checkpoint.load(ckpt_path).save(tmp_path / "resaved.apgan")
    roundtrip = resaved == ckpt_path.read_bytes()

    base = ["train", "--corpus", tmp_path / "a/corpus", "--attr-net", tmp_path / "a/attr/attribute_net.apgan", "--repeats", "1"]
    assert cli.main([str(a) for a in base + ["--out", tmp_path / "half", *sets, "--set", "checkpoint_every=1"]]) == 0
    assert cli.main([str(a) for a in base + ["--out", tmp_path / "resumed", *sets,
                                             "--resume", tmp_path / "half/checkpoint_epoch0.apgan"]]) == 0
    resumed = (tmp_path / "resumed/metrics.csv").read_bytes() == (tmp_path / "a/run/metrics.csv").read_bytes()
    capsys.readouterr()

    ok = same_metrics and same_report and roundtrip and resumed
    record_criterion("8", ok, f"identical metric CSVs {same_metrics}, identical ROC report {same_report}, "
                              f"checkpoint byte round-trip {roundtrip}, resume from epoch 0 matches {resumed}")
    assert ok
