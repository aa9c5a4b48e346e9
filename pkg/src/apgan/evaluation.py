"""Cross-modal verification: ROC / AUC / EER, protocol runs, ablation, manipulation."""

from __future__ import annotations

import csv
import json
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .attributes import AttributeNet, attribute_feature, predict_attributes
from .data import ATTRIBUTE_NAMES, Corpus, stack
from .errors import PreconditionError
from .generator import generate
from .training import TrainConfig, train


def match_score(feat_a, feat_b) -> float:
    a = np.asarray(feat_a, dtype=np.float64).ravel()
    b = np.asarray(feat_b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"feature dimensions differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cannot score a zero-norm feature vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(probe, gallery) -> np.ndarray:
    p = np.asarray(probe, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    pn = np.linalg.norm(p, axis=1, keepdims=True)
    gn = np.linalg.norm(g, axis=1, keepdims=True)
    if (pn == 0).any() or (gn == 0).any():
        raise ValueError("cannot score a zero-norm feature vector")
    return np.clip((p / pn) @ (g / gn).T, -1.0, 1.0)


@dataclass
class RocReport:
    genuine_scores: list
    impostor_scores: list
    roc_points: list  # (FAR, TAR), from the strictest threshold to the loosest
    thresholds: list
    auc: float
    eer: float
    split_id: int | None = None

    def to_dict(self, include_scores=False):
        d = {
            "split_id": self.split_id,
            "auc": self.auc,
            "eer": self.eer,
            "num_genuine": len(self.genuine_scores),
            "num_impostor": len(self.impostor_scores),
        }
        if include_scores:
            d["genuine_scores"] = list(self.genuine_scores)
            d["impostor_scores"] = list(self.impostor_scores)
            d["roc_points"] = [list(p) for p in self.roc_points]
        return d


def _interpolated_eer(far, frr):
    """EER where FAR = FRR, linearly interpolated along the operating points."""
    diff = far - frr  # non-decreasing as the threshold loosens
    k = int(np.argmax(diff >= 0))
    if diff[k] == 0 or k == 0:
        return float(far[k])
    alpha = -diff[k - 1] / (diff[k] - diff[k - 1])
    return float(far[k - 1] + alpha * (far[k] - far[k - 1]))


def compute_roc(genuine, impostor, split_id=None) -> RocReport:
    g = np.asarray(genuine, dtype=np.float64).ravel()
    im = np.asarray(impostor, dtype=np.float64).ravel()
    if g.size == 0 or im.size == 0:
        raise ValueError("genuine and impostor score lists must be non-empty")
    thresholds = np.unique(np.concatenate([g, im]))[::-1]
    gs, ims = np.sort(g), np.sort(im)
    # counts of scores >= t
    tar = np.concatenate([[0], g.size - np.searchsorted(gs, thresholds, side="left")]) / g.size
    far = np.concatenate([[0], im.size - np.searchsorted(ims, thresholds, side="left")]) / im.size
    ranks = rankdata(np.concatenate([g, im]))
    auc = (ranks[: g.size].sum() - g.size * (g.size + 1) / 2) / (g.size * im.size)
    eer = _interpolated_eer(far, 1 - tar)
    return RocReport(
        genuine_scores=g.tolist(),
        impostor_scores=im.tolist(),
        roc_points=list(zip(far.tolist(), tar.tolist())),
        thresholds=[float("inf")] + thresholds.tolist(),
        auc=float(auc),
        eer=eer,
        split_id=split_id,
    )


def trapezoid_auc(roc_points) -> float:
    pts = np.asarray(roc_points, dtype=np.float64)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2))


# ---------------------------------------------------------------- protocol


def _batched(fn, arr, batch=64):
    return torch.cat([fn(torch.as_tensor(arr[i : i + batch])) for i in range(0, len(arr), batch)])


def verification_scores(probe_features, gallery_features, probe_ids, gallery_ids):
    """Genuine = same-subject (probe, gallery) pairs, impostor = all cross-subject pairs."""
    s = cosine_matrix(probe_features, gallery_features)
    same = np.asarray(probe_ids)[:, None] == np.asarray(gallery_ids)[None, :]
    return s[same], s[~same]


def evaluate_split(synthesize, feature_fn, samples, modality, attr_fn, split_id=None) -> dict:
    """ROC reports for synthesized-vs-visible and raw thermal-vs-visible matching.

    ``synthesize(thermal, attrs)`` maps a thermal batch to visible images;
    ``attr_fn(visible, labels)`` supplies the attributes fed to it.
    """
    thermal = stack(samples, "thermal", modality)
    visible = stack(samples, "visible")
    labels = stack(samples, "attributes")
    ids = np.array([s.subject_id for s in samples])
    attrs = attr_fn(torch.as_tensor(visible), torch.as_tensor(labels))
    synth = torch.cat(
        [synthesize(torch.as_tensor(thermal[i : i + 64]), attrs[i : i + 64]) for i in range(0, len(thermal), 64)]
    )
    f_gallery = _batched(feature_fn, visible).numpy()
    f_synth = feature_fn(synth).numpy()
    f_raw = _batched(feature_fn, thermal).numpy()
    out = {}
    for name, probe in (("synthesized", f_synth), ("raw", f_raw)):
        gen, imp = verification_scores(probe, f_gallery, ids, ids)
        out[name] = compute_roc(gen, imp, split_id)
    return out


def _summary(values):
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0}


@dataclass
class ProtocolReport:
    modality: str
    splits: list  # per split: {"synthesized": RocReport, "raw": RocReport}
    summary: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "modality": self.modality,
            "summary": self.summary,
            "splits": [{k: r.to_dict() for k, r in s.items()} for s in self.splits],
        }


def _summarize(splits):
    summary = {}
    for method in splits[0]:
        summary[method] = {
            "auc": _summary([s[method].auc for s in splits]),
            "eer": _summary([s[method].eer for s in splits]),
        }
    return summary


def checkpoint_synthesizer(generator):
    def synthesize(thermal, attrs):
        return generate(generator, thermal.float(), attrs.float()).float()

    return synthesize


def attribute_source(attr_net: AttributeNet, use_gt=False):
    def attr_fn(visible, labels):
        if use_gt:
            return labels.float()
        return _batched(lambda v: predict_attributes(attr_net, v.float()), visible).float()

    return attr_fn


def evaluate_protocol(checkpoints, attr_net: AttributeNet, corpus: Corpus, splits, modality: str, use_gt_attributes=False) -> ProtocolReport:
    """Evaluate one trained checkpoint per split on that split's test subjects."""
    if len(checkpoints) != len(splits):
        raise PreconditionError(f"{len(checkpoints)} checkpoints for {len(splits)} splits")
    feature_fn = lambda v: attribute_feature(attr_net, v.float())  # noqa: E731
    attr_fn = attribute_source(attr_net, use_gt_attributes)
    per_split = []
    for i, (ckpt, (train_ids, test_ids)) in enumerate(zip(checkpoints, splits)):
        if ckpt.train_subjects is not None and sorted(ckpt.train_subjects) != sorted(train_ids):
            raise PreconditionError(f"checkpoint {i} was trained on a different subject split")
        if ckpt.config.get("modality") != modality:
            raise PreconditionError(f"checkpoint {i} was trained on modality {ckpt.config.get('modality')!r}")
        synth = checkpoint_synthesizer(ckpt.build_generator())
        per_split.append(evaluate_split(synth, feature_fn, corpus.select(test_ids), modality, attr_fn, split_id=i))
    return ProtocolReport(modality, per_split, _summarize(per_split))


ABLATION_SETTINGS = (
    ("(1) L1", dict(adversarial=False, lambda_P=0.0, lambda_I=0.0, lambda_A=0.0)),
    ("(2) L1+LG", dict(adversarial=True, lambda_P=0.0, lambda_I=0.0, lambda_A=0.0)),
    ("(3) L1+LG+LP+LI", dict(adversarial=True, lambda_A=0.0)),
    ("(4) AP-GAN", dict(adversarial=True)),
)


def ablation_configs(base_cfg: TrainConfig):
    rows = []
    for label, flags in ABLATION_SETTINGS:
        flags = dict(flags)
        adversarial = flags.pop("adversarial")
        weights = replace(base_cfg.weights, **flags)
        rows.append((label, replace(base_cfg, adversarial=adversarial, weights=weights)))
    return rows


def run_ablation(corpus: Corpus, splits, base_cfg: TrainConfig, attr_net: AttributeNet, out_dir=None) -> list:
    """Train and evaluate the four loss settings on identical splits and seeds."""
    results = []
    for label, cfg in ablation_configs(base_cfg):
        ckpts = []
        for k, (train_ids, test_ids) in enumerate(splits):
            sub = None if out_dir is None else Path(out_dir) / _slug(label) / f"split{k}"
            ckpts.append(train(corpus, train_ids, cfg, attr_net, heldout_subjects=test_ids, out_dir=sub).checkpoint)
        report = evaluate_protocol(ckpts, attr_net, corpus, splits, cfg.modality)
        results.append({"label": label, "config": cfg.to_dict(), "report": report})
    full = results[-1]["report"].summary["synthesized"]["auc"]["mean"]
    l1 = results[0]["report"].summary["synthesized"]["auc"]["mean"]
    if full < l1:
        warnings.warn(f"full-loss AUC {full:.4f} below L1-only AUC {l1:.4f}", RuntimeWarning, stacklevel=2)
    if out_dir is not None:
        write_ablation_table(results, Path(out_dir))
    return results


def _slug(label):
    # "(3) L1+LG+LP+LI" -> "3_l1_lg_lp_li"
    return "_".join(re.findall(r"[a-z0-9]+", label.lower()))


def manipulate_attribute(generator, thermal, attrs, index: int, new_value: float):
    """Synthesize with the given attributes and again with ``attrs[index] = new_value``."""
    if not 0 <= index < len(ATTRIBUTE_NAMES):
        raise ValueError(f"attribute index {index} out of range")
    if not -1 <= new_value <= 1:
        raise ValueError("new_value must lie in [-1, 1]")
    attrs = torch.as_tensor(attrs, dtype=torch.float32)
    changed = attrs.clone()
    changed[..., index] = new_value
    thermal = torch.as_tensor(thermal, dtype=torch.float32)
    return generate(generator, thermal, attrs), generate(generator, thermal, changed)


@dataclass
class ManipulationResult:
    attribute: str
    value: float
    images: int
    direction_rate: float  # predictor output moved toward the new value
    sign_flip_rate: float  # predictor output ended on the new value's side of 0
    before: torch.Tensor
    after: torch.Tensor

    def to_dict(self):
        return {k: getattr(self, k) for k in ("attribute", "value", "images", "direction_rate", "sign_flip_rate")}


def manipulation_rates(generator, attr_net: AttributeNet, samples, modality: str, index: int, new_value: float) -> ManipulationResult:
    """Set one attribute on every sample whose predicted value has the opposite sign.

    Both syntheses are scored by the attribute predictor; the rates are
    fractions of the selected samples.
    """
    if new_value == 0:
        raise ValueError("new_value must be non-zero to define a direction")
    thermal = torch.as_tensor(stack(samples, "thermal", modality))
    attrs = _batched(lambda v: predict_attributes(attr_net, v), stack(samples, "visible"))
    keep = attrs[:, index] * new_value < 0
    if not bool(keep.any()):
        raise PreconditionError(f"no sample has {ATTRIBUTE_NAMES[index]} opposite in sign to {new_value}")
    base, changed = manipulate_attribute(generator, thermal[keep], attrs[keep], index, new_value)
    p_before = predict_attributes(attr_net, base)[:, index]
    p_after = predict_attributes(attr_net, changed)[:, index]
    sign = float(np.sign(new_value))
    return ManipulationResult(
        attribute=ATTRIBUTE_NAMES[index],
        value=float(new_value),
        images=int(keep.sum()),
        direction_rate=float(((p_after - p_before) * sign > 0).float().mean()),
        sign_flip_rate=float((p_after * sign > 0).float().mean()),
        before=base,
        after=changed,
    )


# ---------------------------------------------------------------- outputs


def write_roc_csv(report: RocReport, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["threshold", "far", "tar"])
        for t, (far, tar) in zip(report.thresholds, report.roc_points):
            w.writerow([repr(t), repr(far), repr(tar)])


def plot_rocs(curves: dict, path, title=None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for label, rep in curves.items():
        pts = np.asarray(rep.roc_points)
        ax.plot(pts[:, 0], pts[:, 1], label=f"{label} (AUC {rep.auc:.3f}, EER {rep.eer:.3f})")
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
    ax.set_xlabel("false accept rate")
    ax.set_ylabel("true accept rate")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_protocol_report(report: ProtocolReport, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["split", "method", "auc", "eer"])
        for i, s in enumerate(report.splits):
            for method, rep in s.items():
                w.writerow([i, method, repr(rep.auc), repr(rep.eer)])
    for i, s in enumerate(report.splits):
        for method, rep in s.items():
            write_roc_csv(rep, out / f"roc_split{i}_{method}.csv")
        plot_rocs(s, out / f"roc_split{i}.png", title=f"{report.modality} split {i}")
    return out


def write_ablation_table(results, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["setting", "auc_mean", "auc_std", "eer_mean", "eer_std"])
        for r in results:
            s = r["report"].summary["synthesized"]
            w.writerow([r["label"], repr(s["auc"]["mean"]), repr(s["auc"]["std"]), repr(s["eer"]["mean"]), repr(s["eer"]["std"])])
    (out / "ablation.json").write_text(
        json.dumps([{"label": r["label"], "report": r["report"].to_dict()} for r in results], indent=2)
    )
    curves = {r["label"]: r["report"].splits[0]["synthesized"] for r in results}
    for r in results:
        write_roc_csv(r["report"].splits[0]["synthesized"], out / f"roc_{_slug(r['label'])}.csv")
    plot_rocs(curves, out / "ablation_roc.png", title="ablation")
    return out
