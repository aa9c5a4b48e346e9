"""Command-line entry point.

Exit codes: 0 success, 2 bad config or usage, 3 missing or unreadable
input, 4 non-finite loss. Failures print one JSON line to stderr:
``{"error": <category>, "message": ...}``.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import cv2
import numpy as np
import torch

from .attributes import AttrNetConfig, train_attribute_predictor
from .data import (
    ATTRIBUTE_NAMES,
    attribute_index,
    load_corpus,
    load_image,
    make_corpus,
    save_corpus,
    split_protocol,
    stack,
    write_png16,
)
from .errors import FormatError, NonFiniteLossError, PreconditionError
from .evaluation import (
    evaluate_protocol,
    manipulation_rates,
    run_ablation,
    write_protocol_report,
)
from .generator import generate
from .training import (
    Checkpoint,
    TrainConfig,
    desk_generator_config,
    load_attribute_net,
    save_attribute_net,
    train,
)

EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("usage", message, EXIT_CONFIG)


def _fail(category, message, code):
    print(json.dumps({"error": category, "message": str(message)}), file=sys.stderr)
    raise SystemExit(code)


# ---------------------------------------------------------------- config


def parse_override(text: str):
    """``a.b=value`` -> (["a", "b"], value); value is JSON if it parses, else a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def merge_config(base: dict, update: dict, prefix="") -> dict:
    """Recursive merge that refuses keys absent from ``base``."""
    out = copy.deepcopy(base)
    for k, v in update.items():
        name = f"{prefix}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = merge_config(out[k], v, name + ".")
        else:
            out[k] = v
    return out


def _nest(path, value):
    d = value
    for k in reversed(path):
        d = {k: d}
    return d


def resolve_config(defaults: dict, config_path=None, overrides=()) -> tuple[dict, set]:
    """Defaults, then the JSON file, then ``--set`` overrides. Also returns touched top-level keys."""
    resolved = copy.deepcopy(defaults)
    touched = set()
    if config_path is not None:
        try:
            user = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {config_path} is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        resolved = merge_config(resolved, user)
        touched |= set(user)
    for text in overrides:
        path, value = parse_override(text)
        resolved = merge_config(resolved, _nest(path, value))
        touched.add(path[0])
    return resolved, touched


def resolve_train_config(config_path=None, overrides=()) -> TrainConfig:
    defaults = TrainConfig().to_dict()
    d, touched = resolve_config(defaults, config_path, overrides)
    if "image_size" in touched and "generator" not in touched:
        d["generator"] = asdict(desk_generator_config(d["image_size"]))
    try:
        return TrainConfig.from_dict(d)
    except KeyError as e:
        raise ConfigError(f"unknown config key {e.args[0]!r}") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def resolve_attr_config(config_path=None, overrides=()) -> tuple[AttrNetConfig, int]:
    defaults = {**AttrNetConfig().to_dict(), "seed": 0}
    d, _ = resolve_config(defaults, config_path, overrides)
    seed = int(d.pop("seed"))
    try:
        return AttrNetConfig(**d), seed
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def write_resolved(out_dir, resolved: dict):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def parse_attrs(text: str | None) -> np.ndarray:
    """``"mustache=1,male=-1"`` -> 10-vector; unnamed attributes stay at -1."""
    attrs = -np.ones(len(ATTRIBUTE_NAMES), dtype=np.float32)
    if not text:
        return attrs
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise ConfigError(f"attribute {item!r} is not name=value")
        name, value = item.split("=", 1)
        try:
            j = attribute_index(name.strip())
            attrs[j] = float(value)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    if np.any(np.abs(attrs) > 1):
        raise ConfigError("attribute values must lie in [-1, 1]")
    return attrs


def _load_checkpoint(path) -> Checkpoint:
    if not Path(path).exists():
        raise FileNotFoundError(str(path))
    return Checkpoint.load(path)


def _load_attr(path):
    if not Path(path).exists():
        raise FileNotFoundError(str(path))
    return load_attribute_net(path)


# ---------------------------------------------------------------- commands


def cmd_make_dataset(args):
    corpus = make_corpus(args.subjects, args.per_subject, args.size, args.seed, args.jitter)
    out = save_corpus(corpus, args.out)
    write_resolved(
        out,
        {"subjects": args.subjects, "per_subject": args.per_subject, "size": args.size, "seed": args.seed, "jitter": args.jitter},
    )
    print(out)


def cmd_train_attr(args):
    cfg, seed = resolve_attr_config(args.config, args.set)
    corpus = load_corpus(args.corpus)
    if corpus.size != cfg.image_size:
        raise ConfigError(f"corpus size {corpus.size} != image_size {cfg.image_size}")
    model = train_attribute_predictor(
        stack(corpus.samples), stack(corpus.samples, "attributes"), cfg, seed, log=logging.getLogger("apgan.attr").info
    )
    out = Path(args.out)
    write_resolved(out, {**cfg.to_dict(), "seed": seed, "corpus": str(args.corpus)})
    save_attribute_net(model, out / "attribute_net.apgan")
    print(out / "attribute_net.apgan")


def _split(corpus, cfg: TrainConfig, repeats, index):
    splits = split_protocol(corpus.subject_ids, repeats, cfg.seed)
    if not 0 <= index < len(splits):
        raise ConfigError(f"split {index} outside [0, {len(splits)})")
    return splits, splits[index]


def cmd_train(args):
    cfg = resolve_train_config(args.config, args.set)
    corpus = load_corpus(args.corpus)
    attr_net = _load_attr(args.attr_net)
    _, (train_ids, test_ids) = _split(corpus, cfg, args.repeats, args.split)
    out = Path(args.out)
    write_resolved(out, cfg.to_dict())
    resume = _load_checkpoint(args.resume) if args.resume else None
    res = train(corpus, train_ids, cfg, attr_net, heldout_subjects=test_ids, out_dir=out, resume=resume)
    print(json.dumps({"checkpoint": str(out / "checkpoint.apgan"), "initial_heldout_L1": res.initial_heldout_l1,
                      "final_heldout_L1": res.metrics[-1]["heldout_L1"] if res.metrics else None}))


def _thermal_input(path, modality, size, s1=None, s2=None):
    p = Path(path)
    s0 = load_image(p, size)
    if s0.shape[0] != 1:
        s0 = s0.mean(axis=0, keepdims=True)
    if modality == "s0":
        return np.repeat(s0, 3, axis=0)
    if s1 is None or s2 is None:
        stem = p.name
        if not stem.endswith("_s0.png"):
            raise FileNotFoundError(f"polar checkpoint needs S1/S2 images for {p} (use --s1/--s2)")
        s1 = p.with_name(stem[: -len("_s0.png")] + "_s1.png")
        s2 = p.with_name(stem[: -len("_s0.png")] + "_s2.png")
    return np.concatenate([s0, load_image(s1, size)[:1], load_image(s2, size)[:1]])


def cmd_synthesize(args):
    ckpt = _load_checkpoint(args.checkpoint)
    cfg = ckpt.train_config()
    attrs = parse_attrs(args.attrs)
    raw = cv2.imread(str(args.input), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(str(args.input))
    side = min(raw.shape[:2])
    x = _thermal_input(args.input, cfg.modality, cfg.image_size, args.s1, args.s2)
    out = generate(ckpt.build_generator(), torch.as_tensor(x), torch.as_tensor(attrs)).numpy()
    if side != cfg.image_size:
        out = np.transpose(cv2.resize(np.transpose(out, (1, 2, 0)), (side, side), interpolation=cv2.INTER_CUBIC), (2, 0, 1))
    dest = Path(args.out)
    dest.parent.mkdir(parents=True, exist_ok=True)
    write_png16(dest, np.clip(out, -1, 1))
    write_resolved(
        dest.parent,
        {"checkpoint": str(args.checkpoint), "input": str(args.input), "attributes": dict(zip(ATTRIBUTE_NAMES, attrs.tolist()))},
    )
    print(dest)


def cmd_evaluate(args):
    corpus = load_corpus(args.corpus)
    attr_net = _load_attr(args.attr_net)
    ckpts = [_load_checkpoint(p) for p in args.checkpoints]
    splits = []
    for p, c in zip(args.checkpoints, ckpts):
        if c.train_subjects is None:
            raise PreconditionError(f"{p} records no training subjects")
        train_ids = list(c.train_subjects)
        splits.append((train_ids, [i for i in corpus.subject_ids if i not in set(train_ids)]))
    modality = ckpts[0].config["modality"]
    report = evaluate_protocol(ckpts, attr_net, corpus, splits, modality, args.use_gt_attributes)
    write_resolved(args.out, {"checkpoints": [str(p) for p in args.checkpoints], "corpus": str(args.corpus),
                              "attr_net": str(args.attr_net), "modality": modality, "use_gt_attributes": args.use_gt_attributes})
    write_protocol_report(report, args.out)
    print(json.dumps(report.summary))


def cmd_ablate(args):
    cfg = resolve_train_config(args.config, args.set)
    corpus = load_corpus(args.corpus)
    attr_net = _load_attr(args.attr_net)
    splits = split_protocol(corpus.subject_ids, args.repeats, cfg.seed)[: args.max_splits or None]
    write_resolved(args.out, {**cfg.to_dict(), "repeats": args.repeats, "max_splits": args.max_splits})
    results = run_ablation(corpus, splits, cfg, attr_net, out_dir=args.out)
    for r in results:
        s = r["report"].summary["synthesized"]
        print(f"{r['label']}\tAUC {s['auc']['mean']:.4f}\tEER {s['eer']['mean']:.4f}")


def cmd_manipulate(args):
    ckpt = _load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    attr_net = _load_attr(args.attr_net)
    try:
        index = attribute_index(args.attr)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    train_ids = set(ckpt.train_subjects or [])
    samples = [s for s in corpus.samples if s.subject_id not in train_ids]
    res = manipulation_rates(ckpt.build_generator(), attr_net, samples, ckpt.config["modality"], index, args.value)
    out = Path(args.out)
    write_resolved(out, {"checkpoint": str(args.checkpoint), "corpus": str(args.corpus), "attr": ATTRIBUTE_NAMES[index], "value": args.value})
    for k in range(min(args.max_images, res.images)):
        write_png16(out / f"{k:03d}_before.png", res.before[k].numpy())
        write_png16(out / f"{k:03d}_after.png", res.after[k].numpy())
    summary = res.to_dict()
    (out / "manipulation.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="apgan", description="Attribute-preserving thermal-to-visible synthesis toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def configurable(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-key override, repeatable")

    sp = sub.add_parser("make-dataset", help="render a synthetic paired corpus")
    sp.add_argument("--subjects", type=int, required=True)
    sp.add_argument("--per-subject", type=int, required=True)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--jitter", type=float, default=1.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_make_dataset)

    sp = sub.add_parser("train-attr", help="train the attribute predictor")
    configurable(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_attr)

    sp = sub.add_parser("train", help="train the generator and discriminator on one split")
    configurable(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--attr-net", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", type=int, default=0)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--resume")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("synthesize", help="synthesize a visible image from thermal input")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True, help="S0 image; S1/S2 siblings are found by name for polar models")
    sp.add_argument("--s1")
    sp.add_argument("--s2")
    sp.add_argument("--attrs", default="", help='e.g. "mustache=1,male=1"; unnamed attributes are -1')
    sp.add_argument("--out", required=True, help="output PNG path")
    sp.set_defaults(func=cmd_synthesize)

    sp = sub.add_parser("evaluate", help="verification ROC for trained checkpoints")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--attr-net", required=True)
    sp.add_argument("--checkpoints", nargs="+", required=True)
    sp.add_argument("--use-gt-attributes", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate", help="train and compare the four loss settings")
    configurable(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--attr-net", required=True)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--max-splits", type=int, default=0, help="evaluate only the first N splits (0 = all)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("manipulate", help="flip one attribute on held-out images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--attr-net", required=True)
    sp.add_argument("--attr", required=True)
    sp.add_argument("--value", type=float, required=True)
    sp.add_argument("--max-images", type=int, default=16)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_manipulate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (FileNotFoundError, PreconditionError, FormatError) as e:
        _fail("input", e, EXIT_INPUT)
    except NonFiniteLossError as e:
        _fail("numeric", e, EXIT_NUMERIC)
    except ValueError as e:
        _fail("config", e, EXIT_CONFIG)
    return 0


if __name__ == "__main__":
    sys.exit(main())
