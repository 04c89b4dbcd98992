"""Command line entry points: gen-data, describe, train, eval, infer, export-features."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from .config import Config, load_config
from .errors import PromptadError
from .evaluate import run_eval
from .heatmap import save_heatmap
from .pipeline import AnomalyDetector, load_bundle
from .synth import generate_dataset, load_dataset, save_dataset
from .train import train
from .vision import save_feature_pyramid
from .vocabulary import VocabularyCache, client_from_env, fetch_anomaly_vocabulary

log = logging.getLogger(__name__)


def _load_cfg(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.training.seed = args.seed
    return cfg


def _apply_eval_flags(cfg: Config, args) -> dict:
    """Mutate cfg per ablation flags; returns the flag record for the report."""
    flags = {}
    if getattr(args, "no_filtering", False):
        cfg.prompts.filtering = False
        flags["no_filtering"] = True
    if getattr(args, "no_grounding", False):
        cfg.grounding.enabled = False
        flags["no_grounding"] = True
    if getattr(args, "no_position", False):
        cfg.grounding.position_enhancement = False
        flags["no_position"] = True
    if getattr(args, "no_class_name", False):
        cfg.prompts.include_class_name = False
        flags["no_class_name"] = True
    if getattr(args, "template_mode", None):
        cfg.prompts.template_mode = args.template_mode
        flags["template_mode"] = args.template_mode
    if getattr(args, "suppression_lambda", None) is not None:
        cfg.grounding.suppression_lambda = args.suppression_lambda
        flags["lambda"] = args.suppression_lambda
    if getattr(args, "sigma", None) is not None:
        cfg.fusion.sigma = args.sigma
        flags["sigma"] = args.sigma
    if getattr(args, "kernels", None):
        cfg.interaction.kernels = tuple(args.kernels.split(","))
        flags["kernels"] = args.kernels
    return flags


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    records = generate_dataset(cfg.dataset, seed=cfg.seed)
    out = Path(args.output or "dataset")
    save_dataset(records, out)
    print(f"wrote {len(records)} samples to {out}")
    return 0


def cmd_describe(args) -> int:
    cache = VocabularyCache(args.cache_dir) if args.cache_dir else None
    vocab = fetch_anomaly_vocabulary(args.class_name, client_from_env(), cache)
    print(json.dumps({"class_name": vocab.class_name, "source": vocab.source,
                      "anomaly_types": list(vocab.anomaly_types)}, indent=1))
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    records = load_dataset(args.dataset)
    out = Path(args.output or "bundle")
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    detector, _ = train(records, cfg, log_path=out / "metrics.jsonl")
    detector.save_bundle(out)
    print(f"trained in {time.monotonic() - t0:.1f}s; bundle at {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args) if args.config or not args.bundle \
        else load_config(Path(args.bundle) / "config.yaml")
    if args.seed is not None:
        cfg.seed = args.seed
    flags = _apply_eval_flags(cfg, args)
    if args.bundle:
        detector = load_bundle(args.bundle, overrides=cfg)
    else:
        detector = AnomalyDetector(cfg)  # untrained baseline
        flags["untrained"] = True
    records = load_dataset(args.dataset)
    heatmap_dir = Path(args.output) / "heatmaps" if args.output and args.heatmaps else None
    report = run_eval(detector, records, shots=args.shots, reserve=args.reserve,
                      heatmap_dir=heatmap_dir, flags=flags)
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        report.write(out / "report.jsonl")
    print("\n".join(report.to_lines()))
    return 0


def cmd_infer(args) -> int:
    detector = load_bundle(args.bundle)
    image = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
    result = detector.score_image(image, args.class_name)
    ranked = detector.explain_image(image, args.class_name)
    print(f"score: {float(result.score):.4f}  "
          f"p(abnormal): {float(result.prob_pair[1]):.4f}")
    for anomaly, position, sim in ranked[:3]:
        where = f" at {position}" if position else ""
        print(f"  candidate: {anomaly}{where} (similarity {sim:.4f})")
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        path = out / (Path(args.image).stem + "_heatmap.png")
        save_heatmap(result.map_final, path, image=image)
        print(f"heatmap: {path}")
    return 0


def cmd_export_features(args) -> int:
    cfg = _load_cfg(args)
    detector = AnomalyDetector(cfg)
    records = load_dataset(args.dataset)
    out = Path(args.output or "features")
    out.mkdir(parents=True, exist_ok=True)
    for rec in records:
        pyramid = detector.vision.encode_image(rec.image)
        save_feature_pyramid(pyramid, out / f"{rec.sample_id}.fpk")
    print(f"wrote {len(records)} feature files to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptad",
        description="Prompt-guided zero-/few-shot anomaly detection")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--output", help="output directory")

    p = sub.add_parser("gen-data", help="render the synthetic dataset to disk")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("describe", help="fetch/cache the anomaly vocabulary of a class")
    common(p)
    p.add_argument("--class-name", required=True)
    p.add_argument("--cache-dir")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("train", help="run the two-phase schedule on a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a bundle (or the untrained baseline)")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--bundle", help="trained bundle dir; omit for the untrained baseline")
    p.add_argument("--shots", type=int, default=0)
    p.add_argument("--reserve", type=int, default=None,
                   help="normal references to set aside per class (default: shots)")
    p.add_argument("--lambda", dest="suppression_lambda", type=float, default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--kernels", help="comma-separated kernel shapes, e.g. 3x3,5x5")
    p.add_argument("--template-mode", choices=["fixed", "learnable", "both"])
    p.add_argument("--no-class-name", action="store_true")
    p.add_argument("--no-filtering", action="store_true")
    p.add_argument("--no-grounding", action="store_true")
    p.add_argument("--no-position", action="store_true")
    p.add_argument("--heatmaps", action="store_true", help="also write heatmap PNGs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="score one image and emit its heatmap")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class-name", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("export-features", help="encode a dataset into tensor containers")
    common(p)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_export_features)
    return parser


def cli(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except PromptadError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli())
