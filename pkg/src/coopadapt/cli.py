"""Command-line entry point: generate, train pretrain|adapt, eval, sweep.

Exit codes: 0 success, 2 configuration or argument error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

import torch

from coopadapt import synthgen
from coopadapt.checkpoint import CheckpointError
from coopadapt.config import ConfigError, ExperimentConfig, load_config
from coopadapt.core import Domain

log = logging.getLogger("coopadapt")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SWEEP_LSA = (-0.025, -0.05, -0.1)
SWEEP_CIA = (-0.05, -0.1, -0.2)


class UsageError(Exception):
    pass


def _parse_thresholds(text):
    try:
        vals = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"thresholds must be comma-separated numbers, got {text!r}")
    if not vals or any(not 0 < v <= 1 for v in vals):
        raise argparse.ArgumentTypeError("thresholds must lie in (0, 1]")
    return vals


def build_parser():
    p = argparse.ArgumentParser(prog="coopadapt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic cooperative dataset")
    g.add_argument("--profile", required=True, help="built-in profile name or profile JSON file")
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="pretrain on source or adapt to target")
    tsub = t.add_subparsers(dest="phase", required=True)
    tp = tsub.add_parser("pretrain")
    tp.add_argument("--config")
    tp.add_argument("--run-dir", help="override the hashed run directory")
    ta = tsub.add_parser("adapt")
    ta.add_argument("--method", choices=("dusa", "discriminator", "self-train"), default="dusa")
    ta.add_argument("--from", dest="from_ckpt", help="pretrained checkpoint directory")
    ta.add_argument("--config")
    ta.add_argument("--tau", type=float, help="pseudo-label score threshold (self-train)")
    ta.add_argument("--run-dir")

    e = sub.add_parser("eval", help="AP of a checkpoint on a labeled dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--thresholds", type=_parse_thresholds, default=(0.3, 0.5, 0.7))
    e.add_argument("--out", help="report JSON path (default: <checkpoint>/eval.json)")
    e.add_argument("--csv", help="optional per-detection CSV")

    s = sub.add_parser("sweep", help="adapt over the 3x3 grid of reversal factors")
    s.add_argument("--from", dest="from_ckpt", required=True)
    s.add_argument("--config")
    s.add_argument("--eval-data", help="labeled target dataset to score each run on")
    s.add_argument("--lsa", type=_parse_neg, default=SWEEP_LSA)
    s.add_argument("--cia", type=_parse_neg, default=SWEEP_CIA)
    s.add_argument("--run-dir")
    return p


def _parse_neg(text):
    try:
        vals = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if any(v > 0 for v in vals):
        raise argparse.ArgumentTypeError("reversal factors must be <= 0")
    return vals


# -- commands ---------------------------------------------------------------


def cmd_generate(args):
    try:
        profile = synthgen.get_profile(args.profile)
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad profile {args.profile!r}: {exc}") from exc
    if args.frames < 0:
        raise ConfigError("--frames must be >= 0")
    manifest = synthgen.generate_dataset(profile, args.frames, args.out, args.seed)
    print(f"wrote {manifest['frame_count']} frames ({profile.name}) to {args.out}")
    return EXIT_OK


def _run_dir(cfg: ExperimentConfig, args, name):
    root = Path(args.run_dir) if getattr(args, "run_dir", None) else cfg.run_dir()
    root.mkdir(parents=True, exist_ok=True)
    cfg.write(root / "config.json")
    return root, root / name


def _load(path, domain, labels):
    if not Path(path, "manifest.json").is_file():
        raise FileNotFoundError(f"no dataset manifest under {path}")
    return synthgen.load_dataset(path, domain, load_labels=labels)


def cmd_train(args):
    from coopadapt import training

    cfg = load_config(args.config)
    torch.set_num_threads(1)
    if args.phase == "pretrain":
        root, ck = _run_dir(cfg, args, "pretrain")
        source = _load(cfg.paths["source"], Domain.SOURCE, True)
        training.pretrain_source(source, cfg.detector, cfg.train, ckpt_dir=ck,
                                 metrics=training.JsonlWriter(root / "metrics.jsonl"))
        print(f"checkpoint: {ck}")
        return EXIT_OK
    if args.from_ckpt is None and not cfg.train.allow_cold_start:
        raise UsageError("train adapt needs --from <pretrained checkpoint>")
    if args.from_ckpt is not None and not Path(args.from_ckpt).is_dir():
        raise FileNotFoundError(f"checkpoint {args.from_ckpt} does not exist")
    if args.tau is not None:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "pseudo_label": {
            **cfg.pseudo_label.to_dict(), "tau": args.tau}})
    method = args.method.replace("-", "_")
    root, ck = _run_dir(cfg, args, f"adapt_{method}")
    metrics = training.JsonlWriter(root / "metrics.jsonl")
    target = _load(cfg.paths["target"], Domain.TARGET, False)
    if method == "self_train":
        source = _load(cfg.paths["source"], Domain.SOURCE, True) if cfg.pseudo_label.mix_source else None
        training.baseline_self_training(args.from_ckpt, target, cfg.detector, cfg.train, cfg.pseudo_label,
                                        source=source, ckpt_dir=ck, metrics=metrics)
    else:
        source = _load(cfg.paths["source"], Domain.SOURCE, True)
        fn = training.adapt_dusa if method == "dusa" else training.baseline_naive_discriminator
        fn(args.from_ckpt, source, target, cfg.detector, cfg.train, cfg.adapters, cfg.pe_mode,
           ckpt_dir=ck, metrics=metrics)
    print(f"checkpoint: {ck}")
    return EXIT_OK


def load_model(ckpt_dir):
    """Detector weights and anchors from any checkpoint directory."""
    from coopadapt import checkpoint
    from coopadapt.detector.boxes import make_anchors
    from coopadapt.detector.model import CooperativeDetector, DetectorConfig

    arch, tensors, _, _ = checkpoint.load(ckpt_dir)
    cfg = DetectorConfig.from_dict(arch["detector"])
    model = CooperativeDetector(cfg)
    checkpoint.load_into(model, tensors, "detector")
    return model, make_anchors(cfg.grid, cfg.anchors)


def cmd_eval(args):
    from coopadapt.evaluation import evaluate, write_report

    torch.set_num_threads(1)
    model, anchors = load_model(args.checkpoint)
    samples = _load(args.data, Domain.TARGET, True)
    report = evaluate(model, samples, anchors, args.thresholds)
    out = Path(args.out) if args.out else Path(args.checkpoint) / "eval.json"
    write_report(report, out, args.checkpoint, args.data, args.csv)
    print("  ".join(f"AP@{t}={v:.4f}" for t, v in report["ap"].items()))
    return EXIT_OK


def cmd_sweep(args):
    from dataclasses import replace

    from coopadapt import training
    from coopadapt.evaluation import evaluate

    torch.set_num_threads(1)
    base = load_config(args.config)
    source = _load(base.paths["source"], Domain.SOURCE, True)
    target = _load(base.paths["target"], Domain.TARGET, False)
    test = _load(args.eval_data, Domain.TARGET, True) if args.eval_data else None
    root = Path(args.run_dir) if args.run_dir else base.run_dir("sweep")
    root.mkdir(parents=True, exist_ok=True)
    base.write(root / "config.json")
    rows = []
    for g_lsa, g_cia in itertools.product(args.lsa, args.cia):
        cfg = replace(base, train=replace(base.train, lsa_gamma=g_lsa, cia_gamma=g_cia))
        name = f"lsa{g_lsa:g}_cia{g_cia:g}"
        tr = training.adapt_dusa(args.from_ckpt, source, target, cfg.detector, cfg.train, cfg.adapters,
                                 cfg.pe_mode, ckpt_dir=root / name,
                                 metrics=training.JsonlWriter(root / name / "metrics.jsonl"))
        row = {"lsa_gamma": g_lsa, "cia_gamma": g_cia, "checkpoint": str(root / name)}
        if test is not None:
            row["ap"] = evaluate(tr.model, test, tr.anchors)["ap"]
        rows.append(row)
        print(json.dumps(row, sort_keys=True))
    (root / "sweep.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, synthgen.GenerationError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
