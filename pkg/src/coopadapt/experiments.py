"""Seed-fixed sim-to-real directional experiment.

Per seed: generate source and target frames, pretrain on the source, then
compare the pretrained checkpoint with its DUSA-adapted version on held-out
target frames, and compare a sim/real probe trained on frozen features with
the adapted model's own discriminator.

    python -m coopadapt.experiments --seeds 0 1 2 --out directional.json
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from coopadapt import synthgen
from coopadapt.adapters import AdapterConfig
from coopadapt.core import Domain
from coopadapt.detector.model import DetectorConfig
from coopadapt.evaluation import evaluate
from coopadapt.pipeline import prepare
from coopadapt.training import (
    TrainConfig, Trainer, adapt_dusa, fit_frozen_discriminator, pretrain_source, sim_real_accuracy, split_validation,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DirectionalSetup:
    n_source: int = 200
    n_target: int = 200
    n_test: int = 40
    n_probe_target: int = 20
    pretrain_epochs: int = 20
    adapt_epochs: int = 2
    adapt_lr: float = 1e-4
    alpha_sim: float = 1.0
    alpha_agent: float = 1.0
    lsa_gamma: float = -0.05
    cia_gamma: float = -0.01
    source_profile: str = "synthetic_sim"
    target_profile: str = "synthetic_real"
    # target-profile overrides, e.g. {"clutter_density": 0.3}
    target_overrides: tuple = ()

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, pretrain_epochs=self.pretrain_epochs, epochs=self.adapt_epochs,
                           lsa_gamma=self.lsa_gamma, cia_gamma=self.cia_gamma)

    def tag(self) -> str:
        return (f"lr{self.adapt_lr:g}-e{self.adapt_epochs}-lsa{self.lsa_gamma:g}x{self.alpha_sim:g}"
                f"-cia{self.cia_gamma:g}x{self.alpha_agent:g}")

    def adapt_config(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self.train_config(seed), lr=self.adapt_lr, alpha_sim=self.alpha_sim,
                                   alpha_agent=self.alpha_agent)

    def profiles(self):
        src = synthgen.get_profile(self.source_profile)
        tgt = synthgen.get_profile(self.target_profile)
        if self.target_overrides:
            tgt = tgt.replace(**dict(self.target_overrides))
        return src, tgt


def _frames(profile, seed, n, domain):
    return [synthgen.generate_frame(profile, seed, i, domain) for i in range(n)]


def run_seed(seed: int, setup: DirectionalSetup = DirectionalSetup(), workdir=None) -> dict:
    """One seed of the experiment; returns APs and discriminator accuracies."""
    t0 = time.time()
    sim, real = setup.profiles()
    # disjoint generator seeds per split
    source = [prepare(s) for s in _frames(sim, 100 + seed, setup.n_source, Domain.SOURCE)]
    target = [prepare(s) for s in _frames(real, 200 + seed, setup.n_target, Domain.TARGET)]
    test = _frames(real, 400 + seed, setup.n_test, Domain.TARGET)
    cfg = setup.train_config(seed)
    train_src, held_src = split_validation(source, cfg.val_fraction)
    workdir = Path(workdir) if workdir is not None else None
    pre_dir = workdir / f"seed{seed}" / "pretrain" if workdir else None
    if pre_dir is not None and (pre_dir / "arch.json").is_file():
        log.info("seed %d: reusing %s", seed, pre_dir)
    else:
        if pre_dir is None:
            pre_dir = Path(tempfile.mkdtemp(prefix="coopadapt-directional-")) / "pretrain"
        pretrain_source(train_src, cfg=cfg, val=held_src, ckpt_dir=pre_dir)
    pre = Trainer(DetectorConfig(), cfg).load_detector(pre_dir)
    ap_pre = evaluate(pre.model, test, pre.anchors)["ap"]

    acfg = setup.adapt_config(seed)
    adapt_dir = pre_dir.parent / f"adapt-{setup.tag()}"
    adapted = adapt_dusa(pre_dir, train_src, target, cfg=acfg, adapter_cfg=AdapterConfig(), ckpt_dir=adapt_dir)
    ap_dusa = evaluate(adapted.model, test, adapted.anchors)["ap"]
    held_tgt = [prepare(s) for s in test[:setup.n_probe_target]]
    acc_adapted = sim_real_accuracy(adapted, held_src, held_tgt)
    # the same probe protocol on both feature extractors
    probe = fit_frozen_discriminator(pre_dir, train_src, target, cfg=cfg)
    acc_frozen = sim_real_accuracy(probe, held_src, held_tgt)
    reprobe = fit_frozen_discriminator(adapt_dir, train_src, target, cfg=cfg)
    acc_reprobe = sim_real_accuracy(reprobe, held_src, held_tgt)
    out = {"seed": seed, "ap_pretrained": ap_pre, "ap_dusa": ap_dusa, "acc_frozen": acc_frozen,
           "acc_adapted": acc_adapted, "acc_probe_on_adapted": acc_reprobe,
           "seconds": round(time.time() - t0, 1)}
    log.info("directional seed %d: %s", seed, out)
    return out


def summarize(rows) -> dict:
    gain = float(np.mean([r["ap_dusa"]["0.5"] - r["ap_pretrained"]["0.5"] for r in rows]))
    drop = float(np.mean([r["acc_frozen"] - r["acc_adapted"] for r in rows]))
    return {"seeds": [r["seed"] for r in rows], "mean_ap50_gain": gain, "mean_acc_drop": drop,
            "acc_drop_ok": drop >= 0.15, "ap_gain_ok": gain >= 0.01, "runs": rows}


def run(seeds=(0, 1, 2), setup: DirectionalSetup = DirectionalSetup(), workdir=None) -> dict:
    torch.set_num_threads(1)
    rows = [run_seed(s, setup, workdir) for s in seeds]
    summary = summarize(rows)
    summary["setup"] = dataclasses.asdict(setup)
    return summary


def main(argv=None):
    p = argparse.ArgumentParser(description="seed-fixed directional adaptation experiment")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--workdir", help="keep pretrained checkpoints here and reuse them")
    p.add_argument("--cia-gamma", type=float, default=DirectionalSetup.cia_gamma)
    p.add_argument("--lsa-gamma", type=float, default=DirectionalSetup.lsa_gamma)
    p.add_argument("--adapt-epochs", type=int, default=DirectionalSetup.adapt_epochs)
    p.add_argument("--adapt-lr", type=float, default=DirectionalSetup.adapt_lr)
    p.add_argument("--alpha-sim", type=float, default=DirectionalSetup.alpha_sim)
    p.add_argument("--alpha-agent", type=float, default=DirectionalSetup.alpha_agent)
    p.add_argument("--target-override", action="append", default=[], metavar="KEY=JSON",
                   help="override a target-profile field, e.g. clutter_density=0.3")
    p.add_argument("--out")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    overrides = tuple((k, json.loads(v)) for k, v in (o.split("=", 1) for o in args.target_override))
    setup = DirectionalSetup(cia_gamma=args.cia_gamma, lsa_gamma=args.lsa_gamma, adapt_epochs=args.adapt_epochs,
                             adapt_lr=args.adapt_lr, alpha_sim=args.alpha_sim, alpha_agent=args.alpha_agent,
                             target_overrides=overrides)
    summary = run(args.seeds, setup, args.workdir)
    text = json.dumps(summary, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


if __name__ == "__main__":
    main()
