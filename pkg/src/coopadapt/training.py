"""Source pretraining, decoupled adversarial adaptation and the two baselines.

All randomness flows from one integer seed through independent streams:
model initialization, source batches (sampling, augmentation, pillar
subsampling), target batches, and dropout. Source and target streams never
share state, so turning the adapters off leaves the source trajectory intact.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from coopadapt import checkpoint as ckpt_io
from coopadapt.adapters import (
    SOURCE_LABEL,
    TARGET_LABEL,
    AdapterConfig,
    DomainAdapters,
    LocationSimRealAdapter,
    cia_confidence_min,
    cia_loss,
    domain_bce,
)
from coopadapt.core import BoxSet, Domain
from coopadapt.detector.boxes import assign_targets, make_anchors
from coopadapt.detector.grid import PE_MODES, append_positional_encoding
from coopadapt.detector.losses import confidence_map, detection_loss
from coopadapt.detector.model import CooperativeDetector, DetectorConfig, flatten_head
from coopadapt.grl import grl, scheduled_gamma
from coopadapt.pipeline import (
    AugmentConfig,
    PreparedSample,
    agent_labels,
    augment,
    build_batch,
    detect,
    ego_indices,
    prepare,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    lr_decay: float = 0.1
    decay_epoch: int = 15
    batch_source: int = 2
    batch_target: int = 2
    pretrain_batch: int = 4
    alpha_sim: float = 1.0
    alpha_agent: float = 1.0
    lsa_gamma: float = -0.05
    cia_gamma: float = -0.1
    grl_schedule: str = "constant"
    epochs: int = 10
    pretrain_epochs: int = 20
    patience: int = 5
    min_delta: float = 1e-3
    val_fraction: float = 0.1
    steps_per_epoch: Optional[int] = None
    seed: int = 0
    allow_cold_start: bool = False
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.batch_source < 1 or self.batch_target < 1 or self.pretrain_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.alpha_sim < 0 or self.alpha_agent < 0:
            raise ValueError("loss weights must be >= 0")
        if self.lsa_gamma > 0 or self.cia_gamma > 0:
            raise ValueError("gradient reversal factors must be <= 0")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["augment"] = self.augment.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "augment" in d:
            d["augment"] = AugmentConfig.from_dict(d["augment"])
        return cls(**d)


@dataclass(frozen=True)
class PseudoLabelConfig:
    tau: float = 0.3
    rounds: int = 3
    epochs_per_round: int = 1
    mix_source: bool = False

    def __post_init__(self):
        if not 0 <= self.tau <= 1:
            raise ValueError("pseudo-label threshold must lie in [0, 1]")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: base rate before ``decay_epoch``, scaled by ``lr_decay`` after."""
    return cfg.lr * (cfg.lr_decay if epoch >= cfg.decay_epoch else 1.0)


class JsonlWriter:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, record: dict):
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _draw(rng, n, k):
    if n == 0:
        raise TrainingError("cannot draw a batch from an empty dataset")
    return rng.choice(n, size=k, replace=n < k)


def _prepared(samples):
    return [s if isinstance(s, PreparedSample) else prepare(s) for s in samples]


class Trainer:
    """Model, adapters, optimizer and random streams for one run."""

    def __init__(self, det_cfg: DetectorConfig = DetectorConfig(), cfg: TrainConfig = TrainConfig(),
                 adapter_cfg: Optional[AdapterConfig] = None, pe_mode: str = "offset",
                 naive: bool = False, train_detector: bool = True, dtype=torch.float32):
        self.det_cfg, self.cfg, self.adapter_cfg = det_cfg, cfg, adapter_cfg
        self.pe_mode = pe_mode
        self.naive = naive
        self.train_detector = train_detector
        streams = np.random.SeedSequence(cfg.seed).spawn(5)
        torch.manual_seed(int(streams[0].generate_state(1)[0]))
        self.model = CooperativeDetector(det_cfg).to(dtype)
        in_ch = det_cfg.channels + PE_MODES[pe_mode]
        fshape = det_cfg.grid.feature_shape
        torch.manual_seed(int(streams[3].generate_state(1)[0]))
        self.adapters = None
        self.naive_disc = None
        if naive:
            self.naive_disc = LocationSimRealAdapter(in_ch, fshape, use_lfs=False,
                                                     hidden=(adapter_cfg or AdapterConfig()).sim_hidden,
                                                     dropout=(adapter_cfg or AdapterConfig()).dropout).to(dtype)
        elif adapter_cfg is not None:
            self.adapters = DomainAdapters(adapter_cfg, in_ch, fshape).to(dtype)
        self.rng_source = np.random.default_rng(streams[1])
        self.rng_target = np.random.default_rng(streams[2])
        torch.manual_seed(int(streams[4].generate_state(1)[0]))
        self.anchors = make_anchors(det_cfg.grid, det_cfg.anchors)
        self.dtype = dtype
        self.epoch = 0
        self.step = 0
        self._build_optimizer()

    # -- parameters and checkpoints ---------------------------------------

    def modules(self) -> dict:
        out = {"detector": self.model}
        if self.adapters is not None:
            out["adapters"] = self.adapters
        if self.naive_disc is not None:
            out["naive"] = self.naive_disc
        return out

    def named_trainables(self):
        for prefix, module in self.modules().items():
            if prefix == "detector" and not self.train_detector:
                continue
            for name, p in module.named_parameters():
                yield f"{prefix}.{name}", p

    def _build_optimizer(self):
        params = [p for _, p in self.named_trainables()]
        self.optimizer = torch.optim.Adam(params, lr=lr_at(self.epoch, self.cfg))
        self.param_names = {id(p): n for n, p in self.named_trainables()}

    def arch(self, phase: str) -> dict:
        return {
            "format": "coopadapt-checkpoint/1",
            "phase": phase,
            "detector": self.det_cfg.to_dict(),
            "adapters": self.adapter_cfg.to_dict() if self.adapters is not None else None,
            "naive": self.naive_disc is not None,
            "pe_mode": self.pe_mode,
            "train": self.cfg.to_dict(),
        }

    def save(self, ckpt_dir, phase: str = "train"):
        state = {
            "epoch": self.epoch,
            "step": self.step,
            "rng_source": self.rng_source.bit_generator.state,
            "rng_target": self.rng_target.bit_generator.state,
            "torch_rng": torch.get_rng_state().tolist(),
        }
        ckpt_io.save(ckpt_dir, self.arch(phase), self.modules(), self.optimizer, self.param_names, state)
        return Path(ckpt_dir)

    def load_detector(self, ckpt_dir):
        arch, tensors, _, _ = ckpt_io.load(ckpt_dir)
        if DetectorConfig.from_dict(arch["detector"]) != self.det_cfg:
            raise ckpt_io.CheckpointError(f"detector architecture in {ckpt_dir} differs from the configured one")
        ckpt_io.load_into(self.model, tensors, "detector")
        return self

    def resume(self, ckpt_dir):
        """Restore weights, optimizer moments, counters and random streams."""
        _, tensors, optim, state = ckpt_io.load(ckpt_dir)
        for prefix, module in self.modules().items():
            ckpt_io.load_into(module, tensors, prefix)
        if optim is not None:
            ckpt_io.restore_optimizer(self.optimizer, optim, self.param_names)
        if state is not None:
            self.epoch, self.step = state["epoch"], state["step"]
            self.rng_source.bit_generator.state = state["rng_source"]
            self.rng_target.bit_generator.state = state["rng_target"]
            torch.set_rng_state(torch.tensor(state["torch_rng"], dtype=torch.uint8))
        self.set_epoch(self.epoch)
        return self

    def set_epoch(self, epoch: int):
        self.epoch = epoch
        for g in self.optimizer.param_groups:
            g["lr"] = lr_at(epoch, self.cfg)

    def snapshot(self):
        return {k: copy.deepcopy(m.state_dict()) for k, m in self.modules().items()}

    def restore_snapshot(self, snap):
        for k, m in self.modules().items():
            m.load_state_dict(snap[k])

    # -- losses -------------------------------------------------------------

    def _batch(self, samples, rng):
        return build_batch(samples, self.det_cfg.grid, rng, self.dtype)

    def detection_loss(self, samples, feats=None, groups=None, rng=None):
        """Mean L_PP over labeled samples; returns (loss, features, group sizes)."""
        if feats is None:
            batch, groups = self._batch(samples, rng)
            feats = self.model.extract(batch)
        cls, reg = self.model.predict(self.model.fuse(feats, groups))
        c = self.det_cfg
        total = 0.0
        for k, ps in enumerate(samples):
            labels = ps.labels if ps.labels is not None else BoxSet()
            tg = assign_targets(self.anchors, labels, c.anchors)
            logits, deltas = flatten_head(cls[k], reg[k])
            loss, _, _ = detection_loss(logits, deltas, torch.from_numpy(tg.labels),
                                        torch.from_numpy(tg.reg).to(self.dtype),
                                        c.focal_alpha, c.focal_gamma, c.smooth_l1_beta)
            total = total + loss
        return total / len(samples), feats, groups

    def encode(self, feats):
        return append_positional_encoding(feats, self.det_cfg.grid, self.pe_mode)

    def gammas(self):
        total = max(1, self.cfg.epochs)
        p = min(1.0, self.epoch / total)
        return (scheduled_gamma(self.cfg.lsa_gamma, p, self.cfg.grl_schedule),
                scheduled_gamma(self.cfg.cia_gamma, p, self.cfg.grl_schedule))

    def sim_loss(self, ego_feats, domains, gamma):
        x = grl(self.encode(ego_feats), gamma)
        logits = self.adapters.lsa(x)
        return lsa_loss_from_logits(logits, domains), logits

    def agent_loss(self, target_samples, feats, groups, gamma):
        """Confidence-weighted inter-agent loss over target samples."""
        with torch.no_grad():
            conf = confidence_map(self.model.head(feats)[0])
        items, start, stats = [], 0, []
        encoded = grl(self.encode(feats), gamma)
        for ps, n in zip(target_samples, groups):
            m_conf = cia_confidence_min(conf[start:start + n])
            items.append((encoded[start:start + n], agent_labels(ps), m_conf))
            start += n
        loss = cia_loss(items, self.adapters.cia, self.adapter_cfg.use_conf)
        return loss, items

    # -- steps ----------------------------------------------------------------

    def _optimize(self, loss):
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.step += 1

    def pretrain_step(self, source, batch_size=None):
        """One L_det step on ``batch_size`` augmented source samples."""
        k = batch_size or self.cfg.pretrain_batch
        idx = _draw(self.rng_source, len(source), k)
        batch = [augment(source[i], self.rng_source, self.cfg.augment) for i in idx]
        loss, _, _ = self.detection_loss(batch, rng=self.rng_source)
        self._optimize(loss)
        return {"loss_det": loss.item()}

    def adapt_step(self, source, target):
        """One joint step: L_det + a1 L_sim + a2 L_agent (GRLs flip the adversarial sign)."""
        cfg = self.cfg
        idx = _draw(self.rng_source, len(source), cfg.batch_source)
        src = [augment(source[i], self.rng_source, cfg.augment) for i in idx]
        if self.train_detector:
            l_det, s_feats, s_groups = self.detection_loss(src, rng=self.rng_source)
        else:
            with torch.no_grad():
                batch, s_groups = self._batch(src, self.rng_source)
                s_feats = self.model.extract(batch)
            l_det = s_feats.sum() * 0.0
        total = l_det
        rec = {"loss_det": l_det.item()}
        use_sim = self.naive_disc is not None or (self.adapters is not None and self.adapters.lsa is not None
                                                  and cfg.alpha_sim > 0)
        use_agent = self.adapters is not None and self.adapters.cia is not None and cfg.alpha_agent > 0 \
            and self.naive_disc is None
        if not (use_sim or use_agent):
            self._optimize(total)
            return rec
        tidx = _draw(self.rng_target, len(target), cfg.batch_target)
        tgt = [augment(target[i], self.rng_target, cfg.augment) for i in tidx]
        t_batch, t_groups = self._batch(tgt, self.rng_target)
        if self.train_detector:
            t_feats = self.model.extract(t_batch)
        else:
            with torch.no_grad():
                t_feats = self.model.extract(t_batch)
        g_lsa, g_cia = self.gammas()
        if self.naive_disc is not None:
            feats = torch.cat([s_feats, t_feats])
            domains = [SOURCE_LABEL] * s_feats.shape[0] + [TARGET_LABEL] * t_feats.shape[0]
            logits = self.naive_disc(grl(self.encode(feats), g_lsa))
            l_sim = lsa_loss_from_logits(logits, domains)
            total = total + cfg.alpha_sim * l_sim
            rec.update(loss_sim=l_sim.item(), acc_sim=_binary_acc(logits, domains))
        elif use_sim:
            ego = torch.cat([s_feats[ego_indices(s_groups)], t_feats[ego_indices(t_groups)]])
            domains = [SOURCE_LABEL] * len(src) + [TARGET_LABEL] * len(tgt)
            l_sim, logits = self.sim_loss(ego, domains, g_lsa)
            total = total + cfg.alpha_sim * l_sim
            rec.update(loss_sim=l_sim.item(), acc_sim=_binary_acc(logits, domains))
        if use_agent:
            l_agent, items = self.agent_loss(tgt, t_feats, t_groups, g_cia)
            total = total + cfg.alpha_agent * l_agent
            types = [t for ps in tgt for t in agent_labels(ps)]
            rec.update(loss_agent=l_agent.item(),
                       acc_agent=_agent_acc(self.adapters.cia, items),
                       agent_mix=[types.count(0), types.count(1)])
        self._optimize(total)
        return rec

    # -- evaluation helpers ---------------------------------------------------

    @torch.no_grad()
    def validation_loss(self, samples, batch_size=4) -> float:
        self.model.eval()
        try:
            losses = []
            for k in range(0, len(samples), batch_size):
                chunk = samples[k:k + batch_size]
                loss, _, _ = self.detection_loss(chunk, rng=None)
                losses.append(float(loss) * len(chunk))
            return sum(losses) / max(1, len(samples))
        finally:
            self.model.train()

    def steps_per_epoch(self, n_source, batch):
        if self.cfg.steps_per_epoch:
            return self.cfg.steps_per_epoch
        return max(1, math.ceil(n_source / batch))


def lsa_loss_from_logits(logits, domains):
    return domain_bce(logits, domains)


def _binary_acc(logits, domains) -> float:
    pred = (logits.detach() > 0).long().cpu()
    return float((pred == torch.as_tensor(domains)).float().mean())


@torch.no_grad()
def _agent_acc(disc, items) -> float:
    hits, total = 0.0, 0
    for encoded, labels, _ in items:
        pred = disc(encoded.detach()).argmax(dim=1)
        lab = torch.as_tensor(labels).view(-1, 1, 1)
        hits += float((pred == lab).sum())
        total += pred.numel()
    return hits / max(1, total)


def split_validation(samples, fraction):
    """Deterministic tail split of a source set into (train, val)."""
    n_val = int(round(len(samples) * fraction))
    if n_val == 0 or n_val >= len(samples):
        return samples, []
    return samples[:-n_val], samples[-n_val:]


# -- public workflows ---------------------------------------------------------


def pretrain_source(source, det_cfg=DetectorConfig(), cfg=TrainConfig(), val=None, init=None,
                    ckpt_dir=None, metrics: Optional[Callable] = None, batch_size=None,
                    max_steps=None, trainer: Optional[Trainer] = None) -> Trainer:
    """Train the detector on labeled source data with early stopping.

    Stops when validation L_det has not improved by ``min_delta`` for
    ``patience`` epochs, or after ``pretrain_epochs``; the best weights are
    kept. ``init`` continues from an existing checkpoint's detector weights.
    """
    source = _prepared(source)
    if not source:
        raise TrainingError("pretraining needs a non-empty labeled source dataset")
    if any(s.labels is None for s in source):
        raise TrainingError("pretraining needs labels on every source frame")
    if val is None:
        source, val = split_validation(source, cfg.val_fraction)
    val = _prepared(val)
    tr = trainer or Trainer(det_cfg, cfg)
    if init is not None:
        tr.load_detector(init)
    bs = batch_size or cfg.pretrain_batch
    steps = tr.steps_per_epoch(len(source), bs)
    best, best_snap, stale = math.inf, None, 0
    start_epoch = tr.epoch
    for epoch in range(start_epoch, cfg.pretrain_epochs):
        tr.set_epoch(epoch)
        losses = []
        for _ in range(steps):
            if max_steps is not None and tr.step >= max_steps:
                break
            losses.append(tr.pretrain_step(source, bs)["loss_det"])
        rec = {"phase": "pretrain", "epoch": epoch, "lr": lr_at(epoch, cfg), "step": tr.step,
               "loss_det": float(np.mean(losses)) if losses else None}
        tr.epoch = epoch + 1
        if val:
            v = tr.validation_loss(val)
            rec["val_loss_det"] = v
            if v < best - cfg.min_delta:
                best, best_snap, stale = v, tr.snapshot(), 0
            else:
                stale += 1
        if metrics:
            metrics(rec)
        log.info("pretrain epoch %d: %s", epoch, rec)
        if max_steps is not None and tr.step >= max_steps:
            break
        if val and stale >= cfg.patience:
            log.info("early stop after epoch %d (best val %.4f)", epoch, best)
            break
    if best_snap is not None:
        tr.restore_snapshot(best_snap)
    if ckpt_dir is not None:
        tr.save(ckpt_dir, "pretrain")
    return tr


def _require_checkpoint(ckpt, cfg):
    if ckpt is None and not cfg.allow_cold_start:
        raise TrainingError("adaptation needs a pretrained checkpoint (set allow_cold_start to override)")


def _adapt_loop(tr: Trainer, source, target, ckpt_dir, metrics, phase, max_steps=None):
    cfg = tr.cfg
    steps = tr.steps_per_epoch(len(source), cfg.batch_source)
    for epoch in range(tr.epoch, cfg.epochs):
        tr.set_epoch(epoch)
        recs = []
        for _ in range(steps):
            if max_steps is not None and tr.step >= max_steps:
                break
            recs.append(tr.adapt_step(source, target))
        tr.epoch = epoch + 1
        rec = {"phase": phase, "epoch": epoch, "lr": lr_at(epoch, cfg), "step": tr.step}
        for key in ("loss_det", "loss_sim", "loss_agent", "acc_sim", "acc_agent"):
            vals = [r[key] for r in recs if key in r]
            if vals:
                rec[key] = float(np.mean(vals))
        mixes = [r["agent_mix"] for r in recs if "agent_mix" in r]
        if mixes:
            rec["agent_mix"] = np.sum(mixes, axis=0).tolist()
        if metrics:
            metrics(rec)
        log.info("%s epoch %d: %s", phase, epoch, rec)
        if max_steps is not None and tr.step >= max_steps:
            break
    if ckpt_dir is not None:
        tr.save(ckpt_dir, phase)
    return tr


def adapt_dusa(ckpt, source, target, det_cfg=DetectorConfig(), cfg=TrainConfig(),
               adapter_cfg=AdapterConfig(), pe_mode="offset", ckpt_dir=None, metrics=None,
               max_steps=None) -> Trainer:
    """Joint adversarial adaptation from a pretrained checkpoint.

    Target samples are used without labels: any annotations they carry are
    dropped before training.
    """
    _require_checkpoint(ckpt, cfg)
    source = _prepared(source)
    target = [t.with_labels(None) for t in _prepared(target)]
    if not source or not target:
        raise TrainingError("adaptation needs non-empty source and target datasets")
    tr = Trainer(det_cfg, cfg, adapter_cfg, pe_mode)
    if ckpt is not None:
        tr.load_detector(ckpt)
    return _adapt_loop(tr, source, target, ckpt_dir, metrics, "adapt_dusa", max_steps)


def baseline_naive_discriminator(ckpt, source, target, det_cfg=DetectorConfig(), cfg=TrainConfig(),
                                 adapter_cfg=AdapterConfig(), pe_mode="offset", ckpt_dir=None,
                                 metrics=None, max_steps=None) -> Trainer:
    """One pooled sim/real discriminator over every agent's features, through a GRL."""
    _require_checkpoint(ckpt, cfg)
    source = _prepared(source)
    target = [t.with_labels(None) for t in _prepared(target)]
    if not source or not target:
        raise TrainingError("adaptation needs non-empty source and target datasets")
    tr = Trainer(det_cfg, cfg, adapter_cfg, pe_mode, naive=True)
    if ckpt is not None:
        tr.load_detector(ckpt)
    return _adapt_loop(tr, source, target, ckpt_dir, metrics, "adapt_discriminator", max_steps)


def pseudo_labels(tr: Trainer, target, tau: float):
    """Frozen-inference boxes with score >= tau for every target frame."""
    if tau >= 1.0:
        return [BoxSet(np.zeros((0, 7)), np.zeros(0)) for _ in target]
    return detect(tr.model, target, tr.anchors, score_threshold=tau)


def baseline_self_training(ckpt, target, det_cfg=DetectorConfig(), cfg=TrainConfig(),
                           plcfg=PseudoLabelConfig(), source=None, ckpt_dir=None,
                           metrics=None) -> Trainer:
    """Alternate pseudo-labeling of target frames and finetuning on them.

    Writes ``round_<k>`` checkpoints under ``ckpt_dir``. A round without any
    pseudo-label skips its finetuning.
    """
    _require_checkpoint(ckpt, cfg)
    target = [t.with_labels(None) for t in _prepared(target)]
    if not target:
        raise TrainingError("self-training needs a non-empty target dataset")
    tr = Trainer(det_cfg, cfg)
    if ckpt is not None:
        tr.load_detector(ckpt)
    extra = _prepared(source) if (plcfg.mix_source and source) else []
    for rnd in range(1, plcfg.rounds + 1):
        preds = pseudo_labels(tr, target, plcfg.tau)
        n_labels = int(sum(len(p) for p in preds))
        rec = {"phase": "self_train", "round": rnd, "pseudo_labels": n_labels, "step": tr.step}
        if n_labels == 0:
            log.warning("self-training round %d produced no pseudo-labels; skipping finetune", rnd)
            rec["skipped"] = True
        else:
            pool = [t.with_labels(BoxSet(p.boxes)) for t, p in zip(target, preds)] + extra
            steps = tr.steps_per_epoch(len(pool), cfg.pretrain_batch)
            losses = []
            for e in range(plcfg.epochs_per_round):
                tr.set_epoch(tr.epoch)
                for _ in range(steps):
                    idx = _draw(tr.rng_target, len(pool), cfg.pretrain_batch)
                    batch = [augment(pool[i], tr.rng_target, cfg.augment) for i in idx]
                    loss, _, _ = tr.detection_loss(batch, rng=tr.rng_target)
                    tr._optimize(loss)
                    losses.append(loss.item())
                tr.epoch += 1
            rec["loss_det"] = float(np.mean(losses))
        if metrics:
            metrics(rec)
        if ckpt_dir is not None:
            tr.save(Path(ckpt_dir) / f"round_{rnd}", "self_train")
    if ckpt_dir is not None:
        tr.save(ckpt_dir, "self_train")
    return tr


def fit_frozen_discriminator(ckpt, source, target, det_cfg=DetectorConfig(), cfg=TrainConfig(),
                             adapter_cfg=AdapterConfig(), pe_mode="offset", max_steps=None) -> Trainer:
    """Train only the sim/real adapter on frozen detector features (no GRL effect)."""
    ad = dataclasses.replace(adapter_cfg, cia_enabled=False, lsa_enabled=True)
    source = _prepared(source)
    target = [t.with_labels(None) for t in _prepared(target)]
    tr = Trainer(det_cfg, cfg, ad, pe_mode, train_detector=False)
    tr.load_detector(ckpt)
    return _adapt_loop(tr, source, target, None, None, "probe", max_steps)


@torch.no_grad()
def sim_real_accuracy(tr: Trainer, source, target, naive=False) -> float:
    """Held-out accuracy of the trained sim/real discriminator on un-augmented ego features."""
    tr.model.eval()
    disc = tr.naive_disc if naive else tr.adapters.lsa
    disc.eval()
    try:
        hits, total = 0, 0
        for samples, label in ((_prepared(source), SOURCE_LABEL), (_prepared(target), TARGET_LABEL)):
            for k in range(0, len(samples), 4):
                chunk = samples[k:k + 4]
                batch, groups = build_batch(chunk, tr.det_cfg.grid, None, tr.dtype)
                feats = tr.model.extract(batch)[ego_indices(groups)]
                pred = (disc(tr.encode(feats)) > 0).long()
                hits += int((pred == label).sum())
                total += pred.numel()
        return hits / max(1, total)
    finally:
        tr.model.train()
        disc.train()
