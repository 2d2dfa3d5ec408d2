import dataclasses
import json
import math

import numpy as np
import pytest
import torch

from coopadapt import checkpoint as ckpt_io
from coopadapt.adapters import AdapterConfig, LocationSimRealAdapter, domain_bce
from coopadapt.core import AgentFrame, AgentType, CollaborativeSample, Domain, Pose
from coopadapt.detector.grid import append_positional_encoding
from coopadapt.pipeline import build_batch, detect, prepare
from coopadapt.training import (
    JsonlWriter, PseudoLabelConfig, TrainConfig, Trainer, TrainingError, adapt_dusa, baseline_naive_discriminator,
    baseline_self_training, lr_at, pretrain_source, pseudo_labels,
)

from conftest import make_sample, random_cloud

AD = AdapterConfig(sim_hidden=8, agent_hidden=8)
F64 = torch.float64


def cfg(**kw):
    base = dict(epochs=2, pretrain_epochs=2, steps_per_epoch=2, seed=3, val_fraction=0.0)
    base.update(kw)
    return TrainConfig(**base)


def params(tr, prefix="detector"):
    return {k: v.detach().clone() for k, v in tr.modules()[prefix].state_dict().items()}


def same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def capture_grads(tr):
    grads = {}

    def fake_optimize(loss):
        tr.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        for name, p in tr.named_trainables():
            grads[name] = None if p.grad is None else p.grad.detach().clone()

    tr._optimize = fake_optimize
    return grads


def test_lr_schedule_exact():
    c = TrainConfig()
    assert [lr_at(e, c) for e in (0, 14, 15, 30)] == [0.001, 0.001, 0.001 * 0.1, 0.001 * 0.1]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(alpha_sim=-1)
    with pytest.raises(ValueError):
        TrainConfig(lsa_gamma=0.1)
    with pytest.raises(ValueError):
        PseudoLabelConfig(tau=1.5)
    c = TrainConfig(epochs=4)
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


def test_pretrain_decreases_loss(tiny_det_cfg, toy_samples):
    src = [prepare(s) for s in toy_samples[0]]
    tr = Trainer(tiny_det_cfg, cfg(), dtype=F64)
    before = tr.validation_loss(src)
    pretrain_source(src, tiny_det_cfg, cfg(pretrain_epochs=1, steps_per_epoch=8), val=[], trainer=tr)
    assert tr.validation_loss(src) < before


def test_pretrain_errors(tiny_det_cfg, toy_samples):
    with pytest.raises(TrainingError):
        pretrain_source([], tiny_det_cfg, cfg())
    unlabeled = [prepare(s).with_labels(None) for s in toy_samples[0]]
    with pytest.raises(TrainingError):
        pretrain_source(unlabeled, tiny_det_cfg, cfg())


def test_early_stopping_and_metrics(tiny_det_cfg, toy_samples, tmp_path):
    src = [prepare(s) for s in toy_samples[0]]
    records = []
    c = cfg(pretrain_epochs=30, steps_per_epoch=1, patience=2, min_delta=10.0)
    pretrain_source(src, tiny_det_cfg, c, val=src[:2], metrics=records.append)
    # min_delta is unreachable, so only the first epoch improves
    assert len(records) == 3
    assert {"loss_det", "val_loss_det", "lr", "epoch"} <= set(records[0])
    w = JsonlWriter(tmp_path / "m.jsonl")
    w({"a": 1})
    w({"a": 2})
    assert [json.loads(l)["a"] for l in (tmp_path / "m.jsonl").read_text().splitlines()] == [1, 2]


def test_resume_is_bit_identical(tiny_det_cfg, toy_samples, tmp_path):
    src = [prepare(s) for s in toy_samples[0]]
    tgt = [prepare(s) for s in toy_samples[1]]
    # float32 like the checkpoint format; dropout draws from torch's global
    # generator, so the two runs go one after the other
    a = Trainer(tiny_det_cfg, cfg(), AD)
    for _ in range(3):
        a.adapt_step(src, tgt)
    a.save(tmp_path / "ck")
    for _ in range(2):
        a.adapt_step(src, tgt)
    b = Trainer(tiny_det_cfg, cfg(seed=99), AD).resume(tmp_path / "ck")
    for _ in range(2):
        b.adapt_step(src, tgt)
    for prefix in ("detector", "adapters"):
        assert same(params(a, prefix), params(b, prefix))


def test_full_run_determinism(tiny_det_cfg, toy_samples, tmp_path):
    src, tgt = toy_samples
    for name in ("a", "b"):
        pretrain_source(src, tiny_det_cfg, cfg(), ckpt_dir=tmp_path / name / "pre")
        adapt_dusa(tmp_path / name / "pre", src, tgt, tiny_det_cfg, cfg(), AD, ckpt_dir=tmp_path / name / "ad")
    for sub in ("pre", "ad"):
        for f in ("params.bin", "optim.bin"):
            assert (tmp_path / "a" / sub / f).read_bytes() == (tmp_path / "b" / sub / f).read_bytes()


def test_adam_step_matches_hand_rolled_oracle():
    torch.manual_seed(0)
    w = torch.nn.Parameter(torch.tensor([0.4, -1.2, 0.7], dtype=F64))
    opt = torch.optim.Adam([w], lr=1e-3)
    x = torch.tensor([[1.0, 2.0, -1.0], [0.5, -0.3, 2.0]], dtype=F64)

    def f(v):
        return torch.log1p(torch.exp(x @ v)).sum() + 0.1 * (v ** 2).sum()

    m = np.zeros(3)
    s = np.zeros(3)
    v = w.detach().numpy().copy()
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 1e-3
    for t in range(1, 4):
        g = np.zeros(3)
        for k in range(3):
            vp, vm = v.copy(), v.copy()
            vp[k] += 1e-6
            vm[k] -= 1e-6
            g[k] = (f(torch.from_numpy(vp)).item() - f(torch.from_numpy(vm)).item()) / 2e-6
        m = b1 * m + (1 - b1) * g
        s = b2 * s + (1 - b2) * g * g
        step = lr * (m / (1 - b1 ** t)) / (np.sqrt(s / (1 - b2 ** t)) + eps)
        v = v - step
        opt.zero_grad()
        f(w).backward()
        before = w.detach().clone()
        opt.step()
        got = (before - w.detach()).numpy()
        assert np.allclose(got, step, rtol=1e-3, atol=0)
    assert np.allclose(w.detach().numpy(), v, rtol=1e-6)


def test_alpha_zero_equals_continued_pretraining(tiny_det_cfg, toy_samples, tmp_path):
    src, tgt = toy_samples
    base = cfg()
    pretrain_source(src, tiny_det_cfg, base, ckpt_dir=tmp_path / "pre")
    c0 = dataclasses.replace(base, alpha_sim=0.0, alpha_agent=0.0, pretrain_batch=base.batch_source,
                             pretrain_epochs=base.epochs)
    adapted = adapt_dusa(tmp_path / "pre", src, tgt, tiny_det_cfg, c0, AD)
    continued = pretrain_source(src, tiny_det_cfg, c0, val=[], init=tmp_path / "pre")
    assert same(params(adapted), params(continued))


def test_eq8_linearity_and_grl_routing(tiny_det_cfg, toy_samples):
    src = [prepare(s) for s in toy_samples[0]]
    tgt = [prepare(s) for s in toy_samples[1]]
    only_lsa = dataclasses.replace(AD, cia_enabled=False)

    def grads(**kw):
        tr = Trainer(tiny_det_cfg, cfg(**kw), only_lsa, dtype=F64)
        g = capture_grads(tr)
        tr.adapt_step(src, tgt)
        return g

    g0 = grads(alpha_sim=0.0)
    g1 = grads(alpha_sim=1.0)
    g2 = grads(alpha_sim=2.0)
    for name, v in g1.items():
        if not name.startswith("detector.encoder"):
            continue
        base = g0[name] if g0[name] is not None else torch.zeros_like(v)
        assert torch.allclose(g2[name] - base, 2 * (v - base), rtol=1e-9, atol=1e-12), name
    # discriminator weights see the unreversed gradient: independent of gamma
    ga = grads(lsa_gamma=-0.05)
    gb = grads(lsa_gamma=-0.5)
    for name in ga:
        if name.startswith("adapters."):
            assert torch.allclose(ga[name], gb[name], rtol=1e-12, atol=1e-15), name
    # encoder: adversarial part scales with gamma
    for name in ga:
        if name.startswith("detector.encoder"):
            assert torch.allclose(gb[name] - g0[name], 10 * (ga[name] - g0[name]), rtol=1e-8, atol=1e-12), name


def test_cia_disabled_and_cold_start(tiny_det_cfg, toy_samples, tmp_path):
    src, tgt = toy_samples
    with pytest.raises(TrainingError):
        adapt_dusa(None, src, tgt, tiny_det_cfg, cfg(), AD)
    tr = adapt_dusa(None, src, tgt, tiny_det_cfg, cfg(allow_cold_start=True),
                    dataclasses.replace(AD, cia_enabled=False))
    assert tr.adapters.cia is None and tr.adapters.lsa is not None


def test_target_labels_never_used(tiny_det_cfg, toy_samples, tmp_path):
    src, tgt = toy_samples
    pretrain_source(src, tiny_det_cfg, cfg(), ckpt_dir=tmp_path / "pre")
    stripped = [dataclasses.replace(t, annotations=None) for t in tgt]
    a = adapt_dusa(tmp_path / "pre", src, tgt, tiny_det_cfg, cfg(), AD)
    b = adapt_dusa(tmp_path / "pre", src, stripped, tiny_det_cfg, cfg(), AD)
    assert same(params(a), params(b)) and same(params(a, "adapters"), params(b, "adapters"))


def test_metrics_contain_discriminator_accuracy(tiny_det_cfg, toy_samples, tmp_path):
    src, tgt = toy_samples
    records = []
    adapt_dusa(None, src, tgt, tiny_det_cfg, cfg(allow_cold_start=True), AD, metrics=records.append)
    r = records[0]
    assert {"loss_det", "loss_sim", "loss_agent", "acc_sim", "acc_agent", "lr", "agent_mix"} <= set(r)
    assert sum(r["agent_mix"]) == 2 * 2 * 2  # steps * target batch * agents


def test_self_training_tau_one_leaves_model(tiny_det_cfg, toy_samples, tmp_path, caplog):
    src, tgt = toy_samples
    pretrain_source(src, tiny_det_cfg, cfg(), ckpt_dir=tmp_path / "pre")
    tr = baseline_self_training(tmp_path / "pre", tgt, tiny_det_cfg, cfg(), PseudoLabelConfig(tau=1.0, rounds=2),
                                ckpt_dir=tmp_path / "st")
    assert "no pseudo-labels" in caplog.text
    assert (tmp_path / "st" / "params.bin").read_bytes() == (tmp_path / "pre" / "params.bin").read_bytes()
    assert (tmp_path / "st" / "round_1").is_dir() and (tmp_path / "st" / "round_2").is_dir()


def test_pseudo_labels_replay(tiny_det_cfg, toy_samples, tmp_path):
    src, tgt = toy_samples
    pretrain_source(src, tiny_det_cfg, cfg(), ckpt_dir=tmp_path / "pre")
    prepared = [prepare(t).with_labels(None) for t in tgt]
    tr = Trainer(tiny_det_cfg, cfg()).load_detector(tmp_path / "pre")
    every = pseudo_labels(tr, prepared, 0.0)
    decoded = detect(tr.model, prepared, tr.anchors, score_threshold=0.0)
    assert [len(p) for p in every] == [len(d) for d in decoded]
    tau = 0.005
    kept = pseudo_labels(tr, prepared, tau)
    replay = Trainer(tiny_det_cfg, cfg()).load_detector(tmp_path / "pre")
    full = detect(replay.model, prepared, replay.anchors, score_threshold=tau)
    for a, b in zip(kept, full):
        assert np.array_equal(a.boxes, b.boxes) and np.all(a.scores >= tau)
    records = []
    baseline_self_training(tmp_path / "pre", tgt, tiny_det_cfg, cfg(), PseudoLabelConfig(tau=tau, rounds=1),
                           metrics=records.append)
    assert records[0]["pseudo_labels"] == sum(len(k) for k in kept)


def test_naive_discriminator_reduces_to_lsa_without_map(tiny_det_cfg):
    rng = np.random.default_rng(0)

    def solo(domain):
        a = AgentFrame(random_cloud(rng, 12), Pose.identity(), AgentType.VEHICLE, True)
        return prepare(CollaborativeSample([a], domain, annotations=make_sample(rng).annotations))

    src = [solo(Domain.SOURCE) for _ in range(3)]
    tgt = [solo(Domain.TARGET) for _ in range(3)]
    tr = Trainer(tiny_det_cfg, cfg(), AD, naive=True, dtype=F64)
    tr.naive_disc.eval()
    lsa = LocationSimRealAdapter(5, tiny_det_cfg.grid.feature_shape, use_lfs=False, hidden=8).double().eval()
    lsa.load_state_dict(tr.naive_disc.state_dict())
    batch, groups = build_batch(src[:2] + tgt[:2], tiny_det_cfg.grid, None, F64)
    feats = tr.model.extract(batch)
    enc = append_positional_encoding(feats, tiny_det_cfg.grid)
    naive = domain_bce(tr.naive_disc(enc), [0, 0, 1, 1])
    direct = domain_bce(lsa.disc(enc.mean(dim=(-2, -1))), [0, 0, 1, 1])
    assert naive.item() == pytest.approx(direct.item(), abs=1e-12)


def test_naive_zero_gamma_keeps_detection_gradient(tiny_det_cfg, toy_samples):
    src = [prepare(s) for s in toy_samples[0]]
    tgt = [prepare(s) for s in toy_samples[1]]
    a = Trainer(tiny_det_cfg, cfg(lsa_gamma=0.0), AD, naive=True, dtype=F64)
    ga = capture_grads(a)
    a.adapt_step(src, tgt)
    b = Trainer(tiny_det_cfg, cfg(alpha_sim=0.0), AD, naive=True, dtype=F64)
    gb = capture_grads(b)
    b.adapt_step(src, tgt)
    for name, g in gb.items():
        if name.startswith("detector.") and g is not None:
            assert torch.equal(ga[name], g), name


def test_naive_baseline_runs(tiny_det_cfg, toy_samples, tmp_path):
    src, tgt = toy_samples
    tr = baseline_naive_discriminator(None, src, tgt, tiny_det_cfg, cfg(allow_cold_start=True), AD,
                                      ckpt_dir=tmp_path / "nd")
    arch, tensors, _, _ = ckpt_io.load(tmp_path / "nd")
    assert arch["naive"] and ckpt_io.has_prefix(tensors, "naive")
    assert not ckpt_io.has_prefix(tensors, "adapters")
