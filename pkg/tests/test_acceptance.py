"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the summary section at the end
lists every criterion. ``-m "not slow"`` skips the directional experiment.
"""
import copy
import dataclasses
import json
import math
import shutil

import numpy as np
import pytest
import torch
from shapely import affinity
from shapely.geometry import box as shapely_box

from coopadapt import experiments, kernels, synthgen
from coopadapt.adapters import (
    AdapterConfig, InterAgentDiscriminator, LocationSimRealAdapter, cia_confidence_min, cia_loss, domain_bce,
    lsa_pool, lsa_select, weighted_agent_ce,
)
from coopadapt.core import BoxSet, Domain, PointCloud, Pose, project_to_ego
from coopadapt.detector.boxes import AnchorConfig
from coopadapt.detector.grid import GridConfig
from coopadapt.detector.losses import confidence_map
from coopadapt.detector.model import DetectorConfig
from coopadapt.evaluation import evaluate, evaluate_predictions
from coopadapt.grl import grl
from coopadapt.pipeline import AugmentConfig, agent_labels, augment, build_batch, ego_indices, prepare
from coopadapt.training import TrainConfig, Trainer, _draw, adapt_dusa, pretrain_source

from conftest import make_sample

F64 = torch.float64
TINY_GRID = GridConfig(x_range=(-3.2, 3.2), y_range=(-3.2, 3.2), z_range=(-3.0, 1.0), cell=0.8, stride=2,
                       max_points=4)
TINY_DET = DetectorConfig(grid=TINY_GRID, anchors=AnchorConfig(size=(1.6, 0.8, 1.0), z=-1.0),
                          point_channels=3, channels=3)
TINY_AD = AdapterConfig(sim_hidden=8, agent_hidden=8)


def T(rows):
    return torch.tensor(rows, dtype=F64)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


# -- 1. formula oracles -------------------------------------------------------


def brute_select_pool(f, m):
    c, h, w = len(f), len(f[0]), len(f[0][0])
    return [sum(f[k][u][v] * m[u][v] for u in range(h) for v in range(w)) / (h * w) for k in range(c)]


def brute_bce(logits, labels):
    total = 0.0
    for z, d in zip(logits, labels):
        p = sigmoid(z)
        total += -(d * math.log(p) + (1 - d) * math.log(1 - p))
    return total / len(logits)


def brute_cia(samples):
    """samples: list of (logits[a][k][u][v] nested lists, labels, m_conf nested list)."""
    total = 0.0
    for logits, labels, m in samples:
        per = 0.0
        for a, lab in enumerate(labels):
            for u in range(len(m)):
                for v in range(len(m[0])):
                    zs = [logits[a][k][u][v] for k in range(len(logits[a]))]
                    lse = math.log(sum(math.exp(z) for z in zs))
                    per += m[u][v] * (lse - zs[lab])
        total += per / len(labels)
    return total / len(samples)


def test_criterion_1_formula_oracles(verdict):
    errs = {}
    rng = np.random.default_rng(1)
    # selection + pooling on hand-built and random maps
    f = [[[1.0, 2.0], [3.0, 4.0]], [[-1.0, 0.5], [2.0, 0.0]]]
    m = [[0.0, 1.0], [2.0, 0.5]]
    got = lsa_pool(lsa_select(T(f), T(m))).tolist()
    errs["select/pool hand"] = max(abs(a - b) for a, b in zip(got, brute_select_pool(f, m)))
    fr, mr = rng.normal(size=(4, 3, 5)), rng.uniform(0, 2, (3, 5))
    got = lsa_pool(lsa_select(T(fr), T(mr))).tolist()
    errs["select/pool random"] = max(abs(a - b) for a, b in zip(got, brute_select_pool(fr.tolist(), mr.tolist())))
    # sim/real BCE
    errs["bce zero logits"] = abs(domain_bce(T([0.0, 0.0, 0.0]), [0, 1, 1]).item() - math.log(2))
    logit = lambda p: math.log(p / (1 - p))  # noqa: E731
    errs["bce hand"] = abs(domain_bce(T([logit(0.8), logit(0.3)]), [1, 0]).item()
                           - (-0.5 * (math.log(0.8) + math.log(0.7))))
    z = rng.normal(size=9)
    d = rng.integers(0, 2, 9).tolist()
    errs["bce random"] = abs(domain_bce(T(z.tolist()), d).item() - brute_bce(z.tolist(), d))
    # element-wise min of confidence maps
    errs["conf min hand"] = float((cia_confidence_min([T([[0.9, 0.1]]), T([[0.2, 0.8]])]) - T([[0.2, 0.1]]))
                                  .abs().max())
    maps = rng.uniform(0, 1, (3, 4, 4))
    brute_min = [[min(maps[a, u, v] for a in range(3)) for v in range(4)] for u in range(4)]
    errs["conf min random"] = float((cia_confidence_min(T(maps.tolist())) - T(brute_min)).abs().max())
    # confidence-weighted inter-agent CE
    lg = torch.zeros(1, 2, 1, 2, dtype=F64)
    lg[0, 0, 0, 0] = math.log(0.9 / 0.1)
    errs["cia hand 0.2440"] = abs(weighted_agent_ce(lg, [0], T([[1.0, 0.2]])).item()
                                  - (-math.log(0.9) - 0.2 * math.log(0.5)))
    torch.manual_seed(0)
    disc = InterAgentDiscriminator(3, 8).double()
    samples, raw = [], []
    for n_a in (2, 3):
        enc = torch.randn(n_a, 3, 2, 3, dtype=F64)
        labels = rng.integers(0, 2, n_a).tolist()
        mc = T(rng.uniform(0, 1, (2, 3)).tolist())
        samples.append((enc, labels, mc))
        raw.append((disc(enc).tolist(), labels, mc.tolist()))
    errs["cia random"] = abs(cia_loss(samples, disc).item() - brute_cia(raw))
    worst = max(errs, key=errs.get)
    verdict(1, all(e <= 1e-6 for e in errs.values()),
            f"{len(errs)} formula checks, max abs error {errs[worst]:.2e} ({worst}) <= 1e-6")


# -- 2. GRL contract ------------------------------------------------------------


def test_criterion_2_grl_contract(verdict):
    torch.manual_seed(3)
    theta = torch.nn.Conv2d(2, 3, 1).double()
    lsa = LocationSimRealAdapter(3, (3, 3), hidden=4).double().eval()
    cia = InterAgentDiscriminator(3, 4).double()
    n_params = sum(p.numel() for mod in (theta, lsa, cia) for p in mod.parameters())
    x = torch.randn(4, 2, 3, 3, dtype=F64)
    m_conf = torch.rand(3, 3, dtype=F64)

    def l_sim(gamma=None):
        h = theta(x)
        h = grl(h, gamma) if gamma is not None else h
        return domain_bce(lsa(h), [0, 0, 1, 1])

    def l_agent(gamma=None):
        h = theta(x)
        h = grl(h, gamma) if gamma is not None else h
        return cia_loss([(h[:2], [0, 1], m_conf), (h[2:], [0, 1], m_conf)], cia)

    fwd_ok = torch.equal(grl(x, -0.05), x)
    worst = 0.0
    for fn, gamma in ((l_sim, -0.05), (l_agent, -0.1)):
        theta.zero_grad()
        fn(gamma).backward()
        for p in theta.parameters():
            flat = p.data.view(-1)
            for k in range(flat.numel()):
                old = flat[k].item()
                flat[k] = old + 1e-6
                up = fn().item()
                flat[k] = old - 1e-6
                down = fn().item()
                flat[k] = old
                fd = (up - down) / 2e-6
                got = p.grad.view(-1)[k].item()
                worst = max(worst, abs(got - gamma * fd) / max(abs(gamma * fd), 1e-8))
    verdict(2, fwd_ok and worst <= 1e-3 and n_params <= 200,
            f"forward bit-identical={fwd_ok}, max rel error of reversed grad vs gamma*FD {worst:.2e} "
            f"<= 1e-3 on {n_params} params")


# -- 3. full gradient check ---------------------------------------------------------


def test_criterion_3_full_gradient(verdict):
    rng = np.random.default_rng(8)
    src = [prepare(make_sample(rng, Domain.SOURCE, n_points=10, name=f"s{k}")) for k in range(2)]
    tgt = [prepare(make_sample(rng, Domain.TARGET, n_points=10, labels=False, name=f"t{k}")) for k in range(2)]
    a1, a2, g1, g2 = 0.7, 1.3, -0.05, -0.1
    cfg = TrainConfig(seed=4, batch_source=2, batch_target=2, alpha_sim=a1, alpha_agent=a2, lsa_gamma=g1,
                      cia_gamma=g2, augment=AugmentConfig(enabled=False))
    tr = Trainer(TINY_DET, cfg, TINY_AD, dtype=F64)
    rs, rt = copy.deepcopy(tr.rng_source), copy.deepcopy(tr.rng_target)
    grads = {}

    def capture(loss):
        tr.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        for name, p in tr.named_trainables():
            grads[name] = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()

    tr._optimize = capture
    torch.manual_seed(99)
    rec = tr.adapt_step(src, tgt)

    # rebuild the exact batches the step drew
    s = [augment(src[i], rs, cfg.augment) for i in _draw(rs, len(src), 2)]
    s_batch, s_groups = build_batch(s, TINY_GRID, rs, F64)
    t = [augment(tgt[i], rt, cfg.augment) for i in _draw(rt, len(tgt), 2)]
    t_batch, t_groups = build_batch(t, TINY_GRID, rt, F64)
    with torch.no_grad():
        conf = confidence_map(tr.model.head(tr.model.extract(t_batch))[0])
    m_conf = [conf[0:2].amin(dim=0), conf[2:4].amin(dim=0)]  # frozen at the base point

    def parts():
        torch.manual_seed(99)
        sf = tr.model.extract(s_batch)
        l_det, _, _ = tr.detection_loss(s, feats=sf, groups=s_groups)
        tf = tr.model.extract(t_batch)
        ego = torch.cat([sf[ego_indices(s_groups)], tf[ego_indices(t_groups)]])
        l_sim = domain_bce(tr.adapters.lsa(tr.encode(ego)), [0, 0, 1, 1])
        enc = tr.encode(tf)
        items = [(enc[0:2], agent_labels(t[0]), m_conf[0]), (enc[2:4], agent_labels(t[1]), m_conf[1])]
        return l_det.item(), l_sim.item(), cia_loss(items, tr.adapters.cia).item()

    base = parts()
    replay_ok = abs(base[1] - rec["loss_sim"]) < 1e-12 and abs(base[2] - rec["loss_agent"]) < 1e-12

    def objective(name):
        d, sm, ag = parts()
        if name.startswith("detector."):
            return d + a1 * g1 * sm + a2 * g2 * ag
        return d + a1 * sm + a2 * ag

    worst, n_checked, groups_seen = 0.0, 0, set()
    with torch.no_grad():
        for name, p in tr.named_trainables():
            flat = p.data.view(-1)
            g = grads[name].view(-1)
            for k in range(flat.numel()):
                old = flat[k].item()
                flat[k] = old + 1e-6
                up = objective(name)
                flat[k] = old - 1e-6
                down = objective(name)
                flat[k] = old
                fd = (up - down) / 2e-6
                err = abs(g[k].item() - fd) / max(abs(fd), abs(g[k].item()), 1e-5)
                worst = max(worst, err)
                n_checked += 1
            groups_seen.add(".".join(name.split(".")[:2]))
    verdict(3, replay_ok and worst <= 1e-3,
            f"{n_checked} parameters in {len(groups_seen)} groups, max rel error vs central FD {worst:.2e} <= 1e-3 "
            f"(batch replay exact={replay_ok})")


# -- 4. geometry ----------------------------------------------------------------------


def shapely_iou(a, b):
    def poly(x, y, l, w, yaw):
        p = shapely_box(-l / 2, -w / 2, l / 2, w / 2)
        return affinity.translate(affinity.rotate(p, yaw, use_radians=True, origin=(0, 0)), x, y)

    pa, pb = poly(*a), poly(*b)
    inter = pa.intersection(pb).area
    return inter / (pa.area + pb.area - inter)


def test_criterion_4_geometry(verdict):
    rng = np.random.default_rng(2024)
    proj_err = 0.0
    for _ in range(200):
        a = Pose.from_xyz_rpy(*rng.uniform(-50, 50, 3), *rng.uniform(-math.pi, math.pi, 3))
        b = Pose.from_xyz_rpy(*rng.uniform(-50, 50, 3), *rng.uniform(-math.pi, math.pi, 3))
        cloud = PointCloud(np.column_stack([rng.uniform(-80, 80, (32, 3)), rng.uniform(0, 1, 32)]))
        back = project_to_ego(project_to_ego(cloud, a, b), b, a)
        proj_err = max(proj_err, float(np.abs(back.xyz - cloud.xyz).max()))
    n = 1000
    a = np.column_stack([rng.uniform(-3, 3, (n, 2)), rng.uniform(0.2, 5, (n, 2)), rng.uniform(-math.pi, math.pi, n)])
    b = np.column_stack([a[:, :2] + rng.normal(0, 1.0, (n, 2)), rng.uniform(0.2, 5, (n, 2)),
                         rng.uniform(-math.pi, math.pi, n)])
    want = np.array([shapely_iou(x, y) for x, y in zip(a, b)])
    iou_err = {name: float(np.abs(mod.iou_pairs(a, b) - want).max()) for name, mod in kernels.backends().items()}
    overlapping = int((want > 0).sum())
    verdict(4, proj_err <= 1e-6 and all(e <= 1e-9 for e in iou_err.values()),
            f"projection round trip max error {proj_err:.1e} <= 1e-6; IoU on {n} pairs ({overlapping} overlapping) "
            + ", ".join(f"{k} {v:.1e}" for k, v in sorted(iou_err.items())) + " <= 1e-9")


# -- 5. evaluation oracle ----------------------------------------------------------


def car(x):
    return [x, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0]


def test_criterion_5_evaluation_oracle(verdict, tmp_path):
    # frame 1: exact hit (.9) plus a false alarm (.6); frame 2: shifts of 0.5 m (.8) and 1 m (.7) on one car.
    # IoUs 1, 7/9, 0.6 -> ranked TP TP FP FP over 3 gts: AP 2/3 up to 0.7, 1/3 at 0.8
    gts = [BoxSet(np.array([car(0), car(10)])), BoxSet(np.array([car(0)]))]
    preds = [BoxSet(np.array([car(0), car(20)]), np.array([0.9, 0.6])),
             BoxSet(np.array([car(0.5), car(1.0)]), np.array([0.8, 0.7]))]
    ap = evaluate_predictions(preds, gts, (0.3, 0.5, 0.7, 0.8))["ap"]
    manual = {"0.3": 2 / 3, "0.5": 2 / 3, "0.7": 2 / 3, "0.8": 1 / 3}
    exact = all(abs(ap[k] - v) < 1e-12 for k, v in manual.items())

    # 20 seeded checkpoints: a short shared pretraining, then a seeded continuation each
    torch.set_num_threads(1)
    sim, real = synthgen.synthetic_sim(), synthgen.synthetic_real()
    src = [prepare(synthgen.generate_frame(sim, 7, i, Domain.SOURCE)) for i in range(24)]
    test = [synthgen.generate_frame(real, 8, i, Domain.TARGET) for i in range(6)]
    base = TrainConfig(seed=0, pretrain_epochs=1, steps_per_epoch=60, val_fraction=0.0)
    pretrain_source(src, cfg=base, val=[], ckpt_dir=tmp_path / "base")
    ths = (0.1, 0.3, 0.5, 0.7, 0.9)
    monotone, nontrivial, curves = 0, 0, []
    for seed in range(20):
        cfg = dataclasses.replace(base, seed=seed, steps_per_epoch=2)
        tr = pretrain_source(src, cfg=cfg, val=[], init=tmp_path / "base", ckpt_dir=tmp_path / f"c{seed}")
        vals = list(evaluate(tr.model, test, tr.anchors, ths)["ap"].values())
        curves.append(vals)
        monotone += all(x >= y for x, y in zip(vals, vals[1:]))
        nontrivial += vals[0] > 0
    verdict(5, exact and monotone == 20,
            f"micro-dataset AP {', '.join(f'@{k}={v:.4f}' for k, v in ap.items())} equals manual values: {exact}; "
            f"monotone over thresholds {ths} in {monotone}/20 checkpoints ({nontrivial} with AP@0.1 > 0)")


# -- 6. reduction identities ------------------------------------------------------


def test_criterion_6_reductions(verdict, tmp_path):
    rng = np.random.default_rng(5)
    src = [make_sample(rng, Domain.SOURCE, name=f"s{k}") for k in range(4)]
    tgt = [make_sample(rng, Domain.TARGET, name=f"t{k}") for k in range(4)]
    base = TrainConfig(epochs=2, pretrain_epochs=2, steps_per_epoch=3, seed=3, val_fraction=0.0)
    pretrain_source(src, TINY_DET, base, ckpt_dir=tmp_path / "pre")

    # alpha_1 = alpha_2 = 0 against continued pretraining with the same batch size and epoch count
    c0 = dataclasses.replace(base, alpha_sim=0.0, alpha_agent=0.0, pretrain_batch=base.batch_source,
                             pretrain_epochs=base.epochs)
    adapted = adapt_dusa(tmp_path / "pre", src, tgt, TINY_DET, c0, TINY_AD)
    continued = pretrain_source(src, TINY_DET, c0, val=[], init=tmp_path / "pre")
    a, b = adapted.model.state_dict(), continued.model.state_dict()
    alpha_zero = all(torch.equal(a[k], b[k]) for k in a)

    # use_lfs = false at step 0 equals plain average pooling
    src_p, tgt_p = [prepare(s) for s in src], [prepare(s) for s in tgt]
    losses = {}
    for lfs in (True, False):
        tr = Trainer(TINY_DET, base, dataclasses.replace(TINY_AD, use_lfs=lfs, cia_enabled=False), dtype=F64)
        torch.manual_seed(17)
        losses[lfs] = tr.adapt_step(src_p, tgt_p)["loss_sim"]
    tr = Trainer(TINY_DET, base, TINY_AD, dtype=F64)
    tr.adapters.lsa.eval()
    batch, groups = build_batch(src_p[:2] + tgt_p[:2], TINY_GRID, None, F64)
    ego = tr.encode(tr.model.extract(batch)[ego_indices(groups)])
    pooled = ego.mean(dim=(-2, -1))
    lfs_ok = losses[True] == losses[False] and torch.equal(tr.adapters.lsa.global_feature(ego), pooled)

    # use_conf = false equals M_conf = 1
    feats = tr.model.extract(batch)
    enc = tr.encode(feats)
    items = [(enc[2 * i:2 * i + 2], agent_labels(p), torch.rand(4, 4, dtype=F64)) for i, p in enumerate(tgt_p[:2])]
    ones = [(e, lab, torch.ones_like(m)) for e, lab, m in items]
    conf_ok = cia_loss(items, tr.adapters.cia, use_conf=False).item() == cia_loss(ones, tr.adapters.cia).item()
    verdict(6, alpha_zero and lfs_ok and conf_ok,
            f"alpha=0 bit-identical to continued pretraining: {alpha_zero}; no-LFS equals average pooling: {lfs_ok}; "
            f"no-Conf equals M_conf=1: {conf_ok}")


# -- 7. directional experiment ------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_directional_experiment(verdict, tmp_path):
    # seeds 3-5 were not looked at while choosing the adaptation settings (tuned on seeds 0-2)
    setup = experiments.DirectionalSetup()
    summary = experiments.run(seeds=(3, 4, 5), setup=setup, workdir=tmp_path)
    (tmp_path / "directional.json").write_text(json.dumps(summary, indent=1))
    runs = summary["runs"]
    per_seed = "; ".join(
        f"seed {r['seed']}: AP@0.5 {r['ap_pretrained']['0.5']:.3f} -> {r['ap_dusa']['0.5']:.3f}, "
        f"acc {r['acc_frozen']:.2f} -> {r['acc_adapted']:.2f}" for r in runs)
    reprobe = np.mean([r["acc_probe_on_adapted"] for r in runs])
    verdict(7, summary["acc_drop_ok"] and summary["ap_gain_ok"],
            f"(a) mean held-out sim/real accuracy drop {summary['mean_acc_drop']:.3f} >= 0.15 "
            f"[fresh probe on adapted features {reprobe:.2f}]; (b) mean target AP@0.5 gain "
            f"{100 * summary['mean_ap50_gain']:+.2f} pts >= +1 over seeds 3-5 "
            f"(adapt lr {setup.adapt_lr:g}, cia gamma {setup.cia_gamma:g}, {setup.adapt_epochs} epochs) | {per_seed}")


# -- 8. unsupervised contract -------------------------------------------------------


def test_criterion_8_target_labels_unused(verdict, tmp_path):
    synthgen.generate_dataset(synthgen.synthetic_sim(), 6, tmp_path / "src", seed=31)
    synthgen.generate_dataset(synthgen.synthetic_real(), 6, tmp_path / "tgt", seed=32)
    shutil.copytree(tmp_path / "tgt", tmp_path / "tgt_nolabels")
    removed = 0
    for f in (tmp_path / "tgt_nolabels").rglob("labels.json"):
        f.unlink()
        removed += 1
    cfg = TrainConfig(epochs=2, pretrain_epochs=1, steps_per_epoch=2, seed=5, val_fraction=0.0)
    source = synthgen.load_dataset(tmp_path / "src", Domain.SOURCE)
    pretrain_source(source, cfg=cfg, val=[], ckpt_dir=tmp_path / "pre")

    def trajectory(tgt_dir, tag):
        # load labels whenever present: the training path itself must ignore them
        target = synthgen.load_dataset(tgt_dir, Domain.TARGET, load_labels=True)
        blobs = []
        for k in (1, 2, 3, 4):
            out = tmp_path / f"{tag}_{k}"
            records = []
            adapt_dusa(tmp_path / "pre", source, target, cfg=cfg, ckpt_dir=out, metrics=records.append,
                       max_steps=k)
            files = sorted(p for p in out.iterdir() if p.is_file())
            blobs.append(([p.name for p in files], [p.read_bytes() for p in files], json.dumps(records)))
        return target, blobs

    with_labels, a = trajectory(tmp_path / "tgt", "lab")
    without, b = trajectory(tmp_path / "tgt_nolabels", "nolab")
    had_labels = all(t.annotations is not None for t in with_labels) and all(t.annotations is None for t in without)
    same = a == b
    verdict(8, had_labels and same and removed == 6,
            f"removed {removed} label files; checkpoints after steps 1-4 and metrics byte-identical: {same}")
