"""Sample preparation, augmentation, batching and frozen inference."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from coopadapt.core import AgentType, BoxSet, CollaborativeSample, Domain, PointCloud, wrap_angle
from coopadapt.detector.boxes import decode_boxes
from coopadapt.detector.grid import GridConfig, collate_pillars, pillarize
from coopadapt.detector.model import CooperativeDetector, flatten_head


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    rotation_deg: float = 45.0
    flip: bool = True
    scale: tuple = (0.95, 1.05)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["scale"] = list(self.scale)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["scale"] = tuple(d.get("scale", (0.95, 1.05)))
        return cls(**d)


@dataclass
class PreparedSample:
    """A sample in its ego frame: ego cloud first, labels as ego-frame boxes."""

    clouds: list
    agent_types: list
    labels: Optional[BoxSet]
    domain: Domain
    name: str = ""

    @property
    def n_agents(self):
        return len(self.clouds)

    def with_labels(self, labels: Optional[BoxSet]) -> "PreparedSample":
        return dataclasses.replace(self, labels=labels)


def prepare(sample: CollaborativeSample) -> PreparedSample:
    clouds, types, labels = sample.ego_view()
    return PreparedSample(clouds, types, labels, sample.domain, sample.name)


def augment(ps: PreparedSample, rng: np.random.Generator, cfg: AugmentConfig) -> PreparedSample:
    """Global yaw rotation, flip about the x axis and scaling, shared by all agents.

    The same number of draws is taken whether or not a flip happens, so the
    stream position depends only on the number of calls.
    """
    angle = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    flip = bool(rng.random() < 0.5) and cfg.flip
    scale = rng.uniform(*cfg.scale)
    if not cfg.enabled:
        return ps
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def tf_points(xyz):
        out = xyz @ rot.T
        if flip:
            out[:, 1] = -out[:, 1]
        return out * scale

    clouds = []
    for cloud in ps.clouds:
        pts = cloud.points.copy()
        pts[:, :3] = tf_points(pts[:, :3])
        clouds.append(PointCloud(pts))
    labels = ps.labels
    if labels is not None:
        b = labels.boxes.copy()
        if len(b):
            b[:, :3] = tf_points(b[:, :3])
            yaw = b[:, 6] + angle
            b[:, 6] = wrap_angle(-yaw if flip else yaw)
            b[:, 3:6] *= scale
        labels = BoxSet(b, None if labels.scores is None else labels.scores.copy())
    return dataclasses.replace(ps, clouds=clouds, labels=labels)


def build_batch(samples, grid: GridConfig, rng: Optional[np.random.Generator] = None, dtype=torch.float32):
    """Pillarize every agent of every sample; returns (PillarBatch, group sizes)."""
    pillars = [pillarize(c, grid, rng) for s in samples for c in s.clouds]
    return collate_pillars(pillars, dtype), [s.n_agents for s in samples]


def ego_indices(group_sizes):
    out, start = [], 0
    for n in group_sizes:
        out.append(start)
        start += n
    return out


def agent_labels(ps: PreparedSample):
    return [AgentType(t).index for t in ps.agent_types]


@torch.no_grad()
def detect(model: CooperativeDetector, samples, anchors, score_threshold=None, nms_iou=None):
    """Frozen inference; one BoxSet (ego frame, with scores) per sample."""
    cfg = model.cfg
    thr = cfg.score_threshold if score_threshold is None else score_threshold
    iou = cfg.nms_iou if nms_iou is None else nms_iou
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    try:
        for ps in samples:
            batch, groups = build_batch([ps], cfg.grid, None, dtype)
            _, cls, reg = model(batch, groups)
            c, r = flatten_head(cls[0], reg[0])
            out.append(decode_boxes(c.double().numpy(), r.double().numpy(), anchors, thr, iou))
    finally:
        model.train(was_training)
    return out
