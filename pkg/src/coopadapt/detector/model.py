"""Pillar encoder, intermediate fusion and anchor head."""
from __future__ import annotations

from dataclasses import dataclass, field

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from coopadapt.detector.boxes import AnchorConfig
from coopadapt.detector.grid import N_POINT_FEATURES, GridConfig, PillarBatch


@dataclass(frozen=True)
class DetectorConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    point_channels: int = 32
    channels: int = 64
    fusion: str = "max"
    cls_prior: float = 0.01
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0
    score_threshold: float = 0.3
    nms_iou: float = 0.1

    def to_dict(self):
        return {
            "grid": self.grid.to_dict(), "anchors": self.anchors.to_dict(),
            "point_channels": self.point_channels, "channels": self.channels,
            "fusion": self.fusion, "cls_prior": self.cls_prior,
            "focal_alpha": self.focal_alpha, "focal_gamma": self.focal_gamma,
            "smooth_l1_beta": self.smooth_l1_beta, "score_threshold": self.score_threshold,
            "nms_iou": self.nms_iou,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["grid"] = GridConfig.from_dict(d["grid"])
        d["anchors"] = AnchorConfig.from_dict(d["anchors"])
        return cls(**d)


class PillarEncoder(nn.Module):
    """Shared per-point MLP, max-pool per pillar, scatter, three conv stages."""

    def __init__(self, grid: GridConfig, point_channels=32, channels=64):
        super().__init__()
        self.grid = grid
        self.pfn = nn.Linear(N_POINT_FEATURES, point_channels)
        self.conv1 = nn.Conv2d(point_channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, stride=grid.stride, padding=1)
        self.conv3 = nn.Conv2d(channels, channels, 3, padding=1)

    def scatter(self, batch: PillarBatch) -> torch.Tensor:
        ny, nx = self.grid.pillar_shape
        c = self.pfn.out_features
        x = F.relu(self.pfn(batch.points.to(self.pfn.weight.dtype)))
        x = x * batch.mask.unsqueeze(-1).to(x.dtype)
        pillar_feat = x.max(dim=1).values if x.shape[0] else x.new_zeros(0, c)
        canvas = x.new_zeros(batch.n_clouds, ny * nx, c)
        if pillar_feat.shape[0]:
            flat = batch.coords[:, 0] * nx + batch.coords[:, 1]
            canvas = canvas.index_put((batch.cloud_index, flat), pillar_feat)
        return canvas.view(batch.n_clouds, ny, nx, c).permute(0, 3, 1, 2)

    def forward(self, batch: PillarBatch) -> torch.Tensor:
        x = self.scatter(batch)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return F.relu(self.conv3(x))


class Fusion(nn.Module):
    """Interface: map a stack of one sample's agent features (n_a, C, H, W) to (C, H, W)."""

    def __init__(self, channels):
        super().__init__()
        self.mix = nn.Conv2d(channels, channels, 1)

    def combine(self, stack: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        if stack.dim() != 4:
            raise ValueError(f"expected (agents, C, H, W), got {tuple(stack.shape)}")
        return F.relu(self.mix(self.combine(stack).unsqueeze(0))).squeeze(0)


class MaxFusion(Fusion):
    def combine(self, stack):
        return stack.max(dim=0).values


class MeanFusion(Fusion):
    def combine(self, stack):
        return stack.mean(dim=0)


FUSIONS = {"max": MaxFusion, "mean": MeanFusion}


class DetectionHead(nn.Module):
    def __init__(self, channels, n_anchors, cls_prior=0.01):
        super().__init__()
        self.n_anchors = n_anchors
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.cls = nn.Conv2d(channels, n_anchors, 1)
        self.reg = nn.Conv2d(channels, 7 * n_anchors, 1)
        nn.init.constant_(self.cls.bias, -math.log((1 - cls_prior) / cls_prior))
        nn.init.zeros_(self.reg.bias)

    def forward(self, x):
        """(B, C, H, W) -> cls (B, A, H, W), deltas (B, 7A, H, W)."""
        x = F.relu(self.conv(x))
        return self.cls(x), self.reg(x)


def flatten_head(cls_map: torch.Tensor, reg_map: torch.Tensor):
    """Per-sample (A, H, W) / (7A, H, W) maps to anchor-ordered (N,) and (N, 7)."""
    a, h, w = cls_map.shape
    cls = cls_map.permute(1, 2, 0).reshape(-1)
    reg = reg_map.view(a, 7, h, w).permute(2, 3, 0, 1).reshape(-1, 7)
    return cls, reg


class CooperativeDetector(nn.Module):
    """F(.; theta) -> G(.; phi) -> P(.; beta)."""

    def __init__(self, cfg: DetectorConfig = DetectorConfig()):
        super().__init__()
        if cfg.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {cfg.fusion!r}; available: {sorted(FUSIONS)}")
        self.cfg = cfg
        self.encoder = PillarEncoder(cfg.grid, cfg.point_channels, cfg.channels)
        self.fusion = FUSIONS[cfg.fusion](cfg.channels)
        self.head = DetectionHead(cfg.channels, cfg.anchors.per_cell, cfg.cls_prior)

    def extract(self, batch: PillarBatch) -> torch.Tensor:
        return self.encoder(batch)

    def fuse(self, features: torch.Tensor, group_sizes) -> torch.Tensor:
        """Fuse consecutive runs of agent features, one run per sample."""
        out, start = [], 0
        for n in group_sizes:
            out.append(self.fusion(features[start:start + n]))
            start += n
        return torch.stack(out)

    def predict(self, fused: torch.Tensor):
        return self.head(fused)

    def forward(self, batch: PillarBatch, group_sizes):
        feats = self.extract(batch)
        cls, reg = self.predict(self.fuse(feats, group_sizes))
        return feats, cls, reg
