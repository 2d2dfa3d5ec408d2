"""Sim/real adapter on ego features and inter-agent adapter on target agents.

The sim/real adapter weights the ego feature map with a learnable spatial
selection map, average-pools it into one vector and classifies the domain.
The inter-agent adapter classifies the agent type of every BEV cell and
weights the per-cell loss by the minimum confidence over a sample's agents.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

SOURCE_LABEL = 0
TARGET_LABEL = 1


@dataclass(frozen=True)
class AdapterConfig:
    lsa_enabled: bool = True
    use_lfs: bool = True
    full_map: bool = False
    cia_enabled: bool = True
    use_conf: bool = True
    sim_hidden: int = 64
    agent_hidden: int = 64
    dropout: float = 0.5
    n_agent_types: int = 2

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def lsa_select(features: torch.Tensor, m_loc: torch.Tensor) -> torch.Tensor:
    """Element-wise reweighting; an (H, W) map broadcasts over channels."""
    if tuple(m_loc.shape) != tuple(features.shape[-m_loc.dim():]):
        raise ValueError(f"selection map {tuple(m_loc.shape)} does not match features {tuple(features.shape)}")
    return features * m_loc


def lsa_pool(weighted: torch.Tensor) -> torch.Tensor:
    """Global average over the spatial dims: (..., C, H, W) -> (..., C)."""
    return weighted.mean(dim=(-2, -1))


def domain_bce(logits: torch.Tensor, domains) -> torch.Tensor:
    """Mean binary cross-entropy against domain labels (0 source, 1 target)."""
    if logits.numel() == 0:
        raise ValueError("domain discrimination needs a non-empty batch")
    d = torch.as_tensor(domains, dtype=logits.dtype, device=logits.device).reshape(logits.shape)
    return F.binary_cross_entropy_with_logits(logits, d)


class SimRealDiscriminator(nn.Sequential):
    def __init__(self, in_features, hidden=64, dropout=0.5):
        super().__init__(
            nn.Linear(in_features, hidden), nn.ReLU(), nn.Dropout(dropout),
            nn.Linear(hidden, hidden), nn.ReLU(), nn.Dropout(dropout),
            nn.Linear(hidden, 1),
        )

    def forward(self, x):
        return super().forward(x).squeeze(-1)


class LocationSimRealAdapter(nn.Module):
    """Learnable selection map + pooled sim/real discriminator."""

    def __init__(self, in_channels, feature_shape, use_lfs=True, full_map=False, hidden=64, dropout=0.5):
        super().__init__()
        shape = (in_channels, *feature_shape) if full_map else tuple(feature_shape)
        if use_lfs:
            self.m_loc = nn.Parameter(torch.ones(shape))
        else:
            self.register_buffer("m_loc", torch.ones(shape), persistent=False)
        self.disc = SimRealDiscriminator(in_channels, hidden, dropout)

    def global_feature(self, encoded: torch.Tensor) -> torch.Tensor:
        return lsa_pool(lsa_select(encoded, self.m_loc))

    def forward(self, encoded: torch.Tensor) -> torch.Tensor:
        return self.disc(self.global_feature(encoded))


def lsa_loss(encoded_ego: torch.Tensor, domains, adapter: LocationSimRealAdapter) -> torch.Tensor:
    """Sim/real BCE over a batch of (B, C+k, H, W) ego feature maps."""
    if encoded_ego.shape[0] == 0:
        raise ValueError("sim/real loss needs a non-empty batch")
    return domain_bce(adapter(encoded_ego), domains)


class InterAgentDiscriminator(nn.Sequential):
    def __init__(self, in_channels, hidden=64, n_types=2):
        super().__init__(
            nn.Conv2d(in_channels, hidden, 1), nn.ReLU(),
            nn.Conv2d(hidden, hidden, 1), nn.ReLU(),
            nn.Conv2d(hidden, n_types, 1),
        )


def cia_confidence_min(conf_maps) -> torch.Tensor:
    """Element-wise minimum over a sample's agent confidence maps."""
    if isinstance(conf_maps, (list, tuple)):
        if not conf_maps:
            raise ValueError("need at least one confidence map")
        shapes = {tuple(c.shape) for c in conf_maps}
        if len(shapes) != 1:
            raise ValueError(f"confidence maps differ in shape: {sorted(shapes)}")
        conf_maps = torch.stack(list(conf_maps))
    if conf_maps.shape[0] == 0:
        raise ValueError("need at least one confidence map")
    return conf_maps.amin(dim=0)


def weighted_agent_ce(logits: torch.Tensor, labels, m_conf: torch.Tensor) -> torch.Tensor:
    """Per-sample term: sum over agents and cells of M_conf * CE, divided by n_a.

    ``logits`` is (n_a, K, H, W); ``labels`` has one agent-type index per agent.
    """
    n_a, _, h, w = logits.shape
    if tuple(m_conf.shape) != (h, w):
        raise ValueError(f"M_conf shape {tuple(m_conf.shape)} does not match logits grid {(h, w)}")
    target = torch.as_tensor(labels, device=logits.device).view(n_a, 1, 1).expand(n_a, h, w)
    ce = F.cross_entropy(logits, target, reduction="none")
    return (ce * m_conf.to(ce.dtype)).sum() / n_a


def cia_loss(samples, disc: InterAgentDiscriminator, use_conf=True) -> torch.Tensor:
    """Inter-agent loss averaged over target samples.

    ``samples`` is a list of (encoded (n_a, C+k, H, W), agent labels, M_conf).
    With ``use_conf=False`` every cell gets weight one.
    """
    if not samples:
        raise ValueError("inter-agent loss needs at least one target sample")
    total = 0.0
    for encoded, labels, m_conf in samples:
        weights = m_conf.detach() if use_conf else torch.ones_like(m_conf)
        total = total + weighted_agent_ce(disc(encoded), labels, weights)
    return total / len(samples)


class DomainAdapters(nn.Module):
    """Both adapters; either may be absent per configuration."""

    def __init__(self, cfg: AdapterConfig, in_channels, feature_shape):
        super().__init__()
        self.cfg = cfg
        self.lsa = LocationSimRealAdapter(in_channels, feature_shape, cfg.use_lfs, cfg.full_map,
                                          cfg.sim_hidden, cfg.dropout) if cfg.lsa_enabled else None
        self.cia = InterAgentDiscriminator(in_channels, cfg.agent_hidden, cfg.n_agent_types) \
            if cfg.cia_enabled else None
