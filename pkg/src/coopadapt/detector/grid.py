"""BEV grid geometry, pillarization and the unified positional encoding."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from coopadapt.core import PointCloud

N_POINT_FEATURES = 7  # x, y, z, intensity, dx, dy, dz to pillar center


@dataclass(frozen=True)
class GridConfig:
    """Ego-frame ground-plane grid shared by every agent of a sample."""

    x_range: tuple = (-40.0, 40.0)
    y_range: tuple = (-40.0, 40.0)
    z_range: tuple = (-3.0, 1.0)
    cell: float = 0.8
    stride: int = 2
    max_points: int = 32

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"{name} must be increasing, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.cell <= 0 or self.stride < 1:
            raise ValueError("cell must be positive and stride >= 1")
        for name in ("x_range", "y_range"):
            lo, hi = getattr(self, name)
            n = (hi - lo) / self.cell
            if abs(n - round(n)) > 1e-6:
                raise ValueError(f"{name} extent is not a multiple of the cell size")
            if round(n) % self.stride:
                raise ValueError(f"{name} cell count {round(n)} is not divisible by stride")

    @property
    def pillar_shape(self):
        """(rows along y, cols along x) of the pillar canvas."""
        ny = int(round((self.y_range[1] - self.y_range[0]) / self.cell))
        nx = int(round((self.x_range[1] - self.x_range[0]) / self.cell))
        return ny, nx

    @property
    def feature_shape(self):
        ny, nx = self.pillar_shape
        return ny // self.stride, nx // self.stride

    @property
    def feature_cell(self) -> float:
        return self.cell * self.stride

    def feature_centers(self):
        """(H, W) arrays of x and y at feature-cell centers."""
        h, w = self.feature_shape
        fc = self.feature_cell
        xs = self.x_range[0] + (np.arange(w) + 0.5) * fc
        ys = self.y_range[0] + (np.arange(h) + 0.5) * fc
        return np.meshgrid(xs, ys)

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k in ("x_range", "y_range", "z_range"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("x_range", "y_range", "z_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def cell_index(values: np.ndarray, lo: float, cell: float) -> np.ndarray:
    """Half-open cell index: a value on a boundary belongs to the higher cell."""
    idx = np.floor((values - lo) / cell).astype(np.int64)
    # guard against rounding: enforce lo + idx*cell <= v < lo + (idx+1)*cell
    idx = np.where(lo + (idx + 1) * cell <= values, idx + 1, idx)
    idx = np.where(lo + idx * cell > values, idx - 1, idx)
    return idx


@dataclass
class Pillars:
    """Padded per-pillar point features for one cloud."""

    points: np.ndarray  # (P, M, 7) float32
    mask: np.ndarray  # (P, M) bool
    coords: np.ndarray  # (P, 2) int64: row (y), col (x)

    @property
    def n_pillars(self) -> int:
        return self.coords.shape[0]


def pillarize(cloud: PointCloud, grid: GridConfig, rng: Optional[np.random.Generator] = None) -> Pillars:
    """Bucket a cloud into pillars; drop out-of-range points, cap points per pillar.

    Over-full pillars keep a random subset when ``rng`` is given, otherwise
    the first ``max_points`` points in input order.
    """
    pts = cloud.points
    m = grid.max_points
    if pts.shape[0] == 0:
        return Pillars(np.zeros((0, m, N_POINT_FEATURES), np.float32),
                       np.zeros((0, m), bool), np.zeros((0, 2), np.int64))
    ix = cell_index(pts[:, 0], grid.x_range[0], grid.cell)
    iy = cell_index(pts[:, 1], grid.y_range[0], grid.cell)
    ny, nx = grid.pillar_shape
    keep = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    keep &= (pts[:, 2] >= grid.z_range[0]) & (pts[:, 2] < grid.z_range[1])
    pts, ix, iy = pts[keep], ix[keep], iy[keep]
    if pts.shape[0] == 0:
        return pillarize(PointCloud.empty(), grid)
    flat = iy * nx + ix
    tiebreak = rng.random(flat.shape[0]) if rng is not None else np.arange(flat.shape[0])
    order = np.lexsort((tiebreak, flat))
    flat_sorted = flat[order]
    uniq, start, counts = np.unique(flat_sorted, return_index=True, return_counts=True)
    pillar_of = np.repeat(np.arange(uniq.size), counts)
    rank = np.arange(flat_sorted.size) - np.repeat(start, counts)
    sel = rank < m
    src = order[sel]
    p_idx, r_idx = pillar_of[sel], rank[sel]
    coords = np.stack([uniq // nx, uniq % nx], axis=1)
    cx = grid.x_range[0] + (coords[:, 1] + 0.5) * grid.cell
    cy = grid.y_range[0] + (coords[:, 0] + 0.5) * grid.cell
    cz = 0.5 * (grid.z_range[0] + grid.z_range[1])
    feats = np.zeros((uniq.size, m, N_POINT_FEATURES), np.float32)
    p = pts[src]
    feats[p_idx, r_idx, :4] = p
    feats[p_idx, r_idx, 4] = p[:, 0] - cx[p_idx]
    feats[p_idx, r_idx, 5] = p[:, 1] - cy[p_idx]
    feats[p_idx, r_idx, 6] = p[:, 2] - cz
    mask = np.zeros((uniq.size, m), bool)
    mask[p_idx, r_idx] = True
    return Pillars(feats, mask, coords)


@dataclass
class PillarBatch:
    """Pillars of several clouds concatenated, with the owning cloud index."""

    points: torch.Tensor
    mask: torch.Tensor
    coords: torch.Tensor
    cloud_index: torch.Tensor
    n_clouds: int


def collate_pillars(pillars: list, dtype=torch.float32) -> PillarBatch:
    pts = np.concatenate([p.points for p in pillars]) if pillars else np.zeros((0, 1, N_POINT_FEATURES))
    mask = np.concatenate([p.mask for p in pillars]) if pillars else np.zeros((0, 1), bool)
    coords = np.concatenate([p.coords for p in pillars]) if pillars else np.zeros((0, 2), np.int64)
    owner = np.concatenate([np.full(p.n_pillars, k) for k, p in enumerate(pillars)]) if pillars \
        else np.zeros(0, np.int64)
    return PillarBatch(torch.from_numpy(pts).to(dtype), torch.from_numpy(mask),
                       torch.from_numpy(coords), torch.from_numpy(owner.astype(np.int64)),
                       len(pillars))


# -- positional encoding ------------------------------------------------------

PE_MODES = {"offset": 2, "distance": 1}


def positional_encoding_at(x, y, grid: GridConfig, mode: str = "offset"):
    """Normalized position of ego-frame ground coordinates relative to the ego origin."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x_max, y_max = grid.x_range[1], grid.y_range[1]
    if mode == "offset":
        return np.stack([x / x_max, y / y_max])
    if mode == "distance":
        return np.hypot(x, y)[None] / math.hypot(x_max, y_max)
    raise ValueError(f"unknown positional encoding mode {mode!r}")


def positional_channels(grid: GridConfig, mode: str = "offset", dtype=torch.float32) -> torch.Tensor:
    """(k, H, W) channels at feature-cell centers; k = 2 for offsets, 1 for distance."""
    xs, ys = grid.feature_centers()
    return torch.as_tensor(positional_encoding_at(xs, ys, grid, mode), dtype=dtype)


def append_positional_encoding(features: torch.Tensor, grid: GridConfig, mode: str = "offset") -> torch.Tensor:
    """Concatenate the grid's positional channels to (..., C, H, W) features."""
    pe = positional_channels(grid, mode, features.dtype).to(features.device)
    pe = pe.expand(*features.shape[:-3], *pe.shape)
    return torch.cat([features, pe], dim=-3)
