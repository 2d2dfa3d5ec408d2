"""Anchors, residual box coding, target assignment, decoding and rotated NMS."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from coopadapt import kernels
from coopadapt.core import BoxSet
from coopadapt.detector.grid import GridConfig


@dataclass(frozen=True)
class AnchorConfig:
    size: tuple = (4.5, 1.9, 1.6)
    z: float = -1.0
    yaws: tuple = (0.0, np.pi / 2)
    pos_iou: float = 0.6
    neg_iou: float = 0.45

    @property
    def per_cell(self) -> int:
        return len(self.yaws)

    def to_dict(self):
        return {"size": list(self.size), "z": self.z, "yaws": list(self.yaws),
                "pos_iou": self.pos_iou, "neg_iou": self.neg_iou}

    @classmethod
    def from_dict(cls, d):
        return cls(size=tuple(d["size"]), z=d["z"], yaws=tuple(d["yaws"]),
                   pos_iou=d["pos_iou"], neg_iou=d["neg_iou"])


def make_anchors(grid: GridConfig, cfg: AnchorConfig) -> np.ndarray:
    """(H * W * A, 7) anchors ordered row, column, anchor."""
    xs, ys = grid.feature_centers()
    h, w = xs.shape
    a = cfg.per_cell
    out = np.zeros((h, w, a, 7))
    out[..., 0] = xs[..., None]
    out[..., 1] = ys[..., None]
    out[..., 2] = cfg.z
    out[..., 3:6] = cfg.size
    out[..., 6] = np.asarray(cfg.yaws)
    return out.reshape(-1, 7)


def _half_turn(a):
    """Wrap an angle difference into [-pi/2, pi/2)."""
    return np.mod(a + np.pi / 2, np.pi) - np.pi / 2


def encode(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Residuals of boxes relative to aligned anchors.

    Heading is encoded as the sine of the difference taken modulo pi, so a
    box and its 180-degree flip share one target.
    """
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    out = np.empty_like(boxes, dtype=np.float64)
    out[:, 0] = (boxes[:, 0] - anchors[:, 0]) / diag
    out[:, 1] = (boxes[:, 1] - anchors[:, 1]) / diag
    out[:, 2] = (boxes[:, 2] - anchors[:, 2]) / anchors[:, 5]
    out[:, 3:6] = np.log(boxes[:, 3:6] / anchors[:, 3:6])
    out[:, 6] = np.sin(_half_turn(boxes[:, 6] - anchors[:, 6]))
    return out


def decode(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    out = np.empty_like(anchors, dtype=np.float64)
    out[:, 0] = deltas[:, 0] * diag + anchors[:, 0]
    out[:, 1] = deltas[:, 1] * diag + anchors[:, 1]
    out[:, 2] = deltas[:, 2] * anchors[:, 5] + anchors[:, 2]
    out[:, 3:6] = np.exp(np.clip(deltas[:, 3:6], -5, 5)) * anchors[:, 3:6]
    yaw = anchors[:, 6] + np.arcsin(np.clip(deltas[:, 6], -1.0, 1.0))
    out[:, 6] = np.mod(yaw + np.pi, 2 * np.pi) - np.pi
    return out


@dataclass
class Targets:
    labels: np.ndarray  # (N,) 1 positive, 0 negative, -1 ignored
    reg: np.ndarray  # (N, 7) residual targets, zero where not positive

    @property
    def n_pos(self) -> int:
        return int((self.labels == 1).sum())


def assign_targets(anchors: np.ndarray, gt: BoxSet, cfg: AnchorConfig) -> Targets:
    """IoU-threshold anchor matching; each box also claims its best anchor."""
    n = anchors.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    reg = np.zeros((n, 7))
    if len(gt) == 0:
        return Targets(labels, reg)
    iou = kernels.iou_matrix(anchors[:, [0, 1, 3, 4, 6]], gt.bev())
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best_gt]
    labels[(best_iou >= cfg.neg_iou) & (best_iou < cfg.pos_iou)] = -1
    pos = best_iou >= cfg.pos_iou
    col_best = iou.max(axis=0)
    for j in np.nonzero(col_best > 0)[0]:
        forced = np.nonzero(iou[:, j] == col_best[j])[0]
        pos[forced] = True
        best_gt[forced] = j
    labels[pos] = 1
    reg[pos] = encode(gt.boxes[best_gt[pos]], anchors[pos])
    return Targets(labels, reg)


def nms(bev: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy rotated NMS; returns kept indices in descending score order."""
    order = np.argsort(-scores, kind="stable")
    if order.size == 0:
        return order
    iou = kernels.iou_matrix(bev[order], bev[order])
    suppressed = np.zeros(order.size, dtype=bool)
    keep = []
    for k in range(order.size):
        if suppressed[k]:
            continue
        keep.append(order[k])
        suppressed |= iou[k] > iou_threshold
    return np.asarray(keep, dtype=np.int64)


def decode_boxes(cls_logits: np.ndarray, box_deltas: np.ndarray, anchors: np.ndarray,
                 score_threshold: float, nms_iou: float, pre_nms: int = 500) -> BoxSet:
    """Threshold sigmoid scores, invert the residual coding and apply NMS.

    ``cls_logits`` is (N,) and ``box_deltas`` (N, 7), aligned with ``anchors``.
    """
    scores = 1.0 / (1.0 + np.exp(-np.clip(np.asarray(cls_logits, dtype=np.float64), -500, 500)))
    cand = np.nonzero(scores >= score_threshold)[0]
    if cand.size > pre_nms:
        top = np.argsort(-scores[cand], kind="stable")[:pre_nms]
        cand = np.sort(cand[top])
    if cand.size == 0:
        return BoxSet(np.zeros((0, 7)), np.zeros(0))
    boxes = decode(np.asarray(box_deltas, dtype=np.float64)[cand], anchors[cand])
    keep = nms(boxes[:, [0, 1, 3, 4, 6]], scores[cand], nms_iou)
    return BoxSet(boxes[keep], scores[cand][keep])
