"""Rotated BEV IoU, greedy matching and all-point average precision."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from coopadapt import kernels
from coopadapt.core import Box, BoxSet

DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)


def bev_iou(a: Box, b: Box) -> float:
    """IoU of the two boxes' rotated ground-plane footprints."""
    for box in (a, b):
        if box.size[0] * box.size[1] <= 0:
            raise ValueError(f"degenerate box footprint: {box}")
    fa = np.array([[a.center[0], a.center[1], a.size[0], a.size[1], a.yaw]])
    fb = np.array([[b.center[0], b.center[1], b.size[0], b.size[1], b.yaw]])
    return float(kernels.iou_pairs(fa, fb)[0])


@dataclass
class MatchResult:
    scores: np.ndarray
    tp: np.ndarray
    n_gt: int
    matched_gt: np.ndarray = field(default=None)

    @property
    def n_tp(self) -> int:
        return int(self.tp.sum())


def match_frame(preds: BoxSet, gts: BoxSet, iou_thresh: float) -> MatchResult:
    """Greedy matching in descending score order (ties keep insertion order)."""
    n_p, n_g = len(preds), len(gts)
    scores = np.ones(n_p) if preds.scores is None else np.asarray(preds.scores, dtype=np.float64)
    tp = np.zeros(n_p, dtype=bool)
    matched = np.full(n_p, -1, dtype=np.int64)
    if n_p and n_g:
        iou = kernels.iou_matrix(preds.bev(), gts.bev())
        taken = np.zeros(n_g, dtype=bool)
        for i in np.argsort(-scores, kind="stable"):
            row = np.where(taken, -1.0, iou[i])
            j = int(np.argmax(row))
            if row[j] >= iou_thresh and row[j] > 0:
                taken[j] = True
                tp[i] = True
                matched[i] = j
    return MatchResult(scores, tp, n_g, matched)


def average_precision(results, iou_thresh=None) -> float:
    """All-point interpolated AP over predictions pooled from every frame.

    ``iou_thresh`` is informational; the matches already encode it.
    """
    results = list(results)
    if not results:
        raise ValueError("average precision needs at least one frame")
    n_gt = sum(r.n_gt for r in results)
    if n_gt == 0:
        raise ValueError("average precision is undefined without ground-truth boxes")
    scores = np.concatenate([r.scores for r in results]) if results else np.zeros(0)
    tp = np.concatenate([r.tp for r in results]).astype(np.float64)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def in_range(boxes: BoxSet, grid) -> BoxSet:
    """Keep boxes whose centers fall inside the detector grid's x/y range."""
    b = boxes.boxes
    keep = (b[:, 0] >= grid.x_range[0]) & (b[:, 0] < grid.x_range[1]) \
        & (b[:, 1] >= grid.y_range[0]) & (b[:, 1] < grid.y_range[1])
    return boxes.subset(keep)


def evaluate_predictions(preds, gts, thresholds=DEFAULT_THRESHOLDS, names=None) -> dict:
    """AP per threshold for aligned lists of predicted and ground-truth BoxSets."""
    if len(preds) != len(gts):
        raise ValueError("predictions and ground truths must align frame by frame")
    report = {"frames": len(gts), "gts": int(sum(len(g) for g in gts)),
              "preds": int(sum(len(p) for p in preds)), "ap": {}, "matches": {}}
    for t in thresholds:
        res = [match_frame(p, g, t) for p, g in zip(preds, gts)]
        report["ap"][f"{t:g}"] = average_precision(res, t)
        report["matches"][f"{t:g}"] = res
    report["names"] = list(names) if names is not None else [str(k) for k in range(len(gts))]
    return report


def evaluate(model, samples, anchors, thresholds=DEFAULT_THRESHOLDS) -> dict:
    """Frozen inference on labeled samples followed by AP at each threshold."""
    from coopadapt.pipeline import detect, prepare

    prepared = [prepare(s) for s in samples]
    if any(p.labels is None for p in prepared):
        missing = [p.name for p in prepared if p.labels is None]
        raise ValueError(
            "evaluation requires ground-truth labels (adaptation does not); "
            f"frames without labels.json: {missing[:5]}")
    grid = model.cfg.grid
    gts = [in_range(p.labels, grid) for p in prepared]
    preds = detect(model, prepared, anchors)
    return evaluate_predictions(preds, gts, thresholds, [p.name for p in prepared])


def write_report(report: dict, path, checkpoint="", dataset="", csv_path=None):
    out = {
        "checkpoint": str(checkpoint),
        "dataset": str(dataset),
        "ap": report["ap"],
        "frames": report["frames"],
        "gts": report["gts"],
        "preds": report["preds"],
    }
    Path(path).write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "frame", "score", "tp", "gt_index"])
            for t, res in report["matches"].items():
                for name, r in zip(report["names"], res):
                    for s, hit, g in zip(r.scores, r.tp, r.matched_gt):
                        w.writerow([t, name, f"{s:.6f}", int(hit), int(g)])
    return out
