"""Detection loss (focal + Smooth-L1, no direction term) and confidence maps."""
from __future__ import annotations

import torch
import torch.nn.functional as F


def sigmoid_focal(logits, labels, alpha=0.25, gamma=2.0):
    """Per-anchor focal loss; ``labels`` is 1/0, ignored anchors must be masked by the caller."""
    p = torch.sigmoid(logits)
    t = labels.to(logits.dtype)
    log_p = F.logsigmoid(logits)
    log_1p = F.logsigmoid(-logits)
    pos = -alpha * (1 - p) ** gamma * log_p
    neg = -(1 - alpha) * p ** gamma * log_1p
    return t * pos + (1 - t) * neg


def smooth_l1(diff, beta=1.0):
    a = diff.abs()
    return torch.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)


def detection_loss(cls_logits, box_deltas, labels, reg_targets, alpha=0.25, gamma=2.0, beta=1.0):
    """L_PP for one sample: returns (total, loc, cls).

    ``cls_logits`` (N,), ``box_deltas`` (N, 7) in anchor order; ``labels``
    (N,) in {1, 0, -1}; ``reg_targets`` (N, 7). Both terms are normalized by
    the positive count (at least one).
    """
    labels = torch.as_tensor(labels)
    reg_targets = torch.as_tensor(reg_targets, dtype=box_deltas.dtype)
    pos = labels == 1
    valid = labels >= 0
    norm = max(1, int(pos.sum()))
    cls = sigmoid_focal(cls_logits[valid], labels[valid], alpha, gamma).sum() / norm
    if pos.any():
        loc = smooth_l1(box_deltas[pos] - reg_targets[pos], beta).sum() / norm
    else:
        loc = box_deltas.sum() * 0.0
    return loc + cls, loc, cls


def confidence_map(cls_map: torch.Tensor) -> torch.Tensor:
    """(..., A, H, W) logits -> (..., H, W) max-over-anchors sigmoid scores."""
    return torch.sigmoid(cls_map).amax(dim=-3)
