"""Per-head detection loss and the weighted multi-head total."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..structures import boxes_to_params
from .matching import W_BOX, W_CLS, code_weights, hungarian_match

ALPHA = 0.25
GAMMA = 2.0


@dataclass
class LossConfig:
    w_cls: float = W_CLS
    w_box: float = W_BOX
    cls_weight: float = 2.0
    reg_weight: float = 0.25
    velocity_weight: float = 0.2
    alpha: float = ALPHA
    gamma: float = GAMMA


@dataclass
class Targets:
    labels: np.ndarray
    params: np.ndarray

    @classmethod
    def from_boxes(cls, boxes, labels, use_velocity=True) -> "Targets":
        return cls(np.asarray(labels, dtype=np.int64), boxes_to_params(boxes, use_velocity))

    def __len__(self):
        return len(self.labels)


def head_loss(head, eligible, targets: Targets, cfg: LossConfig | None = None):
    """Focal classification plus L1 regression over the eligible rows of one head.

    Returns ``(loss, match)``. Rows outside ``eligible`` do not enter the loss
    at all, so they receive no gradient from it.
    """
    cfg = cfg or LossConfig()
    eligible = np.asarray(eligible, dtype=np.int64)
    weights = code_weights(head.pred.shape[1], cfg.velocity_weight)
    match = hungarian_match(head.scores, head.pred.data, targets.labels, targets.params, eligible,
                            cfg.w_cls, cfg.w_box, weights)
    norm = max(1.0, float(len(targets)))
    if len(eligible) == 0:
        return T.Tensor(np.zeros(())), match
    pos = {p: g for p, g in match.pairs}
    onehot = np.zeros((len(eligible), head.logits.shape[1]))
    for r, q in enumerate(eligible):
        if q in pos:
            onehot[r, targets.labels[pos[q]]] = 1.0
    cls = T.sigmoid_focal_loss(T.take_rows(head.logits, eligible), onehot, cfg.alpha, cfg.gamma)
    loss = cls * (cfg.cls_weight / norm)
    if len(match):
        reg = T.l1(T.take_rows(head.pred, match.pred_indices), targets.params[match.gt_indices],
                   weights[None, :])
        loss = loss + reg * (cfg.reg_weight / norm)
    return loss, match


def total_loss(result, targets: Targets, lambdas, cfg: LossConfig | None = None):
    """Weighted sum over every head; the last weight scales the final-layer loss.

    Returns ``(total, per_head_values, matches)``.
    """
    lambdas = tuple(lambdas)
    if len(lambdas) != len(result.heads):
        raise ValueError(f"need {len(result.heads)} loss weights, got {len(lambdas)}")
    total = None
    values, matches = [], []
    for lam, head, elig in zip(lambdas, result.heads, result.eligible):
        if head is None:
            values.append(0.0)
            matches.append(None)
            continue
        loss, match = head_loss(head, elig, targets, cfg)
        values.append(float(loss.data))
        matches.append(match)
        if lam:
            term = loss * lam
            total = term if total is None else total + term
    if total is None:
        total = T.Tensor(np.zeros(()))
    return total, values, matches
