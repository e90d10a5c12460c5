"""Set-based assignment of predictions to ground truth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..structures import VX, boxes_to_params

W_CLS = 2.0
W_BOX = 0.25
VELOCITY_WEIGHT = 0.2


def code_weights(dim: int, velocity_weight: float = VELOCITY_WEIGHT) -> np.ndarray:
    w = np.ones(dim)
    w[VX:] = velocity_weight
    return w


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple  # (prediction index, gt index), sorted by prediction index

    @property
    def pred_indices(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)

    def __len__(self):
        return len(self.pairs)


def match_cost(pred_scores, pred_params, gt_labels, gt_params, w_cls=W_CLS, w_box=W_BOX, weights=None):
    """``(n_pred, n_gt)`` cost: class term on the gt-class score plus weighted L1 on parameters."""
    pred_scores = np.asarray(pred_scores, dtype=float)
    pred_params = np.asarray(pred_params, dtype=float)
    gt_params = np.asarray(gt_params, dtype=float)
    if weights is None:
        weights = code_weights(pred_params.shape[1])
    cls = 1.0 - pred_scores[:, np.asarray(gt_labels, dtype=np.int64)]
    l1 = (np.abs(pred_params[:, None, :] - gt_params[None, :, :]) * weights).sum(-1)
    return w_cls * cls + w_box * l1


def hungarian_match(pred_scores, pred_params, gt_labels, gt_params, eligible=None,
                    w_cls=W_CLS, w_box=W_BOX, weights=None) -> MatchResult:
    """Minimum-cost one-to-one assignment restricted to ``eligible`` predictions."""
    n_pred = len(pred_scores)
    eligible = np.arange(n_pred) if eligible is None else np.asarray(eligible, dtype=np.int64)
    if len(gt_labels) == 0 or len(eligible) == 0:
        return MatchResult(())
    cost = match_cost(np.asarray(pred_scores)[eligible], np.asarray(pred_params)[eligible],
                      gt_labels, gt_params, w_cls, w_box, weights)
    # non-finite predictions still get matched; the loss then reports them
    cost = np.nan_to_num(cost, nan=1e30, posinf=1e30, neginf=-1e30)
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted((int(eligible[r]), int(c)) for r, c in zip(rows, cols))
    return MatchResult(tuple(pairs))


def match_detections(preds, gts, gt_labels, eligible=None, use_velocity=True, **kw) -> MatchResult:
    """Convenience wrapper over :class:`Detection` lists and gt box lists."""
    scores = np.array([d.class_scores for d in preds], dtype=float).reshape(len(preds), -1)
    pp = boxes_to_params([d.box for d in preds], use_velocity)
    gp = boxes_to_params(gts, use_velocity)
    return hungarian_match(scores, pp, gt_labels, gp, eligible, **kw)
