"""Desk-scale detection metrics: greedy IoU matching, precision/recall/F1, AP."""
from __future__ import annotations

import math

import numpy as np

from ..geometry import boxes_to_array, iou_matrix
from ..suppression import confidence_order


def _as_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 5).astype(float)
    return boxes_to_array(list(boxes))


def greedy_match(pred_boxes, confidence, gt_boxes, iou_threshold, pred_labels=None, gt_labels=None):
    """True-positive flags (in confidence order) and the matched gt of each prediction."""
    pb, gb = _as_array(pred_boxes), _as_array(gt_boxes)
    order = confidence_order(np.asarray(confidence, dtype=float))
    ious = iou_matrix(pb, gb) if len(pb) and len(gb) else np.zeros((len(pb), len(gb)))
    if pred_labels is not None and gt_labels is not None:
        same = np.asarray(pred_labels)[:, None] == np.asarray(gt_labels)[None, :]
        ious = np.where(same, ious, 0.0)
    taken = np.zeros(len(gb), dtype=bool)
    tp = np.zeros(len(pb), dtype=bool)
    assigned = np.full(len(pb), -1, dtype=np.int64)
    for r, i in enumerate(order):
        if not len(gb):
            break
        cand = np.where(taken, -1.0, ious[i])
        g = int(np.argmax(cand))
        if cand[g] >= iou_threshold:
            taken[g] = True
            tp[r] = True
            assigned[i] = g
    return order, tp, assigned


def average_precision(tp_in_order: np.ndarray, num_gt: int) -> float:
    """Area under the all-point interpolated precision/recall curve."""
    if num_gt == 0 or len(tp_in_order) == 0:
        return 0.0
    ctp = np.cumsum(tp_in_order)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp_in_order) + 1)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate(pred_boxes, confidence, gt_boxes, iou_threshold: float = 0.5,
             pred_labels=None, gt_labels=None) -> dict:
    """Precision, recall, F1, AP and mean centre error of the true positives.

    Labels, when both are given, must agree for a match.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    pb, gb = _as_array(pred_boxes), _as_array(gt_boxes)
    order, tp, assigned = greedy_match(pb, confidence, gb, iou_threshold, pred_labels, gt_labels)
    n_tp = int(tp.sum())
    precision = n_tp / len(pb) if len(pb) else 0.0
    recall = n_tp / len(gb) if len(gb) else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    matched = np.flatnonzero(assigned >= 0)
    err = np.hypot(*(pb[matched, :2] - gb[assigned[matched], :2]).T) if len(matched) else np.zeros(0)
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "ap": average_precision(tp, len(gb)),
        "mean_center_error": float(err.mean()) if len(err) else math.nan,
        "num_pred": int(len(pb)),
        "num_gt": int(len(gb)),
        "num_tp": n_tp,
    }


def evaluate_many(frames, iou_threshold: float = 0.5, use_labels: bool = True) -> dict:
    """Pool ``(pred_boxes, confidence, pred_labels, gt_boxes, gt_labels)`` tuples across frames.

    Precision/recall/F1 come from pooled counts; AP ranks all predictions
    jointly.
    """
    tps, confs, n_pred, n_gt, errs = [], [], 0, 0, []
    for pb, conf, pl, gb, gl in frames:
        pb, gb = _as_array(pb), _as_array(gb)
        conf = np.asarray(conf, dtype=float)
        order, tp, assigned = greedy_match(pb, conf, gb, iou_threshold,
                                           pl if use_labels else None, gl if use_labels else None)
        tps.append(tp)
        confs.append(conf[order])
        n_pred += len(pb)
        n_gt += len(gb)
        m = np.flatnonzero(assigned >= 0)
        if len(m):
            errs.append(np.hypot(*(pb[m, :2] - gb[assigned[m], :2]).T))
    tp = np.concatenate(tps) if tps else np.zeros(0, dtype=bool)
    conf = np.concatenate(confs) if confs else np.zeros(0)
    n_tp = int(tp.sum())
    precision = n_tp / n_pred if n_pred else 0.0
    recall = n_tp / n_gt if n_gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    err = np.concatenate(errs) if errs else np.zeros(0)
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "ap": average_precision(tp[np.argsort(-conf, kind="stable")], n_gt),
        "mean_center_error": float(err.mean()) if len(err) else math.nan,
        "num_pred": n_pred,
        "num_gt": n_gt,
        "num_tp": n_tp,
    }
