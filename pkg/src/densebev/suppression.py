"""BEV non-maximum suppression and the suppression attention mask.

Greedy NMS visits candidates in descending confidence (ties broken by
ascending ``source_index``) and keeps a candidate iff its BEV IoU with every
already-kept candidate is at most ``tau``. Suppressed queries are not removed
from the query tensor; they are tracked in an :class:`AttentionMask`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numba import njit

from .geometry import OrientedBoxBEV, boxes_to_array, corners_nb, pair_iou_nb

NMS_MODES = ("plain", "class_aware", "scale", "class_aware+scale")

# tau defaults by grid size: dense grids use 0.1, the 50x50 grid uses 0.2
TAU_DENSE = 0.1
TAU_SPARSE = 0.2


def default_tau(grid_cells_per_side: int) -> float:
    return TAU_DENSE if grid_cells_per_side >= 150 else TAU_SPARSE


@dataclass(frozen=True)
class Detection:
    box: OrientedBoxBEV
    class_scores: tuple
    confidence: float | None = None
    source_index: int = 0

    def __post_init__(self):
        scores = tuple(float(s) for s in self.class_scores)
        if any(not 0.0 <= s <= 1.0 for s in scores):
            raise ValueError(f"class scores must lie in [0, 1], got {scores}")
        object.__setattr__(self, "class_scores", scores)
        best = max(scores) if scores else 0.0
        if self.confidence is None:
            object.__setattr__(self, "confidence", best)
        elif abs(self.confidence - best) > 1e-9:
            raise ValueError(f"confidence {self.confidence} != max class score {best}")

    @property
    def label(self) -> int:
        return int(np.argmax(self.class_scores)) if self.class_scores else 0


@dataclass(frozen=True, eq=False)
class AttentionMask:
    """Binary ``n_q x n_q`` suppression matrix; ``True`` means attention is blocked."""

    bits: np.ndarray = field(repr=False)

    @classmethod
    def empty(cls, n_q: int) -> "AttentionMask":
        return cls(np.zeros((n_q, n_q), dtype=bool))

    @property
    def n_q(self) -> int:
        return self.bits.shape[0]

    @property
    def suppressed(self) -> np.ndarray:
        return np.diag(self.bits).copy()

    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(~np.diag(self.bits))

    def suppressed_indices(self) -> np.ndarray:
        return np.flatnonzero(np.diag(self.bits))

    def additive(self, value: float = -1e9) -> np.ndarray:
        return np.where(self.bits, value, 0.0)

    def __eq__(self, other):
        return isinstance(other, AttentionMask) and np.array_equal(self.bits, other.bits)


# ---------------------------------------------------------------------------
# ordering


def confidence_order(confidence: np.ndarray, source_index: np.ndarray | None = None) -> np.ndarray:
    """Positions sorted by descending confidence, ties by ascending source index."""
    confidence = np.asarray(confidence, dtype=float)
    if source_index is None:
        source_index = np.arange(len(confidence))
    return np.lexsort((np.asarray(source_index), -confidence))


def _unpack(dets: Sequence[Detection]):
    boxes = boxes_to_array([d.box for d in dets])
    conf = np.array([d.confidence for d in dets], dtype=float)
    src = np.array([d.source_index for d in dets], dtype=np.int64)
    return boxes, conf, src


# ---------------------------------------------------------------------------
# NMS


@njit(cache=True)
def _greedy_nms_nb(boxes, order, tau, use_heuristic, groups):
    n = boxes.shape[0]
    corners = corners_nb(boxes)
    area = boxes[:, 2] * boxes[:, 3]
    radius = np.empty(n)
    for i in range(n):
        radius[i] = 0.5 * math.sqrt(boxes[i, 2] ** 2 + boxes[i, 3] ** 2)
    kept = np.empty(n, dtype=np.int64)
    nk = 0
    for oi in range(n):
        i = order[oi]
        keep = True
        for kk in range(nk):
            j = kept[kk]
            if groups[i] != groups[j]:
                continue
            if use_heuristic:
                dx = boxes[i, 0] - boxes[j, 0]
                dy = boxes[i, 1] - boxes[j, 1]
                r = radius[i] + radius[j]
                if dx * dx + dy * dy > r * r:
                    continue
            if pair_iou_nb(corners[i], corners[j], area[i], area[j]) > tau:
                keep = False
                break
        if keep:
            kept[nk] = i
            nk += 1
    return np.sort(kept[:nk])


def _check_tau(tau: float):
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"IoU threshold must lie in [0, 1], got {tau}")


def nms_arrays(
    boxes: np.ndarray,
    confidence: np.ndarray,
    tau: float,
    source_index: np.ndarray | None = None,
    groups: np.ndarray | None = None,
    heuristics: bool = True,
) -> np.ndarray:
    """Greedy BEV-NMS on ``(N, 5)`` box rows; returns sorted kept positions.

    ``groups`` restricts suppression to candidates sharing a group id
    (class-aware NMS). ``heuristics`` enables the circumscribed-circle test
    that skips the exact IoU for pairs that cannot overlap.
    """
    _check_tau(tau)
    boxes = np.ascontiguousarray(np.asarray(boxes, dtype=float).reshape(-1, 5))
    n = boxes.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = confidence_order(confidence, source_index).astype(np.int64)
    if groups is None:
        groups = np.zeros(n, dtype=np.int64)
    return _greedy_nms_nb(boxes, order, float(tau), bool(heuristics), np.asarray(groups, dtype=np.int64))


def bev_nms(dets: Sequence[Detection], tau: float, heuristics: bool = True) -> np.ndarray:
    """Survivor positions (sorted) of greedy BEV-NMS over ``dets``."""
    _check_tau(tau)
    if len(dets) == 0:
        return np.zeros(0, dtype=np.int64)
    boxes, conf, src = _unpack(dets)
    return nms_arrays(boxes, conf, tau, src, heuristics=heuristics)


def bev_nms_class_aware(
    dets: Sequence[Detection],
    tau: float,
    mode: str = "plain",
    scale_factors: Mapping[int, float] | Sequence[float] | None = None,
    heuristics: bool = True,
) -> np.ndarray:
    """NMS variants: class-aware grouping and/or per-class box scaling."""
    if mode not in NMS_MODES:
        raise ValueError(f"unknown NMS mode {mode!r}; expected one of {NMS_MODES}")
    _check_tau(tau)
    if len(dets) == 0:
        return np.zeros(0, dtype=np.int64)
    boxes, conf, src = _unpack(dets)
    labels = np.array([d.label for d in dets], dtype=np.int64)
    groups = labels if "class_aware" in mode else None
    if "scale" in mode:
        if scale_factors is None:
            raise ValueError("scale mode requires scale_factors")
        factors = np.empty(len(dets))
        for i, c in enumerate(labels):
            try:
                f = scale_factors[int(c)]
            except (KeyError, IndexError):
                raise ValueError(f"missing scale factor for class {int(c)}") from None
            if not f > 0:
                raise ValueError(f"scale factor for class {int(c)} must be positive, got {f}")
            factors[i] = f
        boxes = boxes.copy()
        boxes[:, 2] *= factors
        boxes[:, 3] *= factors
    return nms_arrays(boxes, conf, tau, src, groups=groups, heuristics=heuristics)


def pair_prune_heuristic(a: OrientedBoxBEV, b: OrientedBoxBEV) -> bool:
    """True when the boxes' circumscribed circles are disjoint, so IoU is 0."""
    d = math.hypot(a.cx - b.cx, a.cy - b.cy)
    return d > a.half_diagonal + b.half_diagonal


# ---------------------------------------------------------------------------
# attention mask


def build_attention_mask(keep, n_q: int) -> AttentionMask:
    """``bits[k, l] = 1`` iff ``k`` or ``l`` is outside the keep set."""
    keep = np.asarray(keep, dtype=np.int64).reshape(-1)
    if keep.size and (keep.min() < 0 or keep.max() >= n_q):
        raise IndexError(f"keep index out of range for n_q={n_q}")
    kept = np.zeros(n_q, dtype=bool)
    kept[keep] = True
    return AttentionMask(~(kept[:, None] & kept[None, :]))


def merge_mask(old: AttentionMask, new_keep) -> AttentionMask:
    new = build_attention_mask(new_keep, old.n_q)
    if new.bits.shape != old.bits.shape:
        raise ValueError("mask dimension mismatch")
    return AttentionMask(old.bits | new.bits)


def nms_on_active(
    boxes: np.ndarray,
    confidence: np.ndarray,
    mask: AttentionMask,
    tau: float,
    participants: np.ndarray | None = None,
    heuristics: bool = True,
) -> AttentionMask:
    """One suppression block: NMS over the currently unsuppressed queries.

    ``participants`` (bool, length n_q) limits which queries take part in
    NMS at all; non-participants are never suppressed and never suppress.
    """
    n_q = mask.n_q
    active = ~mask.suppressed
    if participants is None:
        participants = np.ones(n_q, dtype=bool)
    cand = np.flatnonzero(active & participants)
    keep_local = nms_arrays(boxes[cand], confidence[cand], tau, source_index=cand, heuristics=heuristics)
    keep = np.concatenate([cand[keep_local], np.flatnonzero(active & ~participants)])
    return merge_mask(mask, keep)


# ---------------------------------------------------------------------------
# selection


def topk_by_confidence(dets_or_conf, k: int, source_index=None) -> np.ndarray:
    """Sorted positions of the ``k`` highest-confidence entries."""
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    if len(dets_or_conf) and isinstance(dets_or_conf[0], Detection):
        _, conf, source_index = _unpack(dets_or_conf)
    else:
        conf = np.asarray(dets_or_conf, dtype=float)
    order = confidence_order(conf, source_index)
    return np.sort(order[:k]).astype(np.int64)


@dataclass(frozen=True)
class Prefilter:
    """Inference-only candidate reduction before the first NMS."""

    kind: str = "none"
    value: float = 0.0

    @classmethod
    def parse(cls, text: str) -> "Prefilter":
        text = text.strip()
        if text == "none":
            return cls()
        kind, sep, raw = text.partition(":")
        if not sep:
            raise ValueError(f"bad prefilter {text!r}; expected none, topk:K or conf:T")
        if kind == "topk":
            k = int(raw)
            if k < 0:
                raise ValueError("topk prefilter needs K >= 0")
            return cls("topk", k)
        if kind in ("conf", "confidence"):
            t = float(raw)
            if not 0.0 <= t <= 1.0:
                raise ValueError(f"confidence threshold must lie in [0, 1], got {t}")
            return cls("confidence", t)
        raise ValueError(f"bad prefilter kind {kind!r}")

    def select(self, confidence: np.ndarray, source_index=None) -> np.ndarray:
        confidence = np.asarray(confidence, dtype=float)
        if self.kind == "none":
            return np.arange(len(confidence))
        if self.kind == "topk":
            return topk_by_confidence(confidence, int(self.value), source_index)
        if self.kind == "confidence":
            if not 0.0 <= self.value <= 1.0:
                raise ValueError(f"confidence threshold must lie in [0, 1], got {self.value}")
            return np.flatnonzero(confidence >= self.value)
        raise ValueError(f"unknown prefilter kind {self.kind!r}")


def prefilter_candidates(dets: Sequence[Detection], mode: Prefilter | str = "none") -> list:
    if isinstance(mode, str):
        mode = Prefilter.parse(mode)
    if not dets:
        return []
    _, conf, src = _unpack(dets)
    return [dets[i] for i in mode.select(conf, src)]
