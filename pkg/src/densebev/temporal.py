"""Object memory queue, ego-motion alignment and BEV grid warping."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import IDENTITY_POSE, Pose2D, compose, inverse, transform_box
from .structures import ORIGIN_MEMORY, BevGrid, QuerySet, boxes_to_params
from .suppression import Detection, confidence_order
from .tensor import Tensor, add, linear, relu

PROPAGATION_BUDGET = 300
MOTION_DIM = 7


@dataclass(frozen=True)
class MemoryEntry:
    detection: Detection
    features: np.ndarray


@dataclass(frozen=True)
class MemoryFrame:
    timestamp: float
    ego_pose: Pose2D
    entries: tuple


@dataclass(frozen=True)
class MotionAttributes:
    dt: float
    ego_delta: Pose2D
    vx: float = 0.0
    vy: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    def as_vector(self) -> np.ndarray:
        d = self.ego_delta
        return np.array([self.dt, d.tx, d.ty, math.sin(d.theta), math.cos(d.theta), self.vx, self.vy])


class MemoryQueue:
    """FIFO of past frames; each frame keeps its most confident detections."""

    def __init__(self, capacity_frames: int = 4, budget: int = PROPAGATION_BUDGET):
        if capacity_frames < 1:
            raise ValueError("capacity_frames must be >= 1")
        self.capacity_frames = capacity_frames
        self.budget = budget
        self.frames: deque = deque()

    def __len__(self):
        return len(self.frames)

    @property
    def num_entries(self) -> int:
        return sum(len(f.entries) for f in self.frames)

    @property
    def latest(self) -> MemoryFrame | None:
        return self.frames[-1] if self.frames else None

    def push(self, detections, features, ego_pose: Pose2D, timestamp: float) -> "MemoryQueue":
        if self.frames and not timestamp > self.frames[-1].timestamp:
            raise ValueError(
                f"timestamps must increase: {timestamp} after {self.frames[-1].timestamp}")
        features = np.asarray(features, dtype=float)
        if len(detections) != len(features):
            raise ValueError("one feature row per detection required")
        if detections:
            conf = np.array([d.confidence for d in detections])
            src = np.array([d.source_index for d in detections])
            order = confidence_order(conf, src)[: self.budget]
        else:
            order = []
        entries = tuple(MemoryEntry(detections[i], features[i].copy()) for i in order)
        self.frames.append(MemoryFrame(float(timestamp), ego_pose, entries))
        while len(self.frames) > self.capacity_frames:
            self.frames.popleft()
        return self

    def clear(self):
        self.frames.clear()


def memory_push(queue: MemoryQueue, frame_detections, features, ego_pose: Pose2D, timestamp: float) -> MemoryQueue:
    return queue.push(frame_detections, features, ego_pose, timestamp)


def relative_pose(current_pose: Pose2D, stored_pose: Pose2D) -> Pose2D:
    """Transform taking coordinates in the stored ego frame to the current one."""
    return compose(inverse(current_pose), stored_pose)


def motion_encode(features, motion, params: dict | None, prefix: str = "motion") -> Tensor:
    """Residual MLP over explicit motion attributes; identity if ``params`` is None."""
    features = features if isinstance(features, Tensor) else Tensor(features)
    if params is None:
        return features
    if isinstance(motion, MotionAttributes):
        motion = motion.as_vector()
    m = motion if isinstance(motion, Tensor) else Tensor(np.atleast_2d(np.asarray(motion, float)))
    hidden = relu(linear(m, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return add(features, linear(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"]))


def align_memory(
    queue: MemoryQueue,
    current_pose: Pose2D,
    current_time: float,
    motion_params: dict | None = None,
    latest_only: bool = False,
    use_velocity: bool = True,
) -> QuerySet | None:
    """Memory entries as queries in the current ego frame (oldest frame first)."""
    frames = [queue.latest] if latest_only and queue.latest else list(queue.frames)
    boxes, feats, motion, conf, scores = [], [], [], [], []
    for frame in frames:
        delta = relative_pose(current_pose, frame.ego_pose)
        dt = current_time - frame.timestamp
        for e in frame.entries:
            b = transform_box(e.detection.box, delta)
            boxes.append(b)
            feats.append(e.features)
            motion.append(MotionAttributes(dt, delta, b.vx, b.vy).as_vector())
            conf.append(e.detection.confidence)
            scores.append(e.detection.class_scores)
    if not boxes:
        return None
    motion = np.array(motion)
    if not use_velocity:
        motion[:, 5:] = 0.0
    features = motion_encode(Tensor(np.array(feats)), motion, motion_params)
    n = len(boxes)
    return QuerySet(
        features=features,
        reference=boxes_to_params(boxes, use_velocity),
        origin=np.full(n, ORIGIN_MEMORY, dtype=np.int64),
        confidence=np.array(conf, dtype=float),
        class_scores=np.array(scores, dtype=float),
        extra={"motion": motion},
    )


# ---------------------------------------------------------------------------
# BEV grid alignment


def align_bev_grid(prev: BevGrid, ego_delta: Pose2D, rotation_center="grid_center") -> BevGrid:
    """Warp the previous grid into the current ego frame.

    ``ego_delta`` maps previous-frame coordinates to current-frame ones.
    ``rotation_center`` is ``"grid_center"`` or a fixed ``(cx, cy)`` in cell
    units measured from the grid corner (cell (i, j) spans [j, j+1] x [i, i+1]);
    a fixed centre that differs from the true one rotates about the wrong
    point. Bilinear sampling, zeros outside the previous grid.
    """
    spec = prev.spec
    feats = prev.features.data
    if ego_delta == IDENTITY_POSE or ego_delta.as_tuple() == (0.0, 0.0, 0.0):
        return BevGrid(spec, Tensor(feats.copy()))
    n, m = spec.n, spec.m
    dx, dy = spec.cell_size
    if rotation_center == "grid_center":
        cu, cv = m / 2.0, n / 2.0
    else:
        cu, cv = (float(c) for c in rotation_center)

    jj, ii = np.meshgrid(np.arange(m) + 0.5, np.arange(n) + 0.5)
    # offsets from the rotation centre in metres, translation removed
    ox = (jj - cu) * dx - ego_delta.tx
    oy = (ii - cv) * dy - ego_delta.ty
    c, s = math.cos(ego_delta.theta), math.sin(ego_delta.theta)
    px = (c * ox + s * oy) / dx + cu - 0.5
    py = (-s * ox + c * oy) / dy + cv - 0.5
    px = _snap(px)
    py = _snap(py)

    grid = feats.reshape(n, m, -1)
    out = np.zeros_like(grid)
    j0 = np.floor(px).astype(np.int64)
    i0 = np.floor(py).astype(np.int64)
    fx = px - j0
    fy = py - i0
    for di, wy in ((0, 1.0 - fy), (1, fy)):
        for dj, wx in ((0, 1.0 - fx), (1, fx)):
            ri, rj = i0 + di, j0 + dj
            w = wy * wx
            ok = (ri >= 0) & (ri < n) & (rj >= 0) & (rj < m) & (w != 0.0)
            out[ok] += w[ok, None] * grid[ri[ok], rj[ok]]
    return BevGrid(spec, Tensor(out.reshape(n * m, -1)))


def _snap(x: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    r = np.round(x)
    return np.where(np.abs(x - r) < tol, r, x)
