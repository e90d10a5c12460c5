"""Oriented-box geometry in the bird's-eye-view plane.

Boxes are rectangles in the ground plane: ``length`` runs along the heading
direction ``yaw`` and ``width`` runs across it. Two code paths compute
overlaps:

* a scalar path on dataclasses (:func:`box_corners`,
  :func:`convex_intersection_area`, :func:`rotated_iou`), and
* compiled kernels on ``(N, 5)`` arrays (:func:`iou_matrix`,
  :func:`iou_pairs`) that the NMS loop calls per candidate pair.

Both clip one polygon against the half-planes of the other
(Sutherland-Hodgman) and take the shoelace area.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from numba import njit

TWO_PI = 2.0 * math.pi
CLIP_EPS = 1e-12


def normalize_angle(theta: float) -> float:
    """Wrap an angle to the half-open interval (-pi, pi]."""
    wrapped = math.remainder(theta, TWO_PI)
    if wrapped <= -math.pi:
        wrapped += TWO_PI
    return wrapped


@dataclass(frozen=True)
class OrientedBoxBEV:
    cx: float
    cy: float
    width: float
    length: float
    yaw: float = 0.0
    z: float = 0.0
    height: float | None = None
    vx: float = 0.0
    vy: float = 0.0

    def __post_init__(self):
        if not (self.width > 0 and self.length > 0):
            raise ValueError(f"box dims must be positive, got w={self.width}, l={self.length}")
        if self.height is not None and not self.height > 0:
            raise ValueError(f"box height must be positive, got {self.height}")
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    @property
    def area(self) -> float:
        return self.width * self.length

    @property
    def half_diagonal(self) -> float:
        return 0.5 * math.hypot(self.width, self.length)

    def as_array(self) -> np.ndarray:
        """``[cx, cy, width, length, yaw]``, the layout used by the batched kernels."""
        return np.array([self.cx, self.cy, self.width, self.length, self.yaw])


@dataclass(frozen=True)
class Pose2D:
    """Rigid planar transform: rotate by ``theta`` then translate by ``(tx, ty)``."""

    tx: float = 0.0
    ty: float = 0.0
    theta: float = 0.0

    def apply(self, x: float, y: float) -> tuple[float, float]:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return c * x - s * y + self.tx, s * x + c * y + self.ty

    def rotate(self, x: float, y: float) -> tuple[float, float]:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return c * x - s * y, s * x + c * y

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.tx, self.ty, self.theta)


IDENTITY_POSE = Pose2D()


def compose(a: Pose2D, b: Pose2D) -> Pose2D:
    """Pose equivalent to applying ``b`` first and then ``a``."""
    tx, ty = a.apply(b.tx, b.ty)
    return Pose2D(tx, ty, normalize_angle(a.theta + b.theta))


def inverse(p: Pose2D) -> Pose2D:
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Pose2D(-(c * p.tx + s * p.ty), s * p.tx - c * p.ty, normalize_angle(-p.theta))


@dataclass(frozen=True, eq=False)
class ConvexPolygon:
    """Counter-clockwise convex polygon, ``vertices`` has shape ``(n, 2)``."""

    vertices: np.ndarray

    def __len__(self):
        return len(self.vertices)

    @property
    def area(self) -> float:
        return polygon_area(self.vertices)

    def is_convex_ccw(self, tol: float = CLIP_EPS) -> bool:
        v = self.vertices
        n = len(v)
        if n < 3:
            return True
        for i in range(n):
            e1 = v[(i + 1) % n] - v[i]
            e2 = v[(i + 2) % n] - v[(i + 1) % n]
            if e1[0] * e2[1] - e1[1] * e2[0] < -tol:
                return False
        return True


def polygon_area(vertices) -> float:
    """Shoelace area; positive for CCW order."""
    v = np.asarray(vertices, dtype=float)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def box_corners(box: OrientedBoxBEV) -> ConvexPolygon:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = 0.5 * box.length, 0.5 * box.width
    local = ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    verts = np.array([[box.cx + c * u - s * v, box.cy + s * u + c * v] for u, v in local])
    return ConvexPolygon(verts)


def _clip(subject: list, a: np.ndarray, b: np.ndarray) -> list:
    """Keep the part of ``subject`` left of the directed edge a->b."""
    ex, ey = b[0] - a[0], b[1] - a[1]

    def side(p):
        return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

    out = []
    n = len(subject)
    for i in range(n):
        cur = subject[i]
        prev = subject[i - 1]
        sc, sp = side(cur), side(prev)
        cur_in, prev_in = sc >= -CLIP_EPS, sp >= -CLIP_EPS
        if cur_in:
            if not prev_in:
                out.append(_crossing(prev, cur, sp, sc))
            out.append(cur)
        elif prev_in:
            out.append(_crossing(prev, cur, sp, sc))
    return out


def _crossing(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def _dedupe(points: list) -> list:
    out = []
    for p in points:
        if out and abs(p[0] - out[-1][0]) <= CLIP_EPS and abs(p[1] - out[-1][1]) <= CLIP_EPS:
            continue
        out.append(p)
    while len(out) > 1 and abs(out[0][0] - out[-1][0]) <= CLIP_EPS and abs(out[0][1] - out[-1][1]) <= CLIP_EPS:
        out.pop()
    return out


def clip_polygons(a: ConvexPolygon, b: ConvexPolygon) -> ConvexPolygon:
    """Intersection polygon of two convex CCW polygons."""
    if _poly_key(b) < _poly_key(a):
        a, b = b, a
    out = [tuple(p) for p in a.vertices]
    clip = b.vertices
    n = len(clip)
    for i in range(n):
        if len(out) < 3:
            return ConvexPolygon(np.zeros((0, 2)))
        out = _dedupe(_clip(out, clip[i], clip[(i + 1) % n]))
    if len(out) < 3:
        return ConvexPolygon(np.zeros((0, 2)))
    return ConvexPolygon(np.array(out, dtype=float))


def _poly_key(p: ConvexPolygon) -> tuple:
    return tuple(p.vertices.ravel().tolist())


def convex_intersection_area(a: ConvexPolygon, b: ConvexPolygon) -> float:
    inter = clip_polygons(a, b)
    area = max(inter.area, 0.0)
    return min(area, a.area, b.area)


def _box_key(b: OrientedBoxBEV) -> tuple:
    return (b.cx, b.cy, b.width, b.length, b.yaw)


def rotated_iou(a: OrientedBoxBEV, b: OrientedBoxBEV) -> float:
    """BEV intersection over union of two oriented boxes."""
    if _box_key(b) < _box_key(a):
        a, b = b, a
    inter = convex_intersection_area(box_corners(a), box_corners(b))
    union = a.area + b.area - inter
    if union <= 1e-300:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def scale_box(box: OrientedBoxBEV, factor: float) -> OrientedBoxBEV:
    if not factor > 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    return replace(box, width=box.width * factor, length=box.length * factor)


def transform_box(box: OrientedBoxBEV, pose: Pose2D) -> OrientedBoxBEV:
    """Express ``box`` in the frame reached by applying ``pose`` to its frame."""
    cx, cy = pose.apply(box.cx, box.cy)
    vx, vy = pose.rotate(box.vx, box.vy)
    return replace(box, cx=cx, cy=cy, yaw=box.yaw + pose.theta, vx=vx, vy=vy)


# ---------------------------------------------------------------------------
# compiled kernels on ``[cx, cy, width, length, yaw]`` rows


def boxes_to_array(boxes: Sequence[OrientedBoxBEV]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 5))
    return np.array([[b.cx, b.cy, b.width, b.length, b.yaw] for b in boxes], dtype=float)


@njit(cache=True)
def corners_nb(boxes):
    n = boxes.shape[0]
    out = np.empty((n, 4, 2))
    su = (1.0, -1.0, -1.0, 1.0)
    sv = (1.0, 1.0, -1.0, -1.0)
    for i in range(n):
        c = math.cos(boxes[i, 4])
        s = math.sin(boxes[i, 4])
        hl = 0.5 * boxes[i, 3]
        hw = 0.5 * boxes[i, 2]
        for k in range(4):
            u = su[k] * hl
            v = sv[k] * hw
            out[i, k, 0] = boxes[i, 0] + c * u - s * v
            out[i, k, 1] = boxes[i, 1] + s * u + c * v
    return out


@njit(cache=True)
def quad_intersection_nb(pa, pb):
    """Area of the intersection of two CCW quads by half-plane clipping."""
    src = np.empty((16, 2))
    dst = np.empty((16, 2))
    for i in range(4):
        src[i, 0] = pa[i, 0]
        src[i, 1] = pa[i, 1]
    n = 4
    for e in range(4):
        ax = pb[e, 0]
        ay = pb[e, 1]
        ex = pb[(e + 1) % 4, 0] - ax
        ey = pb[(e + 1) % 4, 1] - ay
        m = 0
        px = src[n - 1, 0]
        py = src[n - 1, 1]
        sp = ex * (py - ay) - ey * (px - ax)
        for i in range(n):
            qx = src[i, 0]
            qy = src[i, 1]
            sq = ex * (qy - ay) - ey * (qx - ax)
            q_in = sq >= -1e-12
            p_in = sp >= -1e-12
            if q_in != p_in:
                t = sp / (sp - sq)
                dst[m, 0] = px + t * (qx - px)
                dst[m, 1] = py + t * (qy - py)
                m += 1
            if q_in:
                dst[m, 0] = qx
                dst[m, 1] = qy
                m += 1
            px = qx
            py = qy
            sp = sq
        if m < 3:
            return 0.0
        src, dst = dst, src
        n = m
    area = 0.0
    for i in range(n):
        j = (i + 1) % n
        area += src[i, 0] * src[j, 1] - src[j, 0] * src[i, 1]
    return max(0.5 * area, 0.0)


@njit(cache=True)
def pair_iou_nb(ca, cb, area_a, area_b):
    inter = quad_intersection_nb(ca, cb)
    inter = min(inter, area_a, area_b)
    union = area_a + area_b - inter
    if union <= 1e-300:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


@njit(cache=True)
def _iou_matrix_nb(a, b):
    ca = corners_nb(a)
    cb = corners_nb(b)
    out = np.zeros((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        area_a = a[i, 2] * a[i, 3]
        for j in range(b.shape[0]):
            out[i, j] = pair_iou_nb(ca[i], cb[j], area_a, b[j, 2] * b[j, 3])
    return out


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise BEV IoU between ``(N, 5)`` and ``(M, 5)`` box rows."""
    a = np.ascontiguousarray(np.asarray(a, dtype=float).reshape(-1, 5))
    b = np.ascontiguousarray(np.asarray(b, dtype=float).reshape(-1, 5))
    return _iou_matrix_nb(a, b)


def iou_one_to_many(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    return iou_matrix(np.asarray(box, dtype=float).reshape(1, 5), others)[0]


def iou_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Element-wise IoU of paired rows."""
    a = np.ascontiguousarray(np.asarray(a, dtype=float).reshape(-1, 5))
    b = np.ascontiguousarray(np.asarray(b, dtype=float).reshape(-1, 5))
    return _iou_pairs_nb(a, b)


@njit(cache=True)
def _iou_pairs_nb(a, b):
    ca = corners_nb(a)
    cb = corners_nb(b)
    out = np.zeros(a.shape[0])
    for i in range(a.shape[0]):
        out[i] = pair_iou_nb(ca[i], cb[i], a[i, 2] * a[i, 3], b[i, 2] * b[i, 3])
    return out
