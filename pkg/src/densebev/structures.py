"""Grid, query and box-parameter containers shared by the model and memory."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import OrientedBoxBEV
from .tensor import Tensor

# regression / reference layout
CX, CY, Z, LOG_W, LOG_L, LOG_H, SIN, COS, VX, VY = range(10)
PARAM_NAMES = ("cx", "cy", "z", "log_w", "log_l", "log_h", "sin", "cos", "vx", "vy")

ORIGIN_GRID = 0
ORIGIN_MEMORY = 1


def param_dim(use_velocity: bool = True) -> int:
    return 10 if use_velocity else 8


def params_to_array5(params: np.ndarray) -> np.ndarray:
    """Box rows ``[cx, cy, w, l, yaw]`` from parameter rows."""
    p = np.asarray(params, dtype=float).reshape(-1, params.shape[-1])
    yaw = np.arctan2(p[:, SIN], p[:, COS])
    return np.column_stack([p[:, CX], p[:, CY], np.exp(p[:, LOG_W]), np.exp(p[:, LOG_L]), yaw])


def params_to_boxes(params: np.ndarray) -> list:
    p = np.asarray(params, dtype=float)
    out = []
    for row in p:
        vx, vy = (row[VX], row[VY]) if p.shape[1] > VX else (0.0, 0.0)
        out.append(OrientedBoxBEV(
            cx=row[CX], cy=row[CY], width=math.exp(row[LOG_W]), length=math.exp(row[LOG_L]),
            yaw=math.atan2(row[SIN], row[COS]), z=row[Z], height=math.exp(row[LOG_H]), vx=vx, vy=vy))
    return out


def boxes_to_params(boxes, use_velocity: bool = True, default_height: float = 1.5) -> np.ndarray:
    rows = []
    for b in boxes:
        h = b.height if b.height is not None else default_height
        row = [b.cx, b.cy, b.z, math.log(b.width), math.log(b.length), math.log(h),
               math.sin(b.yaw), math.cos(b.yaw)]
        if use_velocity:
            row += [b.vx, b.vy]
        rows.append(row)
    return np.array(rows, dtype=float).reshape(-1, param_dim(use_velocity))


@dataclass(frozen=True)
class GridSpec:
    """Cell layout of an ``n x m`` BEV grid centred on the ego vehicle.

    Row ``i`` runs along y and column ``j`` along x; cell (i, j) has flat
    index ``i * m + j``.
    """

    n: int
    m: int
    extent_x: float
    extent_y: float

    @property
    def cell_size(self) -> tuple[float, float]:
        return 2.0 * self.extent_x / self.m, 2.0 * self.extent_y / self.n

    @property
    def num_cells(self) -> int:
        return self.n * self.m

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        dx, dy = self.cell_size
        return (j + 0.5) * dx - self.extent_x, (i + 0.5) * dy - self.extent_y

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        dx, dy = self.cell_size
        return int(math.floor((y + self.extent_y) / dy)), int(math.floor((x + self.extent_x) / dx))

    def centers(self) -> np.ndarray:
        dx, dy = self.cell_size
        xs = (np.arange(self.m) + 0.5) * dx - self.extent_x
        ys = (np.arange(self.n) + 0.5) * dy - self.extent_y
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def contains(self, x, y) -> np.ndarray:
        return (np.abs(x) <= self.extent_x) & (np.abs(y) <= self.extent_y)


@dataclass
class BevGrid:
    spec: GridSpec
    features: Tensor

    def __post_init__(self):
        if self.features.shape[0] != self.spec.num_cells:
            raise ValueError(f"grid has {self.features.shape[0]} rows, expected {self.spec.num_cells}")

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def m(self) -> int:
        return self.spec.m

    @property
    def C(self) -> int:
        return self.features.shape[1]

    @property
    def extent(self) -> tuple[float, float]:
        return self.spec.extent_x, self.spec.extent_y


@dataclass
class QuerySet:
    """Object queries entering a decoder layer.

    ``reference`` holds box parameters (detached); ``reference_live`` carries
    the previous layer's gradient path for look-forward-twice.
    """

    features: Tensor
    reference: np.ndarray
    origin: np.ndarray
    confidence: np.ndarray
    anchor_index: np.ndarray = None
    reference_live: Tensor | None = None
    class_scores: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.features.shape[0]
        if self.anchor_index is None:
            self.anchor_index = np.full(n, -1, dtype=np.int64)
        if not (len(self.reference) == len(self.origin) == len(self.confidence) == n):
            raise ValueError("query set fields disagree in length")

    @property
    def n_q(self) -> int:
        return self.features.shape[0]

    @property
    def reference_boxes(self) -> list:
        return params_to_boxes(self.reference)

    @property
    def is_memory(self) -> np.ndarray:
        return self.origin == ORIGIN_MEMORY
