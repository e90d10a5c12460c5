"""Synthetic BEV scenes: non-overlapping boxes, constant-velocity motion, rasterised observations."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..geometry import OrientedBoxBEV, Pose2D, boxes_to_array, compose, corners_nb, inverse, \
    iou_matrix, quad_intersection_nb, transform_box
from ..structures import GridSpec

OBS_CHANNELS = 4


class PackingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    grid_n: int = 32
    grid_m: int = 32
    extent_x: float = 16.0
    extent_y: float = 16.0
    num_objects: tuple = (4, 10)
    # per class: (width_lo, width_hi, length_lo, length_hi)
    class_sizes: tuple = ((1.6, 2.0, 3.5, 4.5), (0.8, 1.2, 1.0, 1.6))
    class_probs: tuple = (0.5, 0.5)
    max_speed: float = 2.0
    ego_speed: float = 0.0
    ego_yaw_rate: float = 0.0
    dt: float = 0.5
    noise: float = 0.05
    # chance that an object is missing from a frame's observation (it stays in the ground truth)
    occlusion: float = 0.0
    margin: float = 1.0
    max_overlap: float = 0.05
    max_tries: int = 2000

    def __post_init__(self):
        if len(self.class_sizes) != len(self.class_probs):
            raise ValueError("class_sizes and class_probs differ in length")
        if not math.isclose(sum(self.class_probs), 1.0, abs_tol=1e-9):
            raise ValueError("class_probs must sum to 1")
        lo, hi = self.num_objects
        if not 0 <= lo <= hi:
            raise ValueError(f"bad object count range {self.num_objects}")

    @property
    def grid_spec(self) -> GridSpec:
        return GridSpec(self.grid_n, self.grid_m, self.extent_x, self.extent_y)

    @property
    def num_classes(self) -> int:
        return len(self.class_sizes)


@dataclass
class Scene:
    gt_boxes: list
    gt_labels: np.ndarray
    observation: np.ndarray
    ego_pose: Pose2D = field(default_factory=Pose2D)
    timestamp: float = 0.0

    def __post_init__(self):
        self.gt_labels = np.asarray(self.gt_labels, dtype=np.int64)
        if len(self.gt_boxes) != len(self.gt_labels):
            raise ValueError("one label per gt box required")


def canonical_yaw(box: OrientedBoxBEV) -> OrientedBoxBEV:
    """Same footprint with yaw folded into (-pi/2, pi/2]."""
    yaw = box.yaw
    if yaw > math.pi / 2:
        yaw -= math.pi
    elif yaw <= -math.pi / 2:
        yaw += math.pi
    if yaw == box.yaw:
        return box
    return OrientedBoxBEV(box.cx, box.cy, box.width, box.length, yaw, box.z, box.height, box.vx, box.vy)


def rasterize_occupancy(boxes, spec: GridSpec) -> np.ndarray:
    """Per box, the fraction of each cell's area it covers, shape ``(len(boxes), n, m)``."""
    out = np.zeros((len(boxes), spec.n, spec.m))
    if not boxes:
        return out
    dx, dy = spec.cell_size
    corners = corners_nb(boxes_to_array(boxes))
    cell = np.empty((4, 2))
    for b, (box, quad) in enumerate(zip(boxes, corners)):
        x0, y0 = quad.min(axis=0)
        x1, y1 = quad.max(axis=0)
        i_lo = max(int(math.floor((y0 + spec.extent_y) / dy)), 0)
        i_hi = min(int(math.floor((y1 + spec.extent_y) / dy)), spec.n - 1)
        j_lo = max(int(math.floor((x0 + spec.extent_x) / dx)), 0)
        j_hi = min(int(math.floor((x1 + spec.extent_x) / dx)), spec.m - 1)
        for i in range(i_lo, i_hi + 1):
            ya, yb = i * dy - spec.extent_y, (i + 1) * dy - spec.extent_y
            for j in range(j_lo, j_hi + 1):
                xa, xb = j * dx - spec.extent_x, (j + 1) * dx - spec.extent_x
                cell[:] = ((xb, yb), (xa, yb), (xa, ya), (xb, ya))
                out[b, i, j] = quad_intersection_nb(quad, cell) / (dx * dy)
    return out


def render_observation(boxes, labels, spec: GridSpec, num_classes: int, noise: float,
                       rng: np.random.Generator | None) -> np.ndarray:
    """Channels: occupancy, class intensity, occupancy-weighted cos 2yaw and sin 2yaw."""
    occ = rasterize_occupancy(boxes, spec)
    obs = np.zeros((spec.n, spec.m, OBS_CHANNELS))
    for k, box in enumerate(boxes):
        o = occ[k]
        obs[..., 0] += o
        obs[..., 1] += o * (labels[k] + 1) / num_classes
        obs[..., 2] += o * math.cos(2 * box.yaw)
        obs[..., 3] += o * math.sin(2 * box.yaw)
    if noise > 0:
        obs += rng.normal(0.0, noise, size=obs.shape)
    return obs


def _sample_objects(rng: np.random.Generator, cfg: SceneConfig):
    lo, hi = cfg.num_objects
    count = int(rng.integers(lo, hi + 1))
    boxes, labels = [], []
    tries = 0
    while len(boxes) < count:
        tries += 1
        if tries > cfg.max_tries:
            raise PackingError(f"could not place {count} objects in {cfg.max_tries} tries")
        label = int(rng.choice(len(cfg.class_probs), p=cfg.class_probs))
        wl, wh, ll, lh = cfg.class_sizes[label]
        speed = rng.uniform(0.0, cfg.max_speed)
        heading = rng.uniform(-math.pi, math.pi)
        cand = OrientedBoxBEV(
            cx=rng.uniform(-cfg.extent_x + cfg.margin, cfg.extent_x - cfg.margin),
            cy=rng.uniform(-cfg.extent_y + cfg.margin, cfg.extent_y - cfg.margin),
            width=rng.uniform(wl, wh), length=rng.uniform(ll, lh),
            yaw=rng.uniform(-math.pi / 2, math.pi / 2), z=0.0, height=1.5,
            vx=speed * math.cos(heading), vy=speed * math.sin(heading))
        if boxes and iou_matrix(boxes_to_array([cand]), boxes_to_array(boxes)).max() >= cfg.max_overlap:
            continue
        boxes.append(cand)
        labels.append(label)
    return boxes, labels


def generate_scene(rng_seed: int, config: SceneConfig | None = None, frames: int = 1) -> list:
    """A sequence of ``frames`` scenes seen from a moving ego vehicle.

    Objects move at constant velocity in the world frame; the ego drives
    along its heading at ``ego_speed`` while turning at ``ego_yaw_rate``.
    Objects whose centre leaves the grid are dropped from that frame.
    """
    cfg = config or SceneConfig()
    rng = np.random.default_rng(rng_seed)
    spec = cfg.grid_spec
    world, labels = _sample_objects(rng, cfg)
    ego = Pose2D()
    out = []
    for f in range(frames):
        t = f * cfg.dt
        if f:
            step = Pose2D(cfg.ego_speed * cfg.dt, 0.0, cfg.ego_yaw_rate * cfg.dt)
            ego = compose(ego, step)
        to_ego = inverse(ego)
        boxes, labs = [], []
        for b, lab in zip(world, labels):
            moved = OrientedBoxBEV(b.cx + b.vx * t, b.cy + b.vy * t, b.width, b.length, b.yaw,
                                   b.z, b.height, b.vx, b.vy)
            local = canonical_yaw(transform_box(moved, to_ego))
            if abs(local.cx) < spec.extent_x and abs(local.cy) < spec.extent_y:
                boxes.append(local)
                labs.append(lab)
        if cfg.occlusion > 0:
            seen = rng.random(len(boxes)) >= cfg.occlusion
            obs = render_observation([b for b, v in zip(boxes, seen) if v],
                                     [lab for lab, v in zip(labs, seen) if v],
                                     spec, cfg.num_classes, cfg.noise, rng)
        else:
            obs = render_observation(boxes, labs, spec, cfg.num_classes, cfg.noise, rng)
        out.append(Scene(boxes, np.array(labs, dtype=np.int64), obs, ego, t))
    return out


def generate_dataset(seed: int, num_sequences: int, config: SceneConfig | None = None,
                     frames: int = 1) -> list:
    """``num_sequences`` independent sequences with seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(num_sequences)
    return [generate_scene(int(s), config, frames) for s in seeds]
