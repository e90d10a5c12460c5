import math

import numpy as np
import pytest

from densebev import tensor as T
from densebev.geometry import OrientedBoxBEV, Pose2D, compose, inverse, transform_box
from densebev.model import DenseBEV, DenseBEVConfig
from densebev.structures import BevGrid, GridSpec, ORIGIN_MEMORY
from densebev.suppression import Detection
from densebev.temporal import (MOTION_DIM, MemoryQueue, MotionAttributes, align_bev_grid, align_memory,
                               memory_push, motion_encode, relative_pose)
from densebev.tensor import Tensor, grad_check


def det(cx, cy, conf, i=0, **kw):
    return Detection(OrientedBoxBEV(cx, cy, 1.0, 2.0, **kw), (conf, conf / 2), source_index=i)


def random_pose(rng, scale=10.0):
    return Pose2D(rng.uniform(-scale, scale), rng.uniform(-scale, scale), rng.uniform(-math.pi, math.pi))


def motion_params(rng, dim=8, scale=1.0):
    return {"motion.w1": Tensor(rng.normal(0, scale, (MOTION_DIM, dim))), "motion.b1": Tensor(rng.normal(size=dim)),
            "motion.w2": Tensor(rng.normal(0, scale, (dim, dim))), "motion.b2": Tensor(rng.normal(size=dim))}


class TestQueue:
    def test_push_empty(self):
        q = memory_push(MemoryQueue(), [det(0, 0, 0.5)], np.zeros((1, 4)), Pose2D(), 0.0)
        assert len(q) == 1 and q.num_entries == 1

    def test_fifo_eviction(self):
        q = MemoryQueue(capacity_frames=4)
        for t in range(5):
            q.push([det(t, 0, 0.5)], np.zeros((1, 2)), Pose2D(), float(t))
        assert [f.timestamp for f in q.frames] == [1.0, 2.0, 3.0, 4.0]

    def test_budget_keeps_most_confident(self, rng):
        conf = rng.random(500)
        dets = [det(i, 0, c, i) for i, c in enumerate(conf)]
        q = MemoryQueue(budget=300).push(dets, rng.normal(size=(500, 3)), Pose2D(), 0.0)
        kept = sorted(e.detection.source_index for e in q.latest.entries)
        assert kept == sorted(np.argsort(-conf, kind="stable")[:300].tolist())
        assert len(q.latest.entries) == 300

    def test_total_bounded(self, rng):
        q = MemoryQueue(capacity_frames=3, budget=300)
        for t in range(6):
            dets = [det(i, 0, rng.random(), i) for i in range(400)]
            q.push(dets, np.zeros((400, 1)), Pose2D(), float(t))
            assert q.num_entries <= 3 * 300

    def test_rejects_non_increasing_timestamp(self):
        q = MemoryQueue().push([], np.zeros((0, 2)), Pose2D(), 1.0)
        with pytest.raises(ValueError):
            q.push([], np.zeros((0, 2)), Pose2D(), 1.0)
        with pytest.raises(ValueError):
            q.push([], np.zeros((0, 2)), Pose2D(), 0.5)

    def test_features_stored_as_copies(self):
        f = np.ones((1, 2))
        q = MemoryQueue().push([det(0, 0, 0.5)], f, Pose2D(), 0.0)
        f[:] = 5
        assert q.latest.entries[0].features.tolist() == [1.0, 1.0]

    def test_motion_dt_positive(self):
        with pytest.raises(ValueError):
            MotionAttributes(0.0, Pose2D())


class TestAlignMemory:
    def test_zero_motion_identity(self):
        d = det(3, -2, 0.7, yaw=0.4)
        q = MemoryQueue().push([d], np.zeros((1, 4)), Pose2D(1, 2, 0.3), 0.0)
        out = align_memory(q, Pose2D(1, 2, 0.3), 0.7)
        b = out.reference_boxes[0]
        assert (b.cx, b.cy, b.yaw) == pytest.approx((3, -2, 0.4), abs=1e-12)
        assert out.origin.tolist() == [ORIGIN_MEMORY]

    def test_ego_forward_moves_box_back(self):
        q = MemoryQueue().push([det(10, 0, 0.7)], np.zeros((1, 4)), Pose2D(), 0.0)
        b = align_memory(q, Pose2D(5, 0, 0), 0.5).reference_boxes[0]
        assert (b.cx, b.cy) == pytest.approx((5, 0), abs=1e-12)

    def test_empty_queue(self):
        assert align_memory(MemoryQueue(), Pose2D(), 0.0) is None

    def test_world_round_trip(self, rng):
        for _ in range(200):
            stored, current = random_pose(rng), random_pose(rng)
            b = OrientedBoxBEV(*rng.uniform(-20, 20, 2), 1.5, 4.0, rng.uniform(-3, 3), vx=1.0, vy=-0.5)
            direct = transform_box(b, relative_pose(current, stored))
            via_world = transform_box(transform_box(b, stored), inverse(current))
            for f in ("cx", "cy", "vx", "vy"):
                assert getattr(direct, f) == pytest.approx(getattr(via_world, f), abs=1e-9)
            assert math.sin(direct.yaw - via_world.yaw) == pytest.approx(0, abs=1e-9)

    def test_pose_chain_consistency(self, rng):
        for _ in range(100):
            stored, p1, p2 = random_pose(rng), random_pose(rng), random_pose(rng)
            b = OrientedBoxBEV(*rng.uniform(-20, 20, 2), 2.0, 1.0, rng.uniform(-3, 3))
            in_p1 = transform_box(b, relative_pose(p1, stored))
            re_expressed = transform_box(in_p1, relative_pose(p2, p1))
            direct = transform_box(b, relative_pose(p2, stored))
            assert (re_expressed.cx, re_expressed.cy) == pytest.approx((direct.cx, direct.cy), abs=1e-9)
            assert math.cos(re_expressed.yaw - direct.yaw) == pytest.approx(1, abs=1e-9)

    def test_latest_only(self):
        q = MemoryQueue()
        q.push([det(0, 0, 0.5)], np.zeros((1, 2)), Pose2D(), 0.0)
        q.push([det(1, 0, 0.5), det(2, 0, 0.4, 1)], np.zeros((2, 2)), Pose2D(), 1.0)
        assert align_memory(q, Pose2D(), 2.0).n_q == 3
        assert align_memory(q, Pose2D(), 2.0, latest_only=True).n_q == 2

    def test_motion_attributes_recorded(self):
        q = MemoryQueue().push([det(0, 0, 0.5, vx=1.0)], np.zeros((1, 2)), Pose2D(), 0.0)
        m = align_memory(q, Pose2D(0, 0, math.pi / 2), 0.5).extra["motion"][0]
        assert m == pytest.approx([0.5, 0, 0, -1, 0, 0, -1], abs=1e-12)


class TestMotionEncode:
    def test_identity_without_params(self, rng):
        f = rng.normal(size=(3, 8))
        np.testing.assert_array_equal(motion_encode(f, np.zeros((3, 7)), None).data, f)

    def test_zero_init_is_identity(self, rng):
        p = DenseBEV.init_params(DenseBEVConfig(dim=8, heads=2))
        f = rng.normal(size=(2, 8))
        m = MotionAttributes(0.5, Pose2D(1, 2, 0.3), 1.0, 0.0)
        np.testing.assert_array_equal(motion_encode(f, m, p).data, f)

    def test_non_degenerate(self, rng):
        p = motion_params(rng)
        f = rng.normal(size=(1, 8))
        a = motion_encode(f, MotionAttributes(0.5, Pose2D(1, 0, 0)), p).data
        b = motion_encode(f, MotionAttributes(0.5, Pose2D(0, 2, 0.4), 1.0, 0.5), p).data
        assert np.linalg.norm(a - b) > 1e-6
        assert a.shape == f.shape

    def test_gradient_wrt_motion(self, rng):
        p = motion_params(rng, scale=0.5)
        f = rng.normal(size=(4, 8))
        proj = rng.normal(size=(4, 8))
        m0 = rng.normal(size=(4, MOTION_DIM))
        err = grad_check(lambda m: T.sum_(motion_encode(f, m, p) * Tensor(proj)), m0)
        assert err <= 1e-5


class TestAlignGrid:
    def grid(self, rng, n, c=3):
        return BevGrid(GridSpec(n, n, n / 2, n / 2), Tensor(rng.normal(size=(n * n, c))))

    def test_identity_exact(self, rng):
        g = self.grid(rng, 20)
        out = align_bev_grid(g, Pose2D())
        assert out.features.data.tobytes() == g.features.data.tobytes()

    def test_integer_translation_permutes(self, rng):
        g = self.grid(rng, 20)
        out = align_bev_grid(g, Pose2D(3.0, -2.0, 0.0)).features.data.reshape(20, 20, -1)
        src = g.features.data.reshape(20, 20, -1)
        # content at prev (i, j) appears at (i - 2, j + 3)
        np.testing.assert_array_equal(out[0:18, 3:20], src[2:20, 0:17])
        assert np.all(out[18:, :] == 0) and np.all(out[:, :3] == 0)

    def test_round_trip_90_degrees(self, rng):
        g = self.grid(rng, 50)
        fwd = align_bev_grid(g, Pose2D(0, 0, math.pi / 2))
        back = align_bev_grid(fwd, Pose2D(0, 0, -math.pi / 2)).features.data.reshape(50, 50, -1)
        src = g.features.data.reshape(50, 50, -1)
        assert np.max(np.abs(back[5:45, 5:45] - src[5:45, 5:45])) < 1e-6

    def test_fixed_center_bug_on_small_grid(self, rng):
        g = self.grid(rng, 50)
        fwd = align_bev_grid(g, Pose2D(0, 0, math.pi / 2), (100, 100))
        back = align_bev_grid(fwd, Pose2D(0, 0, -math.pi / 2), (100, 100)).features.data.reshape(50, 50, -1)
        src = g.features.data.reshape(50, 50, -1)
        assert np.max(np.abs(back[5:45, 5:45] - src[5:45, 5:45])) > 0.1

    def test_fixed_center_harmless_on_200(self, rng):
        g = self.grid(rng, 200, c=2)
        for pose in (Pose2D(0, 0, math.pi / 2), Pose2D(1.3, -0.4, 0.2)):
            a = align_bev_grid(g, pose).features.data
            b = align_bev_grid(g, pose, (100, 100)).features.data
            assert np.max(np.abs(a - b)) <= 1e-12

    def test_rotation_direction_matches_box_transform(self, rng):
        # a feature blob at a cell must land where transform_box sends the cell centre
        spec = GridSpec(30, 30, 15.0, 15.0)
        feats = np.zeros((900, 1))
        i, j = 20, 8
        feats[i * 30 + j] = 1.0
        pose = Pose2D(2.0, 1.0, math.pi / 2)
        out = align_bev_grid(BevGrid(spec, Tensor(feats)), pose).features.data.reshape(30, 30)
        x, y = spec.cell_center(i, j)
        moved = transform_box(OrientedBoxBEV(x, y, 1, 1), pose)
        ii, jj = spec.cell_of(moved.cx, moved.cy)
        assert out[ii, jj] == pytest.approx(1.0, abs=1e-9)
        assert out.sum() == pytest.approx(1.0, abs=1e-9)
