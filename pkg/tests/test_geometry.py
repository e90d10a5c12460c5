import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_boxes, to_box
from densebev.geometry import (ConvexPolygon, OrientedBoxBEV, Pose2D, box_corners, compose,
                               convex_intersection_area, inverse, iou_matrix, iou_pairs,
                               normalize_angle, polygon_area, rotated_iou, scale_box, transform_box)
from oracles import raster_intersection, raster_iou

coord = st.floats(-20, 20, allow_nan=False)
dim = st.floats(0.2, 10, allow_nan=False)
angle = st.floats(-10, 10, allow_nan=False)
boxes_st = st.builds(OrientedBoxBEV, cx=coord, cy=coord, width=dim, length=dim, yaw=angle)
poses_st = st.builds(Pose2D, tx=coord, ty=coord, theta=angle)


def corner_set(poly, nd=9):
    return sorted((round(x, nd) + 0.0, round(y, nd) + 0.0) for x, y in poly.vertices)


class TestBoxAndPose:
    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            OrientedBoxBEV(0, 0, 0.0, 1.0)
        with pytest.raises(ValueError):
            OrientedBoxBEV(0, 0, 1.0, -1.0)
        with pytest.raises(ValueError):
            OrientedBoxBEV(0, 0, 1.0, 1.0, height=0.0)

    @pytest.mark.parametrize("theta", [0.0, math.pi, -math.pi, 3 * math.pi, 7.0, -7.0, 1e-20])
    def test_yaw_normalized(self, theta):
        y = OrientedBoxBEV(0, 0, 1, 1, theta).yaw
        assert -math.pi < y <= math.pi
        assert math.isclose(math.cos(y), math.cos(theta), abs_tol=1e-12)
        assert math.isclose(math.sin(y), math.sin(theta), abs_tol=1e-12)

    def test_minus_pi_maps_to_pi(self):
        assert normalize_angle(-math.pi) == math.pi

    @given(poses_st)
    def test_compose_inverse_identity(self, p):
        for q in (compose(p, inverse(p)), compose(inverse(p), p)):
            assert abs(q.tx) < 1e-12 and abs(q.ty) < 1e-12 and abs(q.theta) < 1e-12


class TestCorners:
    def test_unit_square(self):
        assert corner_set(box_corners(OrientedBoxBEV(0, 0, 1, 1))) == corner_set(
            ConvexPolygon(np.array([[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]])))

    def test_quarter_turn_symmetry(self):
        a = box_corners(OrientedBoxBEV(0, 0, 1, 2, math.pi / 2))
        b = box_corners(OrientedBoxBEV(0, 0, 2, 1, 0.0))
        assert corner_set(a) == corner_set(b)

    def test_length_along_heading(self):
        v = box_corners(OrientedBoxBEV(0, 0, 1, 4, 0.0)).vertices
        assert np.ptp(v[:, 0]) == pytest.approx(4.0)
        assert np.ptp(v[:, 1]) == pytest.approx(1.0)

    def test_area_matches_shoelace_on_random_boxes(self, rng):
        rows = random_boxes(rng, 1000)
        for r in rows:
            poly = box_corners(to_box(r))
            assert len(poly) == 4
            assert poly.is_convex_ccw()
            x, y = poly.vertices[:, 0], poly.vertices[:, 1]
            shoelace = 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
            assert shoelace == pytest.approx(r[2] * r[3], rel=1e-9)
            assert polygon_area(poly.vertices) == pytest.approx(r[2] * r[3], rel=1e-9)

    @given(boxes_st)
    def test_invariant_under_full_turn(self, b):
        c = OrientedBoxBEV(b.cx, b.cy, b.width, b.length, b.yaw + 2 * math.pi)
        np.testing.assert_allclose(box_corners(b).vertices, box_corners(c).vertices, atol=1e-9)


class TestIntersection:
    def test_identical_squares(self):
        p = box_corners(OrientedBoxBEV(0, 0, 1, 1))
        assert convex_intersection_area(p, p) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_squares(self):
        a = box_corners(OrientedBoxBEV(0, 0, 1, 1))
        b = box_corners(OrientedBoxBEV(10, 0, 1, 1))
        assert convex_intersection_area(a, b) == 0.0

    def test_rotated_square_matches_raster(self):
        a = OrientedBoxBEV(0, 0, 1, 1)
        b = OrientedBoxBEV(0, 0, 1, 1, math.pi / 4)
        got = convex_intersection_area(box_corners(a), box_corners(b))
        oracle = raster_intersection(a.as_array(), b.as_array())[0]
        assert got == pytest.approx(2 * (math.sqrt(2) - 1), abs=1e-12)
        assert abs(got - oracle) < 1e-3

    def test_touching_edges_zero(self):
        a = OrientedBoxBEV(0, 0, 1, 1)
        b = OrientedBoxBEV(1, 0, 1, 1)
        assert convex_intersection_area(box_corners(a), box_corners(b)) == pytest.approx(0.0, abs=1e-12)
        assert rotated_iou(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_nested(self):
        a = box_corners(OrientedBoxBEV(0, 0, 4, 4, 0.3))
        b = box_corners(OrientedBoxBEV(0.2, -0.1, 1, 1.5, 1.1))
        assert convex_intersection_area(a, b) == pytest.approx(1.5, rel=1e-12)

    @settings(max_examples=200)
    @given(boxes_st, boxes_st)
    def test_bounds_and_symmetry(self, a, b):
        pa, pb = box_corners(a), box_corners(b)
        ab = convex_intersection_area(pa, pb)
        ba = convex_intersection_area(pb, pa)
        assert 0.0 <= ab <= min(a.area, b.area) + 1e-9
        assert ab == pytest.approx(ba, abs=1e-9)

    def test_monotone_when_pulled_apart(self, rng):
        rows = random_boxes(rng, 200, dims=(0.5, 5.0))
        for k in range(0, 200, 2):
            a, b = rows[k].copy(), rows[k + 1].copy()
            b[:2] = a[:2]
            phi = rng.uniform(-math.pi, math.pi)
            d = np.array([math.cos(phi), math.sin(phi)])
            prev = math.inf
            for t in np.linspace(0, 12, 60):
                moved = b.copy()
                moved[:2] = a[:2] + t * d
                area = convex_intersection_area(box_corners(to_box(a)), box_corners(to_box(moved)))
                assert area <= prev + 1e-9
                prev = area


class TestIoU:
    def test_identical(self):
        b = OrientedBoxBEV(1, 2, 3, 4, 0.5)
        assert rotated_iou(b, b) == pytest.approx(1.0, abs=1e-12)

    def test_half_offset_squares(self):
        a = OrientedBoxBEV(0, 0, 1, 1)
        b = OrientedBoxBEV(0.5, 0, 1, 1)
        assert rotated_iou(a, b) == pytest.approx(1 / 3, abs=1e-12)

    def test_45_degree_square(self):
        a = OrientedBoxBEV(0, 0, 1, 1)
        b = OrientedBoxBEV(0, 0, 1, 1, math.pi / 4)
        inter = 0.828427
        assert rotated_iou(a, b) == pytest.approx(inter / (2 - inter), abs=1e-4)

    @given(boxes_st)
    def test_same_region_descriptions(self, b):
        flipped = OrientedBoxBEV(b.cx, b.cy, b.width, b.length, b.yaw + math.pi)
        swapped = OrientedBoxBEV(b.cx, b.cy, b.length, b.width, b.yaw + math.pi / 2)
        assert rotated_iou(b, flipped) == pytest.approx(1.0, abs=1e-9)
        assert rotated_iou(b, swapped) == pytest.approx(1.0, abs=1e-9)

    @settings(max_examples=200)
    @given(boxes_st, boxes_st)
    def test_exact_symmetry_and_range(self, a, b):
        v = rotated_iou(a, b)
        assert v == rotated_iou(b, a)
        assert 0.0 <= v <= 1.0

    @settings(max_examples=200)
    @given(boxes_st, boxes_st, poses_st)
    def test_rigid_invariance(self, a, b, p):
        before = rotated_iou(a, b)
        after = rotated_iou(transform_box(a, p), transform_box(b, p))
        assert after == pytest.approx(before, abs=1e-9)

    def test_matches_raster_oracle(self, rng):
        a, b = random_boxes(rng, 1000), random_boxes(rng, 1000)
        # bias toward overlap so the check is not dominated by zeros
        b[::2, :2] = a[::2, :2] + rng.normal(0, 1.0, (500, 2))
        oracle = raster_iou(a, b)
        got = np.array([rotated_iou(to_box(x), to_box(y)) for x, y in zip(a, b)])
        assert np.max(np.abs(got - oracle)) < 1e-3

    def test_compiled_kernels_match_scalar(self, rng):
        a, b = random_boxes(rng, 300), random_boxes(rng, 300)
        b[:, :2] = a[:, :2] + rng.normal(0, 2.0, (300, 2))
        scalar = np.array([rotated_iou(to_box(x), to_box(y)) for x, y in zip(a, b)])
        np.testing.assert_allclose(iou_pairs(a, b), scalar, atol=1e-12)
        m = iou_matrix(a[:20], b[:30])
        for i in range(20):
            for j in range(30):
                assert m[i, j] == pytest.approx(rotated_iou(to_box(a[i]), to_box(b[j])), abs=1e-12)


class TestScaleAndTransform:
    def test_scale_identity(self):
        b = OrientedBoxBEV(1, 2, 3, 4, 0.5, z=1.0)
        assert scale_box(b, 1.0) == b

    def test_scale_doubles_dims(self):
        b = scale_box(OrientedBoxBEV(1, 2, 1, 2, 0.5, z=0.3), 2.0)
        assert (b.width, b.length, b.cx, b.cy, b.yaw, b.z) == (2, 4, 1, 2, 0.5, 0.3)

    @pytest.mark.parametrize("f", [0.0, -1.0])
    def test_scale_rejects_nonpositive(self, f):
        with pytest.raises(ValueError):
            scale_box(OrientedBoxBEV(0, 0, 1, 1), f)

    def test_scaled_iou_matches_oracle(self, rng):
        a, b = random_boxes(rng, 200, dims=(0.5, 3)), random_boxes(rng, 200, dims=(0.5, 3))
        b[:, :2] = a[:, :2] + rng.normal(0, 1.5, (200, 2))
        f = 1.7
        got = np.array([rotated_iou(scale_box(to_box(x), f), scale_box(to_box(y), f)) for x, y in zip(a, b)])
        sa, sb = a.copy(), b.copy()
        sa[:, 2:4] *= f
        sb[:, 2:4] *= f
        assert np.max(np.abs(got - raster_iou(sa, sb))) < 1e-3

    def test_identity_pose(self):
        b = OrientedBoxBEV(1, 2, 3, 4, 0.5, vx=1, vy=-1)
        assert transform_box(b, Pose2D()) == b

    def test_pure_translation(self):
        b = transform_box(OrientedBoxBEV(1, 1, 1, 1, 0.2), Pose2D(3, -1, 0))
        assert (b.cx, b.cy, b.yaw) == (4, 0, 0.2)

    def test_rotation_moves_velocity_and_yaw(self):
        b = transform_box(OrientedBoxBEV(1, 0, 1, 2, 0.0, vx=2.0), Pose2D(0, 0, math.pi / 2))
        assert (b.cx, b.cy) == pytest.approx((0, 1), abs=1e-12)
        assert (b.vx, b.vy) == pytest.approx((0, 2), abs=1e-12)
        assert b.yaw == pytest.approx(math.pi / 2)
        assert (b.width, b.length) == (1, 2)

    @given(boxes_st, poses_st)
    def test_round_trip(self, b, p):
        r = transform_box(transform_box(b, p), inverse(p))
        assert (r.cx, r.cy, r.width, r.length) == pytest.approx((b.cx, b.cy, b.width, b.length), abs=1e-9)
        assert math.sin(r.yaw - b.yaw) == pytest.approx(0.0, abs=1e-9)
        assert math.cos(r.yaw - b.yaw) == pytest.approx(1.0, abs=1e-9)
