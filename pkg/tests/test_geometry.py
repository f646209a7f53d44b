import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridmm import geometry
from gridmm.errors import DomainError, EmptyMemoryError, OutOfBoundsError
from gridmm.geometry import (
    AbsolutePoint,
    CellIndex,
    RayObservation,
    RelativePoint,
    WorldPose,
    cell_index,
    cell_indices_array,
    from_relative,
    line_distance_from_depth,
    normalize_heading,
    project_to_world,
    side_length,
    to_relative,
    to_relative_array,
)

finite = st.floats(min_value=-50.0, max_value=50.0, allow_nan=False)
angles = st.floats(min_value=-3.0 * math.pi, max_value=3.0 * math.pi, allow_nan=False)


class TestLineDistance:
    def test_level_ray(self):
        assert line_distance_from_depth(2.0, 0.0) == 2.0

    def test_sixty_degrees(self):
        assert line_distance_from_depth(2.0, math.pi / 3) == pytest.approx(1.0, abs=1e-12)

    def test_matches_formula_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            depth = float(rng.uniform(0, 20))
            elev = float(rng.uniform(-1.4, 1.4))
            assert line_distance_from_depth(depth, elev) == pytest.approx(
                depth * math.cos(elev), abs=1e-12
            )

    def test_negative_depth_rejected(self):
        with pytest.raises(DomainError):
            line_distance_from_depth(-0.1, 0.0)


class TestProjectToWorld:
    def test_unit_ray_along_world_x(self):
        p = project_to_world(WorldPose(0, 0, 0), RayObservation(0.0, 1.0))
        assert (p.x, p.y) == pytest.approx((1.0, 0.0), abs=1e-12)

    def test_quarter_turn(self):
        p = project_to_world(WorldPose(1, 1, 0), RayObservation(math.pi / 2, 2.0))
        assert (p.x, p.y) == pytest.approx((1.0, 3.0), abs=1e-12)

    def test_agent_heading_rotates_ray(self):
        p = project_to_world(WorldPose(0, 0, math.pi / 2), RayObservation(0.0, 1.0))
        assert (p.x, p.y) == pytest.approx((0.0, 1.0), abs=1e-12)

    def test_zero_distance_returns_agent_position(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            pose = WorldPose(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-4, 4))
            p = project_to_world(pose, RayObservation(rng.uniform(-3, 3), 0.0))
            assert (p.x, p.y) == pytest.approx((pose.x, pose.y), abs=1e-12)


class TestRelativeTransform:
    def test_zero_heading_is_translation(self):
        r = to_relative(AbsolutePoint(3.0, 5.0), WorldPose(1.0, 2.0, 0.0))
        assert (r.x_rel, r.y_rel) == pytest.approx((2.0, 3.0), abs=1e-12)

    def test_hand_evaluated_quarter_turn(self):
        r = to_relative(AbsolutePoint(1.0, 0.0), WorldPose(0.0, 0.0, math.pi / 2))
        assert (r.x_rel, r.y_rel) == pytest.approx((0.0, -1.0), abs=1e-12)

    def test_agent_position_maps_to_origin(self):
        for heading in (-2.0, 0.0, 0.7, 3.1):
            r = to_relative(AbsolutePoint(4.0, -2.0), WorldPose(4.0, -2.0, heading))
            assert (r.x_rel, r.y_rel) == pytest.approx((0.0, 0.0), abs=1e-12)

    @given(finite, finite, finite, finite, angles)
    @settings(max_examples=200)
    def test_round_trip(self, px, py, ax, ay, heading):
        pose = WorldPose(ax, ay, heading)
        p = AbsolutePoint(px, py)
        rt = from_relative(to_relative(p, pose), pose)
        assert abs(rt.x - p.x) < 1e-9
        assert abs(rt.y - p.y) < 1e-9

    def test_from_relative_origin_is_pose_position(self):
        pose = WorldPose(2.5, -1.5, 1.2)
        p = from_relative(RelativePoint(0.0, 0.0), pose)
        assert (p.x, p.y) == pytest.approx((pose.x, pose.y), abs=1e-12)

    def test_from_relative_zero_heading_is_translation(self):
        p = from_relative(RelativePoint(3.0, -4.0), WorldPose(10.0, 20.0, 0.0))
        assert (p.x, p.y) == pytest.approx((13.0, 16.0), abs=1e-12)

    @given(st.lists(st.tuples(finite, finite), min_size=2, max_size=8), finite, finite, angles)
    @settings(max_examples=100)
    def test_rigid_transform_preserves_distances(self, pts, ax, ay, heading):
        pose = WorldPose(ax, ay, heading)
        rel = [to_relative(AbsolutePoint(x, y), pose) for x, y in pts]
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                d_abs = math.hypot(pts[i][0] - pts[j][0], pts[i][1] - pts[j][1])
                d_rel = math.hypot(
                    rel[i].x_rel - rel[j].x_rel, rel[i].y_rel - rel[j].y_rel
                )
                assert abs(d_abs - d_rel) < 1e-9

    @given(finite, finite, finite, finite, angles)
    @settings(max_examples=100)
    def test_norm_equals_distance_to_agent(self, px, py, ax, ay, heading):
        pose = WorldPose(ax, ay, heading)
        r = to_relative(AbsolutePoint(px, py), pose)
        assert math.hypot(r.x_rel, r.y_rel) == pytest.approx(
            math.hypot(px - ax, py - ay), abs=1e-9
        )

    def test_transform_composition(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            pose_a = WorldPose(*rng.uniform(-10, 10, 2), rng.uniform(-3, 3))
            pose_b = WorldPose(*rng.uniform(-10, 10, 2), rng.uniform(-3, 3))
            p = AbsolutePoint(*rng.uniform(-10, 10, 2))
            direct = to_relative(p, pose_b)
            via_a = from_relative(to_relative(p, pose_a), pose_a)
            recomposed = to_relative(via_a, pose_b)
            assert direct.x_rel == pytest.approx(recomposed.x_rel, abs=1e-9)
            assert direct.y_rel == pytest.approx(recomposed.y_rel, abs=1e-9)

    def test_array_variant_matches_scalar(self):
        rng = np.random.default_rng(3)
        pose = WorldPose(1.0, -2.0, 0.9)
        pts = rng.uniform(-10, 10, size=(64, 2))
        rel = to_relative_array(pts, pose)
        for i in range(pts.shape[0]):
            scalar = to_relative(AbsolutePoint(pts[i, 0], pts[i, 1]), pose)
            assert rel[i, 0] == scalar.x_rel
            assert rel[i, 1] == scalar.y_rel


class TestSideLength:
    def test_two_points(self):
        assert side_length([RelativePoint(1, 2), RelativePoint(-3, 0.5)]) == 6.0

    def test_degenerate_uses_minimum(self):
        assert side_length([RelativePoint(0, 0)]) == 0.5

    def test_matches_scan_oracle(self):
        rng = np.random.default_rng(4)
        pts = [RelativePoint(*rng.uniform(-20, 20, 2)) for _ in range(100)]
        best = 0.0
        for p in pts:
            best = max(best, abs(p.x_rel), abs(p.y_rel))
        assert side_length(pts) == 2.0 * best

    def test_empty_rejected(self):
        with pytest.raises(EmptyMemoryError):
            side_length([])


class TestCellIndex:
    def test_quadrants(self):
        assert cell_index(RelativePoint(-1, 1), 4.0, 2) == CellIndex(0, 0)

    def test_boundary_clamps_inward(self):
        assert cell_index(RelativePoint(2, 2), 4.0, 2) == CellIndex(0, 1)

    def test_histogram_matches_bucketing_oracle(self):
        rng = np.random.default_rng(5)
        scale = 14
        length = 9.0
        pts = rng.uniform(-4.5, 4.5, size=(1000, 2))
        mn = cell_indices_array(pts, length, scale)
        histogram = np.zeros((scale, scale), dtype=int)
        for m, n in mn:
            histogram[m, n] += 1
        oracle = np.zeros((scale, scale), dtype=int)
        half = length / 2.0
        for x, y in pts:
            n = min(max(int((x + half) * scale / length), 0), scale - 1)
            m = min(max(int((half - y) * scale / length), 0), scale - 1)
            oracle[m, n] += 1
        assert np.array_equal(histogram, oracle)

    def test_out_of_bounds_rejected(self):
        with pytest.raises(OutOfBoundsError):
            cell_index(RelativePoint(3.0, 0.0), 4.0, 2)

    def test_scalar_and_array_agree(self):
        rng = np.random.default_rng(6)
        pts = rng.uniform(-2, 2, size=(256, 2))
        mn = cell_indices_array(pts, 4.0, 7)
        for i in range(pts.shape[0]):
            c = cell_index(RelativePoint(pts[i, 0], pts[i, 1]), 4.0, 7)
            assert (c.m, c.n) == (mn[i, 0], mn[i, 1])


class TestHeadingNormalization:
    @given(angles)
    @settings(max_examples=200)
    def test_range(self, theta):
        w = normalize_heading(theta)
        assert -math.pi < w <= math.pi

    def test_pose_normalizes(self):
        assert WorldPose(0, 0, 3 * math.pi).heading == pytest.approx(math.pi)


def test_projection_side_length_cell_precondition():
    # every point used to size the map satisfies the bucketing bounds
    rng = np.random.default_rng(7)
    pose = WorldPose(0.3, -0.8, 2.1)
    pts = rng.uniform(-15, 15, size=(500, 2))
    rel = to_relative_array(pts, pose)
    length = side_length(rel)
    mn = cell_indices_array(rel, length, 14)
    assert mn.shape == (500, 2)
