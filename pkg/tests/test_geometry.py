import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from prtfusion.geometry import (
    BBox2D,
    Box3D,
    CameraIntrinsics,
    DepthMap,
    PseudoLiDARPatch,
    RigidTransform,
    chamfer_distance,
    compensate_ego_motion,
    crop_patch,
    lift_depth_map,
    pixel_footprint,
    pose_from_euler,
    project_point,
    project_points,
    relative_transform,
)

angles = st.floats(-math.pi, math.pi)
coords = st.floats(-50, 50)
poses = st.builds(
    lambda t, r: pose_from_euler(t, r), st.tuples(coords, coords, coords), st.tuples(angles, angles, angles)
)


def lift_loop(depth, cam):
    """Pixel-by-pixel reference back-projection."""
    pts = []
    for v in range(depth.shape[0]):
        for u in range(depth.shape[1]):
            z = depth[v, u]
            if z == 0.0:
                continue
            pts.append(((u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z))
    return np.array(pts).reshape(-1, 3)


def crop_loop(depth, cam, box):
    pts = []
    for v in range(depth.shape[0]):
        for u in range(depth.shape[1]):
            if box.x1 <= u < box.x2 and box.y1 <= v < box.y2 and depth[v, u] != 0.0:
                z = depth[v, u]
                pts.append(((u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z))
    return np.array(pts).reshape(-1, 3)


def random_depth(rng, cam, holes=0.2):
    d = rng.uniform(1.0, 80.0, size=(cam.height, cam.width))
    d[rng.uniform(size=d.shape) < holes] = 0.0
    return d


class TestIntrinsics:
    def test_rejects_bad_focal(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)

    def test_rejects_principal_point_outside(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(1.0, 1.0, 5.0, 1.0, 4, 4)

    def test_pixel_rays_have_unit_z(self, cam):
        rays = cam.pixel_rays()
        assert rays.shape == (cam.height, cam.width, 3)
        assert np.all(rays[..., 2] == 1.0)
        assert rays[10, 20, 0] == pytest.approx((20 - cam.cx) / cam.fx)


class TestDepthMap:
    def test_from_flat_is_row_major(self):
        d = DepthMap.from_flat(np.arange(6.0), width=3, height=2)
        assert d.values[1, 0] == 3.0

    def test_rejects_negative_and_nan(self):
        with pytest.raises(ValueError):
            DepthMap(np.array([[1.0, -1.0]]))
        with pytest.raises(ValueError):
            DepthMap(np.array([[np.nan]]))


class TestLifting:
    def test_matches_scalar_loop(self, small_cam, rng):
        d = random_depth(rng, small_cam)
        cloud = lift_depth_map(DepthMap(d), small_cam)
        np.testing.assert_allclose(cloud.points, lift_loop(d, small_cam), rtol=0, atol=1e-12)

    def test_sentinel_pixels_are_skipped(self, small_cam):
        d = np.zeros((small_cam.height, small_cam.width))
        d[3, 4] = 7.0
        cloud = lift_depth_map(DepthMap(d), small_cam)
        assert len(cloud) == 1
        assert tuple(cloud.pixels[0]) == (4, 3)

    def test_principal_point_lifts_onto_axis(self):
        cam = CameraIntrinsics(100.0, 100.0, 2.0, 1.0, 5, 3)
        d = np.zeros((3, 5))
        d[1, 2] = 12.5
        np.testing.assert_array_equal(lift_depth_map(DepthMap(d), cam).points, [[0.0, 0.0, 12.5]])

    def test_dimension_mismatch(self, small_cam):
        with pytest.raises(ValueError):
            lift_depth_map(DepthMap(np.ones((3, 3))), small_cam)

    def test_round_trip_per_pixel(self, cam, rng):
        d = random_depth(rng, cam, holes=0.0)
        cloud = lift_depth_map(DepthMap(d), cam)
        uvz = project_points(cloud.points, cam)
        err = np.abs(uvz[:, :2] - cloud.pixels).max()
        assert err <= 1e-9
        np.testing.assert_allclose(uvz[:, 2], d[cloud.pixels[:, 1], cloud.pixels[:, 0]], rtol=1e-15)

    @given(u=st.integers(0, 383), v=st.integers(0, 127), z=st.floats(0.1, 500.0))
    def test_round_trip_property(self, u, v, z):
        cam = CameraIntrinsics(400.0, 410.0, 192.0, 64.0, 384, 128)
        d = np.zeros((cam.height, cam.width))
        d[v, u] = z
        p = lift_depth_map(DepthMap(d), cam).points[0]
        pu, pv, pz = project_point(p, cam)
        assert abs(pu - u) <= 1e-9 and abs(pv - v) <= 1e-9
        assert pz == z


class TestProjection:
    def test_behind_camera(self, cam):
        with pytest.raises(ValueError):
            project_point((0.0, 0.0, 0.0), cam)
        with pytest.raises(ValueError):
            project_points(np.array([[1.0, 1.0, -2.0]]), cam)

    def test_vectorized_matches_scalar(self, cam, rng):
        pts = np.c_[rng.uniform(-5, 5, (50, 2)), rng.uniform(1, 50, 50)]
        vec = project_points(pts, cam)
        for p, row in zip(pts, vec):
            assert project_point(p, cam) == pytest.approx(tuple(row), abs=1e-12)


class TestCrop:
    @pytest.mark.parametrize(
        "box",
        [BBox2D(3.2, 2.0, 17.9, 11.5), BBox2D(-4.0, -3.0, 6.0, 5.0), BBox2D(20.0, 10.0, 40.0, 30.0), BBox2D(5.0, 5.0, 6.0, 6.0)],
    )
    def test_matches_scalar_loop(self, small_cam, rng, box):
        d = random_depth(rng, small_cam)
        got = crop_patch(DepthMap(d), small_cam, box).points
        np.testing.assert_allclose(got, crop_loop(d, small_cam, box), atol=1e-12)

    def test_half_open_edges(self, small_cam):
        d = np.full((small_cam.height, small_cam.width), 5.0)
        patch = crop_patch(DepthMap(d), small_cam, BBox2D(2.0, 3.0, 4.0, 5.0))
        # pixel centers u in {2, 3}, v in {3, 4}
        assert len(patch) == 4

    def test_box_outside_image_is_empty(self, small_cam):
        d = np.full((small_cam.height, small_cam.width), 5.0)
        assert len(crop_patch(DepthMap(d), small_cam, BBox2D(100.0, 100.0, 120.0, 130.0))) == 0

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            BBox2D(1.0, 1.0, 1.0, 2.0)

    def test_points_positive_depth(self, small_cam, rng):
        d = random_depth(rng, small_cam)
        pts = crop_patch(DepthMap(d), small_cam, BBox2D(0.0, 0.0, 32.0, 24.0)).points
        assert np.all(pts[:, 2] > 0)


class TestRigidTransform:
    def test_rejects_non_orthonormal(self):
        m = np.eye(4)
        m[0, 0] = 1.1
        with pytest.raises(ValueError):
            RigidTransform(m)

    def test_rejects_reflection(self):
        with pytest.raises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, -1.0, 1.0]))

    def test_rejects_bad_bottom_row(self):
        m = np.eye(4)
        m[3, 0] = 1e-3
        with pytest.raises(ValueError):
            RigidTransform(m)

    @given(st.tuples(angles, angles, angles))
    def test_euler_matches_scipy(self, rot):
        rx, ry, rz = rot
        ref = Rotation.from_euler("ZYX", [rz, ry, rx]).as_matrix()
        np.testing.assert_allclose(pose_from_euler((0, 0, 0), rot).rotation, ref, atol=1e-12)

    @given(st.floats(-math.pi, math.pi), st.tuples(coords, coords, coords))
    def test_axis_angle_about_z(self, a, t):
        # a pure z-rotation maps (1, 0, 0) to (cos a, sin a, 0)
        h = pose_from_euler(t, (0.0, 0.0, a))
        np.testing.assert_allclose(h.apply([1.0, 0.0, 0.0])[0], np.array([math.cos(a), math.sin(a), 0.0]) + t, atol=1e-10)

    @given(poses)
    def test_inverse(self, h):
        np.testing.assert_allclose((h @ h.inverse()).matrix, np.eye(4), atol=1e-10)

    @given(poses, st.lists(st.tuples(coords, coords, coords), min_size=1, max_size=20))
    def test_apply_matches_homogeneous(self, h, pts):
        pts = np.array(pts)
        homo = np.c_[pts, np.ones(len(pts))] @ h.matrix.T
        np.testing.assert_allclose(h.apply(pts), homo[:, :3], atol=1e-10)


class TestEgoCompensation:
    @given(poses, st.lists(st.tuples(coords, coords, st.floats(0.5, 80)), min_size=1, max_size=30))
    def test_equal_poses_are_identity(self, h, pts):
        patch = PseudoLiDARPatch(np.array(pts))
        out = compensate_ego_motion(patch, h, h)
        np.testing.assert_allclose(out.points, patch.points, atol=1e-12, rtol=0)

    @given(poses, poses, poses, st.lists(st.tuples(coords, coords, coords), min_size=1, max_size=20))
    def test_composition(self, h_a, h_b, h_c, pts):
        patch = PseudoLiDARPatch(np.array(pts))
        two_step = compensate_ego_motion(compensate_ego_motion(patch, h_b, h_a), h_c, h_b)
        direct = compensate_ego_motion(patch, h_c, h_a)
        np.testing.assert_allclose(two_step.points, direct.points, atol=1e-10)

    @given(poses, poses, st.lists(st.tuples(coords, coords, coords), min_size=1, max_size=20))
    def test_matches_homogeneous_oracle(self, h_t, h_s, pts):
        pts = np.array(pts)
        m = np.linalg.inv(h_t.matrix) @ h_s.matrix
        ref = (np.c_[pts, np.ones(len(pts))] @ m.T)[:, :3]
        out = compensate_ego_motion(PseudoLiDARPatch(pts), h_t, h_s).points
        np.testing.assert_allclose(out, ref, atol=1e-9)

    def test_relative_transform_maps_world_consistently(self):
        h_t = pose_from_euler((3.0, 1.0, 1.5), (0.1, -0.2, 0.3))
        h_s = pose_from_euler((0.0, 0.0, 1.5), (0.0, 0.1, -0.1))
        p_s = np.array([[1.0, 2.0, 10.0]])
        world = h_s.apply(p_s)
        np.testing.assert_allclose(relative_transform(h_t, h_s).apply(p_s), h_t.inverse().apply(world), atol=1e-12)

    def test_rejects_non_transforms(self):
        with pytest.raises(TypeError):
            compensate_ego_motion(PseudoLiDARPatch(), np.eye(4), np.eye(4))


class TestChamfer:
    def test_zero_for_identical(self, rng):
        a = rng.normal(size=(40, 3))
        assert chamfer_distance(a, a) == 0.0

    def test_brute_force(self, rng):
        a, b = rng.normal(size=(30, 3)), rng.normal(size=(20, 3))
        d = np.linalg.norm(a[:, None] - b[None], axis=-1)
        assert chamfer_distance(a, b) == pytest.approx(0.5 * (d.min(1).mean() + d.min(0).mean()), rel=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            chamfer_distance(np.zeros((0, 3)), np.ones((2, 3)))


class TestBox3D:
    def test_bev_corners_axis_aligned(self):
        b = Box3D([0.0, 0.0, 10.0], (4.0, 2.0, 1.5), 0.0)
        xs, zs = b.bev_corners().T
        assert sorted(set(np.round(xs, 12))) == [-2.0, 2.0]
        assert sorted(set(np.round(zs, 12))) == [9.0, 11.0]

    def test_yaw_quarter_turn_points_length_along_minus_z(self):
        b = Box3D([0.0, 0.0, 10.0], (4.0, 2.0, 1.5), math.pi / 2)
        zs = b.bev_corners()[:, 1]
        assert zs.max() - zs.min() == pytest.approx(4.0)

    def test_footprint(self, cam):
        assert pixel_footprint(40.0, cam) == pytest.approx(0.1)
