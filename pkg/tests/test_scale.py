import numpy as np
import pytest

from trajsplat.camera import CameraFrame, Intrinsics, Pose, Trajectory, make_relative, project_points, random_pose
from trajsplat.exceptions import DegenerateDepth, InsufficientOverlap, ShapeMismatch
from trajsplat.scale import (
    MetricDepthMap,
    PointCloud,
    ScaleAligner,
    apply_scale,
    depth_ratios,
    estimate_scale,
    unproject_depth,
)

K = Intrinsics(30.0, 30.0, 16.0, 12.0, 32, 24)


def sparse_scene(rng, scale, n=60, frame=None, outlier_frac=0.0):
    """Sparse points at distinct pixel centers with a metric depth map that is ``scale`` times their depth."""
    frame = frame or CameraFrame(K, random_pose(rng), 0)
    pix = rng.choice(K.width * K.height, size=n, replace=False)
    rows, cols = np.divmod(pix, K.width)
    z = rng.uniform(1.0, 6.0, n)
    cam = np.stack([(cols + 0.5 - K.cx) / K.fx * z, (rows + 0.5 - K.cy) / K.fy * z, z], axis=1)
    pts = frame.pose.camera_to_world(cam)
    depth = np.zeros((K.height, K.width))
    metric = scale * z
    n_out = int(round(outlier_frac * n))
    metric[:n_out] *= 10.0
    depth[rows, cols] = metric
    return PointCloud(pts), frame, MetricDepthMap(depth)


class TestEstimate:
    def test_exact_scale(self, rng):
        cloud, frame, depth = sparse_scene(rng, 2.5)
        sf = estimate_scale(cloud, frame, depth)
        assert abs(sf.s - 2.5) < 1e-9
        assert sf.inlier_ratio == 1.0 and sf.inlier_count == 60

    def test_unit_scale(self, rng):
        cloud, frame, depth = sparse_scene(rng, 1.0)
        assert abs(estimate_scale(cloud, frame, depth).s - 1.0) < 1e-9

    def test_outliers(self, rng):
        cloud, frame, depth = sparse_scene(rng, 3.0, n=100, outlier_frac=0.2)
        sf = estimate_scale(cloud, frame, depth)
        assert abs(sf.s - 3.0) / 3.0 < 0.01
        assert sf.inlier_count == 80

    def test_median_breakdown(self, rng):
        for frac in (0.1, 0.3, 0.45):
            cloud, frame, depth = sparse_scene(rng, 1.7, n=101, outlier_frac=frac)
            assert abs(estimate_scale(cloud, frame, depth).s - 1.7) / 1.7 < 0.05

    def test_scale_equivariance(self, rng):
        for _ in range(10):
            cloud, frame, depth = sparse_scene(rng, 2.0)
            k = rng.uniform(0.1, 10.0)
            s = estimate_scale(cloud, frame, depth).s
            # scaling the reconstruction scales its cameras too
            scaled_frame = frame.with_pose(Pose(frame.pose.rotation, frame.pose.translation * k))
            s_k = estimate_scale(cloud.scaled(k), scaled_frame, depth).s
            assert abs(s_k - s / k) < 1e-9

    def test_too_few_points(self, rng):
        cloud, frame, depth = sparse_scene(rng, 1.0, n=9)
        with pytest.raises(InsufficientOverlap):
            estimate_scale(cloud, frame, depth)

    def test_points_behind_camera_ignored(self, rng):
        cloud, frame, depth = sparse_scene(rng, 1.0, n=20)
        behind = frame.pose.camera_to_world(np.array([[0.0, 0.0, -2.0]] * 5))
        both = PointCloud(np.vstack([cloud.points, behind]))
        assert len(depth_ratios(both, frame, depth)) == 20

    def test_invalid_depth_excluded(self, rng):
        cloud, frame, depth = sparse_scene(rng, 1.0, n=30)
        capped = MetricDepthMap(depth.depth, depth_max=0.5)
        with pytest.raises(InsufficientOverlap):
            estimate_scale(cloud, frame, capped)

    def test_non_finite_ratios(self, rng):
        frame = CameraFrame(K, Pose.identity(), 0)
        # points exactly on the image plane z = 0 project to infinity and are skipped;
        # a depth map of infinities marks everything invalid
        depth = MetricDepthMap(np.full((K.height, K.width), np.inf))
        cloud, _, _ = sparse_scene(rng, 1.0, frame=frame)
        with pytest.raises(InsufficientOverlap):
            estimate_scale(cloud, frame, depth)

    def test_degenerate_ratios(self, rng):
        # tiny depths make every ratio overflow to infinity
        frame = CameraFrame(K, Pose.identity(), 0)
        cloud, _, depth = sparse_scene(rng, 1.0, frame=frame)
        tiny = PointCloud(cloud.points * 1e-320)
        with pytest.raises(DegenerateDepth):
            estimate_scale(tiny, frame, depth, min_points=0)

    def test_multi_frame_pooling(self, rng):
        a = sparse_scene(rng, 2.0, n=6)
        b = sparse_scene(rng, 2.0, n=6)
        pts = PointCloud(np.vstack([a[0].points, b[0].points]))
        sf = estimate_scale(pts, [a[1], b[1]], [a[2], b[2]])
        assert abs(sf.s - 2.0) < 1e-9

    def test_ray_mode(self, rng):
        frame = CameraFrame(K, Pose.identity(), 0)
        cloud, _, _ = sparse_scene(rng, 1.0, frame=frame)
        uv, _ = project_points(frame, cloud.points)
        depth = np.zeros((K.height, K.width))
        r = np.floor(uv).astype(int)
        depth[r[:, 1], r[:, 0]] = 4.0 * np.linalg.norm(cloud.points, axis=1)
        assert abs(estimate_scale(cloud, frame, depth, depth_mode="ray").s - 4.0) < 1e-9


class TestApplyScale:
    def test_identity(self, rng):
        traj = Trajectory.from_poses([random_pose(rng) for _ in range(3)], K)
        out = apply_scale(traj, 1.0)
        assert all(a == b for a, b in zip(out.poses, traj.poses))

    def test_linear(self):
        traj = Trajectory.from_poses([Pose(np.eye(3), [1.0, 2.0, 3.0])], K)
        assert np.array_equal(apply_scale(traj, 2.0).translations[0], [2.0, 4.0, 6.0])

    def test_commutes_with_make_relative(self, rng):
        traj = Trajectory.from_poses([random_pose(rng) for _ in range(6)], K)
        a = make_relative(apply_scale(traj, 3.3))
        b = apply_scale(make_relative(traj), 3.3)
        for p, q in zip(a.poses, b.poses):
            assert np.abs(p.matrix - q.matrix).max() < 1e-12


class TestUnproject:
    def test_optical_axis(self):
        k = Intrinsics(10.0, 10.0, 2.5, 2.5, 5, 5)
        cloud = unproject_depth(CameraFrame(k, Pose.identity(), 0), np.ones((5, 5)))
        assert np.allclose(cloud.points[12], [0.0, 0.0, 1.0], atol=1e-15)

    def test_round_trip(self, rng):
        frame = CameraFrame(K, random_pose(rng), 0)
        depth = rng.uniform(0.5, 8.0, (K.height, K.width))
        cloud = unproject_depth(frame, depth)
        uv, z = project_points(frame, cloud.points)
        v, u = np.mgrid[0:K.height, 0:K.width]
        assert np.abs(uv - np.stack([u.ravel() + 0.5, v.ravel() + 0.5], axis=1)).max() < 1e-6
        assert np.abs(z - depth.ravel()).max() < 1e-9

    def test_all_invalid(self):
        cloud = unproject_depth(CameraFrame(K, Pose.identity(), 0), np.zeros((K.height, K.width)))
        assert len(cloud) == 0

    def test_colors_follow_points(self, rng):
        frame = CameraFrame(K, Pose.identity(), 0)
        depth = np.ones((K.height, K.width))
        depth[0, 0] = -1.0
        img = rng.random((K.height, K.width, 3))
        cloud = unproject_depth(frame, depth, img)
        assert len(cloud) == K.height * K.width - 1
        assert np.array_equal(cloud.colors[0], img[0, 1])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            unproject_depth(CameraFrame(K, Pose.identity(), 0), np.ones((3, 3)))


class TestScaleAligner:
    def test_fit_transform(self, rng):
        cloud, frame, depth = sparse_scene(rng, 2.5)
        traj = Trajectory.from_poses([frame.pose, random_pose(rng)], K)
        out = ScaleAligner().fit_transform(cloud, frame, depth, traj)
        assert np.allclose(out.translations, 2.5 * traj.translations, atol=1e-9)

    def test_params(self):
        est = ScaleAligner(depth_mode="ray", inlier_band=2.0)
        assert est.get_params() == {"depth_mode": "ray", "min_points": 10, "inlier_band": 2.0}
