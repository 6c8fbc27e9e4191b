import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from trajsplat.camera import (
    CameraFrame,
    Convention,
    Intrinsics,
    IntervalSchedule,
    Pose,
    Trajectory,
    generate_trajectory,
    interpolate_poses,
    look_at,
    make_relative,
    pixel_ray,
    pixel_rays,
    project_points,
    random_pose,
    ray_embedding_map,
    sample_interval,
)
from trajsplat.exceptions import (
    AmbiguousGeodesic,
    EmptyTrajectory,
    InputError,
    InvalidFrameCount,
    PixelOutOfBounds,
    StepOutOfRange,
)

from conftest import random_trajectory

K = Intrinsics(10.0, 12.0, 16.0, 12.0, 32, 24)


def rot_z(theta):
    return Rotation.from_euler("z", theta).as_matrix()


def rot_y(theta):
    return Rotation.from_euler("y", theta).as_matrix()


class TestTypes:
    @pytest.mark.parametrize(
        "args",
        [(0, 1, 1, 1, 2, 2), (1, -1, 1, 1, 2, 2), (1, 1, 0, 1, 2, 2), (1, 1, 1, 2, 2, 2), (1, 1, 1, 1, 0, 2)],
    )
    def test_intrinsics_invariants(self, args):
        with pytest.raises(InputError):
            Intrinsics(*args)

    def test_k_inverse(self):
        assert np.allclose(K.K @ K.K_inv, np.eye(3), atol=1e-15)

    def test_pose_rejects_non_rotation(self):
        with pytest.raises(InputError):
            Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
        with pytest.raises(InputError):
            Pose(np.eye(3) * 1.01, np.zeros(3))

    def test_pose_is_immutable(self):
        p = Pose.identity()
        with pytest.raises(ValueError):
            p.rotation[0, 0] = 2.0

    def test_pose_inverse_and_matrix(self, rng):
        p = random_pose(rng)
        assert (p @ p.inverse()).allclose(Pose.identity(), atol=1e-12)
        assert np.allclose(Pose.from_matrix(p.matrix).matrix, p.matrix)

    def test_duplicate_frame_index(self):
        f = CameraFrame(K, Pose.identity(), 0)
        with pytest.raises(InputError):
            Trajectory((f, f))


class TestMakeRelative:
    def test_shared_pose_gives_identities(self, rng):
        p = random_pose(rng)
        rel = make_relative(Trajectory.from_poses([p] * 4, K))
        assert rel.convention is Convention.FIRST_FRAME_RELATIVE
        for q in rel.poses:
            assert q.allclose(Pose.identity(), atol=1e-12)

    def test_pure_translation(self):
        traj = Trajectory.from_poses([Pose.identity(), Pose(np.eye(3), [1.0, 0, 0])], K)
        rel = make_relative(traj)
        assert np.allclose(rel[1].pose.translation, [1.0, 0.0, 0.0])

    def test_frame0_exact_identity(self, rng):
        rel = make_relative(random_trajectory(rng))
        assert rel[0].pose == Pose.identity()

    def test_round_trip_1000_trajectories(self, rng):
        worst = 0.0
        for _ in range(1000):
            traj = random_trajectory(rng, n_frames=5, translation_scale=3.0)
            rel = make_relative(traj)
            p0 = traj[0].pose
            for orig, r in zip(traj.poses, rel.poses):
                back = p0 @ r
                worst = max(worst, np.abs(back.matrix - orig.matrix).max())
                R = r.rotation
                assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
                assert abs(np.linalg.det(R) - 1.0) < 1e-9
        assert worst < 1e-9

    def test_empty(self):
        with pytest.raises(EmptyTrajectory):
            make_relative(Trajectory(()))


class TestPixelRay:
    def test_principal_point_optical_axis(self):
        f = CameraFrame(K, Pose.identity(), 0)
        ray = pixel_ray(f, K.cx - 0.5, K.cy - 0.5)
        assert np.allclose(ray.direction, [0, 0, 1], atol=1e-15)
        assert np.allclose(ray.origin, 0.0)

    def test_one_focal_length_right(self):
        f = CameraFrame(K, Pose.identity(), 0)
        ray = pixel_ray(f, K.cx + K.fx - 0.5, K.cy - 0.5)
        assert np.allclose(ray.direction, np.array([1.0, 0.0, 1.0]) / math.sqrt(2), atol=1e-12)

    def test_rotated_half_turn(self):
        f = CameraFrame(K, Pose(rot_y(math.pi), [1.0, 2.0, 3.0]), 0)
        ray = pixel_ray(f, K.cx - 0.5, K.cy - 0.5)
        assert np.allclose(ray.direction, [0, 0, -1], atol=1e-12)
        assert np.allclose(ray.origin, [1.0, 2.0, 3.0])

    @pytest.mark.parametrize("uv", [(-0.1, 0), (32, 0), (0, 24), (0, -1)])
    def test_out_of_bounds(self, uv):
        with pytest.raises(PixelOutOfBounds):
            pixel_ray(CameraFrame(K, Pose.identity(), 0), *uv)

    def test_rays_project_back_to_pixel(self, rng):
        f = CameraFrame(K, random_pose(rng), 0)
        u = rng.uniform(0, K.width, 50)
        v = rng.uniform(0, K.height, 50)
        o, d = pixel_rays(f, u, v)
        uv, z = project_points(f, o + 3.0 * d)
        assert np.all(z > 0)
        assert np.allclose(uv, np.stack([u + 0.5, v + 0.5], axis=1), atol=1e-9)


class TestRayEmbedding:
    def test_identity_pose_zero_moment(self):
        emb = ray_embedding_map(CameraFrame(K, Pose.identity(), 0))
        assert emb.shape == (24, 32, 6)
        assert np.all(emb[..., :3] == 0.0)
        assert np.allclose(np.linalg.norm(emb[..., 3:], axis=-1), 1.0, atol=1e-12)

    def test_moment_by_hand(self):
        k = Intrinsics(10.0, 10.0, 4.5, 4.5, 9, 9)
        emb = ray_embedding_map(CameraFrame(k, Pose(np.eye(3), [0.0, 1.0, 0.0]), 0))
        assert np.allclose(emb[4, 4, :3], [1.0, 0.0, 0.0], atol=1e-12)
        assert np.allclose(emb[4, 4, 3:], [0.0, 0.0, 1.0], atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_plucker_identity(self, seed):
        rng = np.random.default_rng(seed)
        f = CameraFrame(K, random_pose(rng, translation_scale=10.0), 0)
        emb = ray_embedding_map(f)
        assert np.abs(np.einsum("hwc,hwc->hw", emb[..., :3], emb[..., 3:])).max() < 1e-7
        assert np.abs(np.linalg.norm(emb[..., 3:], axis=-1) - 1.0).max() < 1e-7

    def test_resolution_parameter(self):
        emb = ray_embedding_map(CameraFrame(K, Pose.identity(), 0), resolution=(6, 8))
        assert emb.shape == (6, 8, 6)
        # rescaled camera: fx=2.5, fy=3, cx=4, cy=3; pixel (4, 3) has center (4.5, 3.5)
        d = np.array([0.5 / 2.5, 0.5 / 3.0, 1.0])
        assert np.allclose(emb[3, 4, 3:], d / np.linalg.norm(d), atol=1e-12)

    def test_deterministic(self, rng):
        f = CameraFrame(K, random_pose(rng), 0)
        assert np.array_equal(ray_embedding_map(f), ray_embedding_map(f))


BASE = CameraFrame(K, Pose.identity(), 0)


class TestGenerateTrajectory:
    def test_zoom_in(self):
        t = generate_trajectory("zoom_in", 3, 1.0, BASE)
        assert np.allclose(t.translations, [[0, 0, 0], [0, 0, 0.5], [0, 0, 1.0]], atol=1e-15)
        assert t.convention is Convention.FIRST_FRAME_RELATIVE

    def test_zoom_out_moves_backwards(self):
        t = generate_trajectory("zoom_out", 3, 2.0, BASE)
        assert np.allclose(t.translations[-1], [0, 0, -2.0])

    def test_orbit_on_circle(self):
        r = 1.7
        t = generate_trajectory("orbit", 5, r, BASE)
        pivot = np.array([0.0, 0.0, r])
        d = np.linalg.norm(t.translations - pivot, axis=1)
        assert np.abs(d - r).max() < 1e-9
        for f in t:
            fwd = f.pose.rotation[:, 2]
            to_pivot = (pivot - f.pose.translation) / r
            assert np.allclose(fwd, to_pivot, atol=1e-12)

    @pytest.mark.parametrize("kind, sign", [("pan_left", -1), ("pan_right", 1)])
    def test_pan_endpoint(self, kind, sign):
        t = generate_trajectory(kind, 6, 0.8, BASE)
        assert abs(t.translations[-1, 0] - sign * 0.8) < 1e-9
        assert np.allclose(t.translations[:, 1:], 0.0)

    def test_frame0_is_base(self):
        t = generate_trajectory("orbit", 4, 1.0, BASE)
        assert t[0].pose == Pose.identity()
        assert t[0].intrinsics == K

    def test_monotone(self):
        t = generate_trajectory("zoom_in", 7, 3.0, BASE)
        assert np.all(np.diff(t.translations[:, 2]) > 0)

    @pytest.mark.parametrize("n", [0, 1])
    def test_too_few_frames(self, n):
        with pytest.raises(InvalidFrameCount):
            generate_trajectory("zoom_in", n, 1.0, BASE)


class TestInterpolate:
    def test_constant(self, rng):
        p = random_pose(rng)
        t = interpolate_poses(p, p, 4, K)
        for q in t.poses:
            assert q.allclose(p, atol=1e-12)

    def test_slerp_midpoint(self):
        t = interpolate_poses(Pose.identity(), Pose(rot_z(math.pi / 2), np.zeros(3)), 3, K)
        assert np.abs(t[1].pose.rotation - rot_z(math.pi / 4)).max() < 1e-9

    def test_linear_translation(self):
        t = interpolate_poses(Pose.identity(), Pose(np.eye(3), [2.0, 0, 0]), 5, K)
        assert np.allclose(t.translations[:, 0], [0, 0.5, 1.0, 1.5, 2.0], atol=1e-15)

    def test_endpoints_exact_and_constant_speed(self, rng):
        a, b = random_pose(rng), random_pose(rng)
        if np.linalg.norm(Rotation.from_matrix(a.rotation.T @ b.rotation).as_rotvec()) > 3.1:
            pytest.skip("near half-turn draw")
        t = interpolate_poses(a, b, 9, K)
        assert t[0].pose == a and t[-1].pose == b
        steps = [
            np.linalg.norm(Rotation.from_matrix(p.rotation.T @ q.rotation).as_rotvec())
            for p, q in zip(t.poses[:-1], t.poses[1:])
        ]
        assert np.ptp(steps) < 1e-6

    def test_antipodal_quaternion_sign(self):
        # 170 degrees about z: the quaternion representations can straddle the sign boundary
        end = Pose(rot_z(math.radians(170)), np.zeros(3))
        t = interpolate_poses(Pose.identity(), end, 3, K)
        angle = np.linalg.norm(Rotation.from_matrix(t[1].pose.rotation).as_rotvec())
        assert abs(angle - math.radians(85)) < 1e-9

    def test_half_turn_ambiguous(self):
        with pytest.raises(AmbiguousGeodesic):
            interpolate_poses(Pose.identity(), Pose(rot_z(math.pi), np.zeros(3)), 3, K)


class TestInterval:
    def test_paper_ramp_endpoints(self):
        s = IntervalSchedule(2, 10, "linear", 9)
        assert sample_interval(s, 0) == 2
        assert sample_interval(s, 8) == 10

    def test_midpoint(self):
        assert sample_interval(IntervalSchedule(2, 10, "linear", 9), 4) == 6

    def test_ramp_is_monotone(self):
        s = IntervalSchedule(2, 10, "linear", 30)
        vals = [sample_interval(s, i) for i in range(30)]
        assert vals == sorted(vals) and vals[0] == 2 and vals[-1] == 10

    def test_random_seeded(self):
        s = IntervalSchedule(2, 10, "random", 9)
        vals = [sample_interval(s, i, rng_seed=7) for i in range(100)]
        assert all(2 <= v <= 10 for v in vals)
        assert vals == [sample_interval(s, i, rng_seed=7) for i in range(100)]
        assert len(set(vals)) > 1

    def test_step_out_of_range(self):
        with pytest.raises(StepOutOfRange):
            sample_interval(IntervalSchedule(2, 10, "linear", 9), 9)

    def test_start_after_end(self):
        with pytest.raises(InputError):
            IntervalSchedule(5, 3)


def test_look_at_points_forward():
    p = look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0])
    assert np.allclose(p.rotation[:, 2], [0, 0, 1])
    assert abs(np.linalg.det(p.rotation) - 1.0) < 1e-12
