"""Camera algebra, per-pixel rays, Plücker embeddings and trajectories.

Conventions
-----------
* Poses are stored world-from-camera: ``X_world = R @ X_cam + t``, so the
  translation is the camera center in world coordinates.
* Camera axes follow OpenCV: +x right, +y down, +z along the optical axis.
* Pixel ``(u, v)`` has its center at ``(u + 0.5, v + 0.5)``; continuous
  pixel coordinates are accepted everywhere.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
import math

import numpy as np
from scipy.spatial.transform import Rotation

from ._validation import check_positive, check_positive_int, check_rotation, check_vector3
from .exceptions import (
    AmbiguousGeodesic,
    EmptyTrajectory,
    InputError,
    InvalidFrameCount,
    PixelOutOfBounds,
    StepOutOfRange,
)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        check_positive_int(self.width, "width")
        check_positive_int(self.height, "height")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InputError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def K(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def K_inv(self):
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def shape(self):
        return (self.height, self.width)

    def rescaled(self, height, width):
        """Intrinsics of the same camera sampled at a different resolution."""
        sx = width / self.width
        sy = height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)

    @classmethod
    def from_fov(cls, width, height, fov_x_deg=60.0):
        f = 0.5 * width / math.tan(math.radians(fov_x_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height)


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid world-from-camera transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(check_rotation(self.rotation)))
        object.__setattr__(self, "translation", _frozen(check_vector3(self.translation, "translation")))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @property
    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def center(self):
        return self.translation

    def inverse(self):
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other):
        return self.compose(other)

    def world_to_camera(self, points):
        """Map (N, 3) world points into this camera's coordinates."""
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def camera_to_world(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def allclose(self, other, atol=1e-9):
        return np.allclose(self.rotation, other.rotation, rtol=0, atol=atol) and np.allclose(
            self.translation, other.translation, rtol=0, atol=atol
        )

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    __hash__ = None

    def __repr__(self):
        rv = Rotation.from_matrix(self.rotation).as_rotvec()
        return f"Pose(rotvec={np.round(rv, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


@dataclass(frozen=True)
class CameraFrame:
    intrinsics: Intrinsics
    pose: Pose = field(default_factory=Pose.identity)
    frame_index: int = 0

    def __post_init__(self):
        check_positive_int(self.frame_index, "frame_index", minimum=0)

    def with_pose(self, pose):
        return replace(self, pose=pose)


class Convention(str, Enum):
    FIRST_FRAME_RELATIVE = "first_frame_relative"
    WORLD = "world"


@dataclass(frozen=True)
class Trajectory:
    frames: tuple
    convention: Convention = Convention.WORLD

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "convention", Convention(self.convention))
        idx = [f.frame_index for f in frames]
        if len(set(idx)) != len(idx):
            raise InputError("frame indices must be unique within a trajectory")

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def poses(self):
        return [f.pose for f in self.frames]

    @property
    def intrinsics(self):
        return [f.intrinsics for f in self.frames]

    @property
    def translations(self):
        return np.array([f.pose.translation for f in self.frames]).reshape(-1, 3)

    @property
    def rotations(self):
        return np.array([f.pose.rotation for f in self.frames]).reshape(-1, 3, 3)

    @classmethod
    def from_poses(cls, poses, intrinsics, convention=Convention.WORLD):
        if isinstance(intrinsics, Intrinsics):
            intrinsics = [intrinsics] * len(poses)
        frames = [CameraFrame(k, p, i) for i, (k, p) in enumerate(zip(intrinsics, poses))]
        return cls(tuple(frames), convention)

    def with_poses(self, poses, convention=None):
        frames = tuple(f.with_pose(p) for f, p in zip(self.frames, poses))
        return Trajectory(frames, self.convention if convention is None else convention)


def make_relative(trajectory):
    """Express every pose relative to the first frame.

    The first output pose is the identity and ``pose_0 ∘ rel_i`` recovers the
    input pose ``i``.
    """
    if len(trajectory) == 0:
        raise EmptyTrajectory("cannot relativize an empty trajectory")
    inv0 = trajectory[0].pose.inverse()
    rel = [inv0.compose(f.pose) for f in trajectory]
    rel[0] = Pose.identity()
    return trajectory.with_poses(rel, Convention.FIRST_FRAME_RELATIVE)


def pixel_rays(frame, u, v):
    """Vectorized :func:`pixel_ray`. Returns ``(origins, directions)``, each (..., 3)."""
    k = frame.intrinsics
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any((u < 0) | (u >= k.width) | (v < 0) | (v >= k.height)):
        raise PixelOutOfBounds(f"pixel outside {k.width}x{k.height} image")
    cam = np.stack(
        [(u + 0.5 - k.cx) / k.fx, (v + 0.5 - k.cy) / k.fy, np.ones_like(u)], axis=-1
    )
    d = cam @ frame.pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(frame.pose.translation, d.shape).copy()
    return o, d


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


def pixel_ray(frame, u, v):
    """World-space ray through the center of pixel ``(u, v)``.

    The direction is ``normalize(R K^-1 (u+0.5, v+0.5, 1))``; the camera
    translation sets the origin and never enters the direction.
    """
    o, d = pixel_rays(frame, u, v)
    return Ray(o, d)


def _pixel_grid(height, width):
    v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return u, v


def ray_embedding_map(frame, resolution=None):
    """Per-pixel Plücker coordinates ``(o × d, d)`` as an (H, W, 6) array.

    ``resolution=(H, W)`` resamples the camera first, e.g. to embed rays at a
    latent resolution rather than the image resolution.
    """
    if resolution is not None:
        frame = replace(frame, intrinsics=frame.intrinsics.rescaled(*resolution))
    k = frame.intrinsics
    u, v = _pixel_grid(k.height, k.width)
    o, d = pixel_rays(frame, u, v)
    return np.concatenate([np.cross(o, d), d], axis=-1)


class TrajectoryKind(str, Enum):
    ZOOM_IN = "zoom_in"
    ZOOM_OUT = "zoom_out"
    PAN_LEFT = "pan_left"
    PAN_RIGHT = "pan_right"
    ORBIT = "orbit"


def _rot_y(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def generate_trajectory(kind, n_frames, magnitude, base, orbit_angle=math.pi / 3):
    """Basic camera motion expressed relative to ``base``.

    Frame 0 is the base camera (identity pose, base intrinsics). Zooms move
    along the optical axis, pans along the camera x axis, and ``orbit``
    circles a pivot ``magnitude`` units in front of the base camera, sweeping
    ``orbit_angle`` radians while looking at the pivot.
    """
    kind = TrajectoryKind(kind)
    if isinstance(n_frames, bool) or int(n_frames) != n_frames or n_frames < 2:
        raise InvalidFrameCount(f"need at least 2 frames, got {n_frames}")
    magnitude = check_positive(magnitude, "magnitude")
    n_frames = int(n_frames)
    poses = []
    for i in range(n_frames):
        s = i / (n_frames - 1)
        if kind is TrajectoryKind.ORBIT:
            pivot = np.array([0.0, 0.0, magnitude])
            R = _rot_y(s * orbit_angle)
            poses.append(Pose(R, pivot - R @ pivot))
            continue
        direction = {
            TrajectoryKind.ZOOM_IN: (0.0, 0.0, 1.0),
            TrajectoryKind.ZOOM_OUT: (0.0, 0.0, -1.0),
            TrajectoryKind.PAN_LEFT: (-1.0, 0.0, 0.0),
            TrajectoryKind.PAN_RIGHT: (1.0, 0.0, 0.0),
        }[kind]
        poses.append(Pose(np.eye(3), s * magnitude * np.array(direction)))
    poses[0] = Pose.identity()
    frames = tuple(CameraFrame(base.intrinsics, p, i) for i, p in enumerate(poses))
    return Trajectory(frames, Convention.FIRST_FRAME_RELATIVE)


def interpolate_poses(start, end, n_frames, intrinsics=None):
    """Geodesic rotation / linear translation interpolation between two poses.

    The rotation follows the shortest arc at constant angular velocity, which
    is quaternion slerp with the antipodal sign flip. Rotations exactly half a
    turn apart have no unique shortest arc and raise :class:`AmbiguousGeodesic`.
    """
    if isinstance(n_frames, bool) or int(n_frames) != n_frames or n_frames < 2:
        raise InvalidFrameCount(f"need at least 2 frames, got {n_frames}")
    n_frames = int(n_frames)
    rel = Rotation.from_matrix(start.rotation.T @ end.rotation).as_rotvec()
    if np.linalg.norm(rel) > math.pi - 1e-9:
        raise AmbiguousGeodesic("start and end rotations differ by 180 degrees")
    poses = [start]
    for i in range(1, n_frames - 1):
        s = i / (n_frames - 1)
        R = start.rotation @ Rotation.from_rotvec(s * rel).as_matrix()
        t = (1.0 - s) * start.translation + s * end.translation
        poses.append(Pose(R, t))
    poses.append(end)
    if intrinsics is None:
        intrinsics = Intrinsics(1.0, 1.0, 0.5, 0.5, 1, 1)
    return Trajectory.from_poses(poses, intrinsics)


class ScheduleMode(str, Enum):
    LINEAR = "linear"
    RANDOM = "random"


@dataclass(frozen=True)
class IntervalSchedule:
    """Frame-sampling interval schedule used while building training clips."""

    start_interval: int = 2
    end_interval: int = 10
    mode: ScheduleMode = ScheduleMode.LINEAR
    total_steps: int = 9

    def __post_init__(self):
        check_positive_int(self.start_interval, "start_interval")
        check_positive_int(self.end_interval, "end_interval")
        check_positive_int(self.total_steps, "total_steps")
        object.__setattr__(self, "mode", ScheduleMode(self.mode))
        if self.start_interval > self.end_interval:
            raise InputError("start_interval must not exceed end_interval")


def sample_interval(schedule, step, rng_seed=0):
    """Frame interval for a training step.

    Linear mode ramps ``start -> end`` over ``total_steps`` (round half up);
    random mode draws uniformly from ``[start, end]``, seeded by
    ``(rng_seed, step)``.
    """
    check_positive_int(step, "step", minimum=0)
    a, b = schedule.start_interval, schedule.end_interval
    if schedule.mode is ScheduleMode.LINEAR:
        if step >= schedule.total_steps:
            raise StepOutOfRange(f"step {step} >= total_steps {schedule.total_steps}")
        if schedule.total_steps == 1:
            return a
        return int(math.floor(a + (b - a) * step / (schedule.total_steps - 1) + 0.5))
    rng = np.random.default_rng([int(rng_seed) & 0xFFFFFFFF, step])
    return int(rng.integers(a, b + 1))


def look_at(center, target, up=(0.0, -1.0, 0.0)):
    """World-from-camera pose at ``center`` with the optical axis toward ``target``."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    if np.linalg.norm(x) < 1e-12:
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), center)


def project_points(frame, points):
    """Project (N, 3) world points. Returns ``(uv, z)`` with continuous pixel coordinates.

    Pixel index ``floor(uv)`` contains the point; ``z`` is camera-space depth.
    """
    cam = frame.pose.world_to_camera(points)
    k = frame.intrinsics
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([k.fx * cam[:, 0] / z + k.cx, k.fy * cam[:, 1] / z + k.cy], axis=1)
    return uv, z


def random_pose(rng, translation_scale=1.0):
    R = Rotation.random(random_state=rng).as_matrix()
    return Pose(R, rng.normal(size=3) * translation_scale)
