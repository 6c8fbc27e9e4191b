"""Metric scale recovery for up-to-scale reconstructions, and depth unprojection."""

from dataclasses import dataclass
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_array, check_positive
from .camera import CameraFrame, Pose, Trajectory, pixel_rays, project_points
from .exceptions import DegenerateDepth, InputError, InsufficientOverlap, ShapeMismatch


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray = None

    def __post_init__(self):
        self.points = check_array(self.points, name="points").reshape(-1, 3)
        if self.colors is not None:
            self.colors = check_array(self.colors, name="colors").reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ShapeMismatch("colors and points differ in length")

    def __len__(self):
        return len(self.points)

    def scaled(self, k):
        return PointCloud(self.points * k, None if self.colors is None else self.colors.copy())


@dataclass(eq=False)
class MetricDepthMap:
    """Per-pixel metric depth with a validity mask.

    Entries outside ``(0, depth_max]`` or non-finite are always invalid.
    """

    depth: np.ndarray
    valid: np.ndarray = None
    depth_max: float = np.inf

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim == 3 and self.depth.shape[-1] == 1:
            self.depth = self.depth[..., 0]
        if self.depth.ndim != 2:
            raise ShapeMismatch(f"depth map must be (H, W), got {self.depth.shape}")
        with np.errstate(invalid="ignore"):
            ok = np.isfinite(self.depth) & (self.depth > 0) & (self.depth <= self.depth_max)
        if self.valid is None:
            self.valid = ok
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.depth.shape:
                raise ShapeMismatch("validity mask shape differs from depth shape")
            self.valid = self.valid & ok

    @property
    def shape(self):
        return self.depth.shape


@dataclass(frozen=True)
class ScaleFactor:
    s: float
    inlier_count: int
    inlier_ratio: float

    def __float__(self):
        return float(self.s)


class DepthMode(str, Enum):
    Z = "z"
    RAY = "ray"


def _as_depth(depth):
    return depth if isinstance(depth, MetricDepthMap) else MetricDepthMap(depth)


def _check_depth_matches(frame, depth):
    k = frame.intrinsics
    if depth.shape != (k.height, k.width):
        raise ShapeMismatch(
            f"depth map is {depth.shape[0]}x{depth.shape[1]}, camera is {k.height}x{k.width}"
        )


def depth_ratios(sparse, ref_frame, metric_depth, depth_mode="z"):
    """Ratios metric / reconstructed depth for sparse points seen in ``ref_frame``."""
    depth_mode = DepthMode(depth_mode)
    metric_depth = _as_depth(metric_depth)
    _check_depth_matches(ref_frame, metric_depth)
    pts = sparse.points if isinstance(sparse, PointCloud) else check_array(sparse).reshape(-1, 3)
    k = ref_frame.intrinsics
    uv, z = project_points(ref_frame, pts)
    with np.errstate(invalid="ignore"):
        inside = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < k.width) & (uv[:, 1] >= 0) & (uv[:, 1] < k.height)
    cols = np.floor(uv[inside, 0]).astype(int)
    rows = np.floor(uv[inside, 1]).astype(int)
    ok = metric_depth.valid[rows, cols]
    measured = metric_depth.depth[rows[ok], cols[ok]]
    if depth_mode is DepthMode.Z:
        recon = z[inside][ok]
    else:
        recon = np.linalg.norm(ref_frame.pose.world_to_camera(pts[inside][ok]), axis=1)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return measured / recon


def estimate_scale(sparse, ref_frame, metric_depth, depth_mode="z", min_points=10, inlier_band=1.5):
    """Median-of-ratios scale taking the sparse reconstruction to metric units.

    ``ref_frame`` and ``metric_depth`` may also be equal-length sequences, in
    which case ratios from every frame are pooled. The inlier band only feeds
    the reported statistics, never the estimate.
    """
    if isinstance(ref_frame, CameraFrame):
        ratios = depth_ratios(sparse, ref_frame, metric_depth, depth_mode)
    else:
        frames, depths = list(ref_frame), list(metric_depth)
        if len(frames) != len(depths):
            raise InputError("need one depth map per reference frame")
        ratios = np.concatenate(
            [depth_ratios(sparse, f, d, depth_mode) for f, d in zip(frames, depths)]
        )
    if len(ratios) < min_points:
        raise InsufficientOverlap(
            f"only {len(ratios)} sparse points have valid metric depth (need {min_points})"
        )
    finite = ratios[np.isfinite(ratios)]
    if len(finite) == 0:
        raise DegenerateDepth("every depth ratio is non-finite")
    if len(finite) < min_points:
        raise InsufficientOverlap(f"only {len(finite)} finite depth ratios (need {min_points})")
    s = float(np.median(finite))
    if not s > 0:
        raise DegenerateDepth(f"estimated scale {s} is not positive")
    inliers = int(np.count_nonzero((finite >= s / inlier_band) & (finite <= s * inlier_band)))
    return ScaleFactor(s, inliers, inliers / len(finite))


def apply_scale(trajectory, s):
    """Multiply every camera translation by ``s``; rotations are untouched."""
    s = check_positive(float(s), "scale")
    poses = [Pose(p.rotation, p.translation * s) for p in trajectory.poses]
    return trajectory.with_poses(poses)


def unproject_pixels(frame, depth, depth_mode="z"):
    """3D points and flat pixel indices for every valid pixel of ``depth``."""
    depth_mode = DepthMode(depth_mode)
    depth = _as_depth(depth)
    _check_depth_matches(frame, depth)
    rows, cols = np.nonzero(depth.valid)
    flat = rows * depth.shape[1] + cols
    if len(flat) == 0:
        return np.zeros((0, 3)), flat
    k = frame.intrinsics
    d = depth.depth[rows, cols]
    if depth_mode is DepthMode.Z:
        cam = np.stack(
            [(cols + 0.5 - k.cx) / k.fx * d, (rows + 0.5 - k.cy) / k.fy * d, d], axis=1
        )
        return frame.pose.camera_to_world(cam), flat
    origins, dirs = pixel_rays(frame, cols.astype(np.float64), rows.astype(np.float64))
    return origins + dirs * d[:, None], flat


def unproject_depth(frame, depth, colors=None, depth_mode="z"):
    """Lift every valid depth pixel to a world-space point (row-major order).

    In the default ``"z"`` mode the depth is measured along the optical axis;
    ``"ray"`` treats it as distance along the pixel ray.
    """
    points, flat = unproject_pixels(frame, depth, depth_mode)
    col = None
    if colors is not None:
        colors = np.asarray(colors, dtype=np.float64)
        k = frame.intrinsics
        if colors.shape[:2] != (k.height, k.width):
            raise ShapeMismatch("color image does not match the camera resolution")
        col = colors.reshape(k.height * k.width, -1)[flat][:, :3]
    return PointCloud(points, col)


class ScaleAligner(TransformerMixin, BaseEstimator):
    """Estimate a metric scale from a sparse cloud and a metric depth map, then
    rescale trajectories.

    Parameters
    ----------
    depth_mode : {"z", "ray"}
        How depth-map values are measured.
    min_points : int
        Minimum number of sparse points with valid metric depth.
    inlier_band : float
        Multiplicative band around the estimate counted as inliers.

    Attributes
    ----------
    scale_ : ScaleFactor
    """

    def __init__(self, depth_mode="z", min_points=10, inlier_band=1.5):
        self.depth_mode = depth_mode
        self.min_points = min_points
        self.inlier_band = inlier_band

    def fit(self, sparse, ref_frame, metric_depth):
        self.scale_ = estimate_scale(
            sparse,
            ref_frame,
            metric_depth,
            depth_mode=self.depth_mode,
            min_points=self.min_points,
            inlier_band=self.inlier_band,
        )
        return self

    def transform(self, trajectory):
        check_is_fitted(self, "scale_")
        if not isinstance(trajectory, Trajectory):
            raise InputError("ScaleAligner.transform expects a Trajectory")
        return apply_scale(trajectory, self.scale_.s)

    def fit_transform(self, sparse, ref_frame, metric_depth, trajectory):
        return self.fit(sparse, ref_frame, metric_depth).transform(trajectory)
