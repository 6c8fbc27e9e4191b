"""Two-view epipolar geometry and epipolar attention masks.

A mask for the ordered pair ``(i, k)`` has one row per destination pixel ``q``
in frame ``k`` and one column per source pixel ``p`` in frame ``i``; entry
``(q, p)`` is true when ``q`` lies within ``tau`` pixels of the epipolar line
of ``p``. Rows and columns enumerate pixels in row-major order.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import os

import numpy as np

from ._validation import check_array, check_positive, check_resolution
from .camera import Intrinsics
from .exceptions import DegenerateBaseline, EpipoleQuery, InputError, InvalidFrameCount

DEFAULT_TAU = 2.0
DEGENERATE_F_TOL = 1e-12


def skew(t):
    tx, ty, tz = t
    return np.array([[0.0, -tz, ty], [tz, 0.0, -tx], [-ty, tx, 0.0]])


def relative_pose(pose_i, pose_k):
    """Rotation and translation mapping camera-i coordinates into camera k."""
    R_rel = pose_k.rotation.T @ pose_i.rotation
    t_rel = pose_k.rotation.T @ (pose_i.translation - pose_k.translation)
    return R_rel, t_rel


def essential_from_poses(pose_i, pose_k):
    """``E = [t]_x R`` for the pose of camera i seen from camera k.

    Normalized coordinates of one 3D point satisfy ``x_k^T E x_i = 0``.
    """
    R_rel, t_rel = relative_pose(pose_i, pose_k)
    if np.linalg.norm(t_rel) < 1e-12:
        raise DegenerateBaseline("camera centers coincide; epipolar geometry is undefined")
    return skew(t_rel) @ R_rel


def _as_K(K):
    if isinstance(K, Intrinsics):
        return K.K
    K = check_array(K, shape=(3, 3), name="K")
    if abs(np.linalg.det(K)) < 1e-300:
        raise InputError("intrinsic matrix is singular")
    return K


def fundamental_from_essential(E, K_i, K_k):
    """``F = K_k^-T E K_i^-1``. ``K_*`` may be :class:`Intrinsics` or 3x3 matrices."""
    E = check_array(E, shape=(3, 3), name="E")
    Ki_inv = np.linalg.inv(_as_K(K_i))
    Kk_inv = np.linalg.inv(_as_K(K_k))
    return Kk_inv.T @ E @ Ki_inv


def fundamental_from_frames(frame_i, frame_k):
    E = essential_from_poses(frame_i.pose, frame_k.pose)
    return fundamental_from_essential(E, frame_i.intrinsics, frame_k.intrinsics)


@dataclass(frozen=True)
class EpipolarLine:
    """Line ``a*u + b*v + c = 0`` with ``a^2 + b^2 = 1`` whenever ``(a, b) != 0``."""

    a: float
    b: float
    c: float

    @property
    def coefficients(self):
        return np.array([self.a, self.b, self.c])

    def distance(self, u, v):
        return np.abs(self.a * np.asarray(u) + self.b * np.asarray(v) + self.c)


def epipolar_line(F, p):
    """Epipolar line in frame k of the frame-i point ``p = (u, v)``."""
    F = check_array(F, shape=(3, 3), name="F")
    ph = np.array([p[0], p[1], 1.0], dtype=np.float64)
    line = F @ ph
    if np.linalg.norm(line) <= 1e-12 * max(np.linalg.norm(F), 1e-300) * np.linalg.norm(ph):
        raise EpipoleQuery(f"pixel {tuple(p)} is the epipole")
    n = np.hypot(line[0], line[1])
    if n > 0:
        line = line / n
    return EpipolarLine(*line)


def pixel_centers(height, width):
    """Homogeneous pixel centers, (H*W, 3), row-major."""
    v, u = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    return np.stack([u.ravel(), v.ravel(), np.ones(height * width)], axis=1)


@dataclass(frozen=True, eq=False)
class PairMask:
    mask: np.ndarray
    degenerate: bool = False


def line_distances(F, src_res, dst_res):
    """Distances (N_dst, N_src) from destination pixel centers to source-pixel lines.

    Columns whose line is undefined (the source epipole) are NaN.
    """
    hs, ws = check_resolution(src_res, "src_res")
    hd, wd = check_resolution(dst_res, "dst_res")
    lines = F @ pixel_centers(hs, ws).T
    norm = np.hypot(lines[0], lines[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        lines = np.where(norm > 0, lines / norm, np.nan)
    return np.abs(pixel_centers(hd, wd) @ lines)


def build_mask(F, src_res, dst_res, tau=DEFAULT_TAU):
    """Boolean (N_dst, N_src) mask of destination pixels near each source pixel's line.

    A degenerate ``F`` (every entry below 1e-12 in magnitude) yields an
    all-true mask with ``degenerate=True``. Source pixels with no defined
    line (the epipole) keep a full column.
    """
    F = check_array(F, shape=(3, 3), name="F")
    tau = check_positive(tau, "tau")
    hs, ws = check_resolution(src_res, "src_res")
    hd, wd = check_resolution(dst_res, "dst_res")
    if np.all(np.abs(F) < DEGENERATE_F_TOL):
        return PairMask(np.ones((hd * wd, hs * ws), dtype=bool), True)
    dist = line_distances(F, (hs, ws), (hd, wd))
    mask = dist <= tau
    undefined = np.isnan(dist[0])
    mask[:, undefined] = True
    return PairMask(mask, False)


def _n_workers():
    try:
        return max(1, int(os.environ.get("SC_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(eq=False)
class EpipolarMaskSet:
    """Bit-packed masks for every ordered frame pair at one feature resolution."""

    height: int
    width: int
    tau: float
    n_frames: int
    packed: dict = field(default_factory=dict)
    degenerate: dict = field(default_factory=dict)

    @property
    def n_pixels(self):
        return self.height * self.width

    @property
    def pairs(self):
        return sorted(self.packed)

    def set(self, i, k, mask, degenerate=False):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.n_pixels, self.n_pixels):
            raise InputError(f"mask for pair {(i, k)} has shape {mask.shape}")
        self.packed[(i, k)] = np.packbits(mask, axis=1, bitorder="little")
        self.degenerate[(i, k)] = bool(degenerate)

    def dense(self, i, k):
        return np.unpackbits(
            self.packed[(i, k)], axis=1, count=self.n_pixels, bitorder="little"
        ).astype(bool)

    def __getitem__(self, pair):
        return self.dense(*pair)

    def __len__(self):
        return len(self.packed)

    def token_mask(self):
        """Full (T*N, T*N) attention mask: query rows in frame k, key columns in frame i."""
        n = self.n_pixels
        full = np.ones((self.n_frames * n, self.n_frames * n), dtype=bool)
        for (i, k) in self.packed:
            full[k * n:(k + 1) * n, i * n:(i + 1) * n] = self.dense(i, k)
        return full


def mask_set_for_trajectory(trajectory, feature_res, tau=DEFAULT_TAU, intrinsics=None):
    """Masks for all ordered pairs of a trajectory at ``feature_res``.

    Intrinsics (the trajectory's own unless given) are rescaled to the feature
    resolution. Pairs with a zero baseline get all-true masks flagged as
    degenerate; diagonal pairs are all-true.
    """
    h, w = check_resolution(feature_res, "feature_res")
    tau = check_positive(tau, "tau")
    if len(trajectory) < 2:
        raise InvalidFrameCount("epipolar masks need at least 2 frames")
    if intrinsics is None:
        intrinsics = trajectory.intrinsics
    elif isinstance(intrinsics, Intrinsics):
        intrinsics = [intrinsics] * len(trajectory)
    frames = [
        replace(f, intrinsics=k.rescaled(h, w)) for f, k in zip(trajectory.frames, intrinsics)
    ]
    n = len(frames)
    result = EpipolarMaskSet(h, w, tau, n)

    def build(pair):
        i, k = pair
        if i == k:
            return pair, PairMask(np.ones((h * w, h * w), dtype=bool), False)
        try:
            F = fundamental_from_frames(frames[i], frames[k])
        except DegenerateBaseline:
            return pair, PairMask(np.ones((h * w, h * w), dtype=bool), True)
        return pair, build_mask(F, (h, w), (h, w), tau)

    pairs = [(i, k) for i in range(n) for k in range(n)]
    workers = _n_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            built = list(pool.map(build, pairs))
    else:
        built = [build(p) for p in pairs]
    for (i, k), pm in built:
        result.set(i, k, pm.mask, pm.degenerate)
    return result
