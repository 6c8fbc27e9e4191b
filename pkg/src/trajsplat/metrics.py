"""Pose-accuracy and image-quality metrics."""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from ._validation import check_array, check_same_shape
from .camera import Convention, Pose, make_relative
from .exceptions import ImageTooSmall, InvalidFrameCount, LengthMismatch, StaticTrajectory

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def normalize_trajectory(trajectory):
    """First-frame relative poses with translations scaled so the furthest frame
    sits at unit distance."""
    if len(trajectory) < 2:
        raise InvalidFrameCount("normalization needs at least 2 frames")
    rel = make_relative(trajectory)
    norms = np.linalg.norm(rel.translations, axis=1)
    furthest = norms.max()
    if furthest == 0:
        raise StaticTrajectory("every camera sits at the first frame's position")
    poses = [Pose(p.rotation, p.translation / furthest) for p in rel.poses]
    return rel.with_poses(poses, Convention.FIRST_FRAME_RELATIVE)


def _check_lengths(gen, gt):
    if len(gen) != len(gt):
        raise LengthMismatch(f"trajectories have {len(gen)} and {len(gt)} frames")


def rotation_errors(gen, gt):
    """Per-frame geodesic angles between corresponding rotations.

    Equal to ``arccos((tr(R_gen R_gt^T) - 1) / 2)`` but evaluated as
    ``atan2(sin, cos)``, which stays accurate near 0 and pi.
    """
    _check_lengths(gen, gt)
    M = np.einsum("nij,nkj->nik", gen.rotations, gt.rotations)
    cos = (np.trace(M, axis1=1, axis2=2) - 1.0) / 2.0
    axis = np.stack([M[:, 2, 1] - M[:, 1, 2], M[:, 0, 2] - M[:, 2, 0], M[:, 1, 0] - M[:, 0, 1]], axis=1)
    return np.arctan2(0.5 * np.linalg.norm(axis, axis=1), cos)


def rotation_error(gen, gt):
    """Summed rotation distance in radians. Inputs should already be first-frame relative."""
    return float(rotation_errors(gen, gt).sum())


def translation_errors(gen, gt):
    _check_lengths(gen, gt)
    a = normalize_trajectory(gen).translations
    b = normalize_trajectory(gt).translations
    return np.linalg.norm(a - b, axis=1)


def translation_error(gen, gt):
    """Summed Euclidean distance between normalized camera positions."""
    return float(translation_errors(gen, gt).sum())


@dataclass(frozen=True)
class PoseErrorReport:
    r_dist: float
    t_dist: float
    r_per_frame: np.ndarray
    t_per_frame: np.ndarray

    @property
    def r_mean(self):
        return float(self.r_per_frame.mean())

    @property
    def t_mean(self):
        return float(self.t_per_frame.mean())

    def as_dict(self):
        return {
            "r_dist": self.r_dist,
            "t_dist": self.t_dist,
            "r_mean": self.r_mean,
            "t_mean": self.t_mean,
            "per_frame": {
                "r_dist": self.r_per_frame.tolist(),
                "t_dist": self.t_per_frame.tolist(),
            },
        }


def pose_report(gen, gt, relativize=True):
    """Rotation and translation errors with per-frame breakdowns.

    With ``relativize`` both trajectories are first expressed relative to
    their first frame before rotations are compared.
    """
    if relativize:
        gen, gt = make_relative(gen), make_relative(gt)
    r = rotation_errors(gen, gt)
    t = translation_errors(gen, gt)
    return PoseErrorReport(float(r.sum()), float(t.sum()), r, t)


def psnr(a, b, max_value=1.0):
    """Peak signal-to-noise ratio in dB, capped at 99 (identical images)."""
    a = check_array(a, name="a")
    b = check_array(b, name="b")
    check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(max_value**2 / mse), PSNR_CAP))


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def _filter_valid(img, w):
    out = correlate1d(correlate1d(img, w, axis=0), w, axis=1)
    r = len(w) // 2
    return out[r:-r, r:-r]


def ssim_map(a, b, max_value=1.0):
    """Local SSIM over the valid region of a single-channel pair."""
    w = _gaussian_window()
    c1 = (0.01 * max_value) ** 2
    c2 = (0.03 * max_value) ** 2
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    s_aa = _filter_valid(a * a, w) - mu_a * mu_a
    s_bb = _filter_valid(b * b, w) - mu_b * mu_b
    s_ab = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    return num / den


def ssim(a, b, max_value=1.0):
    """Mean structural similarity, 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    a = check_array(a, name="a")
    b = check_array(b, name="b")
    check_same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ImageTooSmall(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    vals = [ssim_map(a[..., c], b[..., c], max_value).mean() for c in range(a.shape[2])]
    return float(np.mean(vals))


def image_report(rendered, targets, max_value=1.0):
    """PSNR/SSIM per image pair plus their means."""
    rendered, targets = list(rendered), list(targets)
    if len(rendered) != len(targets):
        raise LengthMismatch(f"{len(rendered)} renders vs {len(targets)} targets")
    p = [psnr(r, t, max_value) for r, t in zip(rendered, targets)]
    s = [ssim(r, t, max_value) for r, t in zip(rendered, targets)]
    return {
        "psnr": float(np.mean(p)),
        "ssim": float(np.mean(s)),
        "per_frame": {"psnr": p, "ssim": s},
    }
