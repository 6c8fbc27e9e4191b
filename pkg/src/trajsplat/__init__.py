"""Camera-trajectory geometry and toy-scale learnable components for sparse-view
reconstruction: ray embeddings, epipolar masks, scale alignment, depth
warping, Gaussian splatting, a hybrid SSM/attention backbone, a toy EDM
diffusion model and pose/image metrics."""

from .camera import (
    CameraFrame,
    Convention,
    Intrinsics,
    IntervalSchedule,
    Pose,
    Trajectory,
    generate_trajectory,
    interpolate_poses,
    make_relative,
    pixel_ray,
    pixel_rays,
    ray_embedding_map,
    sample_interval,
)
from .diffusion import ToyDiffusion, toy_trajectory_dataset
from .epipolar import (
    EpipolarMaskSet,
    build_mask,
    epipolar_line,
    essential_from_poses,
    fundamental_from_essential,
    fundamental_from_frames,
    mask_set_for_trajectory,
)
from .exceptions import InputError, NumericalError, TrajsplatError
from .gsplat import (
    GaussianCloud,
    GaussianSplatFitter,
    LossWeights,
    composite_loss,
    decode_gaussians,
    fit_gaussians,
    render,
    render_backward,
)
from .metrics import normalize_trajectory, pose_report, psnr, rotation_error, ssim, translation_error
from .scale import MetricDepthMap, PointCloud, ScaleAligner, apply_scale, estimate_scale
from .seq_model import HybridReconstructor, HybridStackConfig, TokenSequence
from .warp import warp_frame, warp_sequence

__all__ = [
    "apply_scale",
    "build_mask",
    "CameraFrame",
    "composite_loss",
    "Convention",
    "decode_gaussians",
    "epipolar_line",
    "EpipolarMaskSet",
    "essential_from_poses",
    "estimate_scale",
    "fit_gaussians",
    "fundamental_from_essential",
    "fundamental_from_frames",
    "GaussianCloud",
    "GaussianSplatFitter",
    "generate_trajectory",
    "HybridReconstructor",
    "HybridStackConfig",
    "InputError",
    "interpolate_poses",
    "IntervalSchedule",
    "Intrinsics",
    "LossWeights",
    "make_relative",
    "mask_set_for_trajectory",
    "MetricDepthMap",
    "normalize_trajectory",
    "NumericalError",
    "pixel_ray",
    "pixel_rays",
    "PointCloud",
    "Pose",
    "pose_report",
    "psnr",
    "ray_embedding_map",
    "render",
    "render_backward",
    "rotation_error",
    "sample_interval",
    "ScaleAligner",
    "ssim",
    "TokenSequence",
    "toy_trajectory_dataset",
    "ToyDiffusion",
    "Trajectory",
    "TrajsplatError",
    "translation_error",
    "warp_frame",
    "warp_sequence",
]

__version__ = "0.1.0"
