"""Forward warping of a reference image to new cameras through its depth map."""

from dataclasses import dataclass

import numpy as np

from ._validation import check_image
from .camera import project_points
from .exceptions import EmptyTrajectory, InputError
from .scale import _as_depth, _check_depth_matches, unproject_pixels

BACKGROUND = (0.5, 0.5, 0.5)


@dataclass(eq=False)
class WarpResult:
    image: np.ndarray
    validity: np.ndarray
    depth_buffer: np.ndarray
    src_uv: np.ndarray = None
    dst_uv: np.ndarray = None


def disc_offsets(radius):
    """Integer (dx, dy) offsets within a disc of ``radius`` pixels."""
    r = int(np.floor(radius))
    if radius < 0:
        raise InputError("splat_radius must be non-negative")
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dx**2 + dy**2 <= radius**2
    return np.stack([dx[keep], dy[keep]], axis=1)


def warp_frame(
    src_frame,
    src_image,
    src_depth,
    dst_frame,
    splat_radius=1,
    background=BACKGROUND,
    return_correspondences=False,
):
    """Render ``src_image`` from ``dst_frame`` by splatting its unprojected depth.

    Each valid source pixel becomes one point covering a disc of
    ``splat_radius`` pixels around the destination pixel it lands in. The
    nearest point wins per destination pixel; equal depths resolve to the
    lower source pixel index. Points at or behind the destination camera are
    dropped.
    """
    depth = _as_depth(src_depth)
    _check_depth_matches(src_frame, depth)
    k_src = src_frame.intrinsics
    img = check_image(src_image, k_src.height, k_src.width, name="src_image")
    n_ch = img.shape[2]
    points, flat = unproject_pixels(src_frame, depth)
    colors = img.reshape(-1, n_ch)[flat]

    k = dst_frame.intrinsics
    H, W = k.height, k.width
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (n_ch,))
    out = np.empty((H, W, n_ch))
    out[:] = bg
    zbuf = np.full((H, W), np.inf)
    valid = np.zeros((H, W), dtype=bool)

    uv, z = project_points(dst_frame, points)
    r = max(float(splat_radius), 0.0)
    with np.errstate(invalid="ignore"):
        front = (
            (z > 0)
            & np.all(np.isfinite(uv), axis=1)
            & (uv[:, 0] > -r - 1)
            & (uv[:, 0] < W + r + 1)
            & (uv[:, 1] > -r - 1)
            & (uv[:, 1] < H + r + 1)
        )
    idx = np.nonzero(front)[0]
    px = np.floor(uv[idx]).astype(np.int64)
    offsets = disc_offsets(r)
    tx = (px[:, None, 0] + offsets[None, :, 0]).ravel()
    ty = (px[:, None, 1] + offsets[None, :, 1]).ravel()
    owner = np.repeat(idx, len(offsets))
    inb = (tx >= 0) & (tx < W) & (ty >= 0) & (ty < H)
    tx, ty, owner = tx[inb], ty[inb], owner[inb]
    if len(owner):
        target = ty * W + tx
        order = np.lexsort((owner, z[owner], target))
        target, owner = target[order], owner[order]
        first = np.ones(len(target), dtype=bool)
        first[1:] = target[1:] != target[:-1]
        target, owner = target[first], owner[first]
        out.reshape(-1, n_ch)[target] = colors[owner]
        zbuf.ravel()[target] = z[owner]
        valid.ravel()[target] = True

    result = WarpResult(out, valid, zbuf)
    if return_correspondences:
        w_src = k_src.width
        src_uv = np.stack([flat % w_src + 0.5, flat // w_src + 0.5], axis=1).astype(np.float64)
        result.src_uv = src_uv[idx]
        result.dst_uv = uv[idx]
    return result


def warp_sequence(src_frame, src_image, src_depth, trajectory, splat_radius=1, background=BACKGROUND):
    """One :class:`WarpResult` per trajectory frame, in order."""
    if len(trajectory) == 0:
        raise EmptyTrajectory("nothing to warp to")
    return [
        warp_frame(src_frame, src_image, src_depth, f, splat_radius, background)
        for f in trajectory
    ]
