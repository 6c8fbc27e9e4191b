"""3D Gaussian primitives: decoding, software splatting, gradients and fitting.

Quaternions are stored scalar-first ``(w, x, y, z)``. The renderer evaluates
every surviving Gaussian at every pixel center and composites front to back in
camera-depth order; ties in depth go to the lower provenance ``(frame, pixel)``.
Culling is per primitive: a Gaussian is dropped when it lies behind the near
plane, when its 3-sigma box misses the image, or when its opacity falloff stays
below 1/255 on every pixel.
"""

from dataclasses import dataclass, field, replace
import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._optim import Adam
from ._validation import check_image
from .camera import Trajectory, pixel_rays
from .exceptions import DivergenceError, InputError, ShapeMismatch
from .scale import MetricDepthMap

logger = logging.getLogger(__name__)

N_CHANNELS = 12
RGB, SCALE, ROT, OPACITY, RAYDIST = slice(0, 3), slice(3, 6), slice(6, 10), 10, 11
ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0
MAX_CONDITION = 1e12
_PROB_EPS = 1e-12


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), _PROB_EPS, 1.0 - _PROB_EPS)
    return np.log(p) - np.log1p(-p)


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def quat_to_matrix(q):
    """Rotation matrices (..., 3, 3) from unit quaternions (..., 4), scalar first."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


@dataclass(frozen=True, eq=False)
class Gaussian3D:
    mean: np.ndarray
    scales: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray

    @property
    def covariance(self):
        R = quat_to_matrix(self.rotation)
        return R @ np.diag(self.scales**2) @ R.T


@dataclass(eq=False)
class GaussianCloud:
    """Structure-of-arrays collection of Gaussians.

    ``ray_origins``/``ray_dirs`` are present for ray-parameterized clouds, in
    which case each mean sits at ``origin + distance * dir``.
    """

    means: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    provenance: np.ndarray = None
    ray_origins: np.ndarray = None
    ray_dirs: np.ndarray = None
    n_degenerate_quats: int = 0

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        if self.provenance is None:
            self.provenance = np.stack([np.zeros(n, dtype=np.int64), np.arange(n)], axis=1)
        self.provenance = np.asarray(self.provenance, dtype=np.int64).reshape(n, 2)
        if n and len(np.unique(self.provenance, axis=0)) != n:
            raise InputError("Gaussian provenance entries must be unique")
        for name in ("ray_origins", "ray_dirs"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.asarray(val, dtype=np.float64).reshape(n, 3))

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i):
        return Gaussian3D(self.means[i], self.scales[i], self.quats[i], float(self.opacities[i]), self.colors[i])

    @property
    def has_rays(self):
        return self.ray_origins is not None and self.ray_dirs is not None

    @property
    def ray_distances(self):
        return np.einsum("ij,ij->i", self.means - self.ray_origins, self.ray_dirs)

    def copy(self):
        return GaussianCloud(
            self.means.copy(), self.scales.copy(), self.quats.copy(), self.opacities.copy(),
            self.colors.copy(), self.provenance.copy(),
            None if self.ray_origins is None else self.ray_origins.copy(),
            None if self.ray_dirs is None else self.ray_dirs.copy(),
            self.n_degenerate_quats,
        )

    def subset(self, idx):
        idx = np.asarray(idx)
        return GaussianCloud(
            self.means[idx], self.scales[idx], self.quats[idx], self.opacities[idx],
            self.colors[idx], self.provenance[idx],
            None if self.ray_origins is None else self.ray_origins[idx],
            None if self.ray_dirs is None else self.ray_dirs[idx],
        )

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def concatenate(cls, clouds):
        clouds = list(clouds)
        rays = all(c.has_rays for c in clouds)
        return cls(
            np.concatenate([c.means for c in clouds]),
            np.concatenate([c.scales for c in clouds]),
            np.concatenate([c.quats for c in clouds]),
            np.concatenate([c.opacities for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            np.concatenate([c.provenance for c in clouds]),
            np.concatenate([c.ray_origins for c in clouds]) if rays else None,
            np.concatenate([c.ray_dirs for c in clouds]) if rays else None,
            sum(c.n_degenerate_quats for c in clouds),
        )


def _frame_grid(frame):
    k = frame.intrinsics
    v, u = np.meshgrid(np.arange(k.height, dtype=np.float64), np.arange(k.width, dtype=np.float64), indexing="ij")
    return pixel_rays(frame, u.ravel(), v.ravel())


def decode_gaussians(G, trajectory, intrinsics=None, scale_max=10.0):
    """Turn a pre-activation (T*H*W, 12) feature map into a merged GaussianCloud.

    Channels: RGB (sigmoid), log-scales (exp, clamped to ``[1e-6, scale_max]``),
    quaternion (normalized), opacity (sigmoid) and ray distance (softplus,
    measured along each pixel's unit ray).
    """
    if not isinstance(trajectory, Trajectory):
        raise InputError("decode_gaussians expects a Trajectory")
    frames = list(trajectory)
    if intrinsics is not None:
        ks = intrinsics if isinstance(intrinsics, (list, tuple)) else [intrinsics] * len(frames)
        frames = [replace(f, intrinsics=k) for f, k in zip(frames, ks)]
    G = np.asarray(G, dtype=np.float64)
    T = len(frames)
    H, W = frames[0].intrinsics.height, frames[0].intrinsics.width
    if any(f.intrinsics.shape != (H, W) for f in frames):
        raise ShapeMismatch("all frames must share one resolution")
    if G.shape[-1] != N_CHANNELS or G.size != T * H * W * N_CHANNELS:
        raise ShapeMismatch(f"feature map of shape {G.shape} does not match T={T}, H={H}, W={W}")
    G = G.reshape(T, H * W, N_CHANNELS)

    clouds = []
    for t, frame in enumerate(frames):
        g = G[t]
        origins, dirs = _frame_grid(frame)
        quats = g[:, ROT].copy()
        norms = np.linalg.norm(quats, axis=1)
        bad = norms < 1e-12
        quats[bad] = (1.0, 0.0, 0.0, 0.0)
        norms[bad] = 1.0
        quats /= norms[:, None]
        dist = softplus(g[:, RAYDIST])
        clouds.append(
            GaussianCloud(
                means=origins + dist[:, None] * dirs,
                scales=np.clip(np.exp(np.minimum(g[:, SCALE], 700.0)), 1e-6, scale_max),
                quats=quats,
                opacities=np.clip(sigmoid(g[:, OPACITY]), _PROB_EPS, 1.0 - _PROB_EPS),
                colors=sigmoid(g[:, RGB]),
                provenance=np.stack([np.full(H * W, t), np.arange(H * W)], axis=1),
                ray_origins=origins,
                ray_dirs=dirs,
                n_degenerate_quats=int(bad.sum()),
            )
        )
    return GaussianCloud.concatenate(clouds)


@dataclass(eq=False)
class RenderResult:
    image: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    n_culled: int = 0
    n_skipped: int = 0
    state: dict = field(default=None, repr=False)


def _project(cloud, frame, near):
    k = frame.intrinsics
    R = frame.pose.rotation
    t = (cloud.means - frame.pose.translation) @ R
    tz = t[:, 2]
    front = tz > near
    tz_safe = np.where(front, tz, 1.0)
    inv_z = 1.0 / tz_safe
    mu = np.stack([k.fx * t[:, 0] * inv_z + k.cx, k.fy * t[:, 1] * inv_z + k.cy], axis=1)
    J = np.zeros((len(t), 2, 3))
    J[:, 0, 0] = k.fx * inv_z
    J[:, 0, 2] = -k.fx * t[:, 0] * inv_z**2
    J[:, 1, 1] = k.fy * inv_z
    J[:, 1, 2] = -k.fy * t[:, 1] * inv_z**2
    Rq = quat_to_matrix(cloud.quats)
    cov3 = np.einsum("nij,nj,nkj->nik", Rq, cloud.scales**2, Rq)
    M = np.einsum("ji,njk,kl->nil", R, cov3, R)
    cov2 = np.einsum("nij,njk,nlk->nil", J, M, J)
    return t, front, mu, J, M, cov2


def _sort_key(cloud, z):
    return np.lexsort((cloud.provenance[:, 1], cloud.provenance[:, 0], z))


def render(cloud, camera, background=(0.0, 0.0, 0.0), near=0.01, keep_state=False):
    """Render ``cloud`` from ``camera`` by front-to-back alpha compositing.

    Returns a :class:`RenderResult` with an (H, W, 3) image, an (H, W) depth map
    composited with the same weights, and the accumulated alpha.
    """
    k = camera.intrinsics
    H, W = k.height, k.width
    P = H * W
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,)).copy()
    n = len(cloud)
    n_skipped = 0
    n_culled = 0
    active = np.zeros(n, dtype=bool)
    if n:
        t, front, mu, J, M, cov2 = _project(cloud, camera, near)
        a, b, d = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
        tr_half = 0.5 * (a + d)
        disc = np.sqrt(np.maximum(tr_half**2 - (a * d - b * b), 0.0))
        lmax, lmin = tr_half + disc, tr_half - disc
        with np.errstate(divide="ignore", invalid="ignore"):
            ill = front & ~((lmin > 0) & (lmax / lmin <= MAX_CONDITION))
        n_skipped = int(ill.sum())
        radius = 3.0 * np.sqrt(np.maximum(lmax, 0.0))
        on_screen = (
            (mu[:, 0] + radius >= 0) & (mu[:, 0] - radius <= W)
            & (mu[:, 1] + radius >= 0) & (mu[:, 1] - radius <= H)
        )
        active = front & ~ill & on_screen
    idx = np.nonzero(active)[0]
    if len(idx):
        cov = cov2[idx]
        det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
        A = np.stack([cov[:, 1, 1], -cov[:, 0, 1], -cov[:, 1, 0], cov[:, 0, 0]], axis=1).reshape(-1, 2, 2)
        A /= det[:, None, None]
        v, u = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
        dx = u.ravel()[None, :] - mu[idx, 0:1]
        dy = v.ravel()[None, :] - mu[idx, 1:2]
        q = A[:, 0, 0, None] * dx * dx + 2.0 * A[:, 0, 1, None] * dx * dy + A[:, 1, 1, None] * dy * dy
        g = np.exp(-0.5 * q)
        alpha_raw = cloud.opacities[idx, None] * g
        visible = alpha_raw.max(axis=1) >= ALPHA_MIN
        n_culled = int((~visible).sum())
        keep = np.nonzero(visible)[0]
        idx, A, dx, dy, g, alpha_raw = idx[keep], A[keep], dx[keep], dy[keep], g[keep], alpha_raw[keep]
        order = _sort_key(cloud.subset(idx), t[idx, 2])
        idx, A, dx, dy, g, alpha_raw = idx[order], A[order], dx[order], dy[order], g[order], alpha_raw[order]
    n_culled += int(n - active.sum() - n_skipped)

    if len(idx):
        alpha = np.minimum(alpha_raw, ALPHA_MAX)
        trans_incl = np.cumprod(1.0 - alpha, axis=0)
        T = np.vstack([np.ones((1, P)), trans_incl[:-1]])
        T_final = trans_incl[-1]
        w = alpha * T
        z = t[idx, 2]
        image = w.T @ cloud.colors[idx] + T_final[:, None] * bg
        depth = w.T @ z
    else:
        T_final = np.ones(P)
        image = np.tile(bg, (P, 1))
        depth = np.zeros(P)
        alpha = w = T = np.zeros((0, P))

    state = None
    if keep_state:
        state = dict(idx=idx, alpha=alpha, T=T, T_final=T_final, w=w, bg=bg, H=H, W=W)
        if len(idx):
            state.update(
                alpha_raw=alpha_raw, g=g, dx=dx, dy=dy, A=A, J=J[idx], M=M[idx],
                t=t[idx], z=z,
            )
    return RenderResult(
        image.reshape(H, W, 3), depth.reshape(H, W), (1.0 - T_final).reshape(H, W),
        n_culled, n_skipped, state,
    )


@dataclass(eq=False)
class Gradients:
    colors: np.ndarray
    opacities: np.ndarray
    means: np.ndarray


def render_backward(cloud, camera, grad_image, grad_depth=None, background=(0.0, 0.0, 0.0), near=0.01, state=None):
    """Analytic gradients of a scalar loss w.r.t. colors, opacities and means.

    ``grad_image`` is dL/d(image) with shape (H, W, 3) and ``grad_depth`` the
    optional dL/d(depth) with shape (H, W). Pass ``state`` from a forward
    :func:`render` call with ``keep_state=True`` to skip re-rendering.
    Culled or skipped primitives receive zero gradient.
    """
    if state is None:
        state = render(cloud, camera, background, near, keep_state=True).state
    n = len(cloud)
    out = Gradients(np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)))
    idx = state["idx"]
    if len(idx) == 0:
        return out
    H, W = state["H"], state["W"]
    P = H * W
    gimg = np.asarray(grad_image, dtype=np.float64).reshape(P, 3)
    gdep = np.zeros(P) if grad_depth is None else np.asarray(grad_depth, dtype=np.float64).reshape(P)
    alpha, T, w, T_final = state["alpha"], state["T"], state["w"], state["T_final"]
    colors = cloud.colors[idx]
    z = state["z"]

    out.colors[idx] = w @ gimg
    per_pixel = colors @ gimg.T + z[:, None] * gdep[None, :]
    contrib = w * per_pixel
    tail = np.cumsum(contrib[::-1], axis=0)[::-1]
    behind = np.vstack([tail[1:], np.zeros((1, P))]) + (gimg @ state["bg"]) * T_final
    d_alpha = T * per_pixel - behind / (1.0 - alpha)
    d_alpha_raw = np.where(state["alpha_raw"] < ALPHA_MAX, d_alpha, 0.0)

    g = state["g"]
    out.opacities[idx] = np.sum(d_alpha_raw * g, axis=1)
    dq = d_alpha_raw * cloud.opacities[idx, None] * g * -0.5

    A = state["A"]
    dx, dy = state["dx"], state["dy"]
    sx, sy = np.sum(dq * dx, axis=1), np.sum(dq * dy, axis=1)
    d_mu = -2.0 * np.stack([A[:, 0, 0] * sx + A[:, 0, 1] * sy, A[:, 1, 0] * sx + A[:, 1, 1] * sy], axis=1)
    Q = np.empty((len(idx), 2, 2))
    Q[:, 0, 0] = np.sum(dq * dx * dx, axis=1)
    Q[:, 0, 1] = Q[:, 1, 0] = np.sum(dq * dx * dy, axis=1)
    Q[:, 1, 1] = np.sum(dq * dy * dy, axis=1)
    d_cov2 = -np.einsum("nij,njk,nkl->nil", A, Q, A)
    d_J = 2.0 * np.einsum("nij,njk,nkl->nil", d_cov2, state["J"], state["M"])

    k = camera.intrinsics
    t = state["t"]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    iz = 1.0 / tz
    dt = np.zeros_like(t)
    dt[:, 0] = d_mu[:, 0] * k.fx * iz - d_J[:, 0, 2] * k.fx * iz**2
    dt[:, 1] = d_mu[:, 1] * k.fy * iz - d_J[:, 1, 2] * k.fy * iz**2
    dt[:, 2] = (
        -d_mu[:, 0] * k.fx * tx * iz**2
        - d_mu[:, 1] * k.fy * ty * iz**2
        - d_J[:, 0, 0] * k.fx * iz**2
        + d_J[:, 0, 2] * 2.0 * k.fx * tx * iz**3
        - d_J[:, 1, 1] * k.fy * iz**2
        + d_J[:, 1, 2] * 2.0 * k.fy * ty * iz**3
        + w @ gdep
    )
    out.means[idx] = dt @ camera.pose.rotation.T
    return out


@dataclass(frozen=True)
class LossWeights:
    """Weights of the photometric, perceptual and depth terms."""

    mse: float = 1.0
    perceptual: float = 0.0
    depth: float = 0.1

    def __post_init__(self):
        vals = (self.mse, self.perceptual, self.depth)
        if any(v < 0 for v in vals) or not any(v > 0 for v in vals):
            raise InputError("loss weights must be non-negative with at least one positive")


@dataclass(eq=False)
class LossBreakdown:
    total: float
    mse: float
    perceptual: float
    depth: float
    depth_warning: bool = False
    grad_image: np.ndarray = None
    grad_depth: np.ndarray = None

    def as_dict(self):
        return dict(
            total=self.total, mse=self.mse, perceptual=self.perceptual,
            depth=self.depth, depth_warning=self.depth_warning,
        )


def composite_loss(
    rendered,
    target,
    rendered_depth=None,
    target_depth=None,
    weights=LossWeights(),
    perceptual=None,
    return_grad=False,
):
    """Weighted MSE + perceptual + depth-L1 reconstruction loss.

    ``perceptual`` is an optional callable ``f(rendered, target) -> float``;
    when gradients are requested it must also expose
    ``f.gradient(rendered, target)``. Without a plugin the perceptual term is 0.
    The depth term averages ``|depth - target|`` over valid target pixels; if
    none are valid it contributes 0 and ``depth_warning`` is set.
    """
    if isinstance(rendered, RenderResult):
        rendered_depth = rendered.depth if rendered_depth is None else rendered_depth
        rendered = rendered.image
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ShapeMismatch(f"rendered {rendered.shape} vs target {target.shape}")
    diff = rendered - target
    mse = float(np.mean(diff**2))
    grad_img = 2.0 * weights.mse * diff / diff.size if return_grad else None

    perc = 0.0
    if perceptual is not None and weights.perceptual > 0:
        perc = float(perceptual(rendered, target))
        if return_grad:
            grad_img = grad_img + weights.perceptual * np.asarray(perceptual.gradient(rendered, target))

    depth_term = 0.0
    warn = False
    grad_dep = None
    if weights.depth > 0 and target_depth is not None:
        td = target_depth if isinstance(target_depth, MetricDepthMap) else MetricDepthMap(target_depth)
        if rendered_depth is None:
            raise InputError("depth supervision needs a rendered depth map")
        rd = np.asarray(rendered_depth, dtype=np.float64)
        if rd.shape != td.shape:
            raise ShapeMismatch(f"rendered depth {rd.shape} vs target depth {td.shape}")
        n_valid = int(td.valid.sum())
        if n_valid == 0:
            warn = True
            if return_grad:
                grad_dep = np.zeros_like(rd)
        else:
            delta = np.where(td.valid, rd - np.where(td.valid, td.depth, 0.0), 0.0)
            depth_term = float(np.abs(delta).sum() / n_valid)
            if return_grad:
                grad_dep = weights.depth * np.sign(delta) / n_valid
    elif weights.depth > 0 and target_depth is None:
        warn = True
    total = weights.mse * mse + weights.perceptual * perc + weights.depth * depth_term
    return LossBreakdown(total, mse, perc, depth_term, warn, grad_img, grad_dep)


def ray_initialized_cloud(frame, image, depth, grid=(8, 8), opacity=0.9, footprint=0.6):
    """Gaussians on a regular pixel grid, seeded from the view's own unprojection.

    Each primitive sits on its pixel ray at the pixel's depth, takes the pixel
    color, and is isotropic with a projected radius of ``footprint`` times the
    grid spacing.
    """
    k = frame.intrinsics
    img = check_image(image, k.height, k.width)
    depth = depth if isinstance(depth, MetricDepthMap) else MetricDepthMap(depth)
    gh, gw = grid
    step_v, step_u = k.height / gh, k.width / gw
    rows = np.floor((np.arange(gh) + 0.5) * step_v).astype(int)
    cols = np.floor((np.arange(gw) + 0.5) * step_u).astype(int)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    if not np.all(depth.valid[rr, cc]):
        raise InputError("grid pixels need valid depth for ray initialization")
    origins, dirs = pixel_rays(frame, cc.astype(np.float64), rr.astype(np.float64))
    z = depth.depth[rr, cc]
    cos = dirs @ frame.pose.rotation[:, 2]
    dist = z / cos
    sigma = footprint * min(step_u / k.fx, step_v / k.fy) * z
    n = len(rr)
    return GaussianCloud(
        means=origins + dist[:, None] * dirs,
        scales=np.repeat(sigma[:, None], 3, axis=1),
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacities=np.full(n, opacity),
        colors=np.clip(img[rr, cc, :3], 0.0, 1.0),
        provenance=np.stack([np.full(n, frame.frame_index), rr * k.width + cc], axis=1),
        ray_origins=origins,
        ray_dirs=dirs,
    )


@dataclass(eq=False)
class FitResult:
    cloud: GaussianCloud
    loss_history: np.ndarray


def _views_loss(cloud, views, weights, background, perceptual, with_grad):
    total = 0.0
    grads = Gradients(np.zeros((len(cloud), 3)), np.zeros(len(cloud)), np.zeros((len(cloud), 3)))
    for frame, image, depth in views:
        res = render(cloud, frame, background, keep_state=with_grad)
        lb = composite_loss(res, image, None, depth, weights, perceptual, return_grad=with_grad)
        total += lb.total
        if with_grad:
            g = render_backward(cloud, frame, lb.grad_image, lb.grad_depth, background, state=res.state)
            grads.colors += g.colors
            grads.opacities += g.opacities
            grads.means += g.means
    nv = len(views)
    if with_grad:
        grads.colors /= nv
        grads.opacities /= nv
        grads.means /= nv
    return total / nv, grads


def _normalize_views(views):
    out = []
    for view in views:
        frame, image = view[0], view[1]
        depth = view[2] if len(view) > 2 else None
        k = frame.intrinsics
        out.append((frame, check_image(image, k.height, k.width)[..., :3], depth))
    if not out:
        raise InputError("fitting needs at least one supervision view")
    return out


def fit_gaussians(
    cloud,
    views,
    weights=LossWeights(),
    n_iters=2000,
    lr_color=0.05,
    lr_opacity=0.05,
    lr_mean=1e-3,
    background=(0.0, 0.0, 0.0),
    perceptual=None,
    divergence_factor=10.0,
    safeguard=True,
):
    """Optimize colors, opacities and means with Adam against supervision views.

    Colors and opacities are optimized as logits. Ray-parameterized clouds move
    their means only along their rays: the mean gradient is projected onto the
    ray direction. ``lr_mean`` is in world units per step.

    Depth-order swaps between overlapping Gaussians make the loss
    discontinuous in the means. With ``safeguard`` on, a step that raises the
    loss is undone (parameters and moment estimates) and the learning rates
    are halved (recovering by 10% per accepted step), so the returned history
    is non-increasing.
    """
    views = _normalize_views(views)
    cloud = cloud.copy()
    if n_iters == 0:
        return FitResult(cloud, np.zeros(0))
    params = {"color": logit(cloud.colors), "opacity": logit(cloud.opacities)}
    use_rays = cloud.has_rays
    params["mean"] = cloud.ray_distances.copy() if use_rays else cloud.means.copy()
    base_lr = {"color": lr_color, "opacity": lr_opacity, "mean": lr_mean}
    opt = Adam(params, lr=dict(base_lr))

    def sync():
        cloud.colors = sigmoid(params["color"])
        cloud.opacities = np.clip(sigmoid(params["opacity"]), _PROB_EPS, 1.0 - _PROB_EPS)
        if use_rays:
            cloud.means = cloud.ray_origins + params["mean"][:, None] * cloud.ray_dirs
        else:
            cloud.means = params["mean"].copy()

    def evaluate(with_grad):
        sync()
        loss, g = _views_loss(cloud, views, weights, background, perceptual, with_grad)
        if not with_grad:
            return loss, None
        c, o = cloud.colors, cloud.opacities
        return loss, {
            "color": g.colors * c * (1.0 - c),
            "opacity": g.opacities * o * (1.0 - o),
            "mean": np.einsum("ij,ij->i", g.means, cloud.ray_dirs) if use_rays else g.means,
        }

    history = np.empty(n_iters + 1)
    loss, grads = evaluate(True)
    initial = history[0] = loss
    n_rejected = 0
    for it in range(1, n_iters + 1):
        saved = opt.state_dict() if safeguard else None
        opt.step(grads)
        last = it == n_iters
        new_loss, new_grads = evaluate(not last)
        if new_loss > divergence_factor * max(initial, 1e-300):
            raise DivergenceError(f"loss {new_loss:.4g} exceeded {divergence_factor}x initial {initial:.4g}")
        if safeguard and new_loss > loss:
            opt.load_state_dict(saved)
            opt.scale_lr(0.5)
            n_rejected += 1
            if last:
                sync()
        else:
            loss, grads = new_loss, new_grads
            if safeguard:
                opt.scale_lr(1.1, cap=base_lr)
        history[it] = loss
    logger.debug(
        "fit: loss %.6g -> %.6g over %d iterations (%d steps rejected)",
        history[0], history[-1], n_iters, n_rejected,
    )
    return FitResult(cloud, history)


class GaussianSplatFitter(BaseEstimator):
    """Fit a Gaussian cloud to posed images.

    ``fit(views, init_cloud=None)`` takes ``(CameraFrame, image[, depth])``
    tuples. Without an initial cloud, Gaussians are ray-initialized on a
    ``grid`` from the first view, which then needs a depth map.
    ``predict(camera)`` renders the fitted cloud.
    """

    def __init__(
        self,
        n_iters=2000,
        lr_color=0.05,
        lr_opacity=0.05,
        lr_mean=1e-3,
        loss_weights=(1.0, 0.0, 0.1),
        background=(0.0, 0.0, 0.0),
        grid=(8, 8),
        perceptual=None,
    ):
        self.n_iters = n_iters
        self.lr_color = lr_color
        self.lr_opacity = lr_opacity
        self.lr_mean = lr_mean
        self.loss_weights = loss_weights
        self.background = background
        self.grid = grid
        self.perceptual = perceptual

    def fit(self, views, init_cloud=None):
        views = _normalize_views(views)
        if init_cloud is None:
            frame, image, depth = views[0]
            if depth is None:
                raise InputError("ray initialization needs a depth map for the first view")
            init_cloud = ray_initialized_cloud(frame, image, depth, grid=tuple(self.grid))
        res = fit_gaussians(
            init_cloud, views, LossWeights(*self.loss_weights), self.n_iters,
            self.lr_color, self.lr_opacity, self.lr_mean, self.background, self.perceptual,
        )
        self.cloud_ = res.cloud
        self.loss_history_ = res.loss_history
        return self

    def predict(self, camera):
        check_is_fitted(self, "cloud_")
        return render(self.cloud_, camera, self.background).image

    def score(self, views):
        """Mean PSNR (dB) over ``views``."""
        from .metrics import psnr

        views = _normalize_views(views)
        return float(np.mean([psnr(self.predict(f), img) for f, img, _ in views]))
