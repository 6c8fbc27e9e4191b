"""Toy hybrid SSM/attention backbone that maps fused tokens to Gaussian feature maps.

Token order is frame-major, then patch row, then patch column. A patch
flattens to ``(temporal_patch, patch, patch, channels)`` in C order.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._optim import Adam
from ._validation import check_array, check_positive_int
from .exceptions import InputError, LayoutMismatch, ShapeMismatch
from .gsplat import (
    N_CHANNELS, OPACITY, RAYDIST, RGB, LossWeights, composite_loss, decode_gaussians,
    render, render_backward, sigmoid,
)


@dataclass(eq=False)
class TokenSequence:
    tokens: np.ndarray
    n_frames: int
    grid_h: int
    grid_w: int
    patch: int = 1
    temporal_patch: int = 1

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or len(self.tokens) != self.n_tokens:
            raise LayoutMismatch(
                f"{self.tokens.shape} tokens do not fit a {self.n_frames}x{self.grid_h}x{self.grid_w} grid"
            )

    @property
    def n_tokens(self):
        return self.n_frames * self.grid_h * self.grid_w

    @property
    def width(self):
        return self.tokens.shape[1]

    @property
    def layout(self):
        return (self.n_frames, self.grid_h, self.grid_w)

    def index(self, frame, row, col):
        return (frame * self.grid_h + row) * self.grid_w + col

    def position(self, index):
        frame, rem = divmod(int(index), self.grid_h * self.grid_w)
        return (frame,) + divmod(rem, self.grid_w)

    def with_tokens(self, tokens):
        return TokenSequence(tokens, self.n_frames, self.grid_h, self.grid_w, self.patch, self.temporal_patch)


def _patchify(vol, patch, temporal_patch):
    T, H, W, C = vol.shape
    if H % patch or W % patch or T % temporal_patch:
        raise ShapeMismatch(
            f"volume {vol.shape} is not divisible by patch ({temporal_patch}, {patch}, {patch})"
        )
    Tp, Hp, Wp = T // temporal_patch, H // patch, W // patch
    t = vol.reshape(Tp, temporal_patch, Hp, patch, Wp, patch, C).transpose(0, 2, 4, 1, 3, 5, 6)
    return TokenSequence(t.reshape(Tp * Hp * Wp, -1), Tp, Hp, Wp, patch, temporal_patch)


def patchify_latent(z, patch):
    """Spatial patch tokens of a (T, H, W, C) latent volume."""
    z = check_array(z, ndim=4, name="latent volume")
    check_positive_int(patch, "patch")
    return _patchify(z, patch, 1)


def patchify_rays(rays, patch, temporal_patch=1):
    """Spatio-temporal patch tokens of (T, H, W, 6) ray embeddings."""
    rays = check_array(rays, ndim=4, name="ray embeddings")
    if rays.shape[-1] != 6:
        raise ShapeMismatch(f"ray embeddings need 6 channels, got {rays.shape[-1]}")
    check_positive_int(patch, "patch")
    check_positive_int(temporal_patch, "temporal_patch")
    return _patchify(rays, patch, temporal_patch)


def patchify_depth(depth, patch):
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim == 3:
        depth = depth[..., None]
    return patchify_latent(depth, patch)


def unpatchify(seq, channels):
    """Inverse of the patchify functions; returns (T, H, W, channels)."""
    tp, p = seq.temporal_patch, seq.patch
    if seq.width != tp * p * p * channels:
        raise LayoutMismatch(f"token width {seq.width} != {tp}*{p}*{p}*{channels}")
    t = seq.tokens.reshape(seq.n_frames, seq.grid_h, seq.grid_w, tp, p, p, channels)
    t = t.transpose(0, 3, 1, 4, 2, 5, 6)
    return t.reshape(seq.n_frames * tp, seq.grid_h * p, seq.grid_w * p, channels)


def fuse_tokens(z_t, p_t, d_t, proj):
    """Concatenate latent, pose and depth tokens channel-wise, then project.

    ``proj`` is a (d_z + d_p + d_d, d) matrix; the map is linear (no bias).
    """
    if not (z_t.layout == p_t.layout == d_t.layout):
        raise LayoutMismatch(f"token layouts differ: {z_t.layout}, {p_t.layout}, {d_t.layout}")
    x = np.concatenate([z_t.tokens, p_t.tokens, d_t.tokens], axis=1)
    proj = np.asarray(proj, dtype=np.float64)
    if proj.ndim != 2 or proj.shape[0] != x.shape[1]:
        raise ShapeMismatch(f"projection {proj.shape} does not accept width {x.shape[1]}")
    return z_t.with_tokens(x @ proj)


def layer_norm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


@dataclass(eq=False)
class SsmBlockParams:
    """Weights of one selective-scan block; ``A = -exp(a_log)`` keeps every mode decaying."""

    w_delta: np.ndarray  # (d, d)
    b_delta: np.ndarray  # (d,)
    w_b: np.ndarray  # (d, n)
    w_c: np.ndarray  # (d, n)
    a_log: np.ndarray  # (d, n)
    w_out: np.ndarray  # (d, d)

    @property
    def A(self):
        return -np.exp(self.a_log)

    @property
    def state_dim(self):
        return self.a_log.shape[1]

    @classmethod
    def init(cls, rng, width, state_dim):
        s = 1.0 / np.sqrt(width)
        return cls(
            w_delta=rng.normal(0.0, s, (width, width)),
            b_delta=np.log(np.expm1(rng.uniform(1e-3, 1e-1, width))),
            w_b=rng.normal(0.0, s, (width, state_dim)),
            w_c=rng.normal(0.0, s, (width, state_dim)),
            a_log=np.log(np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (width, 1))),
            w_out=rng.normal(0.0, s, (width, width)),
        )

    def named(self, prefix):
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w_delta", "b_delta", "w_b", "w_c", "a_log", "w_out")}


class Direction(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


def _scan_inputs(x, params):
    delta = np.logaddexp(0.0, x @ params.w_delta + params.b_delta)
    return delta, x @ params.w_b, x @ params.w_c


def _sequential_scan(x, params):
    delta, B, C = _scan_inputs(x, params)
    A = params.A
    h = np.zeros_like(A)
    y = np.empty_like(x)
    for t in range(len(x)):
        h = np.exp(delta[t][:, None] * A) * h + (delta[t] * x[t])[:, None] * B[t][None, :]
        y[t] = h @ C[t]
    return y


def _chunked_scan(x, params, chunk):
    delta, B, C = _scan_inputs(x, params)
    A = params.A
    L, d = x.shape
    y = np.empty_like(x)
    h = np.zeros_like(A)
    tri = np.tril(np.ones((chunk, chunk), dtype=bool))
    for start in range(0, L, chunk):
        stop = min(start + chunk, L)
        c = stop - start
        log_decay = np.cumsum(delta[start:stop, :, None] * A, axis=0)  # (c, d, n)
        u = (delta[start:stop] * x[start:stop])[:, :, None] * B[start:stop, None, :]
        gap = log_decay[:, None] - log_decay[None, :]  # (t, s, d, n)
        gap = np.where(tri[:c, :c, None, None], gap, -np.inf)
        states = np.einsum("tsdn,sdn->tdn", np.exp(gap), u) + np.exp(log_decay) * h
        y[start:stop] = np.einsum("tdn,tn->td", states, C[start:stop])
        h = states[-1]
    return y


def ssm_scan(x, params, direction="forward", method="chunked", chunk=8):
    """Diagonal selective state-space scan.

    ``h_t = exp(Δ_t A) ⊙ h_{t-1} + Δ_t B_t x_t``, ``y_t = C_t h_t``, ``h_0 = 0``,
    with ``Δ = softplus(x W_Δ + b_Δ)``, ``B = x W_B``, ``C = x W_C``.
    ``method="sequential"`` runs the plain recurrence; ``"chunked"`` evaluates
    each chunk in closed form and carries the state between chunks.
    """
    seq = x if isinstance(x, TokenSequence) else None
    arr = seq.tokens if seq is not None else check_array(x, ndim=2, name="tokens")
    direction = Direction(direction)
    if direction is Direction.BACKWARD:
        arr = arr[::-1]
    if method == "sequential":
        y = _sequential_scan(arr, params)
    elif method == "chunked":
        y = _chunked_scan(arr, params, check_positive_int(chunk, "chunk"))
    else:
        raise InputError(f"unknown scan method {method!r}")
    if direction is Direction.BACKWARD:
        y = y[::-1].copy()
    return seq.with_tokens(y) if seq is not None else y


def bidirectional_scan(x, params, method="chunked", chunk=8):
    """``y_f + y_b`` on raw (L, d) tokens."""
    return ssm_scan(x, params, "forward", method, chunk) + ssm_scan(x, params, "backward", method, chunk)


def ssm_block(x, params, method="chunked", chunk=8):
    """Pre-norm residual bidirectional SSM block: ``x + (y_f + y_b) W_out``."""
    seq = x if isinstance(x, TokenSequence) else None
    arr = seq.tokens if seq is not None else check_array(x, ndim=2, name="tokens")
    out = arr + bidirectional_scan(layer_norm(arr), params, method, chunk) @ params.w_out
    return seq.with_tokens(out) if seq is not None else out


@dataclass(eq=False)
class AttentionParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    @classmethod
    def init(cls, rng, width):
        s = 1.0 / np.sqrt(width)
        return cls(*(rng.normal(0.0, s, (width, width)) for _ in range(4)))

    def named(self, prefix):
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w_q", "w_k", "w_v", "w_o")}


def masked_attention_block(x, params, mask=None, heads=4):
    """Pre-norm residual multi-head attention with an optional boolean key mask.

    ``mask[q, k]`` allows query ``q`` to read key ``k``; disallowed logits are
    set to -inf. A token may always attend to itself.
    """
    seq = x if isinstance(x, TokenSequence) else None
    arr = seq.tokens if seq is not None else check_array(x, ndim=2, name="tokens")
    N, d = arr.shape
    if d % heads:
        raise InputError(f"width {d} is not divisible by {heads} heads")
    dh = d // heads
    xn = layer_norm(arr)
    q = (xn @ params.w_q).reshape(N, heads, dh).transpose(1, 0, 2)
    k = (xn @ params.w_k).reshape(N, heads, dh).transpose(1, 0, 2)
    v = (xn @ params.w_v).reshape(N, heads, dh).transpose(1, 0, 2)
    logits = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (N, N):
            raise LayoutMismatch(f"mask {mask.shape} does not match {N} tokens")
        mask = mask | np.eye(N, dtype=bool)
        logits = np.where(mask[None], logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = (weights @ v).transpose(1, 0, 2).reshape(N, d)
    result = arr + out @ params.w_o
    return seq.with_tokens(result) if seq is not None else result


class BlockKind(str, Enum):
    SSM = "ssm"
    ATTENTION = "attention"


@dataclass(frozen=True)
class HybridStackConfig:
    blocks: tuple = ("ssm", "attention", "ssm", "attention")
    width: int = 64
    heads: int = 4
    state_dim: int = 16
    epipolar: tuple = None  # per attention block; None enables all
    seed: int = 0
    chunk: int = 8

    def __post_init__(self):
        blocks = tuple(BlockKind(b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        check_positive_int(self.width, "width")
        check_positive_int(self.heads, "heads")
        if self.width % self.heads:
            raise InputError(f"width {self.width} is not divisible by {self.heads} heads")
        n_att = sum(b is BlockKind.ATTENTION for b in blocks)
        flags = (True,) * n_att if self.epipolar is None else tuple(bool(f) for f in self.epipolar)
        if len(flags) != n_att:
            raise InputError(f"need {n_att} epipolar flags, got {len(flags)}")
        object.__setattr__(self, "epipolar", flags)


def init_stack_params(config, rng=None):
    rng = np.random.default_rng(config.seed) if rng is None else rng
    params = []
    for kind in config.blocks:
        if kind is BlockKind.SSM:
            params.append(SsmBlockParams.init(rng, config.width, config.state_dim))
        else:
            params.append(AttentionParams.init(rng, config.width))
    return params


def run_stack(x, config, params=None, mask=None):
    """Apply the configured blocks in order.

    ``mask`` is a token-level boolean matrix (or an object with
    ``token_mask()``), used by the attention blocks whose epipolar flag is set.
    """
    if params is None:
        params = init_stack_params(config)
    if x.width != config.width:
        raise ShapeMismatch(f"token width {x.width} != stack width {config.width}")
    if mask is not None and hasattr(mask, "token_mask"):
        mask = mask.token_mask()
    flags = iter(config.epipolar)
    out = x
    for kind, p in zip(config.blocks, params):
        if kind is BlockKind.SSM:
            out = ssm_block(out, p, chunk=config.chunk)
        else:
            out = masked_attention_block(out, p, mask if next(flags) else None, config.heads)
    return out


def conv_transpose3d(x, weight, bias=None, stride=(1, 1, 1)):
    """Transposed 3D convolution on a channels-last (T, H, W, C_in) volume.

    ``weight`` has shape (C_in, kT, kH, kW, C_out); the output has shape
    ``((T-1)*sT + kT, (H-1)*sH + kH, (W-1)*sW + kW, C_out)``.
    """
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    T, H, W, cin = x.shape
    if weight.shape[0] != cin:
        raise ShapeMismatch(f"weight expects {weight.shape[0]} input channels, got {cin}")
    _, kt, kh, kw, cout = weight.shape
    st, sh, sw = stride
    out = np.zeros(((T - 1) * st + kt, (H - 1) * sh + kh, (W - 1) * sw + kw, cout))
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                out[a:a + (T - 1) * st + 1:st, b:b + (H - 1) * sh + 1:sh, c:c + (W - 1) * sw + 1:sw] += (
                    x @ weight[:, a, b, c, :]
                )
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)
    return out


def conv_transpose3d_weight_grad(x, grad_out, kernel, stride):
    """Gradient of :func:`conv_transpose3d` w.r.t. its weight."""
    T, H, W, cin = x.shape
    kt, kh, kw = kernel
    st, sh, sw = stride
    gw = np.zeros((cin, kt, kh, kw, grad_out.shape[-1]))
    xf = x.reshape(-1, cin)
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                g = grad_out[a:a + (T - 1) * st + 1:st, b:b + (H - 1) * sh + 1:sh, c:c + (W - 1) * sw + 1:sw]
                gw[:, a, b, c, :] = xf.T @ g.reshape(-1, g.shape[-1])
    return gw


def decode_featuremap(y, weight, bias=None):
    """Upsample stack output tokens to a (T*H*W, 12) Gaussian feature map.

    The decoder is a transposed 3D convolution whose kernel equals its stride
    ``(temporal_patch, patch, patch)``, restoring the full resolution.
    """
    if not isinstance(y, TokenSequence):
        raise LayoutMismatch("decode_featuremap needs token layout metadata")
    weight = np.asarray(weight, dtype=np.float64)
    kernel = (y.temporal_patch, y.patch, y.patch)
    if weight.shape != (y.width,) + kernel + (N_CHANNELS,):
        raise LayoutMismatch(f"decoder weight {weight.shape} does not match tokens {y.width} / kernel {kernel}")
    vol = y.tokens.reshape(y.n_frames, y.grid_h, y.grid_w, y.width)
    out = conv_transpose3d(vol, weight, bias, kernel)
    return out.reshape(-1, N_CHANNELS)


@dataclass(eq=False)
class ReconstructorParams:
    proj: np.ndarray
    stack: list
    decoder_w: np.ndarray
    decoder_b: np.ndarray = field(default_factory=lambda: np.zeros(N_CHANNELS))

    def named(self):
        out = {"fuse.proj": self.proj}
        for i, p in enumerate(self.stack):
            out.update(p.named(f"blocks.{i}"))
        out["decoder.weight"] = self.decoder_w
        out["decoder.bias"] = self.decoder_b
        return out


class HybridReconstructor(TransformerMixin, BaseEstimator):
    """Latents + ray embeddings + depth -> tokens -> hybrid stack -> Gaussians.

    ``fit`` draws seeded weights and, when ``train_iters > 0`` and supervision
    views are given, trains the decoder by gradient descent on the
    reconstruction loss through the splatting renderer. ``transform`` returns
    the (T*H*W, 12) pre-activation feature map; ``predict`` decodes it into a
    merged :class:`~trajsplat.gsplat.GaussianCloud`.
    """

    def __init__(
        self,
        patch=2,
        temporal_patch=1,
        width=64,
        heads=4,
        state_dim=16,
        blocks=("ssm", "attention", "ssm", "attention"),
        epipolar=True,
        tau=2.0,
        seed=0,
        scale_max=10.0,
        decoder_bias=(0.0, 0.0, 0.0, -3.0, -3.0, -3.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
        train_iters=0,
        lr=1e-2,
        loss_weights=(1.0, 0.0, 0.1),
    ):
        self.patch = patch
        self.temporal_patch = temporal_patch
        self.width = width
        self.heads = heads
        self.state_dim = state_dim
        self.blocks = blocks
        self.epipolar = epipolar
        self.tau = tau
        self.seed = seed
        self.scale_max = scale_max
        self.decoder_bias = decoder_bias
        self.train_iters = train_iters
        self.lr = lr
        self.loss_weights = loss_weights

    def _config(self):
        n_att = sum(BlockKind(b) is BlockKind.ATTENTION for b in self.blocks)
        flags = (bool(self.epipolar),) * n_att if isinstance(self.epipolar, bool) else tuple(self.epipolar)
        return HybridStackConfig(tuple(self.blocks), self.width, self.heads, self.state_dim, flags, self.seed)

    def _tokens(self, latents, rays, depths):
        latents = check_array(latents, ndim=4, name="latents")
        z_t = patchify_latent(latents, self.patch)
        p_t = patchify_rays(rays, self.patch, self.temporal_patch)
        d_t = patchify_depth(depths, self.patch)
        return z_t, p_t, d_t

    def fit(self, latents, rays, depths, trajectory=None, views=None):
        z_t, p_t, d_t = self._tokens(latents, rays, depths)
        config = self._config()
        rng = np.random.default_rng(self.seed)
        d_in = z_t.width + p_t.width + d_t.width
        proj = rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, self.width))
        stack = init_stack_params(config, rng)
        kernel = (self.temporal_patch, self.patch, self.patch)
        decoder_w = rng.normal(0.0, 0.01 / np.sqrt(self.width), (self.width,) + kernel + (N_CHANNELS,))
        self.params_ = ReconstructorParams(proj, stack, decoder_w, np.asarray(self.decoder_bias, dtype=np.float64))
        self.n_input_features_ = d_in
        self.loss_history_ = np.zeros(0)
        if self.train_iters and views is not None:
            if trajectory is None:
                raise InputError("decoder training needs the input trajectory")
            self._train_decoder(z_t, p_t, d_t, trajectory, views)
        return self

    def _mask(self, trajectory, tokens):
        if trajectory is None or not any(self._config().epipolar):
            return None
        from .epipolar import mask_set_for_trajectory

        if len(trajectory) < 2:
            return None
        return mask_set_for_trajectory(trajectory, (tokens.grid_h, tokens.grid_w), self.tau).token_mask()

    def _stack_output(self, z_t, p_t, d_t, trajectory):
        x = fuse_tokens(z_t, p_t, d_t, self.params_.proj)
        return run_stack(x, self._config(), self.params_.stack, self._mask(trajectory, x))

    def transform(self, latents, rays, depths, trajectory=None):
        check_is_fitted(self, "params_")
        y = self._stack_output(*self._tokens(latents, rays, depths), trajectory)
        return decode_featuremap(y, self.params_.decoder_w, self.params_.decoder_b)

    def predict(self, latents, rays, depths, trajectory):
        G = self.transform(latents, rays, depths, trajectory)
        return decode_gaussians(G, trajectory, scale_max=self.scale_max)

    def _train_decoder(self, z_t, p_t, d_t, trajectory, views):
        y = self._stack_output(z_t, p_t, d_t, trajectory)
        kernel = (self.temporal_patch, self.patch, self.patch)
        vol = y.tokens.reshape(y.n_frames, y.grid_h, y.grid_w, y.width)
        weights = LossWeights(*self.loss_weights)
        params = {"w": self.params_.decoder_w, "b": self.params_.decoder_b}
        opt = Adam(params, lr=self.lr)
        history = []
        for _ in range(self.train_iters):
            G = decode_featuremap(y, params["w"], params["b"])
            cloud = decode_gaussians(G, trajectory, scale_max=self.scale_max)
            total, dG = 0.0, np.zeros_like(G)
            for view in views:
                frame, image = view[0], view[1]
                depth = view[2] if len(view) > 2 else None
                res = render(cloud, frame, keep_state=True)
                lb = composite_loss(res, image, None, depth, weights, return_grad=True)
                total += lb.total
                g = render_backward(cloud, frame, lb.grad_image, lb.grad_depth, state=res.state)
                dG[:, RGB] += g.colors * cloud.colors * (1.0 - cloud.colors)
                dG[:, OPACITY] += g.opacities * cloud.opacities * (1.0 - cloud.opacities)
                dG[:, RAYDIST] += np.einsum("ij,ij->i", g.means, cloud.ray_dirs) * sigmoid(G[:, RAYDIST])
            history.append(total / len(views))
            dG /= len(views)
            grad_vol = dG.reshape(vol.shape[0] * kernel[0], vol.shape[1] * kernel[1], vol.shape[2] * kernel[2], N_CHANNELS)
            opt.step({
                "w": conv_transpose3d_weight_grad(vol, grad_vol, kernel, kernel),
                "b": grad_vol.reshape(-1, N_CHANNELS).sum(axis=0),
            })
        self.loss_history_ = np.asarray(history)
