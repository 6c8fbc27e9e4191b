"""Desk-scale EDM diffusion on short 1-D sequences.

The denoiser is ``D(x; σ, c) = c_skip(σ) x + c_out(σ) F(c_in(σ) x; c_noise(σ), c)``
with a small numpy MLP as ``F``. Training minimizes the x0-form
denoising score-matching loss ``E ||D(x0 + σ ε; σ, c) - x0||²``; written in
terms of ``F`` and weighted by ``λ(σ) = 1 / c_out(σ)²`` this is an ordinary
regression of ``F`` onto ``(x0 - c_skip x) / c_out``. The ε-prediction form
is the same objective reweighted, since ``x0 = x - σ ε``.

Conditioning carries a camera code plus optional start/end boundary values.
Dropped conditioning is replaced by a learned null vector, which gives the
unconditional branch used by classifier-free guidance.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._optim import Adam
from ._validation import check_array, check_positive, check_positive_int
from .exceptions import InputError, ShapeMismatch

SIGMA_DATA = 0.5
SIGMA_MIN = 0.002
SIGMA_MAX = 80.0
P_MEAN = -1.2
P_STD = 1.2


@dataclass(frozen=True)
class Preconditioner:
    sigma_data: float = SIGMA_DATA

    def c_skip(self, sigma):
        return self.sigma_data**2 / (sigma**2 + self.sigma_data**2)

    def c_out(self, sigma):
        return sigma * self.sigma_data / np.sqrt(sigma**2 + self.sigma_data**2)

    def c_in(self, sigma):
        return 1.0 / np.sqrt(sigma**2 + self.sigma_data**2)

    def c_noise(self, sigma):
        return np.log(sigma) / 4.0

    def loss_weight(self, sigma):
        return (sigma**2 + self.sigma_data**2) / (sigma * self.sigma_data) ** 2


@dataclass(frozen=True)
class ConditioningBundle:
    """Batched conditioning; ``boundary_end`` set means interpolation mode.

    ``camera_code`` is (B, k); boundaries are (B, F) or ``None``; ``drop``
    is a (B,) boolean array or a single bool.
    """

    camera_code: np.ndarray
    boundary_start: np.ndarray = None
    boundary_end: np.ndarray = None
    drop: object = False

    def __post_init__(self):
        code = np.asarray(self.camera_code, dtype=np.float64)
        if code.ndim == 1:
            code = code[:, None]
        object.__setattr__(self, "camera_code", code)
        n = len(code)
        for name in ("boundary_start", "boundary_end"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64).reshape(n, -1)
                object.__setattr__(self, name, v)
        if self.boundary_end is not None and self.boundary_start is None:
            raise InputError("an end boundary requires a start boundary")
        object.__setattr__(self, "drop", np.broadcast_to(np.asarray(self.drop, dtype=bool), (n,)).copy())

    def __len__(self):
        return len(self.camera_code)

    @property
    def interpolation(self):
        return self.boundary_end is not None

    def dropped(self):
        return ConditioningBundle(self.camera_code, self.boundary_start, self.boundary_end, True)

    def features(self, n_features):
        """(B, k + 4F) vector: code, start, has_start, end, has_end."""
        n = len(self)
        zeros = np.zeros((n, n_features))
        start = zeros if self.boundary_start is None else self.boundary_start
        end = zeros if self.boundary_end is None else self.boundary_end
        has_s = np.full((n, n_features), float(self.boundary_start is not None))
        has_e = np.full((n, n_features), float(self.boundary_end is not None))
        return np.concatenate([self.camera_code, start, has_s, end, has_e], axis=1)

    def subset(self, idx):
        pick = lambda v: None if v is None else v[idx]
        return ConditioningBundle(self.camera_code[idx], pick(self.boundary_start), pick(self.boundary_end), self.drop[idx])


def _silu(x):
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return x * s, s


class ToyDenoiser:
    """MLP ``F`` plus the preconditioning wrapper.

    Inputs are ``c_in·x`` (flattened), Fourier features of ``c_noise`` and
    the conditioning features (or the learned null vector when dropped).
    """

    N_FREQ = 4

    def __init__(self, length, n_features=1, code_dim=1, hidden=128, sigma_data=SIGMA_DATA, seed=0):
        self.length = check_positive_int(length, "length", minimum=3)
        self.n_features = check_positive_int(n_features, "n_features")
        self.code_dim = check_positive_int(code_dim, "code_dim")
        self.hidden = check_positive_int(hidden, "hidden")
        self.pre = Preconditioner(sigma_data)
        rng = np.random.default_rng(seed)
        d_x = length * n_features
        self.cond_dim = code_dim + 4 * n_features
        d_in = d_x + 1 + 2 * self.N_FREQ + self.cond_dim
        he = lambda a, b: rng.normal(0.0, np.sqrt(2.0 / a), (a, b))
        self.params = {
            "w1": he(d_in, hidden),
            "b1": np.zeros(hidden),
            "w2": he(hidden, hidden),
            "b2": np.zeros(hidden),
            "w3": rng.normal(0.0, 0.01 / np.sqrt(hidden), (hidden, d_x)),
            "b3": np.zeros(d_x),
            "null": np.zeros(self.cond_dim),
        }

    @property
    def data_shape(self):
        return (self.length, self.n_features)

    def _noise_features(self, c_noise):
        f = np.arange(1, self.N_FREQ + 1)[None, :] * c_noise[:, None]
        return np.concatenate([c_noise[:, None], np.sin(f), np.cos(f)], axis=1)

    def _inputs(self, x_in, c_noise, cond):
        c = cond.features(self.n_features)
        c = np.where(cond.drop[:, None], self.params["null"][None, :], c)
        return np.concatenate([x_in.reshape(len(x_in), -1), self._noise_features(c_noise), c], axis=1)

    def raw(self, x_in, c_noise, cond, cache=False):
        p = self.params
        h0 = self._inputs(x_in, c_noise, cond)
        z1 = h0 @ p["w1"] + p["b1"]
        h1, s1 = _silu(z1)
        z2 = h1 @ p["w2"] + p["b2"]
        h2, s2 = _silu(z2)
        out = (h2 @ p["w3"] + p["b3"]).reshape(x_in.shape)
        if cache:
            return out, (h0, z1, h1, s1, z2, h2, s2)
        return out

    def _raw_backward(self, grad_out, cache, cond):
        p = self.params
        h0, z1, h1, s1, z2, h2, s2 = cache
        g = grad_out.reshape(len(grad_out), -1)
        grads = {"w3": h2.T @ g, "b3": g.sum(axis=0)}
        g2 = (g @ p["w3"].T) * (s2 * (1.0 + z2 * (1.0 - s2)))
        grads["w2"] = h1.T @ g2
        grads["b2"] = g2.sum(axis=0)
        g1 = (g2 @ p["w2"].T) * (s1 * (1.0 + z1 * (1.0 - s1)))
        grads["w1"] = h0.T @ g1
        grads["b1"] = g1.sum(axis=0)
        g0 = g1 @ p["w1"].T
        grads["null"] = g0[cond.drop, -self.cond_dim:].sum(axis=0)
        return grads

    def __call__(self, x, sigma, cond):
        return precondition(self.raw, x, sigma, cond, self.pre)


def _sigma_column(sigma, x):
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (len(x),))
    return sigma, sigma.reshape((-1,) + (1,) * (x.ndim - 1))


def precondition(raw, x, sigma, cond, pre=Preconditioner()):
    """``c_skip x + c_out raw(c_in x, c_noise, cond)`` for batched ``x`` (B, ...)."""
    x = np.asarray(x, dtype=np.float64)
    sigma, s = _sigma_column(sigma, x)
    return pre.c_skip(s) * x + pre.c_out(s) * raw(pre.c_in(s) * x, pre.c_noise(sigma), cond)


def sample_sigmas(rng, n, p_mean=P_MEAN, p_std=P_STD):
    """Log-normal training noise levels."""
    return np.exp(p_mean + p_std * rng.standard_normal(n))


def dsm_loss(denoiser, batch, sigmas, cond, rng_seed=0):
    """Mean over the batch of ``||D(x0 + σ ε; σ, c) - x0||²`` with seeded ε."""
    x0 = np.asarray(batch, dtype=np.float64)
    if len(x0) == 0:
        raise InputError("empty batch")
    eps = np.random.default_rng(rng_seed).standard_normal(x0.shape)
    sigmas, s = _sigma_column(sigmas, x0)
    err = denoiser(x0 + s * eps, sigmas, cond) - x0
    return float(np.mean(np.sum(err.reshape(len(x0), -1) ** 2, axis=1)))


def sigma_schedule(n_steps, sigma_max=SIGMA_MAX, sigma_min=SIGMA_MIN):
    """Log-spaced noise levels from ``sigma_max`` down to ``sigma_min`` (n_steps + 1 values)."""
    check_positive_int(n_steps, "n_steps")
    return np.geomspace(sigma_max, sigma_min, n_steps + 1)


def guided(denoiser, x, sigma, cond, w):
    """Classifier-free guidance ``D_u + w (D_c - D_u)``; w = 0 and w = 1 return a branch exactly."""
    if w == 1:
        return denoiser(x, sigma, cond)
    d_u = denoiser(x, sigma, cond.dropped())
    if w == 0:
        return d_u
    d_c = denoiser(x, sigma, cond)
    return d_u + w * (d_c - d_u)


def sample(denoiser, cond, n_steps=50, guidance_w=1.0, rng_seed=0, shape=None,
           sigma_max=SIGMA_MAX, sigma_min=SIGMA_MIN):
    """First-order deterministic sampler; the only randomness is the initial noise.

    ``x ← x + (σ_next - σ) (x - D̂(x; σ)) / σ`` along :func:`sigma_schedule`.
    """
    if shape is None:
        shape = getattr(denoiser, "data_shape")
    sigmas = sigma_schedule(n_steps, sigma_max, sigma_min)
    x = sigmas[0] * np.random.default_rng(rng_seed).standard_normal((len(cond),) + tuple(shape))
    for s, s_next in zip(sigmas[:-1], sigmas[1:]):
        d = guided(denoiser, x, s, cond, guidance_w)
        x = x + (s_next - s) * (x - d) / s
    return x


@dataclass(frozen=True)
class ToyDataset:
    x: np.ndarray  # (n, L, 1)
    camera_code: np.ndarray  # (n, 1)

    def __len__(self):
        return len(self.x)

    @property
    def start(self):
        return self.x[:, 0, :]

    @property
    def end(self):
        return self.x[:, -1, :]

    def conditioning(self, mode="interpolation", idx=None):
        idx = slice(None) if idx is None else idx
        end = self.end[idx] if mode == "interpolation" else None
        if mode not in ("interpolation", "single"):
            raise InputError(f"unknown conditioning mode {mode!r}")
        return ConditioningBundle(self.camera_code[idx], self.start[idx], end)


def _walk_scale(length, knots, drift):
    s = np.linspace(0.0, knots, length)
    j = np.minimum(np.floor(s), knots - 1)
    a = s - j
    var = (j + 1.0) + a**2 + (drift * s / knots) ** 2 / 3.0
    return SIGMA_DATA / np.sqrt(var.mean())


def toy_trajectory_dataset(n, length=16, rng_seed=0, knots=2, drift=3.0):
    """Smooth random 1-D sequences of shape (n, length, 1).

    Each sample is a Gaussian random walk over ``knots`` steps (plus a random
    start), linearly interpolated to ``length`` points, with a linear drift
    ``code·drift``; ``code ~ U(-1, 1)`` is the sample's camera code. The
    result is scaled so its overall standard deviation is about 0.5.
    """
    check_positive_int(n, "n")
    check_positive_int(length, "length", minimum=3)
    check_positive_int(knots, "knots")
    rng = np.random.default_rng(rng_seed)
    steps = rng.standard_normal((n, knots + 1))
    walk = np.cumsum(steps, axis=1)
    code = rng.uniform(-1.0, 1.0, n)
    s = np.linspace(0.0, knots, length)
    curve = np.stack([np.interp(s, np.arange(knots + 1), w) for w in walk])
    curve += code[:, None] * drift * s[None, :] / knots
    x = curve * _walk_scale(length, knots, drift)
    return ToyDataset(x[:, :, None], code[:, None])


@dataclass
class TrainResult:
    steps: np.ndarray
    loss: np.ndarray
    eval_loss: np.ndarray


def _training_conditioning(data, idx, rng, p_drop, p_interp):
    interp = rng.random(len(idx)) < p_interp
    drop = rng.random(len(idx)) < p_drop
    return ConditioningBundle(data.camera_code[idx], data.start[idx], data.end[idx], drop), interp


class _ModeMasked:
    """Wraps a bundle so samples outside interpolation mode see no end boundary."""

    def __init__(self, bundle, interp, n_features):
        self.bundle = bundle
        self.interp = interp
        self.n_features = n_features

    def features(self, n_features):
        f = self.bundle.features(n_features)
        k = self.bundle.camera_code.shape[1]
        end = slice(k + 2 * n_features, k + 4 * n_features)
        f[~self.interp, end] = 0.0
        return f

    @property
    def drop(self):
        return self.bundle.drop

    def __len__(self):
        return len(self.bundle)


def train(model, data, n_steps=2000, batch_size=512, lr=3e-3, p_drop=0.1, p_interp=0.5,
          rng_seed=0, eval_size=1024, eval_every=100, log_every=1):
    """Adam on the λ(σ)-weighted DSM objective. Updates ``model`` in place.

    Returns the training curve and an unweighted DSM loss on a fixed
    interpolation-mode evaluation batch every ``eval_every`` steps (step 0
    included).
    """
    check_positive_int(n_steps, "n_steps", minimum=0)
    rng = np.random.default_rng(rng_seed)
    ev_rng = np.random.default_rng([rng_seed, 1])
    ev_idx = ev_rng.choice(len(data), size=min(eval_size, len(data)), replace=False)
    ev_sigma = sample_sigmas(ev_rng, len(ev_idx))
    ev_cond = data.conditioning("interpolation", ev_idx)
    evaluate = lambda: dsm_loss(model, data.x[ev_idx], ev_sigma, ev_cond, rng_seed=rng_seed + 7)

    opt = Adam(model.params, lr=lr)
    base = dict(opt.lr)
    pre = model.pre
    steps, losses, evals = [], [], [(0, evaluate())]
    for step in range(1, n_steps + 1):
        idx = rng.integers(0, len(data), batch_size)
        x0 = data.x[idx]
        sigma = sample_sigmas(rng, batch_size)
        s = sigma[:, None, None]
        x = x0 + s * rng.standard_normal(x0.shape)
        bundle, interp = _training_conditioning(data, idx, rng, p_drop, p_interp)
        cond = _ModeMasked(bundle, interp, model.n_features)
        out, cache = model.raw(pre.c_in(s) * x, pre.c_noise(sigma), cond, cache=True)
        target = (x0 - pre.c_skip(s) * x) / pre.c_out(s)
        diff = out - target
        loss = float(np.mean(np.sum(diff.reshape(batch_size, -1) ** 2, axis=1)))
        grads = model._raw_backward(2.0 * diff / batch_size, cache, cond)
        # Cosine decay keeps late steps from jittering around the optimum.
        frac = 0.5 * (1.0 + np.cos(np.pi * step / n_steps))
        for k in opt.lr:
            opt.lr[k] = base[k] * (0.05 + 0.95 * frac)
        opt.step(grads)
        if step % log_every == 0:
            steps.append(step)
            losses.append(loss)
        if step % eval_every == 0 or step == n_steps:
            evals.append((step, evaluate()))
    return TrainResult(np.asarray(steps), np.asarray(losses), np.asarray(evals))


def endpoint_error(samples, cond):
    """Mean absolute deviation of sample endpoints from the boundary conditioning."""
    err = [np.abs(samples[:, 0, :] - cond.boundary_start)]
    if cond.boundary_end is not None:
        err.append(np.abs(samples[:, -1, :] - cond.boundary_end))
    return float(np.mean(np.concatenate(err)))


class ToyDiffusion(BaseEstimator):
    """Estimator wrapper: ``fit`` trains on a :class:`ToyDataset`, ``sample`` draws sequences."""

    def __init__(self, hidden=128, n_steps=2000, batch_size=512, lr=3e-3, p_drop=0.1,
                 p_interp=0.5, sigma_data=SIGMA_DATA, seed=0):
        self.hidden = hidden
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.p_drop = p_drop
        self.p_interp = p_interp
        self.sigma_data = sigma_data
        self.seed = seed

    def fit(self, data):
        if not isinstance(data, ToyDataset):
            raise InputError("ToyDiffusion.fit expects a ToyDataset")
        check_positive(self.sigma_data, "sigma_data")
        _, L, F = data.x.shape
        self.model_ = ToyDenoiser(L, F, data.camera_code.shape[1], self.hidden, self.sigma_data, self.seed)
        self.history_ = train(self.model_, data, self.n_steps, self.batch_size, self.lr,
                              self.p_drop, self.p_interp, rng_seed=self.seed)
        return self

    def sample(self, cond, n_steps=50, guidance_w=1.0, rng_seed=0):
        check_is_fitted(self, "model_")
        return sample(self.model_, cond, n_steps, guidance_w, rng_seed)

    def denoise(self, x, sigma, cond):
        check_is_fitted(self, "model_")
        x = check_array(x, name="x")
        if x.shape[1:] != self.model_.data_shape:
            raise ShapeMismatch(f"expected samples of shape {self.model_.data_shape}, got {x.shape[1:]}")
        return self.model_(x, sigma, cond)
