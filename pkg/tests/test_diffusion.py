import numpy as np
import pytest
from sklearn.base import clone

from trajsplat.diffusion import (
    SIGMA_DATA,
    SIGMA_MAX,
    SIGMA_MIN,
    ConditioningBundle,
    Preconditioner,
    ToyDenoiser,
    ToyDiffusion,
    dsm_loss,
    endpoint_error,
    guided,
    precondition,
    sample,
    sample_sigmas,
    sigma_schedule,
    toy_trajectory_dataset,
    train,
)
from trajsplat.exceptions import InputError, ShapeMismatch

PRE = Preconditioner()


def cond_for(n, interp=True, rng=None):
    rng = rng or np.random.default_rng(0)
    start = rng.normal(size=(n, 1))
    end = rng.normal(size=(n, 1)) if interp else None
    return ConditioningBundle(rng.uniform(-1, 1, (n, 1)), start, end)


class TestPreconditioner:
    def test_small_sigma_limit(self):
        s = 1e-9
        assert abs(PRE.c_skip(s) - 1.0) < 1e-15 and PRE.c_out(s) < 1e-8

    def test_zero_network(self, rng):
        x = rng.normal(size=(5, 16, 1))
        sig = rng.uniform(0.01, 50.0, 5)
        d = precondition(lambda xi, cn, c: np.zeros_like(xi), x, sig, None)
        assert np.array_equal(d, PRE.c_skip(sig)[:, None, None] * x)

    def test_identities(self, rng):
        sig = np.exp(rng.uniform(np.log(SIGMA_MIN), np.log(SIGMA_MAX), 100))
        sd2 = SIGMA_DATA**2
        assert np.abs(PRE.c_in(sig) ** 2 * (sig**2 + sd2) - 1.0).max() < 1e-12
        lhs = PRE.c_out(sig) ** 2 * PRE.c_in(sig) ** 2
        rhs = sig**2 * sd2 / (sig**2 + sd2) ** 2
        assert np.abs(lhs - rhs).max() < 1e-12
        assert np.abs(PRE.c_skip(sig) + PRE.c_out(sig) ** 2 / sd2 - 1.0).max() < 1e-12

    def test_c_noise(self):
        assert PRE.c_noise(np.e**4) == pytest.approx(1.0, abs=1e-15)

    def test_loss_weight_balances_target(self, rng):
        # λ(σ) c_out(σ)² = 1: the weighted F-space loss equals the D-space loss
        sig = rng.uniform(0.01, 80.0, 20)
        assert np.allclose(PRE.loss_weight(sig) * PRE.c_out(sig) ** 2, 1.0, rtol=1e-12)


class TestDsmLoss:
    def test_perfect_denoiser(self, rng):
        x0 = rng.normal(size=(8, 16, 1))
        oracle = lambda x, s, c: x0
        assert dsm_loss(oracle, x0, 1.0, None) == 0.0

    def test_zero_denoiser(self, rng):
        x0 = rng.normal(size=(8, 16, 1))
        x0 /= np.linalg.norm(x0.reshape(8, -1), axis=1)[:, None, None]
        assert dsm_loss(lambda x, s, c: np.zeros_like(x), x0, 1.0, None) == pytest.approx(1.0, abs=1e-12)

    def test_seeded(self, rng):
        model = ToyDenoiser(16, hidden=16)
        x0 = rng.normal(size=(4, 16, 1))
        c = cond_for(4)
        assert dsm_loss(model, x0, 0.5, c, rng_seed=3) == dsm_loss(model, x0, 0.5, c, rng_seed=3)
        assert dsm_loss(model, x0, 0.5, c, rng_seed=3) != dsm_loss(model, x0, 0.5, c, rng_seed=4)

    def test_empty(self):
        with pytest.raises(InputError):
            dsm_loss(lambda x, s, c: x, np.zeros((0, 4, 1)), 1.0, None)


class TestDenoiser:
    def test_backward_matches_fd(self, rng):
        model = ToyDenoiser(5, hidden=8, seed=1)
        model.params["null"] = rng.normal(size=model.cond_dim)
        x = rng.normal(size=(3, 5, 1))
        cn = rng.normal(size=3)
        c = ConditioningBundle(rng.normal(size=(3, 1)), rng.normal(size=(3, 1)), None, [False, True, False])
        g_out = rng.normal(size=x.shape)
        _, cache = model.raw(x, cn, c, cache=True)
        grads = model._raw_backward(g_out, cache, c)
        h = 1e-6
        for name, p in model.params.items():
            flat = p.reshape(-1)
            for i in rng.choice(flat.size, size=min(5, flat.size), replace=False):
                old = flat[i]
                flat[i] = old + h
                up = np.sum(model.raw(x, cn, c) * g_out)
                flat[i] = old - h
                down = np.sum(model.raw(x, cn, c) * g_out)
                flat[i] = old
                assert abs((up - down) / (2 * h) - grads[name].reshape(-1)[i]) < 1e-6

    def test_drop_uses_null(self, rng):
        model = ToyDenoiser(5, hidden=8)
        x = rng.normal(size=(2, 5, 1))
        a = cond_for(2, rng=np.random.default_rng(1)).dropped()
        b = cond_for(2, rng=np.random.default_rng(2)).dropped()
        assert np.array_equal(model(x, 1.0, a), model(x, 1.0, b))

    def test_conditioning_validation(self):
        with pytest.raises(InputError):
            ConditioningBundle(np.zeros((2, 1)), None, np.zeros((2, 1)))

    def test_features_layout(self):
        c = ConditioningBundle([[0.3]], [[1.0]], None)
        assert np.array_equal(c.features(1), [[0.3, 1.0, 1.0, 0.0, 0.0]])


class TestSampler:
    def test_schedule(self):
        s = sigma_schedule(50)
        assert len(s) == 51 and s[0] == SIGMA_MAX and s[-1] == pytest.approx(SIGMA_MIN, rel=1e-12)
        assert np.allclose(np.diff(np.log(s)), np.log(SIGMA_MIN / SIGMA_MAX) / 50)

    def test_guidance_identities(self, rng):
        model = ToyDenoiser(8, hidden=16)
        model.params["null"] = rng.normal(size=model.cond_dim)
        x = rng.normal(size=(4, 8, 1))
        c = cond_for(4)
        assert np.array_equal(guided(model, x, 2.0, c, 1.0), model(x, 2.0, c))
        assert np.array_equal(guided(model, x, 2.0, c, 0.0), model(x, 2.0, c.dropped()))
        w = 2.5
        expected = model(x, 2.0, c.dropped()) + w * (model(x, 2.0, c) - model(x, 2.0, c.dropped()))
        assert np.allclose(guided(model, x, 2.0, c, w), expected, atol=1e-14)

    def test_w0_is_unconditional(self, rng):
        model = ToyDenoiser(8, hidden=16)
        c = cond_for(3)
        assert np.array_equal(sample(model, c, 10, 0.0, rng_seed=5), sample(model, c.dropped(), 10, 1.0, rng_seed=5))

    def test_zero_denoiser_contracts(self):
        zero = lambda x, s, c: np.zeros_like(x)
        c = cond_for(4)
        out = sample(zero, c, 50, 1.0, rng_seed=0, shape=(16, 1))
        # closed form: each step multiplies by σ_next/σ, so the result is ε·σ_min
        eps = np.random.default_rng(0).standard_normal((4, 16, 1))
        assert np.allclose(out, eps * SIGMA_MIN, rtol=1e-9)
        assert np.abs(out).max() < 0.05 * SIGMA_MAX

    def test_deterministic(self):
        model = ToyDenoiser(8, hidden=16)
        c = cond_for(3)
        assert np.array_equal(sample(model, c, 5, 1.5, rng_seed=2), sample(model, c, 5, 1.5, rng_seed=2))

    def test_n_steps_validated(self):
        with pytest.raises(InputError):
            sample(ToyDenoiser(8, hidden=4), cond_for(1), 0)


class TestDataset:
    def test_shape_and_seed(self):
        a = toy_trajectory_dataset(10, 12, rng_seed=1)
        b = toy_trajectory_dataset(10, 12, rng_seed=1)
        assert a.x.shape == (10, 12, 1) and a.camera_code.shape == (10, 1)
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.start, a.x[:, 0]) and np.array_equal(a.end, a.x[:, -1])

    def test_std(self):
        data = toy_trajectory_dataset(10000, 16, rng_seed=0)
        std = np.sqrt(np.mean(data.x**2))
        assert abs(std - SIGMA_DATA) / SIGMA_DATA < 0.1

    def test_conditioning_modes(self):
        data = toy_trajectory_dataset(6)
        assert data.conditioning("interpolation").interpolation
        assert not data.conditioning("single").interpolation
        with pytest.raises(InputError):
            data.conditioning("triple")

    def test_length_validated(self):
        with pytest.raises(InputError):
            toy_trajectory_dataset(4, length=2)


class TestTraining:
    def test_short_run_improves(self):
        data = toy_trajectory_dataset(512, 16, rng_seed=0)
        model = ToyDenoiser(16, hidden=32, seed=0)
        res = train(model, data, n_steps=150, batch_size=128, eval_size=256, eval_every=50)
        assert res.eval_loss[0, 0] == 0 and res.eval_loss[-1, 0] == 150
        assert res.eval_loss[-1, 1] < 0.5 * res.eval_loss[0, 1]
        assert len(res.loss) == 150

    def test_training_deterministic(self):
        data = toy_trajectory_dataset(128, 16, rng_seed=0)
        runs = []
        for _ in range(2):
            model = ToyDenoiser(16, hidden=16, seed=0)
            train(model, data, n_steps=10, batch_size=32, eval_size=32)
            runs.append(model.params["w1"].copy())
        assert np.array_equal(*runs)

    def test_endpoint_error(self):
        c = ConditioningBundle([[0.0]], [[1.0]], [[2.0]])
        s = np.zeros((1, 4, 1))
        s[0, 0, 0], s[0, -1, 0] = 1.5, 2.0
        assert endpoint_error(s, c) == pytest.approx(0.25)

    def test_estimator(self):
        data = toy_trajectory_dataset(128, 8, rng_seed=0)
        est = ToyDiffusion(hidden=16, n_steps=5, batch_size=16)
        assert clone(est).get_params() == est.get_params()
        est.fit(data)
        c = data.conditioning("interpolation", np.arange(3))
        assert est.sample(c, n_steps=4).shape == (3, 8, 1)
        assert est.denoise(data.x[:3], 1.0, c).shape == (3, 8, 1)
        with pytest.raises(ShapeMismatch):
            est.denoise(np.zeros((3, 9, 1)), 1.0, c)
        with pytest.raises(InputError):
            est.fit(data.x)

    def test_sigma_sampling(self):
        s = sample_sigmas(np.random.default_rng(0), 20000)
        assert abs(np.log(s).mean() + 1.2) < 0.05 and abs(np.log(s).std() - 1.2) < 0.05
