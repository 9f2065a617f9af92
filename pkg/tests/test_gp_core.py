import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loadcast import gp_core
from loadcast.errors import ValidationError
from loadcast.gp_core import SEHyperParams


def random_model(rng, n=40, d=3, noise=0.05, centered=False):
    X = rng.normal(size=(n, d))
    Y = np.sin(X @ rng.normal(size=d)) + 0.1 * rng.normal(size=n)
    if centered:
        Y -= Y.mean()
    hyper = SEHyperParams(rng.uniform(0.5, 2.0), rng.uniform(0.5, 3.0, size=d), noise)
    return gp_core.make_model(X, Y, hyper)


def gp_draw(seed, n=200, lo=0.0, hi=20.0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(lo, hi, size=(n, 1))
    K = np.exp(-0.5 * (X - X.T) ** 2) + 1e-10 * np.eye(n)
    return X, np.linalg.cholesky(K) @ rng.normal(size=n) + 0.1 * rng.normal(size=n)


class TestKernel:
    def test_zero_distance(self):
        h = SEHyperParams(2.5, np.array([1.0, 3.0]))
        assert gp_core.se_kernel(np.array([1.0, 2.0]), np.array([1.0, 2.0]), h) == 2.5

    def test_hand_value(self):
        h = SEHyperParams(1.0, np.array([4.0]))
        assert gp_core.se_kernel(np.array([0.0]), np.array([2.0]), h) == pytest.approx(np.exp(-0.5), abs=1e-12)
        assert np.exp(-0.5) == pytest.approx(0.606531, abs=1e-6)

    def test_flat_limit(self, rng):
        h = SEHyperParams(1.7, np.array([1e12, 1e12]))
        x, z = rng.normal(size=2), rng.normal(size=2)
        assert gp_core.se_kernel(x, z, h) == pytest.approx(1.7, rel=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
    def test_symmetric(self, a, b):
        h = SEHyperParams(1.3, np.array([0.5, 2.0, 1.0]))
        assert gp_core.se_kernel(np.array(a), np.array(b), h) == gp_core.se_kernel(np.array(b), np.array(a), h)

    @pytest.mark.parametrize("kw", [dict(length_scales=[0.0]), dict(length_scales=[-1.0]),
                                    dict(process_var=0.0), dict(noise_var=-1e-3)])
    def test_invalid_hyperparameters(self, kw):
        base = dict(process_var=1.0, length_scales=[1.0], noise_var=0.0)
        with pytest.raises(ValidationError):
            SEHyperParams(**{**base, **kw})


class TestFit:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_recovers_generating_hyperparameters(self, seed):
        X, Y = gp_draw(seed)
        h = gp_core.fit_mle(X, Y).hyper
        assert abs(np.log(h.process_var)) <= 0.5
        assert abs(np.log(h.length_scales[0])) <= 0.5
        assert abs(np.log(h.noise_var / 0.01)) <= 0.5

    def test_constant_outputs(self):
        X = np.linspace(0, 1, 20)[:, None]
        res = gp_core.fit_mle(X, np.full(20, 3.0))
        assert res.hyper.process_var <= 1e-6
        model = gp_core.make_model(X, np.full(20, 3.0), res.hyper)
        assert gp_core.gp_predict(model, np.array([0.37]))[0] == pytest.approx(3.0, abs=1e-9)

    def test_zero_correction_is_no_correction(self, rng):
        X = rng.normal(size=(30, 2))
        Y = np.cos(X[:, 0]) + 0.1 * rng.normal(size=30)
        a = gp_core.fit_mle(X, Y, n_starts=2)
        b = gp_core.fit_mle(X, Y, correction=np.zeros(30), n_starts=2)
        assert a.hyper == b.hyper
        assert a.lml == b.lml

    def test_never_worse_than_init(self, rng):
        X = rng.normal(size=(40, 2))
        Y = X[:, 0] ** 2 + 0.1 * rng.normal(size=40)
        init = SEHyperParams(0.3, np.array([5.0, 0.2]), 0.5)
        res = gp_core.fit_mle(X, Y, init=init)
        assert res.lml >= res.init_lml
        assert res.init_lml == pytest.approx(gp_core.log_marginal_likelihood(X, Y, init), rel=1e-10)

    def test_trace_is_nondecreasing(self):
        X, Y = gp_draw(3, n=80)
        trace = gp_core.fit_mle(X, Y, n_starts=1).trace
        assert len(trace) > 2
        assert np.all(np.diff(trace) >= -1e-9 * np.abs(trace[:-1]))

    def test_non_finite_data(self):
        with pytest.raises(ValidationError):
            gp_core.fit_mle(np.array([[0.0], [1.0], [np.inf]]), np.zeros(3))

    def test_objective_gradient(self, rng):
        import scipy.optimize

        X = rng.normal(size=(25, 3))
        y = rng.normal(size=25)
        obj = gp_core._Objective(X, y, None, rng.random((25, 3)))
        theta = 0.3 * rng.normal(size=8)
        num = scipy.optimize.approx_fprime(theta, lambda t: obj(t)[0], 1e-7)
        np.testing.assert_allclose(obj(theta)[1], num, rtol=1e-4, atol=1e-5)


class TestPredict:
    def test_interpolation(self, rng):
        m = random_model(rng, noise=0.0)
        mean, var = gp_core.gp_predict_batch(m, m.X)
        np.testing.assert_allclose(mean, m.Y, atol=1e-8)

    def test_prior_reversion(self, rng):
        m = random_model(rng, centered=True)
        mean, var = gp_core.gp_predict(m, np.full(3, 1e3))
        assert mean == pytest.approx(0.0, abs=1e-12)
        assert var == pytest.approx(m.hyper.process_var, rel=1e-12)

    def test_duplicate_rows_without_noise(self):
        X = np.array([[0.0], [1.0], [1.0], [2.0]])
        m = gp_core.make_model(X, np.array([0.0, 1.0, 1.0, 0.5]), SEHyperParams(1.0, np.array([1.0]), 0.0))
        assert m.jitter > 0
        mean, var = gp_core.gp_predict(m, np.array([1.5]))
        assert np.isfinite(mean) and np.isfinite(var)

    def test_variance_bounds(self, rng):
        m = random_model(rng)
        _, var = gp_core.gp_predict_batch(m, 3 * rng.normal(size=(200, 3)), include_noise=True)
        assert np.all(var >= 0)
        assert np.all(var <= m.hyper.process_var + m.hyper.noise_var + 1e-9)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=2))
    def test_translation_invariance(self, shift):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(20, 2))
        Y = rng.normal(size=20)
        h = SEHyperParams(1.0, np.array([0.7, 1.5]), 0.01)
        Xs = rng.normal(size=(5, 2))
        a = gp_core.gp_predict_batch(gp_core.make_model(X, Y, h), Xs)
        b = gp_core.gp_predict_batch(gp_core.make_model(X + shift, Y, h), Xs + shift)
        np.testing.assert_allclose(a[0], b[0], atol=1e-10)
        np.testing.assert_allclose(a[1], b[1], atol=1e-10)

    def test_serialization_round_trip(self, rng):
        m = random_model(rng)
        back = gp_core.GPModel.from_dict(m.to_dict())
        Xs = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(gp_core.gp_predict_batch(m, Xs)[0], gp_core.gp_predict_batch(back, Xs)[0])


class TestGradient:
    @pytest.mark.parametrize("d", [1, 3, 7])
    def test_finite_differences(self, d):
        rng = np.random.default_rng(d)
        m = random_model(rng, n=50, d=d)
        h = 1e-5
        for x in rng.normal(size=(20, d)):
            g = gp_core.posterior_mean_gradient(m, x)
            fd = np.array([
                (gp_core.gp_predict(m, x + h * e)[0] - gp_core.gp_predict(m, x - h * e)[0]) / (2 * h)
                for e in np.eye(d)
            ])
            np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-4 * np.max(np.abs(fd)))

    def test_constant_outputs_flat(self):
        X = np.linspace(-1, 1, 10)[:, None]
        m = gp_core.make_model(X, np.full(10, 2.0), SEHyperParams(1.0, np.array([0.5]), 0.0))
        assert np.all(np.abs(gp_core.posterior_mean_gradient_batch(m, X + 0.05)) <= 1e-6)

    def test_two_point_antisymmetry(self):
        X = np.array([[-1.0, 2.0], [1.0, 2.0]])
        m = gp_core.make_model(X, np.array([-1.0, 1.0]), SEHyperParams(1.0, np.array([1.0, 1.0]), 0.0))
        g = gp_core.posterior_mean_gradient(m, np.array([0.0, 2.0]))
        assert g[0] > 0
        assert g[1] == pytest.approx(0.0, abs=1e-12)

    def test_batch_matches_single(self, rng):
        m = random_model(rng)
        Z = rng.normal(size=(6, 3))
        np.testing.assert_allclose(
            gp_core.posterior_mean_gradient_batch(m, Z),
            np.stack([gp_core.posterior_mean_gradient(m, z) for z in Z]),
            rtol=1e-12, atol=1e-14,
        )
