import numpy as np
import pytest
import scipy.stats

from loadcast import gp_core, nigp
from loadcast.errors import NumericalError, ValidationError
from loadcast.gp_core import SEHyperParams
from loadcast.nigp import StochasticTestInput


def random_nigp(seed, d=2, n=50, noise=None):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    Y = np.sin(X @ rng.normal(size=d)) + 0.1 * rng.normal(size=n)
    noise = rng.choice([1e-4, 0.01, 0.1]) if noise is None else noise
    h = SEHyperParams(rng.uniform(0.5, 2.0), rng.uniform(0.5, 3.0, size=d), noise)
    return nigp.nigp_from_gp(gp_core.make_model(X, Y, h)), rng


def one_d_model(sf2=1.0, lam=1.0):
    X = np.array([[0.0], [0.7], [-1.3]])
    return nigp.nigp_from_gp(gp_core.make_model(X, np.array([0.2, -0.4, 0.9]), SEHyperParams(sf2, [lam], 0.01)))


class TestTestInput:
    def test_accepts_diagonal_matrix(self):
        t = StochasticTestInput([0.0, 1.0], np.diag([0.1, 0.2]))
        np.testing.assert_array_equal(t.cov, [0.1, 0.2])

    def test_rejects_off_diagonal(self):
        with pytest.raises(ValidationError):
            StochasticTestInput([0.0, 1.0], [[0.1, 0.01], [0.01, 0.2]])

    def test_rejects_negative(self):
        with pytest.raises(ValidationError):
            StochasticTestInput([0.0], [-1e-3])


class TestReduction:
    @pytest.mark.parametrize("seed", range(5))
    def test_zero_noise_matches_gp(self, seed):
        m, rng = random_nigp(seed, d=3)
        for x in rng.normal(size=(5, 3)):
            ref = gp_core.gp_predict(m.base, x)
            assert nigp.predict_deterministic(m, x) == ref
            assert nigp.predict_stochastic(m, StochasticTestInput.deterministic(x)) == ref

    def test_fit_without_input_noise_is_plain_mle(self, rng):
        X = rng.normal(size=(40, 2))
        Y = np.sin(X[:, 0]) + 0.05 * rng.normal(size=40)
        m = nigp.fit_nigp(X, Y, iterations=1, learn_input_noise=False, n_starts=2)
        assert m.hyper == gp_core.fit_mle(X, Y, n_starts=2).hyper
        assert np.all(m.base.correction == 0)


class TestTraining:
    def test_noise_free_inputs_learn_little_noise(self):
        rng = np.random.default_rng(11)
        X = rng.uniform(-3, 3, size=(150, 1))
        m = nigp.fit_nigp(X, np.sin(2 * X[:, 0]) + 0.05 * rng.normal(size=150))
        assert m.input_noise[0] <= 0.01 * np.var(X)

    def test_recovers_input_noise_variance(self):
        rng = np.random.default_rng(3)
        x_true = rng.uniform(-3, 3, size=300)
        y = np.sin(2 * x_true) + 0.05 * rng.normal(size=300)
        X = (x_true + 0.2 * rng.normal(size=300))[:, None]
        m = nigp.fit_nigp(X, y)
        assert 0.04 / 3 <= m.input_noise[0] <= 0.04 * 3
        np.testing.assert_allclose(m.base.correction, m.gradients**2 @ m.input_noise)

    def test_iterations_bounds(self, rng):
        with pytest.raises(ValidationError):
            nigp.fit_nigp(rng.normal(size=(10, 1)), rng.normal(size=10), iterations=6)

    def test_positive_correction_inflates_training_variance(self):
        m, rng = random_nigp(2, d=2)
        corr = rng.uniform(0.01, 0.2, size=m.base.n)
        corrected = gp_core.make_model(m.base.X, m.base.Y, m.hyper, correction=corr)
        v0 = gp_core.gp_predict_batch(m.base, m.base.X)[1]
        v1 = gp_core.gp_predict_batch(corrected, m.base.X)[1]
        assert np.all(v1 >= v0 - 1e-12)

    def test_large_correction_smooths(self):
        m, _ = random_nigp(4, d=2, noise=1e-6)
        corr = np.zeros(m.base.n)
        corr[0] = 5.0
        smoothed = gp_core.make_model(m.base.X, m.base.Y, m.hyper, correction=corr)
        assert abs(gp_core.gp_predict(smoothed, m.base.X[0])[0] - m.base.Y[0]) > 1e-3

    def test_serialization_round_trip(self):
        m, rng = random_nigp(6)
        back = nigp.NIGPModel.from_dict(m.to_dict())
        t = StochasticTestInput(rng.normal(size=2), [0.1, 0.3])
        assert nigp.predict_stochastic(back, t) == nigp.predict_stochastic(m, t)


class TestMoments:
    def test_q_deterministic_limit(self):
        m, rng = random_nigp(1, d=3)
        mu = rng.normal(size=3)
        q = nigp.compute_q(m, StochasticTestInput.deterministic(mu))
        np.testing.assert_allclose(q, gp_core.se_cov(m.base.X, mu[None, :], m.hyper)[:, 0], rtol=1e-14)

    def test_q_diffuse_limit(self):
        m, _ = random_nigp(1, d=3)
        q = nigp.compute_q(m, StochasticTestInput(np.zeros(3), np.full(3, 1e8)))
        assert np.all(q < 1e-8)

    def test_q_hand_value_and_range(self):
        m = one_d_model()
        q = nigp.compute_q(m, StochasticTestInput([0.0], [1.0]))
        assert q[0] == pytest.approx(1 / np.sqrt(2), abs=1e-12)
        assert np.all((q > 0) & (q <= m.hyper.process_var))

    def test_Q_hand_value(self):
        m = one_d_model()
        Q = nigp.compute_Q(m, StochasticTestInput([0.0], [1.0]))
        assert Q[0, 0] == pytest.approx(1 / np.sqrt(3), abs=1e-12)

    def test_Q_deterministic_limit(self):
        m, rng = random_nigp(7, d=2)
        mu = rng.normal(size=2)
        k = gp_core.se_cov(m.base.X, mu[None, :], m.hyper)[:, 0]
        np.testing.assert_allclose(nigp.compute_Q(m, StochasticTestInput.deterministic(mu)), np.outer(k, k), rtol=1e-12)
        near = nigp.compute_Q(m, StochasticTestInput(mu, [1e-10, 1e-10]))
        np.testing.assert_allclose(near, np.outer(k, k), rtol=1e-8, atol=1e-14)

    def test_Q_mixed_zero_dimensions(self):
        # a zero-variance dimension behaves as if that coordinate were fixed
        m, rng = random_nigp(8, d=2)
        mu = rng.normal(size=2)
        mixed = nigp.compute_Q(m, StochasticTestInput(mu, [0.3, 0.0]))
        almost = nigp.compute_Q(m, StochasticTestInput(mu, [0.3, 1e-12]))
        np.testing.assert_allclose(mixed, almost, rtol=1e-9)

    def test_centered_Q(self):
        m, rng = random_nigp(14, d=3)
        t = StochasticTestInput(rng.normal(size=3), rng.uniform(0.05, 0.5, size=3))
        q = nigp.compute_q(m, t)
        np.testing.assert_allclose(nigp.compute_Q_centered(m, t), nigp.compute_Q(m, t) - np.outer(q, q),
                                   atol=1e-12)
        assert np.all(np.linalg.eigvalsh(nigp.compute_Q_centered(m, t)) >= -1e-12)

    def test_Q_symmetric_nonnegative_diagonal(self):
        m, rng = random_nigp(9, d=5)
        Q = nigp.compute_Q(m, StochasticTestInput(rng.normal(size=5), rng.uniform(0.1, 1.0, size=5)))
        assert np.max(np.abs(Q - Q.T)) <= 1e-12 * np.max(np.abs(Q))
        assert np.all(np.diag(Q) >= 0)


class TestStochasticPrediction:
    def test_continuity(self):
        m, rng = random_nigp(10, d=2)
        mu = rng.normal(size=2)
        det = np.array(nigp.predict_deterministic(m, mu))
        gaps = [np.abs(np.array(nigp.predict_stochastic(m, StochasticTestInput(mu, [e, e]))) - det).max()
                for e in (1e-2, 1e-4, 1e-6)]
        assert gaps[0] > gaps[1] > gaps[2]

    @pytest.mark.parametrize("seed", range(3))
    def test_monte_carlo_oracle(self, seed):
        m, rng = random_nigp(100 + seed, d=2)
        mu = rng.normal(size=2)
        S = rng.uniform(0.05, 0.5, size=2)
        mean, var = nigp.predict_stochastic(m, StochasticTestInput(mu, S))
        Z = mu + np.sqrt(S) * rng.standard_normal((20_000, 2))
        mm, vv = nigp.predict_deterministic_batch(m, Z)
        assert abs(mean - mm.mean()) <= 3 * mm.std() / np.sqrt(len(mm))
        assert var == pytest.approx(vv.mean() + mm.var(), rel=0.05)

    @pytest.mark.parametrize("seed", range(10))
    def test_variance_inflation_at_training_inputs(self, seed):
        m, rng = random_nigp(seed, d=2)
        mu = m.base.X[rng.integers(m.base.n)]
        S = rng.uniform(0.01, 0.5, size=2)
        assert nigp.predict_stochastic(m, StochasticTestInput(mu, S))[1] >= nigp.predict_deterministic(m, mu)[1] - 1e-9

    def test_inflation_can_fail_in_data_gaps(self):
        # Input spread moves mass toward data where the latent variance is
        # lower, so the exact moments fall below the variance at the mean.
        X = np.array([[-2.0], [-1.9], [1.9], [2.0]])
        m = nigp.nigp_from_gp(gp_core.make_model(X, np.ones(4), SEHyperParams(1.0, [0.5], 0.01)))
        mu, S = np.zeros(1), np.array([1.0])
        _, var = nigp.predict_stochastic(m, StochasticTestInput(mu, S))
        assert var < nigp.predict_deterministic(m, mu)[1] - 0.1
        Z = mu + np.sqrt(S) * np.random.default_rng(1).standard_normal((100_000, 1))
        mm, vv = nigp.predict_deterministic_batch(m, Z)
        assert var == pytest.approx(vv.mean() + mm.var(), rel=0.01)

    def test_negative_variance_policy(self):
        m, rng = random_nigp(12, d=2)
        t = StochasticTestInput(rng.normal(size=2), [0.2, 0.2])
        _, var = nigp.predict_stochastic(m, t)
        trC = np.trace(nigp.compute_Q_centered(m, t))
        base_inv = m.corrected_inverse().copy()
        m._inverse[:] = [base_inv + (var + 5e-9) / trC * np.eye(m.base.n)]
        assert nigp.predict_stochastic(m, t)[1] == 0.0
        assert m.diagnostics["clamped_variances"] == 1
        m._inverse[:] = [base_inv + (var + 1e-6) / trC * np.eye(m.base.n)]
        with pytest.raises(NumericalError):
            nigp.predict_stochastic(m, t)

    def test_dimension_mismatch(self):
        m, _ = random_nigp(13, d=2)
        with pytest.raises(ValidationError):
            nigp.predict_stochastic(m, StochasticTestInput(np.zeros(3), np.ones(3)))


class TestInterval:
    def test_degenerate(self):
        assert nigp.predictive_interval(1.5, 0.0) == (1.5, 1.5)

    def test_standard_normal_quantile(self):
        lo, hi = nigp.predictive_interval(0.0, 1.0, 0.95)
        assert hi == pytest.approx(1.959964, abs=1e-6)
        assert lo == -hi

    def test_nesting(self):
        a = nigp.predictive_interval(0.3, 2.0, 0.95)
        b = nigp.predictive_interval(0.3, 2.0, 0.99)
        assert b[0] < a[0] and a[1] < b[1]

    @pytest.mark.parametrize("level", [0.0, 1.0, -0.1])
    def test_invalid_level(self, level):
        with pytest.raises(ValidationError):
            nigp.predictive_interval(0.0, 1.0, level)

    def test_matches_scipy(self):
        lo, hi = nigp.predictive_interval(2.0, 4.0, 0.8)
        assert hi == pytest.approx(scipy.stats.norm(2.0, 2.0).ppf(0.9))
