import numpy as np
import pytest

from adanode.errors import ConfigError, DomainError, ShapeError, UsageError
from adanode.model import ForecastDistribution, LatentPosterior
from adanode.objectives import (
    TTALossBreakdown,
    elbo_loss,
    gaussian_kl,
    prepare_window_batch,
    tta_batch_terms,
    tta_kl,
    tta_loss,
    tta_nll,
)
from conftest import make_windows

HALF_LOG_TWO_PI = 0.5 * np.log(2.0 * np.pi)


class TestGaussianKL:
    def test_identical_is_zero(self):
        p = LatentPosterior(np.array([0.3, -1.0]), np.array([0.5, 2.0]))
        assert gaussian_kl(p, p) == 0.0

    def test_unit_mean_shift(self):
        # KL(N(0,1) || N(1,1)) = 1/2
        assert gaussian_kl((np.zeros(1), np.ones(1)), (np.ones(1), np.ones(1))) == pytest.approx(
            0.5, abs=1e-10
        )

    def test_variance_ratio(self):
        # KL(N(0,4) || N(0,1)) = ln(1/2) + 4/2 - 1/2 = 3/2 - ln 2
        got = gaussian_kl((np.zeros(1), np.array([2.0])), (np.zeros(1), np.ones(1)))
        assert got == pytest.approx(1.5 - np.log(2.0), abs=1e-10)

    def test_monte_carlo_agreement(self):
        mu_p, sd_p = np.array([0.4]), np.array([0.8])
        mu_q, sd_q = np.array([-0.2]), np.array([1.3])
        closed = gaussian_kl((mu_p, sd_p), (mu_q, sd_q))
        x = np.random.default_rng(0).normal(mu_p, sd_p, size=(200_000, 1))

        def logpdf(x, mu, sd):
            return -0.5 * ((x - mu) / sd) ** 2 - np.log(sd) - HALF_LOG_TWO_PI

        mc = np.mean(logpdf(x, mu_p, sd_p) - logpdf(x, mu_q, sd_q))
        assert closed == pytest.approx(mc, rel=0.03)

    def test_sums_over_dimensions(self):
        p = (np.zeros(3), np.ones(3))
        q = (np.ones(3), np.ones(3))
        assert gaussian_kl(p, q) == pytest.approx(1.5, abs=1e-10)

    def test_never_negative(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            p = (rng.normal(size=2), np.abs(rng.normal(size=2)) + 0.05)
            q = (rng.normal(size=2), np.abs(rng.normal(size=2)) + 0.05)
            assert gaussian_kl(p, q) >= 0.0

    def test_errors(self):
        with pytest.raises(ShapeError):
            gaussian_kl((np.zeros(2), np.ones(2)), (np.zeros(3), np.ones(3)))
        with pytest.raises(DomainError):
            gaussian_kl((np.zeros(1), np.zeros(1)), (np.zeros(1), np.ones(1)))
        with pytest.raises(UsageError):
            gaussian_kl("not a gaussian", (np.zeros(1), np.ones(1)))


def forecast_of(means, stds, times=None):
    means = np.asarray(means, dtype=np.float64)
    if times is None:
        times = np.arange(1.0, 1.0 + len(means))
    return ForecastDistribution(times, means, np.asarray(stds, dtype=np.float64))


class TestTtaNll:
    def test_single_sample_unit_sigma(self):
        # ybar is the sample's own mean: -log N(mu; mu, 1) = 0.5*ln(2*pi)
        f = forecast_of([[0.7]], [[1.0]])
        assert tta_nll([f]) == pytest.approx(0.9189385332046727, abs=1e-10)

    def test_single_sample_half_sigma(self):
        # 0.5*ln(2*pi) + ln(0.5) = 0.22579135264472738
        f = forecast_of([[0.7]], [[0.5]])
        assert tta_nll([f]) == pytest.approx(0.22579135264472738, abs=1e-10)

    def test_two_separated_samples(self):
        # means 0 and 2 put ybar one unit from each: 0.5*ln(2*pi) + 0.5
        a = forecast_of([[0.0]], [[1.0]])
        b = forecast_of([[2.0]], [[1.0]])
        assert tta_nll([a, b]) == pytest.approx(1.4189385332046727, abs=1e-10)

    def test_sample_order_irrelevant(self):
        rng = np.random.default_rng(1)
        fs = [forecast_of(rng.normal(size=(4, 2)), np.full((4, 2), 0.7)) for _ in range(3)]
        assert tta_nll(fs) == pytest.approx(tta_nll(fs[::-1]), abs=1e-12)

    def test_needs_shared_grid(self):
        a = forecast_of([[0.0]], [[1.0]], times=[1.0])
        b = forecast_of([[0.0]], [[1.0]], times=[2.0])
        with pytest.raises(UsageError):
            tta_nll([a, b])
        with pytest.raises(UsageError):
            tta_nll([])


class TestTtaLossBlend:
    def test_blend(self):
        out = tta_loss(0.3, 2.0, 1.0)
        assert out.total == pytest.approx(0.3 * 2.0 + 0.7 * 1.0, abs=1e-12)
        assert out.nll == 2.0 and out.kl == 1.0 and out.lam == 0.3

    def test_extremes(self):
        assert tta_loss(1.0, 2.0, 5.0).total == 2.0
        assert tta_loss(0.0, 2.0, 5.0).total == 5.0

    def test_validation(self):
        with pytest.raises(ConfigError):
            tta_loss(1.5, 1.0, 1.0)
        with pytest.raises(ConfigError):
            TTALossBreakdown(nll=1.0, kl=-0.1, lam=0.5, total=0.45)
        with pytest.raises(ConfigError):
            TTALossBreakdown(nll=1.0, kl=1.0, lam=0.5, total=0.0)


class TestTtaKl:
    def test_matches_manual_two_pass_encoding(self, tiny_model):
        (w,) = make_windows(1, with_targets=False)
        forecasts = tiny_model.forecast(w, n_samples=3, seed=2)
        got = tta_kl(tiny_model, w, forecasts)
        ybar = np.mean([f.mean for f in forecasts], axis=0)
        p = tiny_model.encode(w, "context_only")
        q = tiny_model.encode(w.with_targets(ybar), "full_sequence")
        assert got == pytest.approx(gaussian_kl(p, q), abs=1e-12)
        assert got >= 0.0

    def test_grid_mismatch_rejected(self, tiny_model):
        (w,) = make_windows(1, with_targets=False)
        f = forecast_of([[0.0]], [[1.0]], times=[99.0])
        with pytest.raises(UsageError):
            tta_kl(tiny_model, w, [f])
        with pytest.raises(UsageError):
            tta_kl(tiny_model, w, [])


class TestBatchTermsAgreeWithPublicPath:
    def test_identity_candidates_reproduce_forecast_loss(self, tiny_model):
        windows = [w.without_targets() for w in make_windows(3, seed=5)]
        batch = prepare_window_batch(tiny_model, windows)
        S = 4
        rng = np.random.default_rng(11)
        eps = rng.standard_normal((len(windows), S, tiny_model.arch.d_lat))
        nll, kl = tta_batch_terms(tiny_model, batch, eps, 1.0, 0.0)
        nll = np.asarray(nll).reshape(len(windows))
        kl = np.asarray(kl).reshape(len(windows))
        for i, w in enumerate(windows):
            post = tiny_model.encode(w, "context_only")
            forecasts = []
            for s in range(S):
                z0 = post.mean + post.std * eps[i, s]
                from adanode import solvers

                traj = solvers.solve(
                    tiny_model.dynamics(),
                    tiny_model.params.to_arrays(),
                    z0,
                    w.union_times,
                    config=tiny_model.solve_config,
                )
                mu, sigma = tiny_model.decode_states(
                    traj.states[len(w.t_context):], tiny_model.params.to_arrays()
                )
                forecasts.append(ForecastDistribution(w.t_target, mu, sigma))
            assert nll[i] == pytest.approx(tta_nll(forecasts), abs=1e-9)
            assert kl[i] == pytest.approx(tta_kl(tiny_model, w, forecasts), abs=1e-9)


class TestPrepareWindowBatch:
    def test_validation(self, tiny_model):
        with pytest.raises(UsageError):
            prepare_window_batch(tiny_model, [])
        mixed = make_windows(1, seed=0) + make_windows(1, n_ctx=5, seed=1)
        with pytest.raises(UsageError):
            prepare_window_batch(tiny_model, mixed)
        unlabeled = [w.without_targets() for w in make_windows(2)]
        with pytest.raises(UsageError):
            prepare_window_batch(tiny_model, unlabeled, need_targets=True)
        with pytest.raises(ShapeError):
            prepare_window_batch(tiny_model, make_windows(1, d_obs=3))

    def test_flattened_inputs_match_encoder(self, tiny_model):
        windows = make_windows(2, seed=3)
        batch = prepare_window_batch(tiny_model, windows)
        for i, w in enumerate(windows):
            assert np.allclose(
                batch.ctx_flat[i], tiny_model.encoder_input(w, "context_only"), atol=1e-12
            )
            assert np.allclose(
                batch.full_flat[i], tiny_model.encoder_input(w, "full_sequence"), atol=1e-12
            )


class TestElbo:
    def test_beta_is_linear(self, tiny_model):
        (w,) = make_windows(1)
        at = {b: elbo_loss(tiny_model, w, n_samples=2, seed=0, beta=b) for b in (0.0, 1.0, 2.0)}
        assert at[2.0] - at[1.0] == pytest.approx(at[1.0] - at[0.0], rel=1e-9)

    def test_deterministic(self, tiny_model):
        (w,) = make_windows(1)
        a = elbo_loss(tiny_model, w, n_samples=3, seed=7)
        b = elbo_loss(tiny_model, w, n_samples=3, seed=7)
        c = elbo_loss(tiny_model, w, n_samples=3, seed=8)
        assert a == b
        assert a != c

    def test_validation(self, tiny_model):
        (w,) = make_windows(1, with_targets=False)
        with pytest.raises(UsageError):
            elbo_loss(tiny_model, w)
        (labeled,) = make_windows(1)
        with pytest.raises(UsageError):
            elbo_loss(tiny_model, labeled, n_samples=0)

    def test_perfect_reconstruction_term_drops_with_beta_zero(self, tiny_model):
        # with beta=0 the loss is pure reconstruction NLL, so adding targets
        # far from any achievable decoding must increase it
        (w,) = make_windows(1)
        far = w.with_targets(np.asarray(w.y_target) + 50.0)
        assert elbo_loss(tiny_model, far, seed=0, beta=0.0) > elbo_loss(
            tiny_model, w, seed=0, beta=0.0
        )
