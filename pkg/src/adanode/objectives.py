"""Loss functions: source-training ELBO and the test-time adaptation loss.

The adaptation loss has two parts. The NLL term scores the mean prediction
under each sampled predictive distribution, which rewards confident, mutually
consistent samples. The KL term compares the context-only latent posterior
with the posterior of the context extended by the model's own mean forecast,
which rewards forecasts the encoder considers a plausible continuation.

Besides the public per-window operations there are batched graph builders
used by the adaptation engine, the trainer and the loss-landscape scan. They
evaluate W windows and G candidate (alpha, gamma) pairs in one vectorized
pass over states shaped (G, W, S, d); with tape nodes as inputs the same code
records a differentiable graph (G = 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import solvers
from .errors import ConfigError, DomainError, ShapeError, UsageError
from .model import (
    ForecastDistribution,
    LatentODEModel,
    LatentPosterior,
    TimeSeriesWindow,
    resample_matrix,
)


@dataclass(frozen=True)
class TTALossBreakdown:
    """Adaptation loss split into its weighted parts."""

    nll: float
    kl: float
    lam: float
    total: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        if self.kl < 0.0:
            raise ConfigError("kl must be nonnegative")
        want = self.lam * self.nll + (1.0 - self.lam) * self.kl
        if abs(self.total - want) > 1e-9 * max(1.0, abs(want)):
            raise ConfigError("total must equal lam*nll + (1-lam)*kl")


def _mean_std(dist) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(dist, LatentPosterior):
        return dist.mean, dist.std
    if isinstance(dist, (tuple, list)) and len(dist) == 2:
        return np.asarray(dist[0], dtype=np.float64), np.asarray(dist[1], dtype=np.float64)
    if hasattr(dist, "mean") and hasattr(dist, "std"):
        return np.asarray(dist.mean, dtype=np.float64), np.asarray(dist.std, dtype=np.float64)
    raise UsageError("expected a diagonal Gaussian as (mean, std) or a posterior")


def gaussian_kl(p, q) -> float:
    """KL(p || q) for diagonal Gaussians, in closed form.

    Accepts LatentPosterior instances or (mean, std) pairs.
    """
    mu_p, sigma_p = _mean_std(p)
    mu_q, sigma_q = _mean_std(q)
    if mu_p.shape != mu_q.shape or sigma_p.shape != sigma_q.shape:
        raise ShapeError("KL requires distributions of matching shape")
    if np.any(sigma_p <= 0) or np.any(sigma_q <= 0):
        raise DomainError("standard deviations must be strictly positive")
    terms = (
        np.log(sigma_q / sigma_p)
        + (sigma_p**2 + (mu_p - mu_q) ** 2) / (2.0 * sigma_q**2)
        - 0.5
    )
    # The closed form is nonnegative; rounding may leave a tiny negative dust.
    return max(float(np.sum(terms)), 0.0)


def tta_nll(forecasts: list[ForecastDistribution]) -> float:
    """Mean negative log-density of the sample-mean path under each sample."""
    if not forecasts:
        raise UsageError("need at least one forecast sample")
    times = forecasts[0].times
    for f in forecasts[1:]:
        if not np.array_equal(f.times, times):
            raise UsageError("forecast samples must share one time grid")
    ybar = np.mean([f.mean for f in forecasts], axis=0)
    total = 0.0
    for f in forecasts:
        log_pdf = ad.gaussian_log_density(ybar, f.mean, f.std)
        total += -np.mean(np.sum(log_pdf, axis=-1))
    return total / len(forecasts)


def tta_kl(model: LatentODEModel, window: TimeSeriesWindow, forecasts) -> float:
    """KL between the context posterior and the self-continuation posterior."""
    if not forecasts:
        raise UsageError("need at least one forecast sample")
    for f in forecasts:
        if not np.array_equal(f.times, window.t_target):
            raise UsageError("forecasts must cover the window's target times")
    ybar = np.mean([f.mean for f in forecasts], axis=0)
    p = model.encode(window, "context_only")
    q = model.encode(window.with_targets(ybar), "full_sequence")
    return gaussian_kl(p, q)


def tta_loss(lam: float, nll: float, kl: float) -> TTALossBreakdown:
    if not 0.0 <= lam <= 1.0:
        raise ConfigError("lam must lie in [0, 1]")
    total = lam * nll + (1.0 - lam) * kl
    return TTALossBreakdown(nll=nll, kl=kl, lam=lam, total=total)


# ---------------------------------------------------------------------------
# Batched builders shared by adaptation, training and the landscape scan.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowBatch:
    """Constants shared by all windows on one (context, target) time grid."""

    t_context: np.ndarray
    t_target: np.ndarray
    times: np.ndarray
    step_size: float
    y_context: np.ndarray       # (W, C, d)
    ctx_flat: np.ndarray        # (W, L*d) encoder input, context only
    M_target: np.ndarray        # (L, T) target block of the full resampler
    ctx_contrib: np.ndarray     # (W, L, d) context block applied to y_context
    y_full: np.ndarray | None   # (W, C+T, d) when targets are present
    full_flat: np.ndarray | None

    @property
    def n_windows(self) -> int:
        return self.y_context.shape[0]

    @property
    def context_len(self) -> int:
        return len(self.t_context)


def prepare_window_batch(
    model: LatentODEModel,
    windows: list[TimeSeriesWindow],
    need_targets: bool = False,
) -> WindowBatch:
    if not windows:
        raise UsageError("window batch must be non-empty")
    first = windows[0]
    for w in windows[1:]:
        if not (
            np.array_equal(w.t_context, first.t_context)
            and np.array_equal(w.t_target, first.t_target)
        ):
            raise UsageError("batched windows must share one time grid")
    if len(first.t_context) < 2:
        raise UsageError("context must contain at least two points")
    d = model.arch.d_obs
    for w in windows:
        if w.d_obs != d:
            raise ShapeError(f"window has {w.d_obs} dims, model expects {d}")
    times = first.union_times
    L = model.arch.enc_len
    y_ctx = np.stack([w.y_context for w in windows])
    M_ctx = resample_matrix(first.t_context, L)
    ctx_flat = np.einsum("lc,wcd->wld", M_ctx, y_ctx).reshape(len(windows), -1)
    M_full = resample_matrix(times, L)
    C = len(first.t_context)
    ctx_contrib = np.einsum("lc,wcd->wld", M_full[:, :C], y_ctx)
    y_full = None
    full_flat = None
    if all(w.y_target is not None for w in windows):
        y_full = np.concatenate(
            [y_ctx, np.stack([np.asarray(w.y_target) for w in windows])], axis=1
        )
        full_flat = np.einsum("lt,wtd->wld", M_full, y_full).reshape(len(windows), -1)
    elif need_targets:
        raise UsageError("every window in the batch needs target values")
    step = model.solve_config.step_size or solvers.default_step(times)
    return WindowBatch(
        t_context=first.t_context,
        t_target=first.t_target,
        times=times,
        step_size=step,
        y_context=y_ctx,
        ctx_flat=ctx_flat,
        M_target=M_full[:, C:],
        ctx_contrib=ctx_contrib,
        y_full=y_full,
        full_flat=full_flat,
    )


def _shape(x) -> tuple[int, ...]:
    return x.value.shape if isinstance(x, ad.Node) else np.shape(x)


def tta_batch_terms(model, batch: WindowBatch, eps, alpha, gamma, check_finite=True):
    """Per-window adaptation loss terms for a shared-grid batch.

    eps has shape (W, S, d_lat) and fixes the latent noise, so the loss is a
    deterministic function of (alpha, gamma). alpha and gamma may be floats,
    tape nodes, or arrays broadcastable as (G, 1, 1, 1) to score G candidate
    pairs at once. Returns (nll, kl), each logically shaped (G, W).
    """
    theta = model.params.to_arrays()
    q_mu, q_sigma = model.encode_values(batch.ctx_flat, theta)
    z0 = q_mu[None, :, None, :] + q_sigma[None, :, None, :] * np.asarray(eps)[None]
    rhs = solvers._adapted_rhs(model.dynamics(), theta, alpha, gamma)
    states = solvers.rk4_path(rhs, z0, batch.times, batch.step_size, check_finite)
    tail = ad.stack(states[batch.context_len:], axis=0)
    mu_t, sigma_t = model.decode_states(tail, theta)
    ybar = ad.nmean(mu_t, axis=-2, keepdims=True)
    log_pdf = ad.gaussian_log_density(ybar, mu_t, sigma_t)
    per_sample = ad.nmean(ad.nsum(log_pdf, axis=-1), axis=0)
    nll = -ad.nmean(per_sample, axis=-1)

    T, G, W, _, d = _shape(ybar)
    ybar_rows = ad.moveaxis(ad.reshape(ybar, (T, G, W, d)), 0, 2)
    full_vals = ad.resample_time(batch.M_target, ybar_rows) + batch.ctx_contrib[None]
    L = model.arch.enc_len
    mu_f, sigma_f = model.encode_values(ad.reshape(full_vals, (G, W, L * d)), theta)
    kl_terms = (
        ad.log(sigma_f)
        - np.log(q_sigma)[None]
        + (q_sigma[None] ** 2 + (q_mu[None] - mu_f) ** 2) / (2.0 * sigma_f**2)
        - 0.5
    )
    kl = ad.nsum(kl_terms, axis=-1)
    return nll, kl


def elbo_batch_terms(model, batch: WindowBatch, eps, theta, beta: float = 1.0):
    """Per-window ELBO plus the context/full posterior consistency KL.

    theta may hold tape nodes (training) or plain arrays. eps has shape
    (W, S, d_lat). Returns (elbo, consistency_kl), each logically (W,).
    """
    if batch.full_flat is None:
        raise UsageError("ELBO needs target values for every window")
    W, S, dl = np.shape(eps)
    mu_q, sigma_q = model.encode_values(batch.full_flat, theta)
    z0 = ad.reshape(mu_q, (1, W, 1, dl)) + ad.reshape(sigma_q, (1, W, 1, dl)) * np.asarray(eps)[None]
    rhs = solvers._adapted_rhs(model.dynamics(), theta, 1.0, 0.0)
    states = solvers.rk4_path(rhs, z0, batch.times, batch.step_size)
    mu, sigma = model.decode_states(ad.stack(states, axis=0), theta)
    y_true = batch.y_full.transpose(1, 0, 2)[:, None, :, None, :]
    log_pdf = ad.gaussian_log_density(y_true, mu, sigma)
    sum_td = ad.nsum(ad.nsum(log_pdf, axis=-1), axis=0)
    recon = ad.reshape(-ad.nmean(sum_td, axis=-1), (W,))
    kl_prior = ad.nsum(
        0.5 * (sigma_q**2 + mu_q**2) - ad.log(sigma_q) - 0.5, axis=-1
    )
    elbo = recon + beta * kl_prior

    mu_c, sigma_c = model.encode_values(batch.ctx_flat, theta)
    cons_terms = (
        ad.log(sigma_q) - ad.log(sigma_c)
        + (sigma_c**2 + (mu_c - mu_q) ** 2) / (2.0 * sigma_q**2)
        - 0.5
    )
    consistency = ad.nsum(cons_terms, axis=-1)
    return elbo, consistency


def elbo_loss(
    model: LatentODEModel,
    window: TimeSeriesWindow,
    n_samples: int = 1,
    seed: int = 0,
    beta: float = 1.0,
) -> float:
    """Negative evidence lower bound of one labeled window."""
    if window.y_target is None:
        raise UsageError("elbo_loss needs a window with target values")
    if n_samples < 1:
        raise UsageError("n_samples must be >= 1")
    batch = prepare_window_batch(model, [window], need_targets=True)
    eps = np.random.default_rng(seed).standard_normal((1, n_samples, model.arch.d_lat))
    elbo, _ = elbo_batch_terms(model, batch, eps, model.params.to_arrays(), beta)
    return float(np.asarray(elbo)[0])
