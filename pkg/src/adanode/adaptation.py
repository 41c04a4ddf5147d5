"""Test-time adaptation: freeze the network, fit only (alpha, gamma).

alpha is optimized through its log so it stays positive. The latent noise for
the S samples is drawn once per session from the config seed, making the loss
a deterministic function of (alpha, gamma); the same draws feed the landscape
scan, so grid search and gradient descent see the same surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import objectives
from .errors import AdaptationFailure, ConfigError, DivergenceError
from .model import AdaptationParams, LatentODEModel, TimeSeriesWindow

LR_SEARCH_GRID = (1e-2, 1e-3, 1e-4)
_MAX_REJECTIONS = 10


@dataclass
class AdaptConfig:
    batch: list[TimeSeriesWindow]
    learning_rate: float = 1e-2
    steps: int = 50
    lam: float = 0.5
    n_samples: int = 5
    seed: int = 0
    rho: float = 0.9
    eps: float = 1e-8

    def __post_init__(self):
        if not self.batch:
            raise ConfigError("adaptation batch must be non-empty")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.steps < 1:
            raise ConfigError("steps must be a positive integer")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if not 0.0 < self.rho < 1.0:
            raise ConfigError("rho must lie in (0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")


@dataclass(frozen=True)
class AdaptStepRecord:
    alpha: float
    gamma: float
    nll: float
    kl: float
    total: float
    learning_rate: float | None
    rejections: int = 0


@dataclass
class AdaptTrace:
    """Loss and parameter history; entry 0 is the unadapted evaluation."""

    records: list[AdaptStepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> AdaptStepRecord:
        return self.records[i]

    def best(self) -> AdaptStepRecord:
        return min(self.records, key=lambda r: r.total)


def init_adaptation() -> AdaptationParams:
    return AdaptationParams(alpha=1.0, gamma=0.0)


def rmsprop_step(value, grad, state, learning_rate, rho=0.9, eps=1e-8):
    """One RMSprop update; returns (new_value, new_state)."""
    state = rho * state + (1.0 - rho) * grad**2
    return value - learning_rate * grad / np.sqrt(state + eps), state


def _group_by_grid(windows: list[TimeSeriesWindow]) -> list[list[int]]:
    groups: dict[tuple, list[int]] = {}
    for i, w in enumerate(windows):
        key = (w.t_context.tobytes(), w.t_target.tobytes())
        groups.setdefault(key, []).append(i)
    return list(groups.values())


class _SessionLoss:
    """The adaptation objective with the session's noise baked in.

    Windows are grouped by their time grid; each group is evaluated in one
    batched pass. tape_eval records a graph in (ln alpha, gamma) and returns
    the gradient; value_eval scores a whole grid of candidates numerically.
    """

    def __init__(self, model: LatentODEModel, windows, lam: float, noise: np.ndarray):
        self.model = model
        self.lam = lam
        self.n_windows = len(windows)
        self.groups = []
        for idx in _group_by_grid(windows):
            batch = objectives.prepare_window_batch(model, [windows[i] for i in idx])
            self.groups.append((batch, noise[np.array(idx)]))

    def _terms(self, alpha, gamma, check_finite: bool):
        nll_sum = 0.0
        kl_sum = 0.0
        for batch, noise in self.groups:
            nll, kl = objectives.tta_batch_terms(
                self.model, batch, noise, alpha, gamma, check_finite
            )
            nll_sum = nll_sum + ad.nsum(nll, axis=-1)
            kl_sum = kl_sum + ad.nsum(kl, axis=-1)
        inv = 1.0 / self.n_windows
        return nll_sum * inv, kl_sum * inv

    def tape_eval(self, a: float, gamma: float):
        """Returns (nll, kl, total, d_total/da, d_total/dgamma) at exp(a)."""
        g = ad.Graph()
        a_leaf = g.leaf("a", np.array(a))
        g_leaf = g.leaf("gamma", np.array(gamma))
        nll, kl = self._terms(ad.exp(a_leaf), g_leaf, check_finite=True)
        total = self.lam * nll + (1.0 - self.lam) * kl
        scalar = ad.reshape(total, ())
        values = (float(nll.value.reshape(())), float(kl.value.reshape(())),
                  float(scalar.value))
        if not all(math.isfinite(v) for v in values):
            raise DivergenceError(
                "adaptation loss left the finite range",
                last_valid_time=float(self.groups[0][0].times[-1]),
            )
        grads = ad.backward(g, np.array(1.0), output=scalar)
        return (*values, float(grads["a"].array), float(grads["gamma"].array))

    def value_eval(self, alphas: np.ndarray, gammas: np.ndarray):
        """Vectorized loss over flat candidate arrays; non-finite becomes inf."""
        a_col = np.asarray(alphas, dtype=np.float64)[:, None, None, None]
        g_col = np.asarray(gammas, dtype=np.float64)[:, None, None, None]
        with np.errstate(all="ignore"):
            nll, kl = self._terms(a_col, g_col, check_finite=False)
            total = self.lam * nll + (1.0 - self.lam) * kl
        total = np.where(np.isfinite(total), total, np.inf)
        nll = np.where(np.isfinite(nll), nll, np.inf)
        kl = np.where(np.isfinite(kl), kl, np.inf)
        return nll, kl, total


def session_noise(config: AdaptConfig, d_lat: int) -> np.ndarray:
    rng = np.random.default_rng(config.seed)
    return rng.standard_normal((len(config.batch), config.n_samples, d_lat))


def adapt(model: LatentODEModel, config: AdaptConfig) -> tuple[AdaptationParams, AdaptTrace]:
    """Optimize (alpha, gamma) on the config batch; returns the best visit.

    Starts at (1, 0). A step whose loss diverges is retried with a halved
    learning rate (up to a few times) and the rejections are recorded; the
    next step starts from the configured rate again.
    """
    loss = _SessionLoss(
        model, config.batch, config.lam, session_noise(config, model.arch.d_lat)
    )
    a, gamma = 0.0, 0.0
    s_a, s_g = 0.0, 0.0
    try:
        nll, kl, total, g_a, g_g = loss.tape_eval(a, gamma)
    except DivergenceError as exc:
        raise AdaptationFailure(
            f"loss is not computable at the unadapted parameters: {exc}"
        ) from None
    records = [AdaptStepRecord(1.0, 0.0, nll, kl, total, learning_rate=None)]
    any_accepted = False
    for _ in range(config.steps):
        lr = config.learning_rate
        rejections = 0
        accepted = False
        while rejections <= _MAX_REJECTIONS:
            cand_a, cand_sa = rmsprop_step(a, g_a, s_a, lr, config.rho, config.eps)
            cand_g, cand_sg = rmsprop_step(gamma, g_g, s_g, lr, config.rho, config.eps)
            try:
                out = loss.tape_eval(cand_a, cand_g)
            except DivergenceError:
                rejections += 1
                lr *= 0.5
                continue
            a, gamma, s_a, s_g = cand_a, cand_g, cand_sa, cand_sg
            nll, kl, total, g_a, g_g = out
            accepted = True
            break
        if accepted:
            any_accepted = True
            records.append(
                AdaptStepRecord(math.exp(a), gamma, nll, kl, total, lr, rejections)
            )
        else:
            records.append(
                AdaptStepRecord(math.exp(a), gamma, nll, kl, total, None, rejections)
            )
    if not any_accepted:
        raise AdaptationFailure("every adaptation step diverged")
    trace = AdaptTrace(records)
    best = trace.best()
    return AdaptationParams(alpha=best.alpha, gamma=best.gamma), trace


def adapt_with_lr_search(
    model: LatentODEModel,
    config: AdaptConfig,
    rates: tuple[float, ...] = LR_SEARCH_GRID,
) -> tuple[AdaptationParams, AdaptTrace, float]:
    """Run adapt once per learning rate and keep the best final loss."""
    if not rates:
        raise ConfigError("learning-rate search needs at least one rate")
    best = None
    for lr in rates:
        try:
            params, trace = adapt(model, replace(config, learning_rate=lr))
        except AdaptationFailure:
            continue
        score = trace.best().total
        if best is None or score < best[0]:
            best = (score, params, trace, lr)
    if best is None:
        raise AdaptationFailure("adaptation failed at every searched learning rate")
    return best[1], best[2], best[3]


def loss_landscape(
    model: LatentODEModel,
    config: AdaptConfig,
    alphas: np.ndarray,
    gammas: np.ndarray,
    chunk: int = 2048,
) -> np.ndarray:
    """Total adaptation loss over an (alpha, gamma) grid.

    Uses the same noise draws as adapt() with the same config, so the surface
    is exactly the one gradient descent walks. Candidates are evaluated in
    slabs of `chunk` to bound memory. Returns shape
    (len(alphas), len(gammas)); points whose rollout explodes are +inf.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    gammas = np.asarray(gammas, dtype=np.float64)
    if np.any(alphas <= 0):
        raise ConfigError("alpha grid values must be strictly positive")
    if chunk < 1:
        raise ConfigError("chunk must be >= 1")
    loss = _SessionLoss(
        model, config.batch, config.lam, session_noise(config, model.arch.d_lat)
    )
    A, G = np.meshgrid(alphas, gammas, indexing="ij")
    a_flat, g_flat = A.reshape(-1), G.reshape(-1)
    parts = []
    for lo in range(0, len(a_flat), chunk):
        _, _, total = loss.value_eval(a_flat[lo:lo + chunk], g_flat[lo:lo + chunk])
        parts.append(total)
    return np.concatenate(parts).reshape(A.shape)
