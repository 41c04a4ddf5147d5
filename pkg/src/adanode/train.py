"""Source-domain training for the latent ODE forecaster.

Full-batch RMSprop on the ELBO (reconstruction of context and horizon from
the full-sequence posterior, plus a standard-normal KL). A consistency KL
between the context-only and full-sequence posteriors is added so the
encoder gives usable posteriors from the context alone, which is the only
input it sees at test time.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import objectives
from .adaptation import _group_by_grid, rmsprop_step
from .errors import ConfigError, UsageError
from .model import LatentODEModel, TimeSeriesWindow
from .shiftgen import SeriesDataset


@dataclass
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 1e-2
    n_samples: int = 3
    beta: float = 1.0
    consistency_weight: float = 1.0
    seed: int = 0
    log_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.beta < 0 or self.consistency_weight < 0:
            raise ConfigError("beta and consistency_weight must be nonnegative")


def train_source_model(
    model: LatentODEModel,
    data: SeriesDataset | list[TimeSeriesWindow],
    config: TrainConfig,
) -> list[float]:
    """Fit the model's parameters in place; returns the per-epoch losses."""
    windows = data.windows if isinstance(data, SeriesDataset) else list(data)
    if not windows:
        raise UsageError("training needs at least one window")
    if any(w.y_target is None for w in windows):
        raise UsageError("training windows need target values")
    groups = []
    for idx in _group_by_grid(windows):
        batch = objectives.prepare_window_batch(
            model, [windows[i] for i in idx], need_targets=True
        )
        groups.append(batch)
    n_windows = len(windows)
    d_lat = model.arch.d_lat
    rng = np.random.default_rng(config.seed)
    opt_state = {name: np.zeros(t.shape) for name, t in model.params.items()}
    losses = []
    for epoch in range(config.epochs):
        graph = ad.Graph()
        theta = graph.leaves_for(model.params)
        total = None
        for batch in groups:
            eps = rng.standard_normal((batch.n_windows, config.n_samples, d_lat))
            elbo, consistency = objectives.elbo_batch_terms(
                model, batch, eps, theta, config.beta
            )
            part = ad.nsum(elbo) + config.consistency_weight * ad.nsum(consistency)
            total = part if total is None else total + part
        loss = total * (1.0 / n_windows)
        value = float(loss.value)
        grads = ad.backward(graph, np.array(1.0), output=loss)
        for name in model.params.names():
            if model.params.is_frozen(name):
                continue
            new_value, opt_state[name] = rmsprop_step(
                model.params[name].array,
                grads[name].array,
                opt_state[name],
                config.learning_rate,
            )
            model.params.replace(name, new_value)
        losses.append(value)
        if config.log_every and (epoch % config.log_every == 0 or epoch == config.epochs - 1):
            print(f"epoch {epoch:4d}  loss {value:.6f}")
    return losses


FINE_TUNE_FACTOR = 0.3


def fit_source_model(
    model: LatentODEModel,
    data: SeriesDataset | list[TimeSeriesWindow],
    config: TrainConfig,
    fine_tune: bool = True,
) -> list[float]:
    """Train, then continue at a reduced rate for half the epochs.

    A single constant-rate run can park at a poor stationary point where the
    decoder regresses to the mean and the posterior collapses; restarting
    the optimizer at 0.3x the rate dependably pulls it out. fine_tune=False
    gives the plain single-stage behaviour.
    """
    losses = train_source_model(model, data, config)
    if fine_tune:
        stage = replace(
            config,
            epochs=max(1, config.epochs // 2),
            learning_rate=FINE_TUNE_FACTOR * config.learning_rate,
        )
        losses += train_source_model(model, data, stage)
    return losses
