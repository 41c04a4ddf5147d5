"""Latent ODE forecaster with a test-time adaptation hook.

A variational encoder maps a resampled window onto a latent initial state
posterior, an MLP defines the latent dynamics, and a decoder turns latent
states into per-time Gaussians. Two scalars (alpha, gamma) rescale and shift
the latent state inside the dynamics; with (1, 0) the model is bit-identical
to one without the hook.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import solvers
from .errors import (
    ConfigError,
    DivergenceError,
    InterpolationError,
    ParseError,
    ShapeError,
    UsageError,
    VersionError,
)

CHECKPOINT_FORMAT_VERSION = 1
DECODER_SIGMA_FLOOR = 1e-4

CONTEXT_ONLY = "context_only"
FULL_SEQUENCE = "full_sequence"


@dataclass(frozen=True)
class Architecture:
    """Network metadata: sizes, layer widths, activation, encoder length L."""

    d_obs: int
    d_lat: int
    enc_len: int
    enc_hidden: tuple[int, ...] = (64,)
    node_hidden: tuple[int, ...] = (64,)
    dec_hidden: tuple[int, ...] = (64,)
    activation: str = "tanh"

    def __post_init__(self):
        if self.d_obs < 1 or self.d_lat < 1 or self.enc_len < 2:
            raise ConfigError("d_obs, d_lat must be >= 1 and enc_len >= 2")
        if self.activation not in ad.ACTIVATION_KINDS:
            raise ConfigError(f"unknown activation: {self.activation!r}")
        for widths in (self.enc_hidden, self.node_hidden, self.dec_hidden):
            if any(w < 1 for w in widths):
                raise ConfigError("hidden widths must be positive")

    def layer_shapes(self, prefix: str) -> list[tuple[int, int]]:
        """(out, in) shapes for each affine layer of one of the three nets."""
        if prefix == "enc":
            dims = [self.enc_len * self.d_obs, *self.enc_hidden, 2 * self.d_lat]
        elif prefix == "node":
            dims = [self.d_lat, *self.node_hidden, self.d_lat]
        elif prefix == "dec":
            dims = [self.d_lat, *self.dec_hidden, 2 * self.d_obs]
        else:
            raise UsageError(f"unknown network prefix: {prefix!r}")
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    def as_dict(self) -> dict:
        return {
            "d_obs": self.d_obs,
            "d_lat": self.d_lat,
            "enc_len": self.enc_len,
            "enc_hidden": list(self.enc_hidden),
            "node_hidden": list(self.node_hidden),
            "dec_hidden": list(self.dec_hidden),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Architecture":
        try:
            return cls(
                d_obs=int(d["d_obs"]),
                d_lat=int(d["d_lat"]),
                enc_len=int(d["enc_len"]),
                enc_hidden=tuple(int(w) for w in d["enc_hidden"]),
                node_hidden=tuple(int(w) for w in d["node_hidden"]),
                dec_hidden=tuple(int(w) for w in d["dec_hidden"]),
                activation=str(d["activation"]),
            )
        except KeyError as exc:
            raise ParseError(f"architecture missing field {exc}") from None


class TimeSeriesWindow:
    """A forecasting instance: observed context and target timestamps.

    y_target is optional; it is present for training and scoring, absent (or
    ignored) at pure test time.
    """

    __slots__ = ("t_context", "y_context", "t_target", "y_target")

    def __init__(self, t_context, y_context, t_target, y_target=None):
        t_c = np.asarray(t_context, dtype=np.float64)
        y_c = np.asarray(y_context, dtype=np.float64)
        t_t = np.asarray(t_target, dtype=np.float64)
        if y_c.ndim == 1:
            y_c = y_c[:, None]
        if t_c.ndim != 1 or t_t.ndim != 1:
            raise ShapeError("timestamps must be 1-d")
        if len(t_c) != len(y_c):
            raise ShapeError("context timestamps and values must align")
        if np.any(np.diff(t_c) <= 0) or np.any(np.diff(t_t) <= 0):
            raise ShapeError("timestamps must be strictly increasing")
        if len(t_c) and len(t_t) and t_t[0] <= t_c[-1]:
            raise ShapeError("all target times must come after the context")
        if y_target is not None:
            y_t = np.asarray(y_target, dtype=np.float64)
            if y_t.ndim == 1:
                y_t = y_t[:, None]
            if len(y_t) != len(t_t):
                raise ShapeError("target timestamps and values must align")
            y_t.flags.writeable = False
            self.y_target = y_t
        else:
            self.y_target = None
        for arr in (t_c, y_c, t_t):
            arr.flags.writeable = False
        self.t_context = t_c
        self.y_context = y_c
        self.t_target = t_t

    @property
    def d_obs(self) -> int:
        return self.y_context.shape[1]

    @property
    def union_times(self) -> np.ndarray:
        return np.concatenate([self.t_context, self.t_target])

    def with_targets(self, values) -> "TimeSeriesWindow":
        return TimeSeriesWindow(self.t_context, self.y_context, self.t_target, values)

    def without_targets(self) -> "TimeSeriesWindow":
        return TimeSeriesWindow(self.t_context, self.y_context, self.t_target)


@dataclass(frozen=True)
class LatentPosterior:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if self.mean.shape != self.std.shape:
            raise ShapeError("posterior mean and std must share a shape")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.std))):
            raise ShapeError("posterior must be finite")
        if np.any(self.std <= 0):
            raise ShapeError("posterior std must be strictly positive")


@dataclass(frozen=True)
class ForecastDistribution:
    times: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=np.float64))
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if len(self.times) != len(self.mean) or len(self.mean) != len(self.std):
            raise ShapeError("forecast times, means and stds must align")
        if np.any(self.std <= 0):
            raise ShapeError("forecast std must be strictly positive")


@dataclass(frozen=True)
class AdaptationParams:
    alpha: float
    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "gamma", float(self.gamma))
        if not (np.isfinite(self.alpha) and np.isfinite(self.gamma)):
            raise ConfigError("adaptation parameters must be finite")
        if self.alpha <= 0:
            raise ConfigError("alpha must be strictly positive")


def resample_matrix(t_src: np.ndarray, n_points: int) -> np.ndarray:
    """Linear-interpolation weights from source times onto a regular grid.

    Returns an (n_points, len(t_src)) matrix M such that M @ values evaluates
    the piecewise-linear interpolant at n_points regularly spaced times
    spanning [t_src[0], t_src[-1]].
    """
    t_src = np.asarray(t_src, dtype=np.float64)
    if t_src.ndim != 1 or len(t_src) < 2:
        raise InterpolationError("resampling needs at least two source points")
    grid = np.linspace(t_src[0], t_src[-1], n_points)
    idx = np.clip(np.searchsorted(t_src, grid, side="right") - 1, 0, len(t_src) - 2)
    span = t_src[idx + 1] - t_src[idx]
    w = (grid - t_src[idx]) / span
    M = np.zeros((n_points, len(t_src)), dtype=np.float64)
    rows = np.arange(n_points)
    M[rows, idx] = 1.0 - w
    M[rows, idx + 1] = w
    return M


def run_mlp(x, theta: Mapping, prefix: str, n_layers: int, activation: str):
    """Apply a named stack of affine layers; dual-mode (arrays or tape nodes)."""
    h = x
    for i in range(n_layers):
        h = ad.affine(h, theta[f"{prefix}.W{i}"], theta[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            h = ad.activation(h, activation)
    return h


class LatentODEModel:
    """Encoder, latent dynamics and decoder sharing one parameter set."""

    def __init__(
        self,
        arch: Architecture,
        params: ad.ParameterSet,
        solve_config: solvers.SolveConfig | None = None,
    ):
        for prefix in ("enc", "node", "dec"):
            for i, shape in enumerate(arch.layer_shapes(prefix)):
                for part, want in (("W", shape), ("b", (shape[0],))):
                    name = f"{prefix}.{part}{i}"
                    if name not in params:
                        raise ShapeError(f"missing parameter {name!r}")
                    if params[name].shape != want:
                        raise ShapeError(
                            f"parameter {name!r} has shape {params[name].shape}, expected {want}"
                        )
        self.arch = arch
        self.params = params
        self.solve_config = solve_config or solvers.SolveConfig()

    # -- construction ------------------------------------------------------

    @classmethod
    def init_random(
        cls,
        arch: Architecture,
        seed: int = 0,
        solve_config: solvers.SolveConfig | None = None,
    ) -> "LatentODEModel":
        rng = np.random.default_rng(seed)
        params = ad.ParameterSet()
        for prefix in ("enc", "node", "dec"):
            for i, (out_dim, in_dim) in enumerate(arch.layer_shapes(prefix)):
                scale = 1.0 / np.sqrt(in_dim)
                params.add(f"{prefix}.W{i}", rng.normal(0.0, scale, size=(out_dim, in_dim)))
                params.add(f"{prefix}.b{i}", np.zeros(out_dim))
        return cls(arch, params, solve_config)

    def n_layers(self, prefix: str) -> int:
        return len(self.arch.layer_shapes(prefix))

    # -- encoder -----------------------------------------------------------

    def encoder_input(self, window: TimeSeriesWindow, mode: str) -> np.ndarray:
        """Resample a window onto L regular points and flatten row-major."""
        if mode == CONTEXT_ONLY:
            t, y = window.t_context, window.y_context
        elif mode == FULL_SEQUENCE:
            if window.y_target is None:
                raise UsageError("full_sequence encoding needs values for t_T")
            t = window.union_times
            y = np.concatenate([window.y_context, np.asarray(window.y_target)], axis=0)
        else:
            raise UsageError(f"unknown encode mode: {mode!r}")
        if len(t) == 0:
            raise UsageError("cannot encode an empty window")
        if len(t) < 2:
            raise InterpolationError("encoding needs at least two points")
        if y.shape[1] != self.arch.d_obs:
            raise ShapeError(
                f"window has {y.shape[1]} dims, model expects {self.arch.d_obs}"
            )
        vals = resample_matrix(t, self.arch.enc_len) @ y
        return vals.reshape(-1)

    def encode_values(self, flat, theta: Mapping):
        """Posterior (mu, sigma) from flattened encoder input; dual-mode."""
        out = run_mlp(flat, theta, "enc", self.n_layers("enc"), self.arch.activation)
        d = self.arch.d_lat
        mu = out[..., :d]
        sigma = ad.activation(out[..., d:], "softplus")
        return mu, sigma

    def encode(self, window: TimeSeriesWindow, mode: str = CONTEXT_ONLY) -> LatentPosterior:
        flat = self.encoder_input(window, mode)
        mu, sigma = self.encode_values(flat, self.params.to_arrays())
        return LatentPosterior(mu, sigma)

    # -- latent sampling and dynamics ---------------------------------------

    def sample_latent(self, post: LatentPosterior, seed: int) -> ad.Tensor:
        eps = np.random.default_rng(seed).standard_normal(self.arch.d_lat)
        return ad.Tensor(post.mean + post.std * eps)

    def dynamics(self) -> solvers.DynamicsSpec:
        n_layers = self.n_layers("node")
        act = self.arch.activation

        def fn(state, t, theta):
            return run_mlp(state, theta, "node", n_layers, act)

        return solvers.DynamicsSpec(dim=self.arch.d_lat, fn=fn)

    # -- decoder -----------------------------------------------------------

    def decode_states(self, states, theta: Mapping):
        """Per-state Gaussians: (mu, sigma) with the documented sigma floor."""
        out = run_mlp(states, theta, "dec", self.n_layers("dec"), self.arch.activation)
        d = self.arch.d_obs
        mu = out[..., :d]
        sigma = ad.activation(out[..., d:], "softplus") + DECODER_SIGMA_FLOOR
        return mu, sigma

    # -- forecasting --------------------------------------------------------

    def forecast(
        self,
        window: TimeSeriesWindow,
        adapt: AdaptationParams | None = None,
        n_samples: int = 1,
        seed: int = 0,
    ) -> list[ForecastDistribution]:
        """Sample latent states from the context posterior and roll them out."""
        if n_samples < 1:
            raise UsageError("n_samples must be >= 1")
        if len(window.t_target) == 0:
            raise UsageError("window has no target times to forecast")
        alpha = 1.0 if adapt is None else float(adapt.alpha)
        gamma = 0.0 if adapt is None else float(adapt.gamma)
        post = self.encode(window, CONTEXT_ONLY)
        eps = np.random.default_rng(seed).standard_normal((n_samples, self.arch.d_lat))
        z0 = post.mean[None, :] + post.std[None, :] * eps
        times = window.union_times
        theta = self.params.to_arrays()
        try:
            traj = solvers.solve(
                self.dynamics(), theta, z0, times, alpha=alpha, gamma=gamma,
                config=self.solve_config,
            )
        except DivergenceError as exc:
            raise DivergenceError(
                f"forecast diverged with (alpha={alpha:.6g}, gamma={gamma:.6g}): {exc}",
                last_valid_time=exc.last_valid_time,
            ) from None
        target_states = traj.states[len(window.t_context):]
        mu, sigma = self.decode_states(target_states, theta)
        return [
            ForecastDistribution(window.t_target, mu[:, s, :], sigma[:, s, :])
            for s in range(n_samples)
        ]


# ---------------------------------------------------------------------------
# Checkpoint persistence: UTF-8 JSON, floats at 17 significant digits.
# ---------------------------------------------------------------------------


def _fmt_float(x: float) -> str:
    s = format(float(x), ".17g")
    if "." not in s and "e" not in s and "E" not in s:
        s += ".0"
    return s


def _emit_json(obj, pieces: list[str]) -> None:
    if isinstance(obj, bool):
        pieces.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        pieces.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        pieces.append(_fmt_float(obj))
    elif isinstance(obj, str):
        pieces.append(json.dumps(obj))
    elif isinstance(obj, (list, tuple)):
        pieces.append("[")
        for i, item in enumerate(obj):
            if i:
                pieces.append(", ")
            _emit_json(item, pieces)
        pieces.append("]")
    elif isinstance(obj, dict):
        pieces.append("{")
        for i, (key, value) in enumerate(obj.items()):
            if i:
                pieces.append(", ")
            pieces.append(json.dumps(str(key)))
            pieces.append(": ")
            _emit_json(value, pieces)
        pieces.append("}")
    else:
        raise UsageError(f"cannot serialize {type(obj).__name__}")


def checkpoint_document(model: LatentODEModel) -> str:
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": model.arch.as_dict(),
        "params": {name: t.tolist() for name, t in model.params.items()},
    }
    pieces: list[str] = []
    _emit_json(doc, pieces)
    return "".join(pieces) + "\n"


def save_checkpoint(model: LatentODEModel, path) -> None:
    text = checkpoint_document(model)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def load_checkpoint(path, solve_config: solvers.SolveConfig | None = None) -> LatentODEModel:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed checkpoint: {exc.msg}", offset=exc.pos) from None
    if not isinstance(doc, dict):
        raise ParseError("checkpoint root must be a JSON object")
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise VersionError(
            f"checkpoint format_version {version!r} unsupported; "
            f"this build reads version {CHECKPOINT_FORMAT_VERSION}"
        )
    if "architecture" not in doc or "params" not in doc:
        raise ParseError("checkpoint missing architecture or params")
    arch = Architecture.from_dict(doc["architecture"])
    params = ad.ParameterSet()
    for name, values in doc["params"].items():
        try:
            params.add(name, np.asarray(values, dtype=np.float64))
        except (ValueError, ShapeError) as exc:
            raise ParseError(f"parameter {name!r}: {exc}") from None
    return LatentODEModel(arch, params, solve_config)
