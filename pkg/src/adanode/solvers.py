"""ODE solvers for latent dynamics.

Two routes: a fixed-step classical RK4 whose unrolled steps can be recorded on
an autodiff tape (gradients are exact derivatives of the discretization), and
an adaptive Dormand-Prince 5(4) pair with a PI step controller and 4th-order
dense output for forward evaluation only.

Both accept the adaptation transform: the right-hand side is evaluated as
f(alpha * z + gamma, t, theta). With alpha=1 and gamma=0 the transform is
skipped entirely in value mode, so the solve is bit-identical to one without
the hook.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .errors import (
    DivergenceError,
    ShapeError,
    StepLimitError,
    StiffnessError,
    UsageError,
)

DEFAULT_RTOL = 1e-6
DEFAULT_ATOL = 1e-8
DEFAULT_MAX_STEPS = 10000


@dataclass(frozen=True)
class DynamicsSpec:
    """Right-hand side of a latent ODE.

    fn(state, time, theta) -> state derivative, written against the autodiff
    primitives so it runs on plain arrays or on tape nodes. state carries the
    latent dimension in its last axis; leading axes are batch.
    """

    dim: int
    fn: Callable


@dataclass(frozen=True)
class SolveConfig:
    method: str = "rk4"
    step_size: float | None = None
    rtol: float = DEFAULT_RTOL
    atol: float = DEFAULT_ATOL
    max_steps: int = DEFAULT_MAX_STEPS
    first_step: float | None = None

    def __post_init__(self):
        if self.method not in ("rk4", "dopri45"):
            raise UsageError(f"unknown solver method: {self.method!r}")
        if self.step_size is not None and self.step_size <= 0:
            raise UsageError("step_size must be positive")


class Trajectory:
    """Solution samples: times (T,) and one state per time, stacked row-wise."""

    __slots__ = ("times", "states")

    def __init__(self, times, states):
        times = np.asarray(times, dtype=np.float64)
        states = np.asarray(states, dtype=np.float64)
        if times.ndim != 1:
            raise ShapeError("trajectory times must be 1-d")
        if len(states) != len(times):
            raise ShapeError("trajectory needs one state per time")
        if np.any(np.diff(times) <= 0):
            raise UsageError("trajectory times must be strictly increasing")
        self.times = times
        self.states = states

    def __len__(self) -> int:
        return len(self.times)

    def state_at(self, index: int) -> np.ndarray:
        return self.states[index]


def _check_times(times) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times.size == 0:
        raise UsageError("times must be a non-empty 1-d array")
    if np.any(np.diff(times) <= 0):
        raise UsageError("times must be strictly increasing")
    if not np.all(np.isfinite(times)):
        raise UsageError("times must be finite")
    return times


def _adapted_rhs(dyn: DynamicsSpec, theta: Mapping, alpha, gamma):
    """Wrap the dynamics with the test-time transform u = alpha*z + gamma."""
    plain = (
        not isinstance(alpha, ad.Node)
        and not isinstance(gamma, ad.Node)
        and np.ndim(alpha) == 0
        and np.ndim(gamma) == 0
        and float(alpha) == 1.0
        and float(gamma) == 0.0
    )
    if plain:
        def rhs(z, t):
            return dyn.fn(z, t, theta)
    else:
        def rhs(z, t):
            return dyn.fn(alpha * z + gamma, t, theta)
    return rhs


def _state_value(z) -> np.ndarray:
    return z.value if isinstance(z, ad.Node) else np.asarray(z)


def rk4_path(rhs, z0, times: np.ndarray, step_size: float, check_finite: bool = True):
    """March classical RK4 over a grid, subdividing each interval to the cap.

    Works on arrays or tape nodes; returns the list of states at grid times.
    """
    states = [z0]
    z = z0
    for i in range(len(times) - 1):
        t0, t1 = float(times[i]), float(times[i + 1])
        gap = t1 - t0
        n_sub = max(1, int(math.ceil(gap / step_size - 1e-12)))
        h = gap / n_sub
        t = t0
        for _ in range(n_sub):
            k1 = rhs(z, t)
            k2 = rhs(z + k1 * (h * 0.5), t + h * 0.5)
            k3 = rhs(z + k2 * (h * 0.5), t + h * 0.5)
            k4 = rhs(z + k3 * h, t + h)
            z = z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
            if check_finite and not np.all(np.isfinite(_state_value(z))):
                raise DivergenceError(
                    f"state left the finite range integrating past t={t:.6g}",
                    last_valid_time=t,
                )
            t += h
        states.append(z)
    return states


def default_step(times: np.ndarray) -> float:
    span = float(times[-1] - times[0])
    if span <= 0:
        return 1.0
    return span / 100.0


def solve_fixed_rk4(
    dyn: DynamicsSpec,
    params,
    z0,
    times,
    alpha: float = 1.0,
    gamma: float = 0.0,
    step_size: float | None = None,
) -> Trajectory:
    """Fixed-step RK4 solve at the requested grid (value mode)."""
    times = _check_times(times)
    z0 = np.asarray(ad._value_of(z0), dtype=np.float64)
    if z0.shape[-1:] != (dyn.dim,):
        raise ShapeError(f"initial state must end in dim {dyn.dim}, got {z0.shape}")
    theta = params.to_arrays() if isinstance(params, ad.ParameterSet) else dict(params)
    if step_size is None:
        step_size = default_step(times)
    rhs = _adapted_rhs(dyn, theta, float(alpha), float(gamma))
    states = rk4_path(rhs, z0, times, step_size)
    return Trajectory(times, np.stack(states, axis=0))


class SolveGradients:
    """Gradients returned by a solve_with_grad pullback."""

    __slots__ = ("theta", "z0", "alpha", "gamma")

    def __init__(self, theta, z0, alpha, gamma):
        self.theta = theta
        self.z0 = z0
        self.alpha = alpha
        self.gamma = gamma


def solve_with_grad(
    dyn: DynamicsSpec,
    params,
    z0,
    times,
    alpha: float = 1.0,
    gamma: float = 0.0,
    step_size: float | None = None,
):
    """RK4 solve recorded on a tape.

    Returns (trajectory, pullback); pullback takes d(loss)/d(states) with the
    trajectory's (T, ..., d) shape and yields gradients for theta, z0, alpha
    and gamma, composable with any downstream loss gradient.
    """
    times = _check_times(times)
    z0_arr = np.asarray(ad._value_of(z0), dtype=np.float64)
    if z0_arr.shape[-1:] != (dyn.dim,):
        raise ShapeError(f"initial state must end in dim {dyn.dim}, got {z0_arr.shape}")
    if step_size is None:
        step_size = default_step(times)
    graph = ad.Graph()
    if isinstance(params, ad.ParameterSet):
        arrays = params.to_arrays()
    else:
        arrays = dict(params)
    theta = {name: graph.leaf(f"theta.{name}", arr) for name, arr in arrays.items()}
    z0_node = graph.leaf("z0", z0_arr)
    alpha_node = graph.leaf("alpha", float(alpha))
    gamma_node = graph.leaf("gamma", float(gamma))
    rhs = _adapted_rhs(dyn, theta, alpha_node, gamma_node)
    probe = rhs(z0_node, float(times[0]))
    if not isinstance(probe, ad.Node):
        raise UsageError("dynamics must be built from autodiff primitives")
    states = rk4_path(rhs, z0_node, times, step_size)
    out = ad.stack(states, axis=0)
    traj = Trajectory(times, out.value)

    def pullback(output_grads) -> SolveGradients:
        grads = ad.backward(graph, np.asarray(output_grads, dtype=np.float64), output=out)
        theta_grads = {name: grads[f"theta.{name}"] for name in arrays}
        return SolveGradients(
            theta=theta_grads,
            z0=grads["z0"],
            alpha=float(grads["alpha"].data[0]),
            gamma=float(grads["gamma"].data[0]),
        )

    return traj, pullback


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4) with PI step control and 4th-order dense output.
# ---------------------------------------------------------------------------

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = np.array(
    [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)
# 4th-order dense-output polynomial coefficients (rows: stages, cols: theta^1..4).
_P = np.array(
    [
        [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)
_SAFETY = 0.9
_PI_ALPHA = 0.7 / 5.0
_PI_BETA = 0.4 / 5.0


def _error_norm(err: np.ndarray, scale: np.ndarray) -> float:
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(rhs, t0, z0, f0, direction, rtol, atol):
    scale = atol + rtol * np.abs(z0)
    d0 = _error_norm(z0, scale)
    d1 = _error_norm(f0, scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    z1 = z0 + h0 * direction * f0
    f1 = np.asarray(rhs(z1, t0 + h0 * direction), dtype=np.float64)
    d2 = _error_norm(f1 - f0, scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100.0 * h0, h1)


def solve_adaptive_dopri45(
    dyn: DynamicsSpec,
    params,
    z0,
    t_span,
    output_times,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    alpha: float = 1.0,
    gamma: float = 0.0,
    max_steps: int = DEFAULT_MAX_STEPS,
    first_step: float | None = None,
) -> Trajectory:
    """Adaptive Dormand-Prince 5(4) solve, forward evaluation only.

    Local error per step is held to atol + rtol*|z| (weighted RMS norm <= 1);
    requested output times are filled by the method's 4th-order interpolant.
    """
    t0, t_end = float(t_span[0]), float(t_span[1])
    if not (t_end > t0):
        raise UsageError("t_span must satisfy t_end > t_start")
    output_times = _check_times(output_times)
    if output_times[0] < t0 - 1e-12 or output_times[-1] > t_end + 1e-12:
        raise UsageError("output times must lie within t_span")
    if rtol <= 0 or atol <= 0:
        raise UsageError("tolerances must be positive")
    z = np.asarray(ad._value_of(z0), dtype=np.float64)
    if z.shape[-1:] != (dyn.dim,):
        raise ShapeError(f"initial state must end in dim {dyn.dim}, got {z.shape}")
    theta = params.to_arrays() if isinstance(params, ad.ParameterSet) else dict(params)
    rhs = _adapted_rhs(dyn, theta, float(alpha), float(gamma))

    out_states: list[np.ndarray] = []
    next_out = 0
    while next_out < len(output_times) and output_times[next_out] <= t0 + 1e-15:
        out_states.append(z.copy())
        next_out += 1

    t = t0
    f = np.asarray(rhs(z, t), dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise DivergenceError("dynamics non-finite at the initial state", last_valid_time=t0)
    if first_step is not None:
        if first_step <= 0:
            raise UsageError("first_step must be positive")
        h = float(first_step)
    else:
        h = _initial_step(rhs, t, z, f, 1.0, rtol, atol)
    h = min(h, t_end - t)
    err_prev = 1.0
    n_steps = 0
    tiny = 16.0 * np.finfo(np.float64).eps

    while t < t_end - 1e-14:
        if n_steps >= max_steps:
            raise StepLimitError(f"exceeded {max_steps} steps at t={t:.6g}")
        if h < tiny * max(abs(t), abs(t_end - t0)):
            raise StiffnessError(
                f"step size underflow at t={t:.6g}; tolerance unreachable"
            )
        h = min(h, t_end - t)
        K = np.empty((7,) + z.shape, dtype=np.float64)
        K[0] = f
        finite = True
        for s in range(1, 7):
            zs = z + h * np.tensordot(_A[s], K[:s], axes=(0, 0))
            K[s] = rhs(zs, t + _C[s] * h)
            if not np.all(np.isfinite(K[s])):
                finite = False
                break
        if finite:
            z_new = z + h * np.tensordot(_B, K, axes=(0, 0))
            finite = bool(np.all(np.isfinite(z_new)))
        if not finite:
            raise DivergenceError(
                f"state left the finite range integrating past t={t:.6g}",
                last_valid_time=t,
            )
        err_vec = h * np.tensordot(_E, K, axes=(0, 0))
        scale = atol + rtol * np.maximum(np.abs(z), np.abs(z_new))
        err = max(_error_norm(err_vec, scale), 1e-10)
        n_steps += 1
        if err <= 1.0:
            # Fill requested outputs inside the accepted step via dense output.
            Q = np.tensordot(_P, K, axes=(0, 0))  # (4,) + state shape
            while next_out < len(output_times) and output_times[next_out] <= t + h + 1e-14:
                t_req = output_times[next_out]
                theta_frac = (t_req - t) / h
                if theta_frac >= 1.0 - 1e-14:
                    out_states.append(z_new.copy())
                else:
                    powers = theta_frac ** np.arange(1, 5)
                    out_states.append(z + h * np.tensordot(powers, Q, axes=(0, 0)))
                next_out += 1
            t = t + h
            z = z_new
            f = K[6]  # FSAL: last stage is the derivative at the new point
            factor = _SAFETY * err ** (-_PI_ALPHA) * err_prev ** _PI_BETA
            h = h * min(5.0, max(0.2, factor))
            err_prev = err
        else:
            h = h * min(0.9, max(0.1, _SAFETY * err ** -0.2))

    while next_out < len(output_times):
        out_states.append(z.copy())
        next_out += 1
    return Trajectory(output_times, np.stack(out_states, axis=0))


def solve(
    dyn: DynamicsSpec,
    params,
    z0,
    times,
    alpha: float = 1.0,
    gamma: float = 0.0,
    config: SolveConfig | None = None,
) -> Trajectory:
    """Dispatch a value-mode solve at a grid according to a SolveConfig."""
    config = config or SolveConfig()
    times = _check_times(times)
    if config.method == "rk4":
        return solve_fixed_rk4(
            dyn, params, z0, times, alpha=alpha, gamma=gamma, step_size=config.step_size
        )
    return solve_adaptive_dopri45(
        dyn,
        params,
        z0,
        (float(times[0]), float(times[-1])),
        times,
        rtol=config.rtol,
        atol=config.atol,
        alpha=alpha,
        gamma=gamma,
        max_steps=config.max_steps,
        first_step=config.first_step,
    )
