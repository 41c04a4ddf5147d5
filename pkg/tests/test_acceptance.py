"""End-to-end acceptance suite.

One test per shipping criterion, each printing a single PASS line with the
measured quantities (run with -s to see them; pytest -v shows the verdicts
either way). Expensive artifacts (trained source models, a benchmark run)
are built once per session and shared; their build time is charged to the
criterion that owns them.
"""

import json
import time

import numpy as np
import pytest

from adanode import autodiff as ad
from adanode import metrics, objectives, solvers
from adanode.adaptation import AdaptConfig, adapt, adapt_with_lr_search, loss_landscape
from adanode.bench import (
    AdaptPlan,
    ExperimentGrid,
    ModelConfig,
    TrainPlan,
    aggregate,
    evaluate,
    run_grid,
)
from adanode.model import LatentODEModel, resample_matrix
from adanode.shiftgen import (
    GlyphSequenceSpec,
    ShiftSpec,
    SignalSpec,
    gen_dataset,
    gen_glyph_dataset,
)
from adanode.train import TrainConfig, fit_source_model
from handmodels import standard_rotation_setup
from test_solvers import two_layer_tanh

CTX, TGT, DT = 24, 16, 0.05


def report(criterion, detail):
    print(f"criterion {criterion}: PASS  ({detail})", flush=True)


# ---------------------------------------------------------------------------
# Shared expensive artifacts.
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def sine_source():
    """Source model trained on severity-0 sinusoids, plus its training time."""
    t0 = time.monotonic()
    data = gen_dataset(
        SignalSpec(kind="sine"), ShiftSpec("ampfreq", 0), 40, CTX, TGT, DT, 101,
        split="train",
    )
    model = LatentODEModel.init_random(ModelConfig().architecture("sine"), seed=0)
    fit_source_model(model, data, TrainConfig(epochs=300, beta=0.1, seed=0))
    return model, time.monotonic() - t0


@pytest.fixture(scope="session")
def glyph_source():
    t0 = time.monotonic()
    data = gen_glyph_dataset(GlyphSequenceSpec(frames=20), 0, 24, 77, split="train")
    model = LatentODEModel.init_random(ModelConfig().architecture("glyph"), seed=0)
    fit_source_model(
        model, data, TrainConfig(epochs=300, beta=0.1, n_samples=2, seed=0)
    )
    return model, time.monotonic() - t0


def bench_grid(out_dir):
    return ExperimentGrid(
        signals=("sine", "glyph"),
        shifts=("ampfreq", "delay"),
        severities=(0, 3, 5),
        eval_seeds=(0, 1),
        train_series=8,
        eval_series=3,
        glyph_frames=10,
        model=ModelConfig(d_lat=4, enc_len=16, hidden=(16,), glyph_d_lat=6),
        train=TrainPlan(epochs=40, fine_tune=False),
        adapt=AdaptPlan(steps=10, search_rates=None),
        eval_samples=5,
        out_dir=str(out_dir),
    )


@pytest.fixture(scope="session")
def bench_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench") / "out"
    grid = bench_grid(out)
    return grid, run_grid(grid)


# ---------------------------------------------------------------------------
# 1. Gradient correctness.
# ---------------------------------------------------------------------------


def random_composite_instance(rng):
    """A small randomized differentiable program ending in a scalar."""
    graph = ad.Graph()
    n, m = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    x = graph.leaf("x", rng.normal(size=(n, m)))
    w = graph.leaf("w", 0.5 * rng.normal(size=(3, m)))
    b = graph.leaf("b", 0.1 * rng.normal(size=3))
    h = ad.activation(ad.affine(x, w, b), str(rng.choice(["tanh", "softplus"])))
    kind = int(rng.integers(0, 4))
    if kind == 0:
        out = ad.nmean(ad.exp(h * 0.3) + ad.log(h * h + 1.5))
    elif kind == 1:
        mu = graph.leaf("mu", rng.normal(size=(n, 3)))
        sigma = ad.activation(h, "softplus") + 0.2
        out = ad.nmean(ad.gaussian_log_density(mu, h, sigma))
    elif kind == 2:
        num = ad.nsum(ad.log(ad.nmean(h * h, axis=0) + 0.3))
        out = num / (ad.nsum(ad.activation(h, "tanh")) + 4.0)
    else:
        weights = resample_matrix(np.linspace(0.0, 1.0, n), 4)
        wide = ad.resample_time(weights, ad.activation(x, "tanh"))
        out = ad.nmean(wide * wide)
    params = ad.ParameterSet()
    for name, node in graph.leaves.items():
        params.add(name, node.value)
    return graph, params, out


def solve_grad_instance(rng):
    """Finite-difference check of the ODE gradient path on a tanh dynamics."""
    dim = int(rng.integers(1, 5))
    dyn, params = two_layer_tanh(hidden=4, dim=dim, seed=int(rng.integers(0, 10**6)))
    z0 = rng.normal(size=dim)
    times = np.linspace(0.0, 0.6, 4)
    alpha = float(rng.uniform(0.7, 1.4))
    gamma = float(rng.uniform(-0.3, 0.3))
    weights = rng.normal(size=(len(times), dim))
    traj, pullback = solvers.solve_with_grad(dyn, params, z0, times, alpha, gamma)
    grads = pullback(weights)

    def value(a=alpha, g=gamma, z=z0, pset=params):
        t = solvers.solve_fixed_rk4(dyn, pset, z, times, alpha=a, gamma=g)
        return float(np.sum(t.states * weights))

    eps = 1e-5

    def rel(analytic, numeric):
        return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)

    worst = rel(grads.alpha, (value(a=alpha + eps) - value(a=alpha - eps)) / (2 * eps))
    worst = max(
        worst,
        rel(grads.gamma, (value(g=gamma + eps) - value(g=gamma - eps)) / (2 * eps)),
    )
    zp, zm = z0.copy(), z0.copy()
    zp[0] += eps
    zm[0] -= eps
    worst = max(worst, rel(grads.z0.array[0], (value(z=zp) - value(z=zm)) / (2 * eps)))
    for name in ("W1", "b2"):
        plus, minus = params.copy(), params.copy()
        bumped = params[name].array.copy()
        bumped.reshape(-1)[0] += eps
        plus.replace(name, bumped)
        bumped = params[name].array.copy()
        bumped.reshape(-1)[0] -= eps
        minus.replace(name, bumped)
        numeric = (value(pset=plus) - value(pset=minus)) / (2 * eps)
        worst = max(worst, rel(grads.theta[name].array.reshape(-1)[0], numeric))
    return worst


def test_criterion_01_gradient_correctness():
    t0 = time.monotonic()
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng(1000 + i)
        if i % 5 == 0:
            err = solve_grad_instance(rng)
        else:
            graph, params, out = random_composite_instance(rng)
            err = ad.grad_check(graph, params, output=out).max_relative_error
        worst = max(worst, err)
        assert err < 1e-4, f"instance {i}: relative error {err:.3e}"
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0
    report(1, f"100 instances, worst relative error {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. Solver order.
# ---------------------------------------------------------------------------


def test_criterion_02_solver_order():
    exp = solvers.DynamicsSpec(dim=1, fn=lambda z, t, theta: z)
    times = np.array([0.0, 1.0])
    errs = []
    for h in (0.05, 0.025):
        traj = solvers.solve_fixed_rk4(exp, {}, np.array([1.0]), times, step_size=h)
        errs.append(abs(traj.states[-1, 0] - np.e))
    order = float(np.log2(errs[0] / errs[1]))
    assert abs(order - 4.0) <= 0.1
    traj = solvers.solve(
        exp, {}, np.array([1.0]), times,
        config=solvers.SolveConfig(method="dopri45", rtol=1e-8, atol=1e-10),
    )
    dopri_err = abs(traj.states[-1, 0] - np.e)
    assert dopri_err < 1e-6
    report(2, f"empirical order {order:.3f}, dopri45 error {dopri_err:.1e}")


# ---------------------------------------------------------------------------
# 3. Loss oracles.
# ---------------------------------------------------------------------------


def test_criterion_03_loss_oracles():
    zero = np.zeros(1)
    one = np.ones(1)
    assert abs(objectives.gaussian_kl((zero, one), (zero, one))) <= 1e-10
    assert abs(objectives.gaussian_kl((one, one), (zero, one)) - 0.5) <= 1e-10
    wide = objectives.gaussian_kl((zero, 2 * one), (zero, one))
    assert abs(wide - (1.5 - np.log(2.0))) <= 1e-10

    mu_q, sig_q = 0.5, 1.2
    rng = np.random.default_rng(0)
    xs = rng.normal(mu_q, sig_q, size=10**6)
    log_q = -0.5 * np.log(2 * np.pi) - np.log(sig_q) - 0.5 * ((xs - mu_q) / sig_q) ** 2
    log_p = -0.5 * np.log(2 * np.pi) - 0.5 * xs**2
    mc = float(np.mean(log_q - log_p))
    closed = objectives.gaussian_kl((np.array([mu_q]), np.array([sig_q])), (zero, one))
    assert abs(mc - closed) / abs(closed) < 0.01

    def fc(mean, std):
        return objectives.ForecastDistribution(
            times=np.array([0.0]),
            mean=np.array([[float(mean)]]),
            std=np.array([[float(std)]]),
        )

    single = objectives.tta_nll([fc(0.0, 1.0)])
    assert abs(single - 0.9189385332046727) <= 1e-10
    narrow = objectives.tta_nll([fc(0.0, 0.5)])
    assert abs(narrow - 0.22579135264472738) <= 1e-10
    pair = objectives.tta_nll([fc(0.0, 1.0), fc(2.0, 1.0)])
    assert abs(pair - 1.4189385332046727) <= 1e-10
    report(3, "gaussian_kl closed forms to 1e-10, MC within 1%, tta_nll pinned")


# ---------------------------------------------------------------------------
# 4. Metric oracles.
# ---------------------------------------------------------------------------


def test_criterion_04_metric_oracles():
    assert abs(metrics.mse(np.array([1.0, 2.0]), np.array([2.0, 4.0])) - 2.5) <= 1e-9
    cc = metrics.pearson_cc(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 4.0]))
    assert abs(cc - 0.9819805060619659) <= 1e-9
    val = metrics.ccc(np.array([2.0, 3.0, 4.0]), np.array([1.0, 2.0, 3.0]))
    assert abs(val - 4.0 / 7.0) <= 1e-9
    rng = np.random.default_rng(4)
    for _ in range(1000):
        n = int(rng.integers(3, 30))
        a, b = rng.normal(size=n), rng.normal(size=n)
        assert metrics.ccc(a, b) <= abs(metrics.pearson_cc(a, b)) + 1e-12
    report(4, "hand values to 1e-9, ccc <= |cc| on 1000 random pairs")


# ---------------------------------------------------------------------------
# 5. Adaptation identity on in-distribution data.
# ---------------------------------------------------------------------------


def test_criterion_05_adaptation_identity(sine_source):
    model, _ = sine_source
    data = gen_dataset(
        SignalSpec(kind="sine"), ShiftSpec("ampfreq", 0), 8, CTX, TGT, DT, 505
    )
    config = AdaptConfig(
        batch=[w.without_targets() for w in data.windows], steps=50, seed=0
    )
    params, trace = adapt(model, config)
    identity_loss = trace[0].total
    assert trace.best().total <= identity_loss + 1e-9
    alphas = np.linspace(0.5, 2.0, 31)
    gammas = np.linspace(-1.0, 1.0, 31)
    surface = loss_landscape(model, config, alphas, gammas)
    grid_min = float(np.min(surface))
    a_idx = int(np.argmin(np.abs(alphas - 1.0)))
    g_idx = int(np.argmin(np.abs(gammas)))
    at_identity = float(surface[a_idx, g_idx])
    assert abs(at_identity - grid_min) <= 0.05 * abs(grid_min)
    report(
        5,
        f"adapted {trace.best().total:.5f} <= identity {identity_loss:.5f}; "
        f"identity-vs-optimum gap {at_identity - grid_min:.2e} "
        f"within budget {0.05 * abs(grid_min):.2e}",
    )


# ---------------------------------------------------------------------------
# 6. Frequency recovery on the rotation hand-model.
# ---------------------------------------------------------------------------


def test_criterion_06_frequency_recovery():
    t0 = time.monotonic()
    adapted = {}
    for k in (0.7, 1.0, 1.3):
        model, windows = standard_rotation_setup(k)
        batch = [w.without_targets() for w in windows]
        config = AdaptConfig(batch=batch, steps=50, seed=0)
        params, _, _ = adapt_with_lr_search(model, config)
        adapted[k] = params.alpha
    model, windows = standard_rotation_setup(1.3)
    config = AdaptConfig(
        batch=[w.without_targets() for w in windows], steps=50, seed=0
    )
    alphas = np.linspace(0.5, 2.0, 200)
    gammas = np.linspace(-0.6, 0.6, 200)
    surface = loss_landscape(model, config, alphas, gammas)
    gi, _ = np.unravel_index(int(np.argmin(surface)), surface.shape)
    grid_alpha = float(alphas[gi])
    assert abs(adapted[1.3] - grid_alpha) <= 0.10 * grid_alpha
    assert adapted[0.7] < adapted[1.0] < adapted[1.3]
    elapsed = time.monotonic() - t0
    assert elapsed < 120.0
    report(
        6,
        f"alpha(k): {adapted[0.7]:.3f} < {adapted[1.0]:.3f} < {adapted[1.3]:.3f}; "
        f"k=1.3 grid optimum {grid_alpha:.3f}; {elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 7. Directional improvement on shifted sinusoids.
# ---------------------------------------------------------------------------


def test_criterion_07_sine_improvement(sine_source):
    model, train_time = sine_source
    t0 = time.monotonic()
    seeds = (0, 1, 2, 3, 4)
    indist = gen_dataset(
        SignalSpec(kind="sine"), ShiftSpec("ampfreq", 0), 8, CTX, TGT, DT, 505
    )
    source_ccc = evaluate(model, indist, None, n_samples=20, seeds=(0,))[0].ccc
    assert source_ccc >= 0.9
    plan = AdaptPlan()
    rels = []
    cells = {}
    for shift in ("ampfreq", "delay"):
        for severity in (3, 4, 5):
            data = gen_dataset(
                SignalSpec(kind="sine"), ShiftSpec(shift, severity), 8, CTX, TGT, DT,
                900 + severity,
            )
            src = evaluate(model, data, None, n_samples=20, seeds=seeds)
            ada = evaluate(model, data, plan, n_samples=20, seeds=seeds)
            wins = sum(a.ccc > s.ccc for a, s in zip(ada, src))
            s_mean = aggregate(src)["ccc"][0]
            a_mean = aggregate(ada)["ccc"][0]
            rels.append((a_mean - s_mean) / abs(s_mean))
            cells[(shift, severity)] = wins
    mean_rel = float(np.mean(rels))
    elapsed = time.monotonic() - t0 + train_time
    detail = ", ".join(f"{k[0]} s{k[1]}: {w}/5" for k, w in cells.items())
    assert elapsed < 900.0
    assert mean_rel > 0, f"mean relative ccc improvement {mean_rel:+.4f} ({detail})"
    for (shift, severity), wins in cells.items():
        assert wins >= 4, (
            f"{shift} severity {severity}: adaptation beat the source model in "
            f"only {wins}/5 seeds ({detail}; mean rel {mean_rel:+.4f})"
        )
    report(
        7,
        f"in-dist ccc {source_ccc:.3f}; {detail}; "
        f"mean rel improvement {mean_rel:+.4f}; {elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 8. Rotating-glyph MSE at the strongest shift.
# ---------------------------------------------------------------------------


def test_criterion_08_glyph_mse(glyph_source):
    model, train_time = glyph_source
    t0 = time.monotonic()
    data = gen_glyph_dataset(GlyphSequenceSpec(frames=20), 5, 8, 404)
    seeds = (0, 1, 2, 3, 4)
    src = evaluate(model, data, None, n_samples=10, seeds=seeds)
    ada = evaluate(model, data, AdaptPlan(), n_samples=10, seeds=seeds)
    wins = sum(a.mse <= s.mse for a, s in zip(ada, src))
    elapsed = time.monotonic() - t0 + train_time
    assert wins >= 4
    assert elapsed < 1200.0
    report(
        8,
        f"adapted mse <= source in {wins}/5 seeds "
        f"(mean {aggregate(ada)['mse'][0]:.4f} vs {aggregate(src)['mse'][0]:.4f}); "
        f"{elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 9. Freeze contract through the benchmark.
# ---------------------------------------------------------------------------


def test_criterion_09_freeze_contract(bench_run):
    _, paths = bench_run
    with open(paths["summary"], encoding="utf-8") as fh:
        summary = json.load(fh)
    adapted = [
        c for c in summary["cells"]
        if c["method"] == "adanodes" and c["status"] == "ok"
    ]
    assert adapted, "no adapted cells completed"
    assert all(c["freeze_ok"] for c in adapted)
    report(9, f"runtime parameters bit-identical across {len(adapted)} adapt calls")


# ---------------------------------------------------------------------------
# 10. Benchmark determinism.
# ---------------------------------------------------------------------------


def test_criterion_10_bench_determinism(bench_run, tmp_path):
    grid, paths = bench_run
    first = {}
    for name, p in paths.items():
        with open(p, "rb") as fh:
            first[name] = fh.read()
    rerun_paths = run_grid(bench_grid(tmp_path / "rerun"))
    for name in ("metrics", "improvement"):
        with open(rerun_paths[name], "rb") as fh:
            assert fh.read() == first[name], f"{name} differs between runs"
    report(10, "metrics.csv and improvement.csv byte-identical on rerun")
