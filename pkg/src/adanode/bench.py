"""Benchmark harness: scoring runs over a signal/shift/severity grid.

One source model is fitted (or loaded) per signal kind on severity-0 data,
then every grid cell is scored twice: with the frozen model as-is ("src")
and with test-time adaptation of (alpha, gamma) on the unlabeled windows
("adanodes"). Reports are a per-seed metrics CSV, a relative-improvement
CSV, and a JSON summary with per-cell status.
"""

from __future__ import annotations

import dataclasses
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import metrics
from .adaptation import LR_SEARCH_GRID, AdaptConfig, adapt, adapt_with_lr_search
from .errors import AdanodeError, ConfigError, UsageError
from .model import (
    AdaptationParams,
    Architecture,
    LatentODEModel,
    checkpoint_document,
    load_checkpoint,
    save_checkpoint,
)
from .shiftgen import (
    SEVERITIES,
    SHIFT_KINDS,
    SIGNAL_KINDS,
    GlyphSequenceSpec,
    SeriesDataset,
    ShiftSpec,
    SignalSpec,
    gen_dataset,
    gen_glyph_dataset,
)
from .train import TrainConfig, fit_source_model

GLYPH_SIGNAL = "glyph"
GLYPH_SHIFT = "dt"
METHOD_SOURCE = "src"
METHOD_ADAPTED = "adanodes"
METRIC_NAMES = ("mse", "cc", "ccc")

METRICS_CSV_HEADER = "signal,shift,severity,method,seed,mse,cc,ccc"
IMPROVEMENT_CSV_HEADER = "signal,shift,severity,metric,rel_improvement"
PREDICTIONS_CSV_HEADER = "series_id,seed,t,dim,y_pred,y_true"


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


@dataclass(frozen=True)
class AdaptPlan:
    """Per-seed test-time adaptation settings (vs a fixed AdaptationParams).

    With search_rates set, each seed tries every rate and keeps the result
    with the best adaptation loss; with search_rates None a single run at
    learning_rate is used.
    """

    steps: int = 50
    lam: float = 0.5
    n_samples: int = 5
    learning_rate: float = 1e-2
    search_rates: tuple[float, ...] | None = LR_SEARCH_GRID


@dataclass(frozen=True)
class EvalResult:
    """Scores for one evaluation seed, plus the adaptation actually applied."""

    seed: int
    mse: float
    cc: float
    ccc: float
    adaptation: AdaptationParams | None = None
    adapt_loss: float | None = None
    freeze_ok: bool | None = None


def aggregate(results: list[EvalResult]) -> dict[str, tuple[float, float | None]]:
    """Mean and population std over seeds per metric; std None for one seed."""
    if not results:
        raise UsageError("nothing to aggregate")
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in results], dtype=np.float64)
        std = float(vals.std()) if len(vals) > 1 else None
        out[name] = (float(vals.mean()), std)
    return out


def evaluate(
    model: LatentODEModel,
    dataset: SeriesDataset,
    adaptation: AdaptationParams | AdaptPlan | None = None,
    n_samples: int = 20,
    seeds: tuple[int, ...] = (0,),
    predictions_path=None,
) -> list[EvalResult]:
    """Score sample-mean forecasts against the dataset targets, per seed.

    adaptation is either None (frozen source model), a fixed
    AdaptationParams applied as-is, or an AdaptPlan, in which case
    (alpha, gamma) are fitted per seed on the windows with targets
    stripped; ground truth is only ever used for scoring. Metrics are
    computed per series and averaged. With predictions_path, the per-point
    sample-mean predictions are also written as CSV next to the truth.
    """
    if not dataset.windows:
        raise UsageError("evaluation needs a non-empty dataset")
    if any(w.y_target is None for w in dataset.windows):
        raise UsageError("evaluation needs target values")
    if not seeds:
        raise UsageError("evaluation needs at least one seed")
    results = []
    pred_lines = []
    for seed in seeds:
        params: AdaptationParams | None = None
        adapt_loss = None
        freeze_ok = None
        if isinstance(adaptation, AdaptationParams):
            params = adaptation
        elif isinstance(adaptation, AdaptPlan):
            batch = [w.without_targets() for w in dataset.windows]
            config = AdaptConfig(
                batch=batch,
                learning_rate=adaptation.learning_rate,
                steps=adaptation.steps,
                lam=adaptation.lam,
                n_samples=adaptation.n_samples,
                seed=seed,
            )
            frozen_before = checkpoint_document(model)
            if adaptation.search_rates:
                params, trace, _ = adapt_with_lr_search(
                    model, config, adaptation.search_rates
                )
            else:
                params, trace = adapt(model, config)
            freeze_ok = checkpoint_document(model) == frozen_before
            adapt_loss = trace.best().total
        elif adaptation is not None:
            raise UsageError(
                "adaptation must be AdaptationParams, AdaptPlan, or None"
            )
        per_metric = {name: [] for name in METRIC_NAMES}
        for sid, window in enumerate(dataset.windows):
            forecasts = model.forecast(
                window, adapt=params, n_samples=n_samples, seed=seed
            )
            pred = np.mean([fc.mean for fc in forecasts], axis=0)
            truth = window.y_target
            per_metric["mse"].append(metrics.mse(pred, truth))
            per_metric["cc"].append(metrics.pearson_cc(pred, truth))
            per_metric["ccc"].append(metrics.ccc(pred, truth))
            if predictions_path is not None:
                for ti, t in enumerate(window.t_target):
                    for d in range(truth.shape[1]):
                        pred_lines.append(
                            f"{sid},{seed},{_fmt(t)},{d},"
                            f"{_fmt(pred[ti, d])},{_fmt(truth[ti, d])}"
                        )
        results.append(
            EvalResult(
                seed=seed,
                mse=float(np.mean(per_metric["mse"])),
                cc=float(np.mean(per_metric["cc"])),
                ccc=float(np.mean(per_metric["ccc"])),
                adaptation=params,
                adapt_loss=adapt_loss,
                freeze_ok=freeze_ok,
            )
        )
    if predictions_path is not None:
        with open(predictions_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(PREDICTIONS_CSV_HEADER + "\n")
            fh.write("".join(line + "\n" for line in pred_lines))
    return results


# ---------------------------------------------------------------------------
# Experiment grid configuration (JSON round-trippable, defaults embedded).
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    d_lat: int = 8
    enc_len: int = 32
    hidden: tuple[int, ...] = (64,)
    activation: str = "tanh"
    glyph_d_lat: int = 16

    def architecture(self, signal: str) -> Architecture:
        if signal == GLYPH_SIGNAL:
            d_obs, d_lat = 256, self.glyph_d_lat
        else:
            d_obs, d_lat = 1, self.d_lat
        return Architecture(
            d_obs=d_obs,
            d_lat=d_lat,
            enc_len=self.enc_len,
            enc_hidden=self.hidden,
            node_hidden=self.hidden,
            dec_hidden=self.hidden,
            activation=self.activation,
        )


@dataclass(frozen=True)
class TrainPlan:
    epochs: int = 300
    learning_rate: float = 1e-2
    n_samples: int = 3
    beta: float = 0.1
    consistency_weight: float = 1.0
    fine_tune: bool = True

    def to_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            n_samples=self.n_samples,
            beta=self.beta,
            consistency_weight=self.consistency_weight,
            seed=seed,
        )


@dataclass(frozen=True)
class ExperimentGrid:
    """Full benchmark description; every field has a default, so a config
    file only needs the fields it overrides."""

    seed: int = 0
    signals: tuple[str, ...] = SIGNAL_KINDS
    shifts: tuple[str, ...] = SHIFT_KINDS
    severities: tuple[int, ...] = SEVERITIES
    eval_seeds: tuple[int, ...] = (0, 1, 2)
    train_series: int = 40
    eval_series: int = 8
    # 24 context points and 16 forecast points at dt 0.05 put most of a unit
    # period in the horizon, so rate errors show up as concordance loss
    # instead of a phase lottery over a fraction of a cycle.
    context_len: int = 24
    horizon_len: int = 16
    dt_sample: float = 0.05
    glyph_frames: int = 20
    model: ModelConfig = ModelConfig()
    train: TrainPlan = TrainPlan()
    adapt: AdaptPlan = AdaptPlan()
    eval_samples: int = 20
    checkpoints: dict = field(default_factory=dict)
    out_dir: str = "bench_out"

    def __post_init__(self):
        if not self.signals:
            raise ConfigError("grid needs at least one signal kind")
        for s in self.signals:
            if s not in SIGNAL_KINDS and s != GLYPH_SIGNAL:
                raise ConfigError(f"unknown signal kind: {s!r}")
        for s in self.shifts:
            if s not in SHIFT_KINDS:
                raise ConfigError(f"unknown shift kind: {s!r}")
        for s in self.severities:
            if s not in SEVERITIES:
                raise ConfigError("severities must be integers in 0..5")
        if not self.shifts and any(s != GLYPH_SIGNAL for s in self.signals):
            raise ConfigError("grid needs at least one shift kind")
        if not self.severities:
            raise ConfigError("grid needs at least one severity")
        if not self.eval_seeds:
            raise ConfigError("grid needs at least one evaluation seed")
        if self.train_series < 1 or self.eval_series < 1:
            raise ConfigError("series counts must be >= 1")
        if self.context_len < 2 or self.horizon_len < 2:
            raise ConfigError("context_len and horizon_len must be >= 2")
        if self.dt_sample <= 0:
            raise ConfigError("dt_sample must be positive")
        if self.glyph_frames < 4:
            raise ConfigError("glyph_frames must be >= 4")
        if self.eval_samples < 1:
            raise ConfigError("eval_samples must be >= 1")
        for kind in self.checkpoints:
            if kind not in self.signals:
                raise ConfigError(
                    f"checkpoint given for a signal not in the grid: {kind!r}"
                )

    def shifts_for(self, signal: str) -> tuple[str, ...]:
        """Glyph shift is the frame interval itself; 1-D kinds use the grid list."""
        if signal == GLYPH_SIGNAL:
            return (GLYPH_SHIFT,)
        return self.shifts


def grid_to_dict(grid: ExperimentGrid) -> dict:
    return dataclasses.asdict(grid)


def _section(cls, data: Mapping, name: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {name} config key: {unknown[0]!r}")
    kwargs = dict(data)
    for key in ("hidden", "search_rates"):
        if key in kwargs and kwargs[key] is not None:
            kwargs[key] = tuple(kwargs[key])
    return cls(**kwargs)


def grid_from_dict(data: Mapping) -> ExperimentGrid:
    """Build a grid from a (possibly partial) config mapping."""
    if not isinstance(data, Mapping):
        raise ConfigError("grid config must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentGrid)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]!r}")
    kwargs = {}
    for key, value in data.items():
        if key == "model":
            kwargs[key] = _section(ModelConfig, value, key)
        elif key == "train":
            kwargs[key] = _section(TrainPlan, value, key)
        elif key == "adapt":
            kwargs[key] = _section(AdaptPlan, value, key)
        elif key == "checkpoints":
            if not isinstance(value, Mapping):
                raise ConfigError("checkpoints must map signal kind to path")
            kwargs[key] = {str(k): str(v) for k, v in value.items()}
        elif key in ("signals", "shifts", "severities", "eval_seeds"):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return ExperimentGrid(**kwargs)


def load_grid(path) -> ExperimentGrid:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return grid_from_dict(data)


# ---------------------------------------------------------------------------
# Grid execution.
# ---------------------------------------------------------------------------


def derived_seed(root: int, *key: int) -> int:
    """Deterministic child seed for a grid sub-task."""
    ss = np.random.SeedSequence(entropy=root, spawn_key=tuple(key))
    return int(ss.generate_state(1)[0])


# spawn_key role tags, so different sub-tasks can never collide
_ROLE_TRAIN_DATA = 0
_ROLE_MODEL_INIT = 1
_ROLE_EVAL_DATA = 2


def _worker_count(n_jobs: int) -> int:
    env = os.environ.get("ADANODE_THREADS", "").strip()
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ConfigError("ADANODE_THREADS must be an integer") from None
        if cap < 1:
            raise ConfigError("ADANODE_THREADS must be >= 1")
    else:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_jobs))


def _signal_spec(kind: str) -> SignalSpec:
    return SignalSpec(kind=kind)


def _cell_dataset(grid: ExperimentGrid, si: int, signal: str, shift_i: int,
                  shift: str, severity: int) -> SeriesDataset:
    seed = derived_seed(grid.seed, _ROLE_EVAL_DATA, si, shift_i, severity)
    if signal == GLYPH_SIGNAL:
        return gen_glyph_dataset(
            GlyphSequenceSpec(frames=grid.glyph_frames),
            severity,
            grid.eval_series,
            seed,
        )
    return gen_dataset(
        _signal_spec(signal),
        ShiftSpec(kind=shift, severity=severity),
        grid.eval_series,
        grid.context_len,
        grid.horizon_len,
        grid.dt_sample,
        seed,
    )


def _train_dataset(grid: ExperimentGrid, si: int, signal: str) -> SeriesDataset:
    seed = derived_seed(grid.seed, _ROLE_TRAIN_DATA, si)
    if signal == GLYPH_SIGNAL:
        return gen_glyph_dataset(
            GlyphSequenceSpec(frames=grid.glyph_frames),
            0,
            grid.train_series,
            seed,
            split="train",
        )
    return gen_dataset(
        _signal_spec(signal),
        ShiftSpec(kind=grid.shifts[0] if grid.shifts else "ampfreq", severity=0),
        grid.train_series,
        grid.context_len,
        grid.horizon_len,
        grid.dt_sample,
        seed,
        split="train",
    )


def _source_model(grid: ExperimentGrid, si: int, signal: str) -> tuple[LatentODEModel, dict]:
    if signal in grid.checkpoints:
        model = load_checkpoint(grid.checkpoints[signal])
        return model, {"source": "loaded", "checkpoint": grid.checkpoints[signal]}
    arch = grid.model.architecture(signal)
    model = LatentODEModel.init_random(
        arch, seed=derived_seed(grid.seed, _ROLE_MODEL_INIT, si)
    )
    data = _train_dataset(grid, si, signal)
    config = grid.train.to_config(seed=derived_seed(grid.seed, _ROLE_MODEL_INIT, si, 1))
    losses = fit_source_model(model, data, config, fine_tune=grid.train.fine_tune)
    return model, {"source": "trained", "final_train_loss": losses[-1]}


@dataclass(frozen=True)
class _CellRows:
    signal: str
    shift: str
    severity: int
    results: dict  # method -> list[EvalResult]
    errors: dict  # method -> message


def _run_cell(grid: ExperimentGrid, model: LatentODEModel, si: int, signal: str,
              shift_i: int, shift: str, severity: int) -> _CellRows:
    results: dict = {}
    errors: dict = {}
    try:
        dataset = _cell_dataset(grid, si, signal, shift_i, shift, severity)
    except AdanodeError as exc:
        msg = f"{type(exc).__name__}: {exc}"
        return _CellRows(signal, shift, severity, {}, {
            METHOD_SOURCE: msg, METHOD_ADAPTED: msg,
        })
    for method, adaptation in (
        (METHOD_SOURCE, None),
        (METHOD_ADAPTED, grid.adapt),
    ):
        try:
            results[method] = evaluate(
                model,
                dataset,
                adaptation=adaptation,
                n_samples=grid.eval_samples,
                seeds=grid.eval_seeds,
            )
        except AdanodeError as exc:
            errors[method] = f"{type(exc).__name__}: {exc}"
    return _CellRows(signal, shift, severity, results, errors)


def _improvement_rows(cells: list[_CellRows]) -> list[str]:
    rows = []
    for cell in cells:
        if METHOD_SOURCE not in cell.results or METHOD_ADAPTED not in cell.results:
            continue
        src = aggregate(cell.results[METHOD_SOURCE])
        ada = aggregate(cell.results[METHOD_ADAPTED])
        for metric in METRIC_NAMES:
            s, a = src[metric][0], ada[metric][0]
            if metric == "mse":
                rel = (s - a) / s if s != 0 else float("nan")
            else:
                rel = (a - s) / abs(s) if s != 0 else float("nan")
            rows.append(
                f"{cell.signal},{cell.shift},{cell.severity},{metric},{_fmt(rel)}"
            )
    return rows


def run_grid(grid: ExperimentGrid) -> dict:
    """Execute the benchmark; returns {name: path} for the emitted files.

    Models are fitted once per signal kind; cells run in parallel (worker
    count capped by ADANODE_THREADS) and any cell failure is recorded in
    the summary while the remaining cells still run. Reports are assembled
    in deterministic order, so a rerun with the same config is
    byte-identical.
    """
    out_dir = Path(grid.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    models: dict = {}
    model_info: dict = {}
    for si, signal in enumerate(grid.signals):
        model, info = _source_model(grid, si, signal)
        path = out_dir / f"model_{signal}.json"
        save_checkpoint(model, path)
        info = dict(info, checkpoint=str(path)) if info.get("source") == "trained" else info
        models[signal] = model
        model_info[signal] = info
    jobs = []
    for si, signal in enumerate(grid.signals):
        for shift_i, shift in enumerate(grid.shifts_for(signal)):
            for severity in grid.severities:
                jobs.append((si, signal, shift_i, shift, severity))
    with ThreadPoolExecutor(max_workers=_worker_count(len(jobs))) as pool:
        cells = list(
            pool.map(
                lambda j: _run_cell(grid, models[j[1]], j[0], j[1], j[2], j[3], j[4]),
                jobs,
            )
        )
    metric_lines = []
    summary_cells = []
    for cell in cells:
        for method in (METHOD_SOURCE, METHOD_ADAPTED):
            if method in cell.errors:
                summary_cells.append(
                    {
                        "signal": cell.signal,
                        "shift": cell.shift,
                        "severity": cell.severity,
                        "method": method,
                        "status": "failed",
                        "error": cell.errors[method],
                    }
                )
                continue
            for r in cell.results[method]:
                metric_lines.append(
                    f"{cell.signal},{cell.shift},{cell.severity},{method},"
                    f"{r.seed},{_fmt(r.mse)},{_fmt(r.cc)},{_fmt(r.ccc)}"
                )
                entry = {
                    "signal": cell.signal,
                    "shift": cell.shift,
                    "severity": cell.severity,
                    "method": method,
                    "seed": r.seed,
                    "status": "ok",
                    "mse": r.mse,
                    "cc": r.cc,
                    "ccc": r.ccc,
                }
                if method == METHOD_ADAPTED:
                    entry["alpha"] = r.adaptation.alpha
                    entry["gamma"] = r.adaptation.gamma
                    entry["adapt_loss"] = float(r.adapt_loss)
                    entry["freeze_ok"] = r.freeze_ok
                summary_cells.append(entry)
    paths = {
        "metrics": out_dir / "metrics.csv",
        "improvement": out_dir / "improvement.csv",
        "summary": out_dir / "summary.json",
    }
    with open(paths["metrics"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(METRICS_CSV_HEADER + "\n")
        fh.write("".join(line + "\n" for line in metric_lines))
    with open(paths["improvement"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(IMPROVEMENT_CSV_HEADER + "\n")
        fh.write("".join(line + "\n" for line in _improvement_rows(cells)))
    summary = {
        "config": grid_to_dict(grid),
        "models": model_info,
        "cells": summary_cells,
    }
    with open(paths["summary"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(summary, indent=2) + "\n")
    return {name: str(p) for name, p in paths.items()}
