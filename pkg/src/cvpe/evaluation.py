"""Metrics, the paired A/B experiment driver, and report emission.

A run is a grid of cells (horizon, seed, variant).  Cells that share a
horizon and seed are paired: identical data windows, identical batch
schedule, identical initialisation of every component the variants share.
Reports are deterministic byte for byte; they carry no timestamps and all
floats round-trip.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import NumericError, no_grad
from .config import RunConfig
from .data import (
    MultivariateSeries,
    chronological_split,
    generate_synthetic,
    load_csv,
    select_top_k,
)
from .model import ModelParams, forecast_batch
from .train import TrainConfig, TrainingDiverged, make_windows, train_loop

EVAL_BATCH = 64


class OutputDirectoryExists(FileExistsError):
    """Refusing to clobber an existing non-empty output directory."""


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error over all elements."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean absolute error over all elements."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target)))


@dataclass(frozen=True)
class MetricPair:
    mse: float
    mae: float

    def __post_init__(self):
        if self.mse < 0 or self.mae < 0:
            raise ValueError("metrics cannot be negative")


def evaluate(
    forecast_fn: Callable[[np.ndarray], np.ndarray],
    windows: np.ndarray,
    targets: np.ndarray,
    batch_size: int = EVAL_BATCH,
) -> MetricPair:
    """Run a forecaster over a window set and average the errors.

    ``forecast_fn`` maps a (batch, channels, context) array to a (batch,
    channels, horizon) array; errors are averaged uniformly over windows,
    channels and horizon steps.
    """
    windows = np.asarray(windows, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if windows.shape[0] != targets.shape[0]:
        raise ValueError("window and target counts differ")
    if windows.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty window set")
    sq_sum = 0.0
    abs_sum = 0.0
    for lo in range(0, windows.shape[0], batch_size):
        chunk = slice(lo, lo + batch_size)
        pred = np.asarray(forecast_fn(windows[chunk]), dtype=np.float64)
        if pred.shape != targets[chunk].shape:
            raise ValueError(
                f"forecaster returned {pred.shape}, expected {targets[chunk].shape}"
            )
        err = pred - targets[chunk]
        sq_sum += float(np.sum(err * err))
        abs_sum += float(np.sum(np.abs(err)))
    count = float(np.prod(targets.shape))
    return MetricPair(mse=sq_sum / count, mae=abs_sum / count)


def model_forecast_fn(params: ModelParams) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap trained parameters as a plain array-to-array forecaster."""

    def fn(windows: np.ndarray) -> np.ndarray:
        with no_grad():
            return forecast_batch(windows, params).data

    return fn


@dataclass
class CellResult:
    """One trained-and-evaluated grid cell."""

    dataset: str
    variant: str
    horizon: int
    seed: int
    status: str  # "ok" or "failed"
    mse: float | None
    mae: float | None
    best_epoch: int | None
    epochs_run: int | None
    window_order_digest: str | None
    error: str | None
    history: list[dict] = field(default_factory=list)


@dataclass
class AggregateRow:
    """Across-seed summary for one (variant, horizon) pair."""

    variant: str
    horizon: int
    n_seeds: int
    mean_mse: float
    std_mse: float
    mean_mae: float
    std_mae: float


@dataclass
class ExperimentReport:
    dataset_label: str
    rows: list[CellResult]
    aggregates: list[AggregateRow]
    improvements: list[dict]
    config_echo: dict

    @property
    def any_failed(self) -> bool:
        return any(r.status != "ok" for r in self.rows)

    def aggregate(self, variant: str, horizon: int) -> AggregateRow:
        for agg in self.aggregates:
            if agg.variant == variant and agg.horizon == horizon:
                return agg
        raise KeyError(f"no aggregate for ({variant!r}, {horizon})")

    def to_json(self) -> str:
        payload = {
            "dataset": self.dataset_label,
            "cells": [asdict(r) for r in self.rows],
            "aggregates": [asdict(a) for a in self.aggregates],
            "improvements": self.improvements,
            "config": self.config_echo,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"dataset: {self.dataset_label}", ""]
        header = f"{'variant':<10} {'horizon':>7} {'seed':>6} {'status':<8} {'mse':>12} {'mae':>12}"
        lines.append(header)
        lines.append("-" * len(header))
        for r in self.rows:
            m = f"{r.mse:.6f}" if r.mse is not None else "-"
            a = f"{r.mae:.6f}" if r.mae is not None else "-"
            lines.append(
                f"{r.variant:<10} {r.horizon:>7} {r.seed:>6} {r.status:<8} {m:>12} {a:>12}"
            )
        lines.append("")
        header = (
            f"{'variant':<10} {'horizon':>7} {'seeds':>6} "
            f"{'mean_mse':>12} {'std_mse':>12} {'mean_mae':>12} {'std_mae':>12}"
        )
        lines.append(header)
        lines.append("-" * len(header))
        for g in self.aggregates:
            lines.append(
                f"{g.variant:<10} {g.horizon:>7} {g.n_seeds:>6} "
                f"{g.mean_mse:>12.6f} {g.std_mse:>12.6f} {g.mean_mae:>12.6f} {g.std_mae:>12.6f}"
            )
        for imp in self.improvements:
            lines.append("")
            lines.append(
                f"horizon {imp['horizon']}: cross-variate vs vanilla mean MSE "
                f"improvement {imp['relative_improvement']:+.4%}"
            )
        return "\n".join(lines) + "\n"


def build_series(config: RunConfig) -> MultivariateSeries:
    """Materialise the configured dataset (synthetic draw or CSV load)."""
    if config.dataset_kind == "synthetic":
        return generate_synthetic(config.synthetic)
    series = load_csv(config.csv_path, config.date_column, config.frequency)
    return series


def prepare_segments(
    config: RunConfig,
) -> tuple[MultivariateSeries, MultivariateSeries, MultivariateSeries]:
    """Load, optionally select channels (on training statistics), and split."""
    series = build_series(config)
    train_end, _, _ = config.split.resolve(series.length)
    if config.select_top_k is not None:
        series = select_top_k(series, config.target, config.select_top_k, train_len=train_end)
    return chronological_split(series, config.split)


def dataset_label(config: RunConfig) -> str:
    if config.dataset_kind == "synthetic":
        s = config.synthetic
        return (
            f"synthetic(n={s.n_channels}, T={s.length}, coupling={s.coupling}, "
            f"lag={s.lag}, noise={s.noise_std}, seed={s.seed})"
        )
    return Path(config.csv_path).name


def run_cell(
    segments: tuple[MultivariateSeries, MultivariateSeries, MultivariateSeries],
    config: RunConfig,
    variant: str,
    horizon: int,
    seed: int,
) -> CellResult:
    """Train one variant at one horizon and seed, then score it on test."""
    train_s, val_s, test_s = segments
    label = dataset_label(config)
    try:
        tw, tt = make_windows(train_s.values, config.context, horizon)
        vw, vt = make_windows(val_s.values, config.context, horizon)
        sw, st = make_windows(test_s.values, config.context, horizon)
        params = ModelParams.build(
            variant=variant,
            context=config.context,
            horizon=horizon,
            patch_cfg=config.patch,
            model_dim=config.model_dim,
            heads=config.heads,
            n_prototypes=config.n_prototypes,
            n_routers=config.n_routers,
            backbone_cfg=config.backbone,
            seed=seed,
        )
        result = train_loop(
            params,
            tw,
            tt,
            vw,
            vt,
            TrainConfig(
                epochs=config.epochs,
                batch_size=config.batch_size,
                lr=config.lr,
                patience=config.patience,
                seed=seed,
            ),
        )
        metrics = evaluate(model_forecast_fn(params), sw, st)
    except (TrainingDiverged, NumericError, FloatingPointError) as exc:
        return CellResult(
            dataset=label,
            variant=variant,
            horizon=horizon,
            seed=seed,
            status="failed",
            mse=None,
            mae=None,
            best_epoch=None,
            epochs_run=None,
            window_order_digest=None,
            error=f"{type(exc).__name__}: {exc}",
        )
    return CellResult(
        dataset=label,
        variant=variant,
        horizon=horizon,
        seed=seed,
        status="ok",
        mse=metrics.mse,
        mae=metrics.mae,
        best_epoch=result.best_epoch,
        epochs_run=len(result.history),
        window_order_digest=result.window_order_digest,
        error=None,
        history=[asdict(rec) for rec in result.history],
    )


def _cell_worker(args: tuple[RunConfig, str, int, int]) -> CellResult:
    config, variant, horizon, seed = args
    return run_cell(prepare_segments(config), config, variant, horizon, seed)


def run_experiment(config: RunConfig, jobs: int = 1) -> ExperimentReport:
    """Run the full grid and aggregate across seeds.

    A failed cell (divergence or a non-finite value) is recorded with its
    error and excluded from aggregates; the remaining cells still run.
    """
    if jobs < 1:
        raise ValueError("jobs must be positive")
    grid = [
        (variant, horizon, seed)
        for horizon in config.horizons
        for seed in config.seeds
        for variant in config.variants
    ]
    if jobs == 1:
        segments = prepare_segments(config)
        rows = [run_cell(segments, config, v, h, s) for v, h, s in grid]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_cell_worker, [(config, v, h, s) for v, h, s in grid]))

    aggregates = []
    for horizon in config.horizons:
        for variant in config.variants:
            ok = [
                r
                for r in rows
                if r.variant == variant and r.horizon == horizon and r.status == "ok"
            ]
            if not ok:
                continue
            mses = np.array([r.mse for r in ok])
            maes = np.array([r.mae for r in ok])
            aggregates.append(
                AggregateRow(
                    variant=variant,
                    horizon=horizon,
                    n_seeds=len(ok),
                    mean_mse=float(mses.mean()),
                    std_mse=float(mses.std()),
                    mean_mae=float(maes.mean()),
                    std_mae=float(maes.std()),
                )
            )

    improvements = []
    if "vanilla" in config.variants and "cvpe" in config.variants:
        for horizon in config.horizons:
            try:
                base = next(
                    a for a in aggregates if a.variant == "vanilla" and a.horizon == horizon
                )
                cross = next(
                    a for a in aggregates if a.variant == "cvpe" and a.horizon == horizon
                )
            except StopIteration:
                continue
            if base.mean_mse > 0:
                improvements.append(
                    {
                        "horizon": horizon,
                        "relative_improvement": (base.mean_mse - cross.mean_mse)
                        / base.mean_mse,
                    }
                )

    return ExperimentReport(
        dataset_label=dataset_label(config),
        rows=rows,
        aggregates=aggregates,
        improvements=improvements,
        config_echo=config.echo,
    )


def write_experiment(report: ExperimentReport, outdir: str | Path, overwrite: bool = False):
    """Emit config echo, JSON and text reports, and per-cell loss curves."""
    outdir = Path(outdir)
    if outdir.exists() and any(outdir.iterdir()) and not overwrite:
        raise OutputDirectoryExists(
            f"output directory {outdir} already has contents; pass overwrite to replace"
        )
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.json").write_text(
        json.dumps(report.config_echo, indent=2, sort_keys=True) + "\n"
    )
    (outdir / "report.json").write_text(report.to_json())
    (outdir / "report.txt").write_text(report.to_text())
    for row in report.rows:
        if not row.history:
            continue
        lines = ["epoch,train_mse,val_mse"]
        for rec in row.history:
            lines.append(f"{rec['epoch']},{rec['train_mse']!r},{rec['val_mse']!r}")
        name = f"loss_{row.variant}_h{row.horizon}_seed{row.seed}.csv"
        (outdir / name).write_text("\n".join(lines) + "\n")
