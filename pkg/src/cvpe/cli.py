"""Command line interface.

Subcommands::

    prepare     inspect the configured dataset and its split
    train       train one (variant, horizon, seed) cell and save a checkpoint
    evaluate    score a saved checkpoint on the test segment
    gradcheck   verify analytic gradients against finite differences
    experiment  run the full paired A/B grid and write reports

Exit codes: 0 success, 1 configuration or input problem, 2 runtime failure
(divergence or non-finite numbers), 3 gradient check failure.  The
``CVPE_OUTPUT_DIR`` environment variable overrides the configured output
directory; an explicit ``--out`` flag overrides both.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .autodiff import NumericError
from .config import ConfigError, RunConfig, load_config
from .data import CsvFormatError, lagged_driver_mean, pearson, rank_channels
from .evaluation import (
    OutputDirectoryExists,
    dataset_label,
    evaluate,
    model_forecast_fn,
    prepare_segments,
    run_experiment,
    write_experiment,
)
from .model import ModelParams, load_checkpoint, save_checkpoint
from .train import TrainConfig, TrainingDiverged, grad_check, make_windows, train_loop

OUTPUT_DIR_ENV = "CVPE_OUTPUT_DIR"
DEFAULT_FAULT_TARGET = "head.b"


def _outdir(config: RunConfig, flag: str | None) -> Path:
    if flag:
        return Path(flag)
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        return Path(env)
    return Path(config.output_dir)


def _cell_args(config: RunConfig, args) -> tuple[str, int, int]:
    variant = args.variant or config.variants[0]
    horizon = args.horizon if args.horizon is not None else config.horizons[0]
    seed = args.seed if args.seed is not None else config.seeds[0]
    if variant not in config.variants:
        raise ConfigError([f"variant {variant!r} not in configured variants {config.variants}"])
    if horizon not in config.horizons:
        raise ConfigError([f"horizon {horizon} not in configured horizons {config.horizons}"])
    return variant, horizon, seed


def cmd_prepare(args) -> int:
    config = load_config(args.config)
    train_s, val_s, test_s = prepare_segments(config)
    print(f"dataset: {dataset_label(config)}")
    print(f"channels ({train_s.n_channels}): {', '.join(train_s.channel_names)}")
    print(
        f"split lengths: train={train_s.length} val={val_s.length} test={test_s.length}"
    )
    for horizon in config.horizons:
        counts = []
        for name, seg in (("train", train_s), ("val", val_s), ("test", test_s)):
            n = seg.length - (config.context + horizon) + 1
            counts.append(f"{name}={max(n, 0)}")
        print(f"windows @ horizon {horizon}: {' '.join(counts)}")
    ranked = rank_channels(train_s, config.target) if train_s.n_channels > 1 else []
    if ranked:
        print(f"train-segment correlation with {config.target}:")
        for name, r in ranked:
            print(f"  {name:<12} r={r:+.4f}")
    if config.dataset_kind == "synthetic" and train_s.n_channels > 1:
        t_idx = train_s.channel_names.index(config.target)
        drivers = np.delete(train_s.values, t_idx, axis=0)
        driven = lagged_driver_mean(drivers, config.synthetic.lag)
        r = pearson(driven, train_s.values[t_idx])
        print(
            f"lagged driver mean vs {config.target} (lag {config.synthetic.lag}): r={r:+.4f}"
        )
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    variant, horizon, seed = _cell_args(config, args)
    segments = prepare_segments(config)
    train_s, val_s, _ = segments
    tw, tt = make_windows(train_s.values, config.context, horizon)
    vw, vt = make_windows(val_s.values, config.context, horizon)
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
    outdir = _outdir(config, args.out)
    ckpt = outdir / f"model_{variant}_h{horizon}_seed{seed}.npz"
    if ckpt.exists() and not args.overwrite:
        raise OutputDirectoryExists(f"{ckpt} already exists; pass --overwrite to replace")
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
    save_checkpoint(ckpt, params)
    curve = outdir / f"loss_{variant}_h{horizon}_seed{seed}.csv"
    lines = ["epoch,train_mse,val_mse"]
    for rec in result.history:
        lines.append(f"{rec.epoch},{rec.train_mse!r},{rec.val_mse!r}")
    curve.write_text("\n".join(lines) + "\n")
    print(f"trained {variant} (horizon {horizon}, seed {seed})")
    print(f"epochs run: {len(result.history)}  best epoch: {result.best_epoch}")
    print(f"best val mse: {result.best_val_mse:.6f}")
    print(f"window order digest: {result.window_order_digest}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_evaluate(args) -> int:
    config = load_config(args.config)
    params = load_checkpoint(args.checkpoint)
    if params.context != config.context:
        raise ConfigError(
            [
                f"checkpoint was trained with context {params.context}, "
                f"config says {config.context}"
            ]
        )
    _, _, test_s = prepare_segments(config)
    sw, st = make_windows(test_s.values, params.context, params.horizon)
    metrics = evaluate(model_forecast_fn(params), sw, st)
    print(f"variant: {params.variant}  horizon: {params.horizon}")
    print(f"test mse: {metrics.mse:.6f}")
    print(f"test mae: {metrics.mae:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    config = load_config(args.config)
    variant, horizon, seed = _cell_args(config, args)
    train_s, _, _ = prepare_segments(config)
    tw, tt = make_windows(train_s.values, config.context, horizon)
    take = min(args.batch, tw.shape[0])
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
    report = grad_check(
        params,
        tw[:take],
        tt[:take],
        tolerance=args.tolerance,
        corrupt=args.inject_fault,
    )
    for entry in report.entries:
        print(f"{entry.name:<28} max_rel_err={entry.max_rel_err:.3e} ({entry.n_checked} coords)")
    verdict = "PASS" if report.passed else "FAIL"
    print(
        f"gradient check {verdict}: max relative error {report.max_rel_err:.3e} "
        f"(tolerance {report.tolerance:.1e})"
    )
    return 0 if report.passed else 3


def cmd_experiment(args) -> int:
    config = load_config(args.config)
    outdir = _outdir(config, args.out)
    if outdir.exists() and any(outdir.iterdir()) and not args.overwrite:
        # refuse before burning compute on the grid
        raise OutputDirectoryExists(
            f"output directory {outdir} already has contents; pass --overwrite to replace"
        )
    report = run_experiment(config, jobs=args.jobs)
    write_experiment(report, outdir, overwrite=True)
    sys.stdout.write(report.to_text())
    print(f"report written to {outdir}")
    if report.any_failed:
        failed = [r for r in report.rows if r.status != "ok"]
        for r in failed:
            print(
                f"cell failed: {r.variant} h={r.horizon} seed={r.seed}: {r.error}",
                file=sys.stderr,
            )
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cvpe",
        description="Paired A/B study of cross-variate patch embedding in a "
        "channel-independent forecaster.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", required=True, help="path to a JSON run configuration")

    p = sub.add_parser("prepare", help="inspect the dataset, split and channel ranking")
    add_config(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one cell and save a checkpoint")
    add_config(p)
    p.add_argument("--variant", choices=["vanilla", "cvpe"], help="embedding variant")
    p.add_argument("--horizon", type=int, help="forecast horizon (default: first configured)")
    p.add_argument("--seed", type=int, help="run seed (default: first configured)")
    p.add_argument("--out", help="output directory override")
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test segment")
    add_config(p)
    p.add_argument("--checkpoint", required=True, help="path to a saved .npz checkpoint")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    add_config(p)
    p.add_argument("--variant", choices=["vanilla", "cvpe"], help="embedding variant")
    p.add_argument("--horizon", type=int, help="forecast horizon (default: first configured)")
    p.add_argument("--seed", type=int, help="model seed (default: first configured)")
    p.add_argument("--tolerance", type=float, default=1e-4, help="max relative error allowed")
    p.add_argument("--batch", type=int, default=4, help="windows in the probe batch")
    p.add_argument(
        "--inject-fault",
        nargs="?",
        const=DEFAULT_FAULT_TARGET,
        default=None,
        metavar="PARAM",
        help="flip the sign of one parameter's gradient to prove the check catches it",
    )
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("experiment", help="run the paired A/B grid and write reports")
    add_config(p)
    p.add_argument("--jobs", type=int, default=1, help="cells to train in parallel")
    p.add_argument("--out", help="output directory override")
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; fold those into the config-error code
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 1
    except OutputDirectoryExists as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, CsvFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, NumericError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
