"""CLI entry point for stransformer.

Provides commands: train, evaluate, forecast, benchmark, ablate, sweep, gradcheck, synth.

Every run-producing command accepts per-field overrides after its options,
e.g. ``stransformer train --config run.toml --model.F 32 --train.lr 0.001``.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Callable, Optional

import click
import pandas as pd

from stransformer.checkpoint import load_checkpoint, save_checkpoint
from stransformer.config import (
    OUT_DIR_ENV,
    AblationVariant,
    RunConfig,
    apply_overrides,
    get_out_dir,
    load_run_config,
    save_run_config,
)
from stransformer.data import (
    SYNTH_KINDS,
    ForecastDataset,
    Normalizer,
    future_timestamps,
    load_dataset,
    synth,
    write_csv,
)
from stransformer.errors import ConfigError, DataError, NumericalError, STransformerError
from stransformer.evaluate import evaluate, evaluate_baseline, get_baseline_names, run_benchmark
from stransformer.experiments import SWEEP_KNOBS, parse_sweep_values, run_ablation, run_sweep
from stransformer.gradcheck import DEFAULT_STEP, DEFAULT_TOLERANCE, module_gradient_checks, toy_model_config
from stransformer.model import init_params, predict_window
from stransformer.train import train as train_model
from stransformer.train import write_history_csv

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"

_RUN_SETTINGS = {"ignore_unknown_options": True, "allow_extra_args": True}


def _reports_errors(func: Callable) -> Callable:
    """Turn package errors into a one-line diagnostic and the category's exit code."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except STransformerError as exc:
            logger.debug("command failed", exc_info=True)
            click.echo(f"  error    {exc.category}: {exc}", err=True)
            sys.exit(exc.exit_code)

    return wrapper


def _run_options(func: Callable) -> Callable:
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Run config (TOML)."),
        click.option("--seed", type=int, default=None, help="Seed for data, init, shuffling and dropout."),
        click.option("--run-id", "run_id", default=None, help="Artifact directory name (default: config hash)."),
        click.option("--out-dir", "out_dir", envvar=OUT_DIR_ENV, default=None, help="Artifact root (default: ./runs)."),
        click.option("--force", is_flag=True, help="Overwrite an existing run directory."),
        click.option("--lr", type=float, default=None, help="Shortcut for --train.lr."),
        click.option("--horizon", type=int, default=None, help="Shortcut for --model.horizon."),
        click.option("--variant", default=None, help="Shortcut for --model.variant."),
        click.option("--univariate", "target", default=None, help="Forecast one named column only (M=1)."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def parse_extra_overrides(args: list[str]) -> dict[str, str]:
    """Turn ``--section.key VALUE`` / ``--section.key=VALUE`` tokens into an override mapping."""
    overrides: dict[str, str] = {}
    index = 0
    while index < len(args):
        token = args[index]
        if not token.startswith("--") or "." not in token:
            raise ConfigError(f"unexpected argument '{token}'; overrides look like --section.key VALUE")
        name = token[2:]
        if "=" in name:
            name, value = name.split("=", 1)
        else:
            if index + 1 >= len(args):
                raise ConfigError(f"override {token} needs a value")
            index += 1
            value = args[index]
        overrides[name] = value
        index += 1
    return overrides


def resolve_run_config(
    config_path: Optional[str],
    extra_args: list[str],
    seed: Optional[int] = None,
    lr: Optional[float] = None,
    horizon: Optional[int] = None,
    variant: Optional[str] = None,
    target: Optional[str] = None,
) -> RunConfig:
    """File values, then --section.key overrides, then shortcut flags."""
    config = load_run_config(Path(config_path) if config_path else None)
    if seed is not None:
        config.set_seed(seed)
    apply_overrides(config, parse_extra_overrides(extra_args))
    if lr is not None:
        config.train.lr = lr
    if horizon is not None:
        config.model.horizon = horizon
    if variant is not None:
        config.model.variant = AblationVariant.parse(variant).value
    if target is not None:
        config.data.target = target
    return config


def bind_dataset(config: RunConfig) -> ForecastDataset:
    """Load the configured dataset and fill ``model.n_vars`` from it."""
    dataset = load_dataset(config.data)
    if config.model.n_vars == 0:
        config.model.n_vars = dataset.n_vars
    elif config.model.n_vars != dataset.n_vars:
        raise ConfigError(f"model.n_vars is {config.model.n_vars} but the dataset has {dataset.n_vars} variables")
    config.model.validate()
    config.train.validate()
    config.eval.validate()
    return dataset


def prepare_run_dir(out_dir: Optional[str], run_id: str, force: bool) -> Path:
    run_dir = get_out_dir(out_dir) / run_id
    if run_dir.exists() and any(run_dir.iterdir()):
        if not force:
            raise ConfigError(f"run directory {run_dir} already exists; pass --force to overwrite")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _default_run_id(prefix: str, config: RunConfig, *extra: str) -> str:
    if not prefix and not extra:
        return config.run_id()
    payload = json.dumps(config.to_dict(), sort_keys=True) + "".join(extra)
    digest = hashlib.sha1(payload.encode()).hexdigest()[:12]
    return f"{prefix}-{digest}" if prefix else digest


def _file_digest(path: Path) -> str:
    return hashlib.sha1(Path(path).read_bytes()).hexdigest()


def _echo_data(dataset: ForecastDataset) -> None:
    source = dataset.meta.get("source") or f"synthetic {dataset.meta.get('kind', '')}".strip()
    click.echo(f"  data     {source}: {dataset.n_vars} variables × {dataset.length} steps")


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Log progress at INFO level.")
def cli(verbose: bool):
    """stransformer: multivariate forecasting with STCN and sequence-guided mask attention."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format=LOG_FORMAT)


@cli.command(context_settings=_RUN_SETTINGS)
@_run_options
@click.pass_context
@_reports_errors
def train(ctx, config_path, seed, run_id, out_dir, force, lr, horizon, variant, target):
    """Train one model; writes checkpoint, history CSV and a test-split report."""
    config = resolve_run_config(config_path, ctx.args, seed, lr, horizon, variant, target)
    dataset = bind_dataset(config)
    run_id = run_id or _default_run_id("", config)
    run_dir = prepare_run_dir(out_dir, run_id, force)
    click.echo(f"  run      {run_id}")
    _echo_data(dataset)

    normalizer = Normalizer.fit(dataset)
    params = init_params(config.model)
    result = train_model(config.model, params, dataset, config.train, normalizer, stride=config.data.stride)
    click.echo(
        f"  train    {result.steps_run} steps  ·  final loss {result.final_train_loss:.6f}"
        f"  ·  best val {result.best_val_mse:.6f} @ {result.best_step}"
    )

    save_checkpoint(
        run_dir / "checkpoint.npz",
        config.model,
        result.params,
        normalizer,
        extra={"best_step": result.best_step, "data_checksum": result.data_checksum},
    )
    write_history_csv(result.history, run_dir / "history.csv")
    save_run_config(config, run_dir / "config.toml")

    report = evaluate(result.params, config.model, dataset, normalizer, config.eval, config.data.stride)
    report.config = config.to_dict()
    report.run_id = run_id
    report.write(run_dir)
    click.echo(report.to_table(), nl=False)
    click.echo(f"  saved    {run_dir}")


@cli.command(name="evaluate", context_settings=_RUN_SETTINGS)
@_run_options
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False), default=None, help="Trained checkpoint.")
@click.option("--baseline", type=click.Choice(list(get_baseline_names())), default=None, help="Score a baseline instead of a checkpoint.")
@click.pass_context
@_reports_errors
def evaluate_cmd(ctx, config_path, seed, run_id, out_dir, force, lr, horizon, variant, target, checkpoint_path, baseline):
    """Score a checkpoint (or a baseline) on the evaluation split."""
    config = resolve_run_config(config_path, ctx.args, seed, lr, horizon, variant, target)
    if checkpoint_path is None and baseline is None:
        raise ConfigError("evaluate needs --checkpoint PATH or --baseline NAME")

    if baseline is not None:
        dataset = bind_dataset(config)
        normalizer = Normalizer.fit(dataset)
        report = evaluate_baseline(baseline, dataset, config.model.lookback, normalizer, config.eval, stride=config.data.stride)
        run_id = run_id or _default_run_id("eval", config, baseline)
    else:
        checkpoint = load_checkpoint(Path(checkpoint_path))
        config.model = checkpoint.cfg
        dataset = bind_dataset(config)
        normalizer = checkpoint.normalizer or Normalizer.fit(dataset)
        report = evaluate(checkpoint.params, checkpoint.cfg, dataset, normalizer, config.eval, config.data.stride)
        run_id = run_id or _default_run_id("eval", config, _file_digest(Path(checkpoint_path)))

    if not report.rows:
        raise DataError("nothing to evaluate; " + "; ".join(report.warnings))
    run_dir = prepare_run_dir(out_dir, run_id, force)
    report.config = config.to_dict()
    report.run_id = run_id
    report.write(run_dir)
    click.echo(f"  run      {run_id}")
    click.echo(report.to_table(), nl=False)
    click.echo(f"  saved    {run_dir}")


@cli.command(context_settings=_RUN_SETTINGS)
@_run_options
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False), required=True, help="Trained checkpoint.")
@click.pass_context
@_reports_errors
def forecast(ctx, config_path, seed, run_id, out_dir, force, lr, horizon, variant, target, checkpoint_path):
    """Forecast the K steps after the series end; writes an M-row CSV in original units."""
    config = resolve_run_config(config_path, ctx.args, seed, lr, horizon, variant, target)
    checkpoint = load_checkpoint(Path(checkpoint_path))
    config.model = checkpoint.cfg
    dataset = bind_dataset(config)
    cfg = checkpoint.cfg
    if dataset.length < cfg.lookback:
        raise DataError(f"series has {dataset.length} steps, the model needs a lookback of {cfg.lookback}")
    normalizer = checkpoint.normalizer or Normalizer.fit(dataset)

    prediction = predict_window(dataset.series[:, -cfg.lookback :], checkpoint.params, cfg, normalizer)
    frame = pd.DataFrame(prediction, columns=future_timestamps(dataset, cfg.horizon))
    frame.insert(0, "variable", dataset.names)

    run_id = run_id or _default_run_id("forecast", config, _file_digest(Path(checkpoint_path)))
    run_dir = prepare_run_dir(out_dir, run_id, force)
    output = run_dir / "forecast.csv"
    frame.to_csv(output, index=False, float_format="%.17g")
    click.echo(f"  run      {run_id}")
    click.echo(f"  forecast {dataset.n_vars} variables × {cfg.horizon} steps")
    click.echo(f"  saved    {output}")


@cli.command(context_settings=_RUN_SETTINGS)
@_run_options
@click.pass_context
@_reports_errors
def benchmark(ctx, config_path, seed, run_id, out_dir, force, lr, horizon, variant, target):
    """Train one model per eval horizon at a fixed lookback and report each plus the average."""
    config = resolve_run_config(config_path, ctx.args, seed, lr, horizon, variant, target)
    dataset = bind_dataset(config)
    run_id = run_id or _default_run_id("benchmark", config)
    run_dir = prepare_run_dir(out_dir, run_id, force)
    _echo_data(dataset)

    result = run_benchmark(config, dataset)
    for horizon_value, (cfg, trained) in sorted(result.trained.items()):
        save_checkpoint(run_dir / f"checkpoint-{horizon_value}.npz", cfg, trained.params, extra={"data_checksum": trained.data_checksum})
        write_history_csv(trained.history, run_dir / f"history-{horizon_value}.csv")
    result.report.run_id = run_id
    result.report.write(run_dir)
    click.echo(f"  run      {run_id}")
    click.echo(result.report.to_table(), nl=False)
    click.echo(f"  saved    {run_dir}")


@cli.command(context_settings=_RUN_SETTINGS)
@_run_options
@click.pass_context
@_reports_errors
def ablate(ctx, config_path, seed, run_id, out_dir, force, lr, horizon, variant, target):
    """Train and score the five architecture variants on identical data."""
    config = resolve_run_config(config_path, ctx.args, seed, lr, horizon, variant, target)
    dataset = bind_dataset(config)
    run_id = run_id or _default_run_id("ablate", config)
    run_dir = prepare_run_dir(out_dir, run_id, force)
    _echo_data(dataset)

    grid = run_ablation(dataset, config)
    grid.to_csv(run_dir / "ablation.csv")
    table = grid.to_table()
    (run_dir / "ablation.txt").write_text(table)
    save_run_config(config, run_dir / "config.toml")
    click.echo(f"  run      {run_id}")
    click.echo(table, nl=False)
    for row in grid.rows:
        if row.error:
            click.echo(f"  warning  {row.label['Design']} / {row.label['Temporal']} / {row.label['Attention']}: {row.error}", err=True)
    click.echo(f"  saved    {run_dir}")
    if not any(row.ok for row in grid.rows):
        raise NumericalError("every ablation variant failed")


@cli.command(context_settings=_RUN_SETTINGS)
@_run_options
@click.option("--knob", type=click.Choice(list(SWEEP_KNOBS)), required=True, help="Hyperparameter to vary.")
@click.option("--values", "raw_values", required=True, help="Comma-separated grid, e.g. 0.0005,0.001.")
@click.pass_context
@_reports_errors
def sweep(ctx, config_path, seed, run_id, out_dir, force, lr, horizon, variant, target, knob, raw_values):
    """Train and score once per listed value of one hyperparameter."""
    config = resolve_run_config(config_path, ctx.args, seed, lr, horizon, variant, target)
    values = parse_sweep_values(knob, raw_values)
    dataset = bind_dataset(config)
    run_id = run_id or _default_run_id("sweep", config, knob, raw_values)
    run_dir = prepare_run_dir(out_dir, run_id, force)
    _echo_data(dataset)

    grid = run_sweep(knob, values, dataset, config)
    grid.to_csv(run_dir / "sweep.csv")
    table = grid.to_table()
    (run_dir / "sweep.txt").write_text(table)
    click.echo(f"  run      {run_id}")
    click.echo(table, nl=False)
    click.echo(f"  saved    {run_dir}")
    if not any(row.ok for row in grid.rows):
        raise NumericalError("every sweep point failed")


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for parameters and check data.")
@click.option("--variant", default=AblationVariant.ORIGINAL.value, show_default=True, help="Architecture variant.")
@click.option("--step", type=float, default=DEFAULT_STEP, show_default=True, help="Finite-difference step h.")
@click.option("--tolerance", type=float, default=DEFAULT_TOLERANCE, show_default=True, help="Largest accepted relative error.")
@_reports_errors
def gradcheck(seed, variant, step, tolerance):
    """Compare analytic and finite-difference gradients on a toy configuration."""
    cfg = toy_model_config().replace(variant=AblationVariant.parse(variant).value)
    reports = module_gradient_checks(cfg, seed=seed, h=step)
    failed = []
    for module, report in reports.items():
        verdict = "ok" if report.passed(tolerance) else "FAIL"
        click.echo(
            f"  {module:<8} max rel error {report.max_rel_error:.3e}"
            f"  ({report.coordinates_checked} coords)  {verdict}"
        )
        if not report.passed(tolerance):
            failed.append(f"{module} ({report.worst_param}{list(report.worst_coordinate or ())})")
    if failed:
        raise NumericalError(f"gradient check above {tolerance:g}: {', '.join(failed)}")
    click.echo(f"  passed   all modules below {tolerance:g}")


@cli.command(name="synth")
@click.option("--output", "-o", type=click.Path(dir_okay=False), required=True, help="CSV file to write.")
@click.option("--kind", type=click.Choice(list(SYNTH_KINDS)), default="sines", show_default=True)
@click.option("--vars", "n_vars", type=int, default=3, show_default=True, help="Number of variables M.")
@click.option("--length", type=int, default=2000, show_default=True, help="Number of time steps N.")
@click.option("--noise", type=float, default=0.05, show_default=True, help="Gaussian noise level.")
@click.option("--seed", type=int, default=0, show_default=True)
@_reports_errors
def synth_cmd(output, kind, n_vars, length, noise, seed):
    """Write a seeded synthetic dataset in the loader's CSV format."""
    dataset = synth(kind, n_vars, length, seed=seed, noise=noise)
    path = Path(output)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_csv(dataset, path)
    click.echo(f"  synth    {kind}: {n_vars} variables × {length} steps")
    click.echo(f"  saved    {path}")


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
