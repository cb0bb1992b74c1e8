"""
Evaluation: forecasters, metric collection over test windows, and report files.

Every forecaster (the trained model or a baseline) goes through the same
window/metric path, so baselines are directly comparable.
"""

from __future__ import annotations

import json
import logging
import tempfile
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from stransformer.config import EvalConfig, ModelConfig, RunConfig
from stransformer.data import ForecastDataset, Normalizer, WindowSpec, window_count, windows
from stransformer.errors import ConfigError, DataError, MetricError
from stransformer.metrics import mae, mase_per_series, mse, owa, smape
from stransformer.model import ModelParams, forward, init_params
from stransformer.train import TrainResult, train

logger = logging.getLogger(__name__)

METRIC_NAMES = ("mse", "mae", "smape", "mase", "owa")


class Forecaster(ABC):
    """Maps a normalized lookback window (M×T) to a normalized forecast (M×K)."""

    name: str = "forecaster"

    def __init__(self, horizon: int) -> None:
        self.horizon = horizon

    @abstractmethod
    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forecast the next ``horizon`` steps of every variable."""
        ...


class ModelForecaster(Forecaster):
    name = "sTransformer"

    def __init__(self, params: ModelParams, cfg: ModelConfig) -> None:
        super().__init__(cfg.horizon)
        self.params = params
        self.cfg = cfg

    def predict(self, x: np.ndarray) -> np.ndarray:
        return forward(x, self.params, self.cfg).data


class RepeatLastForecaster(Forecaster):
    """Naive baseline: every future step equals the last observed value."""

    name = "repeat_last"

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.repeat(x[:, -1:], self.horizon, axis=1)


class SeasonalNaiveForecaster(Forecaster):
    """Repeats the last observed season."""

    name = "seasonal_naive"

    def __init__(self, horizon: int, season: int = 1) -> None:
        super().__init__(horizon)
        if season < 1:
            raise ConfigError(f"seasonal naive needs a season ≥ 1 (got {season})")
        self.season = season

    def predict(self, x: np.ndarray) -> np.ndarray:
        length = x.shape[1]
        if self.season > length:
            raise MetricError(f"season {self.season} is longer than the lookback window {length}")
        taps = length - self.season + np.arange(self.horizon) % self.season
        return x[:, taps]


_BASELINES: dict[str, type[Forecaster]] = {
    "repeat_last": RepeatLastForecaster,
    "seasonal_naive": SeasonalNaiveForecaster,
}


def get_baseline(name: str, horizon: int, season: int = 1) -> Forecaster:
    """Return a baseline forecaster by name."""
    baseline_class = _BASELINES.get(name)
    if baseline_class is None:
        available = ", ".join(_BASELINES.keys())
        raise ConfigError(f"Unknown baseline '{name}'. Available: {available}")
    if baseline_class is SeasonalNaiveForecaster:
        return SeasonalNaiveForecaster(horizon, season)
    return baseline_class(horizon)


def get_baseline_names() -> tuple[str, ...]:
    return tuple(_BASELINES)


# --- Reports ---


@dataclass
class HorizonMetrics:
    horizon: int
    mse: float
    mae: float
    windows: int = 0
    smape: Optional[float] = None
    mase: Optional[float] = None
    owa: Optional[float] = None


@dataclass
class MetricsReport:
    """Per-horizon metrics plus their average, with everything needed to reproduce the run."""

    rows: list[HorizonMetrics] = field(default_factory=list)
    scale: str = "normalized"
    label: str = ModelForecaster.name
    run_id: str = ""
    runtime_seconds: float = 0.0
    config: dict[str, Any] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def metric_columns(self) -> list[str]:
        return [m for m in METRIC_NAMES if any(getattr(r, m) is not None for r in self.rows)]

    def average(self) -> dict[str, Optional[float]]:
        """Mean of each metric over horizons; None when some horizon lacks it."""
        averages: dict[str, Optional[float]] = {}
        for metric in METRIC_NAMES:
            values = [getattr(row, metric) for row in self.rows]
            if values and all(v is not None for v in values):
                averages[metric] = float(np.mean(values))
            else:
                averages[metric] = None
        return averages

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "run_id": self.run_id,
            "scale": self.scale,
            "runtime_seconds": self.runtime_seconds,
            "horizons": [asdict(row) for row in self.rows],
            "average": self.average(),
            "warnings": list(self.warnings),
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MetricsReport":
        return cls(
            rows=[HorizonMetrics(**row) for row in data.get("horizons", [])],
            scale=data.get("scale", "normalized"),
            label=data.get("label", ModelForecaster.name),
            run_id=data.get("run_id", ""),
            runtime_seconds=data.get("runtime_seconds", 0.0),
            config=data.get("config", {}),
            warnings=list(data.get("warnings", [])),
        )

    def to_table(self) -> str:
        columns = self.metric_columns() or ["mse", "mae"]
        lines = [f"{self.label}  (scale: {self.scale}, run {self.run_id or '-'})"]
        lines.append(f"  {'horizon':>8}" + "".join(f"  {c.upper():>10}" for c in columns))
        for row in self.rows:
            lines.append(f"  {row.horizon:>8}" + "".join(f"  {_fmt(getattr(row, c))}" for c in columns))
        if self.rows:
            avg = self.average()
            lines.append(f"  {'Avg':>8}" + "".join(f"  {_fmt(avg[c])}" for c in columns))
        for warning in self.warnings:
            lines.append(f"  warning  {warning}")
        return "\n".join(lines) + "\n"

    def write(self, directory: Path) -> tuple[Path, Path]:
        """Write report.json and report.txt into ``directory``."""
        directory = Path(directory)
        json_path = directory / "report.json"
        text_path = directory / "report.txt"
        write_text_atomic(json_path, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        write_text_atomic(text_path, self.to_table())
        return json_path, text_path


def _fmt(value: Optional[float]) -> str:
    return f"{'-':>10}" if value is None else f"{value:>10.4f}"


def write_text_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile("w", dir=path.parent, delete=False, suffix=".tmp") as handle:
        temp_path = Path(handle.name)
        handle.write(text)
    temp_path.replace(path)


# --- Metric collection ---


def _predict_all(forecaster: Forecaster, inputs: Sequence[np.ndarray], workers: int) -> list[np.ndarray]:
    if workers <= 1 or len(inputs) < 2:
        return [forecaster.predict(x) for x in inputs]
    # map() yields in submission order, so the reduction below sees the same sequence.
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(forecaster.predict, inputs))


def resolve_seasonality(dataset: ForecastDataset, eval_cfg: EvalConfig) -> int:
    return eval_cfg.seasonality or dataset.frequency or 1


def evaluate_forecaster(
    forecaster: Forecaster,
    dataset: ForecastDataset,
    lookback: int,
    normalizer: Normalizer,
    eval_cfg: EvalConfig,
    stride: int = 1,
    warnings: Optional[list[str]] = None,
) -> HorizonMetrics:
    """Score one forecaster on every window of ``eval_cfg.split``."""
    eval_cfg.validate()
    spec = WindowSpec(lookback, forecaster.horizon, stride)
    pairs = windows(dataset, spec, eval_cfg.split, normalizer)
    if not pairs:
        raise DataError(
            f"horizon {forecaster.horizon} leaves no {eval_cfg.split} windows "
            f"(split has {_split_length(dataset, eval_cfg.split)} steps, need {lookback + forecaster.horizon})"
        )
    inputs = [x for x, _ in pairs]
    targets = [y for _, y in pairs]
    preds = _predict_all(forecaster, inputs, eval_cfg.workers)
    if eval_cfg.scale == "raw":
        inputs = [normalizer.inverse(x) for x in inputs]
        targets = [normalizer.inverse(y) for y in targets]
        preds = [normalizer.inverse(p) for p in preds]

    y_all = np.stack(targets)
    p_all = np.stack(preds)
    row = HorizonMetrics(horizon=forecaster.horizon, mse=mse(y_all, p_all), mae=mae(y_all, p_all), windows=len(pairs))
    if eval_cfg.m4_metrics:
        _add_m4_metrics(row, inputs, targets, preds, dataset, normalizer, lookback, eval_cfg, stride, warnings)
    logger.info("%s horizon %d: mse %.6f mae %.6f over %d windows", forecaster.name, row.horizon, row.mse, row.mae, row.windows)
    return row


def _split_length(dataset: ForecastDataset, split: str) -> int:
    start, end = dataset.split_range(split)
    return end - start


def _mean_mase(inputs, targets, preds, seasonality: int) -> float:
    per_window = [mase_per_series(y, p, x, seasonality) for x, y, p in zip(inputs, targets, preds)]
    return float(np.mean(np.stack(per_window)))


def _add_m4_metrics(
    row: HorizonMetrics,
    inputs: list[np.ndarray],
    targets: list[np.ndarray],
    preds: list[np.ndarray],
    dataset: ForecastDataset,
    normalizer: Normalizer,
    lookback: int,
    eval_cfg: EvalConfig,
    stride: int,
    warnings: Optional[list[str]],
) -> None:
    seasonality = resolve_seasonality(dataset, eval_cfg)
    row.smape = smape(np.stack(targets), np.stack(preds))
    try:
        row.mase = _mean_mase(inputs, targets, preds, seasonality)
        baseline = SeasonalNaiveForecaster(row.horizon, seasonality)
        base_preds = [baseline.predict(x) for x in inputs]
        base_smape = smape(np.stack(targets), np.stack(base_preds))
        base_mase = _mean_mase(inputs, targets, base_preds, seasonality)
        row.owa = owa(row.smape, row.mase, base_smape, base_mase)
    except MetricError as exc:
        message = f"horizon {row.horizon}: {exc}"
        logger.warning(message)
        if warnings is not None:
            warnings.append(message)


def collect_report(
    forecaster_for: Callable[[int], Forecaster],
    horizons: Sequence[int],
    dataset: ForecastDataset,
    lookback: int,
    normalizer: Normalizer,
    eval_cfg: EvalConfig,
    stride: int = 1,
    label: str = ModelForecaster.name,
) -> MetricsReport:
    """One report row per horizon; horizons without test windows are skipped with a warning."""
    report = MetricsReport(scale=eval_cfg.scale, label=label)
    started = time.perf_counter()
    for horizon in horizons:
        if window_count(_split_length(dataset, eval_cfg.split), WindowSpec(lookback, horizon, stride)) == 0:
            message = (
                f"horizon {horizon} skipped: the {eval_cfg.split} split has "
                f"{_split_length(dataset, eval_cfg.split)} steps, fewer than T+K = {lookback + horizon}"
            )
            logger.warning(message)
            report.warnings.append(message)
            continue
        forecaster = forecaster_for(horizon)
        report.rows.append(
            evaluate_forecaster(forecaster, dataset, lookback, normalizer, eval_cfg, stride, report.warnings)
        )
    report.runtime_seconds = time.perf_counter() - started
    return report


def evaluate(
    params: ModelParams,
    cfg: ModelConfig,
    dataset: ForecastDataset,
    normalizer: Normalizer,
    eval_cfg: EvalConfig,
    stride: int = 1,
) -> MetricsReport:
    """Score a trained model at its own horizon."""
    return collect_report(
        lambda _horizon: ModelForecaster(params, cfg),
        [cfg.horizon],
        dataset,
        cfg.lookback,
        normalizer,
        eval_cfg,
        stride,
    )


def evaluate_baseline(
    name: str,
    dataset: ForecastDataset,
    lookback: int,
    normalizer: Normalizer,
    eval_cfg: EvalConfig,
    horizons: Optional[Sequence[int]] = None,
    stride: int = 1,
) -> MetricsReport:
    season = resolve_seasonality(dataset, eval_cfg)
    get_baseline(name, 1, season)  # fail fast on unknown names
    return collect_report(
        lambda horizon: get_baseline(name, horizon, season),
        list(horizons or eval_cfg.horizons),
        dataset,
        lookback,
        normalizer,
        eval_cfg,
        stride,
        label=name,
    )


# --- Benchmark protocol ---


@dataclass
class BenchmarkResult:
    report: MetricsReport
    trained: dict[int, tuple[ModelConfig, TrainResult]] = field(default_factory=dict)


def run_benchmark(run_cfg: RunConfig, dataset: ForecastDataset, normalizer: Optional[Normalizer] = None) -> BenchmarkResult:
    """Train one model per horizon at a fixed lookback and evaluate each on the test split."""
    normalizer = normalizer if normalizer is not None else Normalizer.fit(dataset)
    base = run_cfg.model.replace(n_vars=run_cfg.model.n_vars or dataset.n_vars)
    trained: dict[int, tuple[ModelConfig, TrainResult]] = {}

    def forecaster_for(horizon: int) -> Forecaster:
        cfg = base.replace(horizon=horizon)
        params = init_params(cfg)
        logger.info("benchmark: training horizon %d", horizon)
        result = train(cfg, params, dataset, run_cfg.train, normalizer, stride=run_cfg.data.stride)
        trained[horizon] = (cfg, result)
        return ModelForecaster(result.params, cfg)

    report = collect_report(
        forecaster_for,
        run_cfg.eval.horizons,
        dataset,
        base.lookback,
        normalizer,
        run_cfg.eval,
        run_cfg.data.stride,
    )
    report.config = run_cfg.to_dict()
    report.run_id = run_cfg.run_id()
    if not report.rows:
        raise DataError("no horizon fits the test split; " + "; ".join(report.warnings))
    return BenchmarkResult(report=report, trained=trained)


