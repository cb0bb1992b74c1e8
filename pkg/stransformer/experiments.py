"""Experiment drivers: the five-variant ablation grid and one-knob parameter sweeps."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import pandas as pd

from stransformer.config import AblationVariant, RunConfig, apply_overrides
from stransformer.data import ForecastDataset, Normalizer
from stransformer.errors import ConfigError, STransformerError
from stransformer.evaluate import MetricsReport, run_benchmark
from stransformer.model import param_count

logger = logging.getLogger(__name__)

ABLATION_ORDER = (
    AblationVariant.ORIGINAL,
    AblationVariant.FULL_ATTENTION,
    AblationVariant.FFN_FOR_STCN,
    AblationVariant.NO_ATTENTION,
    AblationVariant.NO_STCN,
)

# knob name → (config section, field)
SWEEP_KNOBS: dict[str, tuple[str, str]] = {
    "lookback": ("model", "lookback"),
    "lr": ("train", "lr"),
    "d_model": ("model", "d_model"),
    "n_blocks": ("model", "n_blocks"),
}


def _copy_config(run_cfg: RunConfig) -> RunConfig:
    return RunConfig.from_dict(run_cfg.to_dict())


@dataclass
class ExperimentRow:
    """One trained configuration; ``report`` is None when the run failed."""

    label: dict[str, str]
    report: Optional[MetricsReport] = None
    error: Optional[str] = None
    data_checksum: str = ""
    n_params: int = 0

    @property
    def ok(self) -> bool:
        return self.report is not None


@dataclass
class ExperimentGrid:
    label_columns: list[str]
    horizons: list[int]
    rows: list[ExperimentRow] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        records: list[dict[str, Any]] = []
        for row in self.rows:
            record: dict[str, Any] = dict(row.label)
            by_horizon = {h.horizon: h for h in row.report.rows} if row.report else {}
            for horizon in self.horizons:
                metrics = by_horizon.get(horizon)
                record[f"{horizon} MSE"] = metrics.mse if metrics else None
                record[f"{horizon} MAE"] = metrics.mae if metrics else None
            average = row.report.average() if row.report and row.report.rows else {}
            record["Avg MSE"] = average.get("mse")
            record["Avg MAE"] = average.get("mae")
            record["params"] = row.n_params
            record["checksum"] = row.data_checksum[:12]
            record["error"] = row.error or ""
            records.append(record)
        return pd.DataFrame.from_records(records)

    def to_table(self) -> str:
        frame = self.to_frame()
        if not frame["error"].astype(bool).any():
            frame = frame.drop(columns=["error"])
        return frame.to_string(index=False, na_rep="-", float_format=lambda v: f"{v:.4f}") + "\n"

    def to_csv(self, path: Path) -> None:
        self.to_frame().to_csv(path, index=False)


def _combined_checksum(checksums: Sequence[str]) -> str:
    digest = hashlib.sha1()
    for checksum in checksums:
        digest.update(checksum.encode())
    return digest.hexdigest()


def _run_row(label: dict[str, str], run_cfg: RunConfig, dataset: ForecastDataset, normalizer: Normalizer) -> ExperimentRow:
    row = ExperimentRow(label=label)
    try:
        model_cfg = run_cfg.model.replace(n_vars=run_cfg.model.n_vars or dataset.n_vars)
        row.n_params = param_count(model_cfg)
        result = run_benchmark(run_cfg, dataset, normalizer)
    except Exception as exc:
        # One failing configuration must not abort the rest of the grid.
        category = exc.category if isinstance(exc, STransformerError) else type(exc).__name__
        row.error = f"{category}: {exc}"
        logger.warning("%s failed: %s", " / ".join(label.values()), row.error)
        return row
    row.report = result.report
    row.data_checksum = _combined_checksum(
        [result.trained[h][1].data_checksum for h in sorted(result.trained)]
    )
    return row


def run_ablation(
    dataset: ForecastDataset,
    run_cfg: RunConfig,
    normalizer: Optional[Normalizer] = None,
    variants: Sequence[AblationVariant] = ABLATION_ORDER,
) -> ExperimentGrid:
    """Train and evaluate every ablation variant with the same seed and data order."""
    normalizer = normalizer if normalizer is not None else Normalizer.fit(dataset)
    grid = ExperimentGrid(label_columns=["Design", "Temporal", "Attention"], horizons=list(run_cfg.eval.horizons))
    for variant in variants:
        cfg = _copy_config(run_cfg)
        cfg.model.variant = variant.value
        logger.info("ablation: %s", variant.value)
        label = {"Design": variant.design, "Temporal": variant.temporal, "Attention": variant.attention}
        grid.rows.append(_run_row(label, cfg, dataset, normalizer))
    return grid


def parse_sweep_values(knob: str, raw: str) -> list[Any]:
    if knob not in SWEEP_KNOBS:
        valid = ", ".join(SWEEP_KNOBS)
        raise ConfigError(f"unknown sweep knob '{knob}'. Valid knobs: {valid}")
    values = [item.strip() for item in raw.split(",") if item.strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    return values


def run_sweep(
    knob: str,
    values: Sequence[Any],
    dataset: ForecastDataset,
    run_cfg: RunConfig,
    normalizer: Optional[Normalizer] = None,
) -> ExperimentGrid:
    """Train and evaluate once per listed value of one knob; no search beyond the list."""
    if knob not in SWEEP_KNOBS:
        valid = ", ".join(SWEEP_KNOBS)
        raise ConfigError(f"unknown sweep knob '{knob}'. Valid knobs: {valid}")
    section, key = SWEEP_KNOBS[knob]
    normalizer = normalizer if normalizer is not None else Normalizer.fit(dataset)
    grid = ExperimentGrid(label_columns=[knob], horizons=list(run_cfg.eval.horizons))
    for value in values:
        cfg = apply_overrides(_copy_config(run_cfg), {f"{section}.{key}": value})
        resolved = getattr(getattr(cfg, section), key)
        logger.info("sweep: %s = %s", knob, resolved)
        grid.rows.append(_run_row({knob: str(resolved)}, cfg, dataset, normalizer))
    return grid
