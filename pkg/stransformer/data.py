"""Datasets: ETT-style CSV ingestion, chronological splits, normalization, windows, synthetic series."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd

from stransformer.config import DataConfig
from stransformer.errors import ConfigError, DataError, ParseError, UsageError

logger = logging.getLogger(__name__)

DEFAULT_SPLIT = (0.7, 0.1, 0.2)
SPLIT_NAMES = ("train", "val", "test")
STD_FLOOR = 1e-8
SYNTH_KINDS = ("sines", "ar1", "trend_season")
SYNTH_START = "2016-07-01 00:00:00"
TIMESTAMP_COLUMN = "date"


@dataclass(frozen=True)
class WindowSpec:
    lookback: int
    horizon: int
    stride: int = 1

    def __post_init__(self) -> None:
        if self.lookback < 1 or self.horizon < 1 or self.stride < 1:
            raise ConfigError(
                f"window lookback, horizon and stride must be ≥ 1 (got {self.lookback}, "
                f"{self.horizon}, {self.stride})"
            )


@dataclass
class ForecastDataset:
    """An M×N multivariate series with chronological train/val/test ranges."""

    names: list[str]
    series: np.ndarray
    splits: dict[str, tuple[int, int]]
    timestamps: Optional[list[str]] = None
    frequency: Optional[int] = None  # seasonal period in steps
    freq_alias: Optional[str] = None
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def n_vars(self) -> int:
        return int(self.series.shape[0])

    @property
    def length(self) -> int:
        return int(self.series.shape[1])

    def split_range(self, split: str) -> tuple[int, int]:
        if split not in self.splits:
            raise UsageError(f"unknown split '{split}'; expected one of {', '.join(SPLIT_NAMES)}")
        return self.splits[split]

    def split_series(self, split: str) -> np.ndarray:
        start, end = self.split_range(split)
        return self.series[:, start:end]

    def select(self, column: str) -> "ForecastDataset":
        """Univariate view on one named variable."""
        if column not in self.names:
            raise ConfigError(f"target column '{column}' not in dataset columns {self.names}")
        index = self.names.index(column)
        return replace(self, names=[column], series=self.series[index : index + 1].copy())


def chronological_splits(length: int, ratios: Sequence[float] = DEFAULT_SPLIT) -> dict[str, tuple[int, int]]:
    """Contiguous, ordered, disjoint train/val/test ranges covering the series."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1 (got {list(ratios)})")
    n_train = int(length * ratios[0])
    n_test = int(length * ratios[2])
    n_val = length - n_train - n_test
    return {
        "train": (0, n_train),
        "val": (n_train, n_train + n_val),
        "test": (n_train + n_val, length),
    }


# --- Normalization ---


@dataclass
class Normalizer:
    """Per-variable z-score with statistics from the training split only."""

    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    @classmethod
    def fit(cls, dataset: ForecastDataset) -> "Normalizer":
        train = dataset.split_series("train")
        if train.shape[1] == 0:
            raise DataError("cannot fit a normalizer on an empty training split")
        return cls(mean=train.mean(axis=1), std=np.maximum(train.std(axis=1), STD_FLOOR))

    @classmethod
    def identity(cls, n_vars: int) -> "Normalizer":
        return cls(mean=np.zeros(n_vars), std=np.ones(n_vars))

    @property
    def fitted(self) -> bool:
        return self.mean is not None and self.std is not None

    def _require_fitted(self) -> None:
        if not self.fitted:
            raise UsageError("normalizer is not fitted; call Normalizer.fit on the training split first")

    def transform(self, values: np.ndarray) -> np.ndarray:
        self._require_fitted()
        return (values - self.mean[:, None]) / self.std[:, None]

    def inverse(self, values: np.ndarray) -> np.ndarray:
        self._require_fitted()
        return values * self.std[:, None] + self.mean[:, None]

    def to_dict(self) -> dict[str, list[float]]:
        self._require_fitted()
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict[str, list[float]]) -> "Normalizer":
        return cls(mean=np.asarray(data["mean"], dtype=np.float64), std=np.asarray(data["std"], dtype=np.float64))


# --- Windows ---


def window_count(length: int, spec: WindowSpec) -> int:
    span = length - spec.lookback - spec.horizon
    return span // spec.stride + 1 if span >= 0 else 0


def window_starts(dataset: ForecastDataset, spec: WindowSpec, split: str) -> list[int]:
    """Absolute start indices of every window lying wholly inside ``split``."""
    start, end = dataset.split_range(split)
    return [start + i * spec.stride for i in range(window_count(end - start, spec))]


def windows(
    dataset: ForecastDataset,
    spec: WindowSpec,
    split: str,
    normalizer: Optional[Normalizer] = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Ordered (x: M×T, y: M×K) pairs from ``split``, normalized when a normalizer is given."""
    series = normalizer.transform(dataset.series) if normalizer is not None else dataset.series
    pairs = []
    for s in window_starts(dataset, spec, split):
        x = series[:, s : s + spec.lookback]
        y = series[:, s + spec.lookback : s + spec.lookback + spec.horizon]
        pairs.append((x.copy(), y.copy()))
    return pairs


# --- CSV ---


def _seasonal_period(stamps: pd.DatetimeIndex) -> tuple[Optional[int], Optional[str]]:
    if len(stamps) < 3:
        return None, None
    try:
        alias = pd.infer_freq(stamps)
    except (TypeError, ValueError):
        alias = None
    step = pd.Series(stamps).diff().median()
    if pd.isna(step) or step <= pd.Timedelta(0):
        return None, alias
    day = pd.Timedelta(days=1)
    if step < day:
        return max(1, int(round(day / step))), alias
    days = step / day
    if days == 1:
        return 7, alias
    if days == 7:
        return 52, alias
    if 28 <= days <= 31:
        return 12, alias
    if 89 <= days <= 92:
        return 4, alias
    return 1, alias


def load_csv(
    path: Path | str,
    split: Sequence[float] = DEFAULT_SPLIT,
    max_rows: int = 0,
    frequency: int = 0,
) -> ForecastDataset:
    """Load an ETT-format CSV: header row, timestamp column, then one numeric column per variable."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as exc:
        raise ParseError(f"{path}: file is empty") from exc
    except pd.errors.ParserError as exc:
        raise ParseError(f"{path}: ragged row ({exc})") from exc
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not valid UTF-8 ({exc})") from exc

    if frame.shape[1] < 2:
        raise ParseError(f"{path}: need a timestamp column and at least one value column")
    if frame.shape[0] == 0:
        raise ParseError(f"{path}: no data rows")
    if max_rows > 0:
        frame = frame.iloc[:max_rows]

    names = [str(c) for c in frame.columns[1:]]
    raw = frame.iloc[:, 1:]
    stripped = raw.replace(r"^\s+|\s+$", "", regex=True)
    unparsed = stripped.apply(pd.to_numeric, errors="coerce").isna().to_numpy()
    if unparsed.any():
        row_index, col_index = np.argwhere(unparsed)[0]
        cell = raw.iat[row_index, col_index]
        where = f"{path}: line {row_index + 2}, column '{names[col_index]}'"  # header is line 1
        if pd.isna(cell) or str(cell).strip() == "":
            raise ParseError(f"{where}: missing value (ragged row or empty cell)")
        raise ParseError(f"{where}: non-numeric value {cell!r}")
    # Cast the strings directly so values match float() bit for bit.
    values = stripped.to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(values)):
        bad_row, bad_col = np.argwhere(~np.isfinite(values))[0]
        raise ParseError(
            f"{path}: line {bad_row + 2}, column '{names[bad_col]}': non-finite value"
        )

    timestamps = [str(t) for t in frame.iloc[:, 0]]
    parsed = pd.to_datetime(pd.Series(timestamps), errors="coerce")
    period, alias = (None, None)
    if not parsed.isna().any():
        period, alias = _seasonal_period(pd.DatetimeIndex(parsed))
    if frequency > 0:
        period = frequency

    series = values.T.copy()
    logger.info("loaded %s: %d variables × %d steps (period %s)", path, series.shape[0], series.shape[1], period)
    return ForecastDataset(
        names=names,
        series=series,
        splits=chronological_splits(series.shape[1], split),
        timestamps=timestamps,
        frequency=period,
        freq_alias=alias,
        meta={"source": str(path)},
    )


def write_csv(dataset: ForecastDataset, path: Path | str) -> None:
    """Dump in the load format; %.17g keeps every float64 bit-exact."""
    stamps = dataset.timestamps or [str(i) for i in range(dataset.length)]
    frame = pd.DataFrame({TIMESTAMP_COLUMN: stamps})
    for name, row in zip(dataset.names, dataset.series):
        frame[name] = row
    frame.to_csv(path, index=False, float_format="%.17g")


def future_timestamps(dataset: ForecastDataset, steps: int) -> list[str]:
    """The ``steps`` timestamps following the series, or t+1… labels when the frequency is unknown."""
    if dataset.timestamps and dataset.freq_alias:
        last = pd.Timestamp(dataset.timestamps[-1])
        stamps = pd.date_range(last, periods=steps + 1, freq=dataset.freq_alias)[1:]
        return [str(s) for s in stamps]
    return [f"t+{i}" for i in range(1, steps + 1)]


# --- Synthetic series ---


def synth(
    kind: str,
    n_vars: int,
    length: int,
    seed: int = 0,
    noise: float = 0.05,
    split: Sequence[float] = DEFAULT_SPLIT,
    coupling: float = 0.2,
) -> ForecastDataset:
    """Seeded synthetic dataset. Generative parameters are stored in ``meta``.

    - ``sines``: per-variable mixtures of sinusoids with periods dividing 24, plus noise
    - ``ar1``: vector AR(1) x_t = A x_{t-1} + e_t with off-diagonal coupling scaled by ``coupling``
    - ``trend_season``: linear trend + daily season + noise
    """
    if kind not in SYNTH_KINDS:
        raise UsageError(f"unknown synthetic kind '{kind}'. Available: {', '.join(SYNTH_KINDS)}")
    if n_vars < 1 or length < 1:
        raise ConfigError("synthetic series need n_vars ≥ 1 and length ≥ 1")
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    meta: dict[str, Any] = {"kind": kind, "seed": seed, "noise": noise}

    if kind == "sines":
        periods = rng.choice([6.0, 8.0, 12.0, 24.0], size=(n_vars, 2))
        amplitudes = rng.uniform(0.5, 2.0, size=(n_vars, 2))
        phases = rng.uniform(0.0, 2.0 * np.pi, size=(n_vars, 2))
        series = np.zeros((n_vars, length))
        for c in range(2):
            series += amplitudes[:, c : c + 1] * np.sin(
                2.0 * np.pi * t[None, :] / periods[:, c : c + 1] + phases[:, c : c + 1]
            )
        meta.update(periods=periods.tolist(), amplitudes=amplitudes.tolist(), phases=phases.tolist())
    elif kind == "ar1":
        phi = rng.uniform(0.5, 0.9, size=n_vars)
        off = rng.uniform(-1.0, 1.0, size=(n_vars, n_vars))
        np.fill_diagonal(off, 0.0)
        transition = np.diag(phi) + coupling * off / max(1, n_vars - 1)
        radius = np.max(np.abs(np.linalg.eigvals(transition)))
        if radius >= 0.99:
            transition *= 0.95 / radius
        series = np.zeros((n_vars, length))
        shocks = rng.standard_normal((n_vars, length))
        for step in range(1, length):
            series[:, step] = transition @ series[:, step - 1] + shocks[:, step]
        meta.update(transition=transition.tolist(), coupling=coupling)
    else:
        slopes = rng.uniform(-0.01, 0.01, size=(n_vars, 1))
        amplitudes = rng.uniform(0.5, 2.0, size=(n_vars, 1))
        phases = rng.uniform(0.0, 2.0 * np.pi, size=(n_vars, 1))
        series = slopes * t[None, :] + amplitudes * np.sin(2.0 * np.pi * t[None, :] / 24.0 + phases)
        meta.update(slopes=slopes.ravel().tolist(), amplitudes=amplitudes.ravel().tolist())

    if noise > 0 and kind != "ar1":
        series = series + noise * rng.standard_normal(series.shape)

    stamps = pd.date_range(SYNTH_START, periods=length, freq="h")
    return ForecastDataset(
        names=[f"v{i}" for i in range(n_vars)],
        series=series,
        splits=chronological_splits(length, split),
        timestamps=[str(s) for s in stamps],
        frequency=24,
        freq_alias="h",
        meta=meta,
    )


def load_dataset(config: DataConfig) -> ForecastDataset:
    """Build the dataset a run config describes: a CSV when ``path`` is set, else synthetic."""
    if config.path:
        if not Path(config.path).expanduser().exists():
            raise ConfigError(f"data.path points to a missing file: {config.path}")
        dataset = load_csv(config.path, split=config.split, max_rows=config.max_rows, frequency=config.frequency)
    else:
        dataset = synth(
            config.synth_kind,
            config.synth_vars,
            config.synth_length,
            seed=config.seed,
            noise=config.synth_noise,
            split=config.split,
        )
        if config.frequency > 0:
            dataset.frequency = config.frequency
    if config.target:
        dataset = dataset.select(config.target)
    return dataset
