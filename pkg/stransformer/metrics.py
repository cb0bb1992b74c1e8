"""
Forecast error metrics on numpy arrays.

MSE and MAE for the long-term protocol; sMAPE, MASE and OWA with M4-competition definitions.
"""

from __future__ import annotations

import numpy as np

from stransformer.errors import DimensionError, MetricError

Forecast = np.ndarray
Target = np.ndarray


def _pair(target: Target, forecast: Forecast) -> tuple[np.ndarray, np.ndarray]:
    target = np.asarray(target, dtype=np.float64)
    forecast = np.asarray(forecast, dtype=np.float64)
    if target.shape != forecast.shape:
        raise DimensionError(f"target shape {target.shape} != forecast shape {forecast.shape}")
    return target, forecast


def mse(target: Target, forecast: Forecast) -> float:
    target, forecast = _pair(target, forecast)
    return float(np.mean((forecast - target) ** 2))


def mae(target: Target, forecast: Forecast) -> float:
    target, forecast = _pair(target, forecast)
    return float(np.mean(np.abs(forecast - target)))


def smape(target: Target, forecast: Forecast) -> float:
    """
    sMAPE as used in M4: (200/n)·Σ|ŷ−y| / (|y|+|ŷ|), counting 0/0 terms as 0.
    """
    target, forecast = _pair(target, forecast)
    denom = np.abs(target) + np.abs(forecast)
    ratio = np.divide(np.abs(forecast - target), denom, out=np.zeros_like(denom), where=denom != 0)
    return float(200.0 * np.mean(ratio))


def seasonal_naive_scale(insample: np.ndarray, seasonality: int) -> float:
    """Mean absolute seasonal difference of the in-sample series (the MASE denominator)."""
    insample = np.asarray(insample, dtype=np.float64).ravel()
    if seasonality < 1:
        raise MetricError(f"seasonality must be ≥ 1, got {seasonality}")
    if insample.size <= seasonality:
        raise MetricError(
            f"in-sample length {insample.size} must exceed the seasonality {seasonality}"
        )
    return float(np.mean(np.abs(insample[seasonality:] - insample[:-seasonality])))


def mase(target: Target, forecast: Forecast, insample: np.ndarray, seasonality: int) -> float:
    """
    MASE for one series: mean|ŷ−y| divided by the in-sample seasonal-naive error.
    """
    scale = seasonal_naive_scale(insample, seasonality)
    if scale == 0.0:
        raise MetricError("seasonal-naive in-sample error is zero; MASE is undefined")
    return mae(target, forecast) / scale


def mase_per_series(
    target: Target, forecast: Forecast, insample: np.ndarray, seasonality: int
) -> np.ndarray:
    """MASE row by row for M-row arrays; undefined rows raise naming the series index."""
    target, forecast = _pair(target, forecast)
    insample = np.asarray(insample, dtype=np.float64)
    values = np.empty(target.shape[0])
    for row in range(target.shape[0]):
        try:
            values[row] = mase(target[row], forecast[row], insample[row], seasonality)
        except MetricError as exc:
            raise MetricError(f"series {row}: {exc}") from exc
    return values


def owa(smape_value: float, mase_value: float, baseline_smape: float, baseline_mase: float) -> float:
    """Overall weighted average relative to a baseline: ½(sMAPE/sMAPE₀ + MASE/MASE₀)."""
    if baseline_smape <= 0 or baseline_mase <= 0:
        raise MetricError(
            f"OWA baselines must be positive (sMAPE₀={baseline_smape}, MASE₀={baseline_mase})"
        )
    return 0.5 * (smape_value / baseline_smape + mase_value / baseline_mase)
