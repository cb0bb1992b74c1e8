#!/usr/bin/env python3
"""Benchmark script to measure forward and forward+backward time per window.

Runs the full model at a few sizes on random inputs and reports median and
p99 latencies, which bound how many training steps fit in a time budget.
"""

import statistics
import time

import numpy as np

from stransformer.autodiff import Tape, mse_loss
from stransformer.config import ModelConfig
from stransformer.model import forward, init_params

SIZES = [
    # (M, T, K, F, blocks)
    (3, 24, 8, 16, 1),
    (7, 96, 96, 32, 1),
    (7, 96, 96, 64, 2),
    (21, 96, 96, 64, 2),
]


def time_forward(cfg: ModelConfig, x: np.ndarray, repeats: int) -> list[float]:
    params = init_params(cfg)
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        forward(x, params, cfg)
        times.append(time.perf_counter() - start)
    return times


def time_backward(cfg: ModelConfig, x: np.ndarray, y: np.ndarray, repeats: int) -> list[float]:
    params = init_params(cfg)
    times = []
    for _ in range(repeats):
        params.zero_grad()
        start = time.perf_counter()
        with Tape() as tape:
            loss = mse_loss(forward(x, params, cfg), y)
            tape.backward(loss)
        times.append(time.perf_counter() - start)
    return times


def benchmark_at_size(n_vars: int, lookback: int, horizon: int, d_model: int, n_blocks: int, repeats: int = 20) -> dict:
    """Benchmark one configuration."""
    print(f"\nBenchmarking M={n_vars} T={lookback} K={horizon} F={d_model} blocks={n_blocks}...")
    cfg = ModelConfig(
        n_vars=n_vars, lookback=lookback, horizon=horizon, d_model=d_model,
        d_ff=2 * d_model, n_blocks=n_blocks,
    )
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n_vars, lookback))
    y = rng.standard_normal((n_vars, horizon))

    fwd = time_forward(cfg, x, repeats)
    bwd = time_backward(cfg, x, y, repeats)
    return {
        "label": f"{n_vars}×{lookback}→{horizon} F{d_model}×{n_blocks}",
        "params": init_params(cfg).count(),
        "forward_p50": statistics.median(fwd),
        "forward_p99": np.percentile(fwd, 99),
        "backward_p50": statistics.median(bwd),
        "backward_p99": np.percentile(bwd, 99),
    }


def main():
    print("=" * 70)
    print("stransformer Forward/Backward Benchmark")
    print("=" * 70)

    results = [benchmark_at_size(*size) for size in SIZES]

    print("\n" + "=" * 70)
    print("Results Summary")
    print("=" * 70)
    print(f"{'Config':>22} {'Params':>9} {'fwd p50':>10} {'fwd p99':>10} {'f+b p50':>10} {'f+b p99':>10}")
    print("-" * 70)
    for r in results:
        print(
            f"{r['label']:>22} {r['params']:>9,} {r['forward_p50']*1000:>8.2f}ms {r['forward_p99']*1000:>8.2f}ms"
            f" {r['backward_p50']*1000:>8.2f}ms {r['backward_p99']*1000:>8.2f}ms"
        )

    if results:
        first = results[0]
        print("-" * 70)
        print("Projection for the smallest size:")
        print(f"  2000 steps × batch 16: ~{first['backward_p50'] * 2000 * 16:.0f} s")

    print("\n" + "=" * 70)


if __name__ == "__main__":
    main()
