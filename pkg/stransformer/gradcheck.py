"""Central finite-difference gradient checking against the tape's analytic gradients."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from stransformer.autodiff import Tape, Tensor, mse_loss
from stransformer.config import ModelConfig
from stransformer.errors import ConfigError, GradientCheckError, UsageError
from stransformer.layers import iter_named_tensors
from stransformer.model import ModelParams, forward, init_params
from stransformer.seqmask import full_attention, masked_attention
from stransformer.stcn import stcn_forward

logger = logging.getLogger(__name__)

ScalarFn = Callable[[], Tensor]

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference comparison."""

    max_rel_error: float
    worst_param: Optional[str] = None
    worst_coordinate: Optional[tuple[int, ...]] = None
    per_param: dict[str, float] = field(default_factory=dict)
    coordinates_checked: int = 0

    def passed(self, tolerance: float = DEFAULT_TOLERANCE) -> bool:
        return self.max_rel_error < tolerance


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def _scalar(fn: ScalarFn) -> float:
    return fn().item()


def analytic_gradients(fn: ScalarFn, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Run one taped forward/backward and return a copy of each parameter's gradient."""
    for param in params:
        param.zero_grad()
    with Tape() as tape:
        loss = fn()
        # A result that depends on no parameter was never recorded: every gradient is zero.
        if loss.requires_grad:
            tape.backward(loss)
    return [
        param.grad.copy() if param.grad is not None else np.zeros_like(param.data)
        for param in params
    ]


def gradient_check_report(
    fn: ScalarFn,
    params: Sequence[Tensor],
    h: float = DEFAULT_STEP,
    names: Optional[Sequence[str]] = None,
) -> GradCheckReport:
    """Compare analytic gradients with (f(θ+h) − f(θ−h)) / 2h coordinate by coordinate.

    ``fn`` must be deterministic and build its result from ``params``.
    """
    if h <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {h}")
    for param in params:
        if not param.requires_grad:
            raise UsageError(f"parameter {param!r} does not require gradients")
    labels = list(names) if names is not None else [
        param.name or f"param[{i}]" for i, param in enumerate(params)
    ]

    baseline = _scalar(fn)
    if not math.isfinite(baseline):
        raise GradientCheckError(f"function value is not finite at the base point ({baseline})")

    analytic = analytic_gradients(fn, params)
    report = GradCheckReport(max_rel_error=0.0)

    for label, param, grad in zip(labels, params, analytic):
        flat = param.data.reshape(-1)
        worst_here = 0.0
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + h
            plus = _scalar(fn)
            flat[index] = original - h
            minus = _scalar(fn)
            flat[index] = original
            coordinate = tuple(int(c) for c in np.unravel_index(index, param.shape))
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise GradientCheckError(
                    f"non-finite function value perturbing {label} at coordinate {coordinate}"
                )
            numeric = (plus - minus) / (2.0 * h)
            error = relative_error(float(grad.reshape(-1)[index]), numeric)
            report.coordinates_checked += 1
            if error > worst_here:
                worst_here = error
            if error > report.max_rel_error:
                report.max_rel_error = error
                report.worst_param = label
                report.worst_coordinate = coordinate
        report.per_param[label] = worst_here

    logger.debug(
        "gradient check: %d coordinates, max relative error %.3e at %s%s",
        report.coordinates_checked,
        report.max_rel_error,
        report.worst_param,
        report.worst_coordinate,
    )
    return report


def finite_diff_check(fn: ScalarFn, params: Sequence[Tensor], h: float = DEFAULT_STEP) -> float:
    """Return the maximum relative error between analytic and central-difference gradients."""
    return gradient_check_report(fn, params, h).max_rel_error


def toy_model_config() -> ModelConfig:
    """Small configuration that every coordinate of can be checked in seconds."""
    return ModelConfig(
        n_vars=3, lookback=8, horizon=2, d_model=8, d_scn=4, d_ff=16,
        n_mask_blocks=1, n_blocks=1, tcn_layers=2, scn_kernels=[3],
    )


def check_point_params(cfg: ModelConfig, seed: int = 0, bias_bound: float = 0.5) -> ModelParams:
    """Seeded parameters with every bias drawn from U(−bias_bound, bias_bound).

    Zero biases put ReLU inputs exactly on the kink wherever causal padding feeds
    zeros, and a central difference across the kink disagrees with the subgradient.
    """
    params = init_params(cfg, seed=seed)
    rng = np.random.default_rng([seed, 1])
    for name, tensor in iter_named_tensors(params):
        if name.endswith("bias"):
            tensor.data[...] = rng.uniform(-bias_bound, bias_bound, size=tensor.shape)
    return params


def module_gradient_checks(
    cfg: ModelConfig,
    seed: int = 0,
    h: float = DEFAULT_STEP,
) -> dict[str, GradCheckReport]:
    """Check the first block's STCN and attention sublayers and the whole model on random data."""
    params = check_point_params(cfg, seed)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((cfg.n_vars, cfg.lookback)))
    y = rng.standard_normal((cfg.n_vars, cfg.horizon))
    h_in = Tensor(rng.standard_normal((cfg.n_vars, cfg.d_model)))
    h_target = rng.standard_normal((cfg.n_vars, cfg.d_model))
    block = params.blocks[0]

    def run(fn: ScalarFn, owner: object, prefix: str) -> GradCheckReport:
        named = list(iter_named_tensors(owner, prefix))
        return gradient_check_report(fn, [t for _, t in named], h, names=[n for n, _ in named])

    reports: dict[str, GradCheckReport] = {}
    if block.stcn is not None:
        reports["stcn"] = run(lambda: mse_loss(stcn_forward(x, block.stcn), h_target), block.stcn, "stcn")
    if block.mask is not None:
        reports["seqmask"] = run(
            lambda: mse_loss(
                masked_attention(h_in, block.attn, block.mask, cfg.mask_source, cfg.layer_norm_eps), h_target
            ),
            [block.attn, block.mask],
            "attention",
        )
    else:
        reports["attention"] = run(
            lambda: mse_loss(full_attention(h_in, block.attn, cfg.layer_norm_eps), h_target),
            block.attn,
            "attention",
        )
    reports["model"] = run(lambda: mse_loss(forward(x, params, cfg), y), params, "")
    return reports
