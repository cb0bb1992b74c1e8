"""Error taxonomy for stransformer.

Library code raises these; the CLI maps ``exit_code`` onto its process exit status.
"""

from __future__ import annotations

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


class STransformerError(Exception):
    """Base class for every error the package raises on purpose."""

    exit_code: int = EXIT_RUNTIME
    category: str = "runtime"


class ConfigError(STransformerError, ValueError):
    """Invalid configuration: unknown keys, violated invariants, bad overrides."""

    exit_code = EXIT_CONFIG
    category = "config"


class DimensionError(STransformerError, ValueError):
    """Operand shapes do not agree."""

    category = "dimension"


class UsageError(STransformerError):
    """An API was called in a state where it cannot work (unfitted normalizer, non-scalar loss)."""

    category = "usage"


class DataError(STransformerError):
    """Dataset content or layout problem."""

    exit_code = EXIT_DATA
    category = "data"


class ParseError(DataError):
    """A dataset file could not be parsed."""

    category = "parse"


class IntegrityError(DataError):
    """A stored artifact does not match the expected format or version."""

    category = "integrity"


class NumericalError(STransformerError):
    """A non-finite value appeared where a finite one is required."""

    category = "numerical"


class DivergenceError(NumericalError):
    """Training loss became non-finite."""

    def __init__(self, step: int, last_finite_loss: float | None) -> None:
        self.step = step
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"training diverged at step {step}; last finite loss was {last_finite_loss}"
        )


class GradientCheckError(NumericalError):
    """Finite-difference check could not be evaluated."""

    category = "gradcheck"


class MetricError(STransformerError):
    """A metric is undefined for the given inputs."""

    category = "metric"
