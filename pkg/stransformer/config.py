"""Configuration management for stransformer.

A run is described by four sections, ``[data]``, ``[model]``, ``[train]`` and
``[eval]``, loaded from TOML with dataclass defaults for everything left out.
"""

from __future__ import annotations

import dataclasses
import difflib
import hashlib
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional

import toml

from stransformer.errors import ConfigError

OUT_DIR_ENV = "STRANSFORMER_OUT_DIR"
DEFAULT_OUT_DIR = "runs"

# Short model notation accepted as config keys.
KEY_ALIASES: dict[str, str] = {
    "M": "n_vars",
    "T": "lookback",
    "K": "horizon",
    "F": "d_model",
    "d_s": "d_scn",
    "d_a": "d_mask",
    "n": "n_mask_blocks",
}


def get_out_dir(explicit: Optional[str] = None) -> Path:
    """Return the artifact root: explicit value, else $STRANSFORMER_OUT_DIR, else ./runs."""
    if explicit:
        return Path(explicit).expanduser()
    if env_dir := os.environ.get(OUT_DIR_ENV):
        return Path(env_dir).expanduser()
    return Path(DEFAULT_OUT_DIR)


class AblationVariant(str, Enum):
    """Architecture variants compared in the ablation grid."""

    ORIGINAL = "original"
    FULL_ATTENTION = "full_attention"
    FFN_FOR_STCN = "ffn_for_stcn"
    NO_ATTENTION = "no_attention"
    NO_STCN = "no_stcn"

    @property
    def design(self) -> str:
        return {
            AblationVariant.ORIGINAL: "Original",
            AblationVariant.FULL_ATTENTION: "Replace",
            AblationVariant.FFN_FOR_STCN: "Replace",
            AblationVariant.NO_ATTENTION: "w/o",
            AblationVariant.NO_STCN: "w/o",
        }[self]

    @property
    def temporal(self) -> str:
        return {
            AblationVariant.FFN_FOR_STCN: "FFN",
            AblationVariant.NO_STCN: "w/o",
        }.get(self, "STCN")

    @property
    def attention(self) -> str:
        return {
            AblationVariant.FULL_ATTENTION: "Full attention",
            AblationVariant.NO_ATTENTION: "w/o",
        }.get(self, "SeqMask")

    @classmethod
    def parse(cls, value: "str | AblationVariant") -> "AblationVariant":
        if isinstance(value, AblationVariant):
            return value
        normalized = str(value).strip().lower().replace("-", "_")
        for variant in cls:
            if variant.value == normalized:
                return variant
        valid = ", ".join(v.value for v in cls)
        raise ConfigError(f"unknown variant '{value}'. Valid variants: {valid}")


@dataclass
class DataConfig:
    """Where the series comes from and how it is split."""

    path: str = ""  # empty → synthetic
    synth_kind: str = "sines"
    synth_vars: int = 3
    synth_length: int = 2000
    synth_noise: float = 0.05
    max_rows: int = 0  # 0 → all rows
    split: list[float] = field(default_factory=lambda: [0.7, 0.1, 0.2])
    target: str = ""  # column name for univariate mode
    frequency: int = 0  # seasonal period; 0 → inferred from timestamps
    stride: int = 1
    seed: int = 0


@dataclass
class ModelConfig:
    """Every dimension and hyperparameter of the network.

    ``n_vars`` may be left at 0 and filled from the dataset before validation.
    """

    n_vars: int = 0
    lookback: int = 96
    horizon: int = 96
    d_model: int = 64
    d_k: int = 0  # 0 → d_model
    d_scn: int = 16
    d_mask: int = 0  # 0 → 2·d_model
    d_ff: int = 128
    n_mask_blocks: int = 1
    n_blocks: int = 2
    tcn_layers: int = 3
    tcn_kernel: int = 3
    tcn_dilations: list[int] = field(default_factory=list)  # empty → 1, 2, 4, …
    scn_kernels: list[int] = field(default_factory=lambda: [3, 5])
    scn_padding: str = "circular"
    clamp_scn_kernels: bool = True
    mask_source: str = "value"
    dropout: float = 0.0
    layer_norm_eps: float = 1e-5
    instance_norm: bool = False
    variant: str = AblationVariant.ORIGINAL.value
    seed: int = 0

    @property
    def key_dim(self) -> int:
        return self.d_k or self.d_model

    @property
    def mask_width(self) -> int:
        return self.d_mask or 2 * self.key_dim

    @property
    def ablation(self) -> AblationVariant:
        return AblationVariant.parse(self.variant)

    def dilations(self) -> list[int]:
        if self.tcn_dilations:
            return list(self.tcn_dilations)
        return [2**layer for layer in range(self.tcn_layers)]

    def scn_kernel_widths(self) -> list[int]:
        """SCN kernel schedule, clamped to the variable count when clamping is on."""
        if self.clamp_scn_kernels and self.n_vars >= 1:
            return [min(width, self.n_vars) for width in self.scn_kernels]
        return list(self.scn_kernels)

    def replace(self, **changes: Any) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def problems(self) -> list[str]:
        issues: list[str] = []
        for name in (
            "n_vars", "lookback", "horizon", "d_model", "d_scn", "d_ff",
            "n_mask_blocks", "n_blocks", "tcn_layers", "tcn_kernel",
        ):
            if getattr(self, name) < 1:
                issues.append(f"{name} must be ≥ 1 (got {getattr(self, name)})")
        if self.d_model % 2:
            issues.append(f"d_model (F) must be even so STCN can split it in halves (got {self.d_model})")
        if self.key_dim != self.d_model:
            issues.append(
                f"d_k ({self.key_dim}) must equal d_model ({self.d_model}): the attention "
                "residual adds O ∈ R^(M×d_k) to x ∈ R^(M×F)"
            )
        if self.mask_width < 1:
            issues.append(f"d_mask must be ≥ 1 (got {self.mask_width})")
        if len(self.dilations()) != self.tcn_layers:
            issues.append(
                f"tcn_dilations lists {len(self.dilations())} entries for {self.tcn_layers} layers"
            )
        if any(d < 1 for d in self.dilations()):
            issues.append("tcn dilations must be ≥ 1")
        if not self.scn_kernels:
            issues.append("scn_kernels must list at least one layer")
        if any(width < 1 for width in self.scn_kernels):
            issues.append("scn kernel widths must be ≥ 1")
        if self.n_vars >= 1 and any(width > self.n_vars for width in self.scn_kernel_widths()):
            issues.append(
                f"scn kernel widths {self.scn_kernels} exceed the variable count {self.n_vars}; "
                "enable clamp_scn_kernels or use width 1 for univariate data"
            )
        if self.scn_padding not in ("circular", "zero"):
            issues.append(f"scn_padding must be 'circular' or 'zero' (got '{self.scn_padding}')")
        if self.mask_source not in ("value", "stcn"):
            issues.append(f"mask_source must be 'value' or 'stcn' (got '{self.mask_source}')")
        if not 0.0 <= self.dropout < 1.0:
            issues.append(f"dropout must be in [0, 1) (got {self.dropout})")
        if self.layer_norm_eps <= 0:
            issues.append("layer_norm_eps must be positive")
        try:
            AblationVariant.parse(self.variant)
        except ConfigError as exc:
            issues.append(str(exc))
        return issues

    def validate(self) -> "ModelConfig":
        issues = self.problems()
        if issues:
            raise ConfigError("invalid model config: " + "; ".join(issues))
        return self


@dataclass
class TrainConfig:
    """Optimizer and loop settings."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    max_steps: int = 500
    eval_every: int = 50
    patience: int = 5  # evaluations without improvement; 0 disables early stopping
    grad_clip: float = 0.0  # 0 → off
    log_every: int = 50
    seed: int = 0

    def validate(self) -> "TrainConfig":
        issues = []
        if self.lr < 0:
            issues.append(f"lr must be ≥ 0 (got {self.lr})")
        if self.batch_size < 1:
            issues.append(f"batch_size must be ≥ 1 (got {self.batch_size})")
        if self.max_steps < 0:
            issues.append("max_steps must be ≥ 0")
        if self.eval_every < 1:
            issues.append("eval_every must be ≥ 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            issues.append("betas must lie in [0, 1)")
        if self.eps <= 0:
            issues.append("eps must be positive")
        if self.grad_clip < 0:
            issues.append("grad_clip must be ≥ 0")
        if issues:
            raise ConfigError("invalid train config: " + "; ".join(issues))
        return self


@dataclass
class EvalConfig:
    """Evaluation protocol."""

    horizons: list[int] = field(default_factory=lambda: [96, 192, 336, 720])
    scale: str = "normalized"  # normalized | raw
    m4_metrics: bool = False
    seasonality: int = 0  # 0 → dataset frequency, else 1
    split: str = "test"
    workers: int = 1

    def validate(self) -> "EvalConfig":
        if self.scale not in ("normalized", "raw"):
            raise ConfigError(f"eval scale must be 'normalized' or 'raw' (got '{self.scale}')")
        if self.split not in ("train", "val", "test"):
            raise ConfigError(f"eval split must be train, val or test (got '{self.split}')")
        if self.workers < 1:
            raise ConfigError("eval workers must be ≥ 1")
        if any(h < 1 for h in self.horizons):
            raise ConfigError(f"horizons must be ≥ 1 (got {self.horizons})")
        return self


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    """The fully resolved configuration of one run."""

    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        config = cls()
        for section, values in data.items():
            if section not in _SECTIONS:
                raise ConfigError(_unknown_message("section", section, list(_SECTIONS)))
            if not isinstance(values, Mapping):
                raise ConfigError(f"[{section}] must be a table")
            for key, value in values.items():
                _set_field(config, section, key, value)
        return config

    def set_seed(self, seed: int) -> None:
        self.data.seed = seed
        self.model.seed = seed
        self.train.seed = seed

    def run_id(self) -> str:
        """Git-style short id: the first 12 hex digits of the SHA-1 of the resolved config."""
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(payload).hexdigest()[:12]


def _unknown_message(kind: str, name: str, valid: list[str]) -> str:
    suggestion = difflib.get_close_matches(name, valid, n=1)
    hint = f"; did you mean '{suggestion[0]}'?" if suggestion else ""
    return f"unknown {kind} '{name}'{hint} Valid: {', '.join(valid)}"


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    location = f"{section}.{key}"
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{location} must be a boolean (got {value!r})")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(f"{location} must be an integer (got {value!r})")
        try:
            number = float(value)
        except ValueError as exc:
            raise ConfigError(f"{location} must be an integer (got {value!r})") from exc
        if not number.is_integer():
            raise ConfigError(f"{location} must be an integer (got {value!r})")
        return int(number)
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{location} must be a number (got {value!r})") from exc
    if isinstance(default, list):
        items = value if isinstance(value, list) else [v for v in str(value).split(",") if v.strip()]
        if not default:
            # Only tcn_dilations starts empty; it holds integers.
            return [_coerce(section, key, item, 0) for item in items]
        return [_coerce(section, key, item, default[0]) for item in items]
    return str(value)


def _set_field(config: RunConfig, section: str, key: str, value: Any) -> None:
    target = getattr(config, section)
    name = KEY_ALIASES.get(key, key) if section == "model" else key
    valid = [f.name for f in dataclasses.fields(target)]
    if name not in valid:
        raise ConfigError(_unknown_message(f"key in [{section}]", key, valid))
    default = getattr(type(target)(), name)
    setattr(target, name, _coerce(section, name, value, default))


def parse_override_value(raw: str) -> Any:
    """Parse an override as a TOML value, falling back to the raw string."""
    try:
        return toml.loads(f"value = {raw}")["value"]
    except Exception:
        return raw


def apply_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Apply ``{"section.key": value}`` overrides in place and return the config."""
    for dotted, raw in overrides.items():
        section, sep, key = dotted.partition(".")
        if not sep or not key:
            raise ConfigError(f"override '{dotted}' must look like section.key")
        if section not in _SECTIONS:
            raise ConfigError(_unknown_message("section", section, list(_SECTIONS)))
        value = parse_override_value(raw) if isinstance(raw, str) else raw
        _set_field(config, section, key, value)
    return config


def load_run_config(path: Optional[Path] = None) -> RunConfig:
    """Load a run config from TOML, returning defaults when no path is given."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = toml.load(path)
    except toml.TomlDecodeError as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    return RunConfig.from_dict(data)


def save_run_config(config: RunConfig, path: Path) -> None:
    with open(path, "w") as handle:
        toml.dump(config.to_dict(), handle)
