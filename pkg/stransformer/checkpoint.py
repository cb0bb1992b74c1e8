"""Model checkpoints: named float64 arrays plus a JSON header in one .npz container."""

from __future__ import annotations

import dataclasses
import json
import logging
import tempfile
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from stransformer.config import ModelConfig, RunConfig
from stransformer.data import Normalizer
from stransformer.errors import ConfigError, DimensionError, IntegrityError
from stransformer.model import ModelParams, init_params

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "stransformer-checkpoint"
CHECKPOINT_VERSION = 1
META_KEY = "__meta__"
_ENTRY_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    cfg: ModelConfig
    params: ModelParams
    normalizer: Optional[Normalizer] = None
    meta: dict[str, Any] = field(default_factory=dict)


def _write_archive(handle, arrays: dict[str, np.ndarray]) -> None:
    # Fixed entry timestamps keep identical parameters byte-identical on disk.
    with zipfile.ZipFile(handle, mode="w", compression=zipfile.ZIP_STORED) as archive:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ENTRY_DATE)
            with archive.open(info, mode="w", force_zip64=True) as entry:
                np.lib.format.write_array(entry, np.asarray(arrays[name]), allow_pickle=False)


def save_checkpoint(
    path: Path,
    cfg: ModelConfig,
    params: ModelParams,
    normalizer: Optional[Normalizer] = None,
    extra: Optional[dict[str, Any]] = None,
) -> None:
    """Write atomically: a temp file in the target directory, then replace."""
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": dataclasses.asdict(cfg),
        "normalizer": normalizer.to_dict() if normalizer is not None and normalizer.fitted else None,
        "extra": extra or {},
    }
    arrays = params.state()
    arrays[META_KEY] = np.array(json.dumps(header, sort_keys=True))

    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(mode="wb", dir=path.parent, delete=False, suffix=".tmp") as handle:
        temp_path = Path(handle.name)
        _write_archive(handle, arrays)
    temp_path.replace(path)
    logger.info("saved checkpoint %s (%d tensors)", path, len(arrays) - 1)


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise IntegrityError(
            f"{path} is not a readable {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} file ({exc})"
        ) from exc

    if META_KEY not in arrays:
        raise IntegrityError(
            f"{path}: expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found no header"
        )
    try:
        header = json.loads(str(arrays.pop(META_KEY)))
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}: header is not valid JSON ({exc})") from exc

    found = f"{header.get('format')} v{header.get('version')}"
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise IntegrityError(
            f"{path}: expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {found}"
        )

    try:
        cfg = RunConfig.from_dict({"model": header["model"]}).model
        params = init_params(cfg)
        params.load_state(arrays)
    except (ConfigError, DimensionError, KeyError) as exc:
        raise IntegrityError(f"{path}: parameters do not match the stored config ({exc})") from exc

    normalizer = Normalizer.from_dict(header["normalizer"]) if header.get("normalizer") else None
    return Checkpoint(cfg=cfg, params=params, normalizer=normalizer, meta=header.get("extra", {}))
