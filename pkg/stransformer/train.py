"""Training loop: mean-over-batch MSE on normalized windows, Adam, early stopping on validation MSE."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from stransformer.autodiff import Tape, Tensor, add, mse_loss, scale
from stransformer.config import ModelConfig, TrainConfig
from stransformer.data import ForecastDataset, Normalizer, WindowSpec, windows
from stransformer.errors import DataError, DivergenceError, NumericalError
from stransformer.model import ModelParams, forward
from stransformer.optim import Adam, clip_grad_norm

logger = logging.getLogger(__name__)

Window = tuple[np.ndarray, np.ndarray]


@dataclass
class HistoryEntry:
    step: int
    train_loss: float
    val_mse: float = math.nan


@dataclass
class TrainResult:
    params: ModelParams
    history: list[HistoryEntry] = field(default_factory=list)
    best_step: int = 0
    best_val_mse: float = math.nan
    steps_run: int = 0
    stopped_early: bool = False
    data_checksum: str = ""

    @property
    def final_train_loss(self) -> float:
        return self.history[-1].train_loss if self.history else math.nan


def batch_loss(
    params: ModelParams,
    cfg: ModelConfig,
    batch: Sequence[Window],
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Mean over windows of each window's MSE."""
    total: Optional[Tensor] = None
    for x, y in batch:
        loss = mse_loss(forward(x, params, cfg, rng), y)
        total = loss if total is None else add(total, loss)
    return scale(total, 1.0 / len(batch))


def mean_window_mse(params: ModelParams, cfg: ModelConfig, pairs: Sequence[Window]) -> float:
    """Untaped evaluation MSE averaged over windows."""
    if not pairs:
        return math.nan
    errors = [float(np.mean((forward(x, params, cfg).data - y) ** 2)) for x, y in pairs]
    return float(np.mean(errors))


class _BatchStream:
    """Seeded per-epoch permutations cut into consecutive batches."""

    def __init__(self, n_items: int, batch_size: int, rng: np.random.Generator) -> None:
        self._n = n_items
        self._batch_size = batch_size
        self._rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._cursor = 0
        self.epoch = 0

    def next(self) -> np.ndarray:
        if self._cursor >= self._order.size:
            self._order = self._rng.permutation(self._n)
            self._cursor = 0
            self.epoch += 1
        batch = self._order[self._cursor : self._cursor + self._batch_size]
        self._cursor += self._batch_size
        return batch


def train(
    cfg: ModelConfig,
    params: ModelParams,
    dataset: ForecastDataset,
    tcfg: TrainConfig,
    normalizer: Optional[Normalizer] = None,
    stride: int = 1,
) -> TrainResult:
    """Fit ``params`` in place and return them with the loss history.

    When validation windows exist, the parameters with the best validation MSE
    are restored before returning.
    """
    cfg.validate()
    tcfg.validate()
    normalizer = normalizer if normalizer is not None else Normalizer.fit(dataset)
    spec = WindowSpec(cfg.lookback, cfg.horizon, stride)
    train_pairs = windows(dataset, spec, "train", normalizer)
    if not train_pairs:
        raise DataError(
            f"no training windows: train split has {dataset.split_range('train')[1]} steps, "
            f"need at least T+K = {cfg.lookback + cfg.horizon}"
        )
    val_pairs = windows(dataset, spec, "val", normalizer)

    shuffle_seed, dropout_seed = np.random.SeedSequence(tcfg.seed).spawn(2)
    stream = _BatchStream(len(train_pairs), tcfg.batch_size, np.random.default_rng(shuffle_seed))
    dropout_rng = np.random.default_rng(dropout_seed) if cfg.dropout > 0 else None

    named = params.named_parameters()
    optimizer = Adam(lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps)
    checksum = hashlib.sha1()
    result = TrainResult(params=params)
    best_val = math.inf
    best_state: Optional[dict[str, np.ndarray]] = None
    evals_without_gain = 0
    last_finite: Optional[float] = None

    logger.info(
        "training %s: %d train / %d val windows, %d parameters, %d steps",
        cfg.variant, len(train_pairs), len(val_pairs), params.count(), tcfg.max_steps,
    )

    for step in range(1, tcfg.max_steps + 1):
        indices = stream.next()
        batch = [train_pairs[i] for i in indices]
        checksum.update(indices.astype(np.int64).tobytes())
        for x, y in batch:
            checksum.update(x.tobytes())
            checksum.update(y.tobytes())

        params.zero_grad()
        with Tape() as tape:
            try:
                loss = batch_loss(params, cfg, batch, dropout_rng)
            except NumericalError as exc:
                raise DivergenceError(step, last_finite) from exc
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise DivergenceError(step, last_finite)
            tape.backward(loss)
        last_finite = loss_value

        if tcfg.grad_clip > 0:
            clip_grad_norm(named, tcfg.grad_clip)
        optimizer.step(named)

        entry = HistoryEntry(step=step, train_loss=loss_value)
        if tcfg.log_every and step % tcfg.log_every == 0:
            logger.info("step %d  epoch %d  loss %.6f", step, stream.epoch, loss_value)

        stop = False
        if val_pairs and (step % tcfg.eval_every == 0 or step == tcfg.max_steps):
            entry.val_mse = mean_window_mse(params, cfg, val_pairs)
            if entry.val_mse < best_val:
                best_val = entry.val_mse
                best_state = params.state()
                result.best_step = step
                evals_without_gain = 0
                logger.info("step %d  val mse %.6f (best)", step, entry.val_mse)
            else:
                evals_without_gain += 1
                if tcfg.patience and evals_without_gain >= tcfg.patience:
                    logger.info("early stop at step %d; best val mse %.6f at step %d", step, best_val, result.best_step)
                    stop = True
        result.history.append(entry)
        result.steps_run = step
        if stop:
            result.stopped_early = True
            break

    if best_state is not None:
        params.load_state(best_state)
        result.best_val_mse = best_val
    else:
        result.best_step = result.steps_run
    result.data_checksum = checksum.hexdigest()
    return result


def write_history_csv(history: Sequence[HistoryEntry], path: Path) -> None:
    """Plot-ready loss history: step, train_loss, val_mse (empty when not evaluated)."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["step", "train_loss", "val_mse"])
        for entry in history:
            writer.writerow([
                entry.step,
                repr(entry.train_loss),
                "" if math.isnan(entry.val_mse) else repr(entry.val_mse),
            ])
