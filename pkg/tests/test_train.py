import csv
import math
import os
import tempfile
import unittest
from pathlib import Path

import numpy as np
from numpy.testing import assert_array_equal

from stransformer.config import ModelConfig, TrainConfig
from stransformer.data import ForecastDataset, Normalizer, WindowSpec, chronological_splits, synth, windows
from stransformer.errors import DataError, DivergenceError
from stransformer.model import init_params
from stransformer.train import HistoryEntry, mean_window_mse, train, write_history_csv

SLOW = os.environ.get("STRANSFORMER_SLOW_TESTS") == "1"

CFG = ModelConfig(n_vars=3, lookback=12, horizon=4, d_model=8, d_scn=4, d_ff=16, n_blocks=1, tcn_layers=2)


def _train_config(**changes) -> TrainConfig:
    values = dict(lr=1e-2, batch_size=4, max_steps=6, eval_every=2, patience=0, log_every=0, seed=0)
    values.update(changes)
    return TrainConfig(**values)


def _run(tcfg: TrainConfig, dataset: ForecastDataset = None, seed: int = 0):
    dataset = dataset if dataset is not None else synth("sines", 3, 200, seed=1)
    params = init_params(CFG, seed=seed)
    return params, train(CFG, params, dataset, tcfg)


class TrainTests(unittest.TestCase):
    def test_zero_learning_rate_leaves_parameters_unchanged(self) -> None:
        before = init_params(CFG, seed=0).state()
        params, _ = _run(_train_config(lr=0.0))
        for name, value in params.state().items():
            assert_array_equal(value, before[name], name)

    def test_same_seed_same_run(self) -> None:
        first_params, first = _run(_train_config())
        second_params, second = _run(_train_config())
        self.assertEqual(first.data_checksum, second.data_checksum)
        self.assertEqual([e.train_loss for e in first.history], [e.train_loss for e in second.history])
        for name, value in first_params.state().items():
            assert_array_equal(value, second_params.state()[name], name)

    def test_shuffle_seed_changes_the_batches(self) -> None:
        _, first = _run(_train_config(seed=0))
        _, second = _run(_train_config(seed=1))
        self.assertNotEqual(first.data_checksum, second.data_checksum)

    def test_history_and_evaluation_schedule(self) -> None:
        _, result = _run(_train_config(max_steps=5, eval_every=2))
        self.assertEqual([e.step for e in result.history], [1, 2, 3, 4, 5])
        evaluated = [e.step for e in result.history if not math.isnan(e.val_mse)]
        self.assertEqual(evaluated, [2, 4, 5])
        self.assertEqual(result.steps_run, 5)
        self.assertTrue(math.isfinite(result.final_train_loss))

    def test_restores_the_best_validation_parameters(self) -> None:
        dataset = synth("sines", 3, 200, seed=1)
        params, result = _run(_train_config(lr=5e-2, max_steps=8, eval_every=1), dataset)
        val_scores = [e.val_mse for e in result.history]
        self.assertEqual(result.best_val_mse, min(val_scores))
        self.assertEqual(result.history[result.best_step - 1].val_mse, result.best_val_mse)
        val_pairs = windows(dataset, WindowSpec(CFG.lookback, CFG.horizon), "val", Normalizer.fit(dataset))
        self.assertEqual(mean_window_mse(params, CFG, val_pairs), result.best_val_mse)

    def test_patience_stops_a_flat_run(self) -> None:
        _, result = _run(_train_config(lr=0.0, max_steps=10, eval_every=1, patience=2))
        self.assertTrue(result.stopped_early)
        self.assertEqual(result.steps_run, 3)
        self.assertEqual(result.best_step, 1)

    def test_without_validation_windows(self) -> None:
        dataset = synth("sines", 3, 200, seed=1, split=(0.9, 0.0, 0.1))
        _, result = _run(_train_config(max_steps=3), dataset)
        self.assertTrue(math.isnan(result.best_val_mse))
        self.assertEqual(result.best_step, 3)

    def test_divergence_reports_the_step(self) -> None:
        series = np.full((3, 200), 1e200)
        dataset = ForecastDataset(names=["a", "b", "c"], series=series, splits=chronological_splits(200))
        with self.assertRaises(DivergenceError) as ctx:
            train(CFG, init_params(CFG), dataset, _train_config(), normalizer=Normalizer.identity(3))
        self.assertEqual(ctx.exception.step, 1)
        self.assertIsNone(ctx.exception.last_finite_loss)

    def test_too_short_for_one_window(self) -> None:
        with self.assertRaises(DataError):
            _run(_train_config(), synth("sines", 3, 20, seed=1))


class HistoryCsvTests(unittest.TestCase):
    def test_columns_and_empty_cells(self) -> None:
        history = [HistoryEntry(1, 0.5), HistoryEntry(2, 0.25, 0.125)]
        with tempfile.TemporaryDirectory() as temp_dir:
            path = Path(temp_dir) / "history.csv"
            write_history_csv(history, path)
            with open(path, newline="") as handle:
                rows = list(csv.reader(handle))
        self.assertEqual(rows, [["step", "train_loss", "val_mse"], ["1", "0.5", ""], ["2", "0.25", "0.125"]])


@unittest.skipUnless(SLOW, "set STRANSFORMER_SLOW_TESTS=1 to run")
class OverfitTests(unittest.TestCase):
    def test_memorizes_sixty_four_windows(self) -> None:
        cfg = ModelConfig(
            n_vars=3, lookback=24, horizon=8, d_model=16, d_scn=8, d_ff=32, n_blocks=1, tcn_layers=2
        )
        dataset = synth("sines", 3, 95, seed=0, split=(1.0, 0.0, 0.0))
        normalizer = Normalizer.fit(dataset)
        pairs = windows(dataset, WindowSpec(24, 8), "train", normalizer)
        self.assertEqual(len(pairs), 64)

        params = init_params(cfg, seed=0)
        tcfg = TrainConfig(lr=1e-3, batch_size=16, max_steps=2000, patience=0, log_every=0, seed=0)
        result = train(cfg, params, dataset, tcfg, normalizer)
        self.assertEqual(result.steps_run, 2000)
        self.assertLess(mean_window_mse(result.params, cfg, pairs), 1e-2)


if __name__ == "__main__":
    unittest.main()
