import math
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from stransformer.autodiff import Tensor
from stransformer.errors import ConfigError
from stransformer.layers import ParamInit, iter_named_tensors
from stransformer.seqmask import (
    AttnParams,
    MaskBlockParams,
    attention_weights,
    full_attention,
    masked_attention,
    seq_mask,
)

EPS = 1e-5


def _layer_norm(a: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    centered = a - a.mean(axis=1, keepdims=True)
    return centered / np.sqrt((centered**2).mean(axis=1, keepdims=True) + EPS) * gain + bias


def _softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _reference_mask(v: np.ndarray, mp: MaskBlockParams, source: np.ndarray) -> np.ndarray:
    current = _layer_norm(v, mp.embed_norm.gain.data, mp.embed_norm.bias.data)
    for block in mp.blocks:
        hidden = np.maximum(source @ block.mlp3.weight.data + block.mlp3.bias.data, 0.0)
        mask = hidden @ block.mlp4.weight.data + block.mlp4.bias.data
        gated = (current * mask) @ block.weight.data
        current = np.maximum(
            _layer_norm(gated, block.hidden_norm.gain.data, block.hidden_norm.bias.data), 0.0
        )
    return current


def _reference_attention(x: np.ndarray, ap: AttnParams, mp: MaskBlockParams, mask_source: str) -> np.ndarray:
    d_k = ap.w_q.shape[1]
    v = x @ ap.w_v.data
    v_n = _reference_mask(v, mp, x if mask_source == "stcn" else v)
    weights = _softmax((x @ ap.w_q.data) @ (x @ ap.w_k.data).T / math.sqrt(d_k))
    return _layer_norm(weights @ v_n + x, ap.norm.gain.data, ap.norm.bias.data)


def _params(seed: int, d_model: int = 8, d_mask: int = 5, n_blocks: int = 2) -> tuple[AttnParams, MaskBlockParams]:
    init = ParamInit(seed)
    ap = AttnParams.init(init, d_model, d_model)
    mp = MaskBlockParams.init(init, d_model, d_mask, n_blocks)
    # Non-trivial norm gains and biases so the oracle exercises them.
    rng = np.random.default_rng(seed + 1000)
    for name, tensor in list(iter_named_tensors(ap)) + list(iter_named_tensors(mp)):
        if name.endswith("gain"):
            tensor.data[:] = rng.uniform(0.5, 1.5, size=tensor.shape)
        elif name.endswith("bias"):
            tensor.data[:] = rng.normal(size=tensor.shape)
    return ap, mp


class SeqMaskTests(unittest.TestCase):
    def test_matches_straight_line_reference(self) -> None:
        rng = np.random.default_rng(0)
        for trial in range(20):
            ap, mp = _params(trial, n_blocks=1 + trial % 3)
            x = rng.standard_normal((int(rng.integers(1, 7)), 8))
            for source in ("value", "stcn"):
                with self.subTest(trial=trial, source=source):
                    got = masked_attention(Tensor(x), ap, mp, mask_source=source).data
                    assert_allclose(got, _reference_attention(x, ap, mp, source), rtol=0, atol=1e-12)

    def test_mask_output_is_non_negative(self) -> None:
        rng = np.random.default_rng(1)
        _, mp = _params(1, n_blocks=3)
        for _ in range(10):
            v = Tensor(rng.standard_normal((5, 8)) * 3.0)
            self.assertTrue(np.all(seq_mask(v, mp).data >= 0.0))

    def test_zero_query_and_key_give_uniform_weights(self) -> None:
        ap, _ = _params(2)
        ap.w_q.data[:] = 0.0
        ap.w_k.data[:] = 0.0
        weights = attention_weights(Tensor(np.random.default_rng(2).standard_normal((4, 8))), ap).data
        assert_array_equal(weights, np.full((4, 4), 0.25))

    def test_single_variable_attends_to_itself(self) -> None:
        ap, mp = _params(3)
        x = Tensor(np.random.default_rng(3).standard_normal((1, 8)))
        assert_array_equal(attention_weights(x, ap).data, [[1.0]])
        self.assertEqual(masked_attention(x, ap, mp).shape, (1, 8))

    def test_key_width_must_match_embedding(self) -> None:
        init = ParamInit(4)
        ap = AttnParams.init(init, 8, 6)
        mp = MaskBlockParams.init(init, 6, 4, 1)
        x = Tensor(np.zeros((3, 8)))
        with self.assertRaises(ConfigError) as ctx:
            masked_attention(x, ap, mp)
        self.assertIn("d_k=6", str(ctx.exception))
        with self.assertRaises(ConfigError):
            full_attention(x, ap)

    def test_needs_at_least_one_mask_block(self) -> None:
        with self.assertRaises(ConfigError):
            MaskBlockParams.init(ParamInit(0), 8, 4, 0)

    def test_variable_permutation_equivariance(self) -> None:
        rng = np.random.default_rng(5)
        ap, mp = _params(5)
        x = rng.standard_normal((6, 8))
        base = masked_attention(Tensor(x), ap, mp).data
        for _ in range(5):
            order = rng.permutation(6)
            assert_allclose(masked_attention(Tensor(x[order]), ap, mp).data, base[order], atol=1e-12)

    def test_full_attention_skips_the_mask(self) -> None:
        ap, _ = _params(6)
        x = np.random.default_rng(6).standard_normal((4, 8))
        weights = _softmax((x @ ap.w_q.data) @ (x @ ap.w_k.data).T / math.sqrt(8))
        expected = _layer_norm(weights @ (x @ ap.w_v.data) + x, ap.norm.gain.data, ap.norm.bias.data)
        assert_allclose(full_attention(Tensor(x), ap).data, expected, rtol=0, atol=1e-12)


if __name__ == "__main__":
    unittest.main()
