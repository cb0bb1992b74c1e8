"""Sequence-guided mask attention.

Tokens are variables: each of the M rows of x ∈ R^(M×F) is one token. The value
projection passes through n mask blocks before the usual scaled dot-product
attention, and the result goes through residual + layer norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from stransformer.autodiff import (
    Tensor,
    add,
    hadamard,
    matmul,
    relu,
    scale,
    softmax_rows,
    transpose,
)
from stransformer.errors import ConfigError
from stransformer.layers import Affine, Norm, ParamInit


@dataclass
class AttnParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    norm: Norm

    @classmethod
    def init(cls, init: ParamInit, d_model: int, d_k: int) -> "AttnParams":
        return cls(
            w_q=init.uniform((d_model, d_k), fan_in=d_model),
            w_k=init.uniform((d_model, d_k), fan_in=d_model),
            w_v=init.uniform((d_model, d_k), fan_in=d_model),
            norm=Norm.init(init, d_model),
        )

    @property
    def key_dim(self) -> int:
        return self.w_q.shape[1]


@dataclass
class MaskBlock:
    weight: Tensor  # d_k × d_k
    mlp3: Affine  # d_k → d_a
    mlp4: Affine  # d_a → d_k
    hidden_norm: Norm


@dataclass
class MaskBlockParams:
    blocks: list[MaskBlock]
    embed_norm: Norm

    @classmethod
    def init(cls, init: ParamInit, d_k: int, d_mask: int, n_blocks: int) -> "MaskBlockParams":
        if n_blocks < 1:
            raise ConfigError(f"SeqMask needs at least one mask block, got {n_blocks}")
        blocks = [
            MaskBlock(
                weight=init.uniform((d_k, d_k), fan_in=d_k),
                mlp3=Affine.init(init, d_k, d_mask),
                mlp4=Affine.init(init, d_mask, d_k),
                hidden_norm=Norm.init(init, d_k),
            )
            for _ in range(n_blocks)
        ]
        return cls(blocks=blocks, embed_norm=Norm.init(init, d_k))


def seq_mask(
    v: Tensor,
    p: MaskBlockParams,
    mask_source: Optional[Tensor] = None,
    eps: float = 1e-5,
) -> Tensor:
    """Run the mask blocks over V and return V_n.

    Each block gates its input with a mask computed from ``mask_source`` (V
    itself by default) through that block's own two-layer MLP. Block 1 reads
    LayerNorm(V); later blocks read the previous block's output.
    """
    if not p.blocks:
        raise ConfigError("SeqMask needs at least one mask block (n ≥ 1)")
    source = v if mask_source is None else mask_source
    current = p.embed_norm(v, eps)
    for block in p.blocks:
        mask = block.mlp4(relu(block.mlp3(source)))
        gated = matmul(hadamard(current, mask), block.weight)
        current = relu(block.hidden_norm(gated, eps))
    return current


def _check_residual(x: Tensor, ap: AttnParams) -> None:
    if ap.key_dim != x.shape[1]:
        raise ConfigError(
            f"attention key width d_k={ap.key_dim} must equal the embedding width "
            f"F={x.shape[1]}: the residual adds O ∈ R^(M×d_k) to x ∈ R^(M×F)"
        )


def attention_weights(x: Tensor, ap: AttnParams) -> Tensor:
    """softmax(QKᵀ/√d_k) over the M variable tokens."""
    q = matmul(x, ap.w_q)
    k = matmul(x, ap.w_k)
    return softmax_rows(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(ap.key_dim)))


def masked_attention(
    x: Tensor,
    ap: AttnParams,
    mp: MaskBlockParams,
    mask_source: str = "value",
    eps: float = 1e-5,
) -> Tensor:
    """LayerNorm(softmax(QKᵀ/√d_k)·SeqMask(xW_V) + x)."""
    _check_residual(x, ap)
    v = matmul(x, ap.w_v)
    v_n = seq_mask(v, mp, mask_source=x if mask_source == "stcn" else None, eps=eps)
    out = matmul(attention_weights(x, ap), v_n)
    return ap.norm(add(out, x), eps)


def full_attention(x: Tensor, ap: AttnParams, eps: float = 1e-5) -> Tensor:
    """Plain attention with the mask blocks bypassed: LayerNorm(softmax(QKᵀ/√d_k)·xW_V + x)."""
    _check_residual(x, ap)
    out = matmul(attention_weights(x, ap), matmul(x, ap.w_v))
    return ap.norm(add(out, x), eps)
