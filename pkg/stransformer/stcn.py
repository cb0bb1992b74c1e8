"""Sequence and Temporal Convolutional Network.

Maps a window x ∈ R^(M×L_in) to R^(M×F) by concatenating two halves:

- temporal: a causal dilated TCN over each window (channels are the M
  variables), then a row-wise affine map L_in → F/2;
- sequence: an SCN that treats the L_in positions as channels and convolves
  along the variable axis with circular padding, then a row-wise affine map
  d_s → F/2 on its transpose.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from stransformer.autodiff import (
    Tensor,
    add,
    causal_dilated_conv1d,
    circular_conv1d,
    concat_cols,
    dropout,
    relu,
    transpose,
)
from stransformer.errors import ConfigError
from stransformer.layers import Affine, Conv, ParamInit

logger = logging.getLogger(__name__)

SCN_BLOCKS_PER_LAYER = 3


@dataclass
class TcnLayer:
    """Two causal convolutions sharing one dilation, plus an identity residual."""

    conv1: Conv
    conv2: Conv
    dilation: int


@dataclass
class TcnParams:
    layers: list[TcnLayer]

    @classmethod
    def init(
        cls, init: ParamInit, channels: int, kernel: int, dilations: Sequence[int]
    ) -> "TcnParams":
        return cls(
            layers=[
                TcnLayer(
                    conv1=Conv.init(init, channels, channels, kernel),
                    conv2=Conv.init(init, channels, channels, kernel),
                    dilation=int(dilation),
                )
                for dilation in dilations
            ]
        )


@dataclass
class ScnLayer:
    """Three chained circular convolutions with one kernel width."""

    blocks: list[Conv]

    @property
    def kernel(self) -> int:
        return self.blocks[0].kernel


@dataclass
class ScnParams:
    layers: list[ScnLayer]
    padding: str = "circular"

    @classmethod
    def init(
        cls,
        init: ParamInit,
        in_channels: int,
        channels: int,
        kernels: Sequence[int],
        padding: str = "circular",
    ) -> "ScnParams":
        layers = []
        c_in = in_channels
        for kernel in kernels:
            blocks = []
            for _ in range(SCN_BLOCKS_PER_LAYER):
                blocks.append(Conv.init(init, c_in, channels, kernel))
                c_in = channels
            layers.append(ScnLayer(blocks=blocks))
        return cls(layers=layers, padding=padding)

    @property
    def out_channels(self) -> int:
        return self.layers[-1].blocks[-1].bias.shape[0]


@dataclass
class StcnParams:
    tcn: TcnParams
    scn: ScnParams
    mlp1: Affine
    mlp2: Affine

    @classmethod
    def init(
        cls,
        init: ParamInit,
        n_vars: int,
        length_in: int,
        d_model: int,
        d_scn: int,
        tcn_kernel: int,
        dilations: Sequence[int],
        scn_kernels: Sequence[int],
        scn_padding: str = "circular",
    ) -> "StcnParams":
        if d_model % 2:
            raise ConfigError(f"STCN output width F must be even, got {d_model}")
        return cls(
            tcn=TcnParams.init(init, n_vars, tcn_kernel, dilations),
            scn=ScnParams.init(init, length_in, d_scn, scn_kernels, scn_padding),
            mlp1=Affine.init(init, length_in, d_model // 2),
            mlp2=Affine.init(init, d_scn, d_model // 2),
        )


def tcn_forward(
    x: Tensor,
    p: TcnParams,
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Each layer: conv → ReLU → conv → ReLU, added to the layer input."""
    hidden = x
    for index, layer in enumerate(p.layers):
        channels = layer.conv1.weight.shape[1]
        if hidden.shape[0] != channels:
            raise ConfigError(
                f"TCN layer {index} expects {channels} channels, input has {hidden.shape[0]}"
            )
        out = relu(causal_dilated_conv1d(hidden, layer.conv1.weight, layer.conv1.bias, layer.dilation))
        out = dropout(out, dropout_rate, rng)
        out = relu(causal_dilated_conv1d(out, layer.conv2.weight, layer.conv2.bias, layer.dilation))
        out = dropout(out, dropout_rate, rng)
        hidden = add(out, hidden)
    return hidden


def scn_forward(x_t: Tensor, p: ScnParams) -> Tensor:
    """Convolve along the variable axis of an L_in×M input; returns d_s×M."""
    n_vars = x_t.shape[1]
    hidden = x_t
    for index, layer in enumerate(p.layers):
        if layer.kernel > n_vars:
            raise ConfigError(
                f"SCN layer {index} kernel width {layer.kernel} exceeds the variable count "
                f"{n_vars}; use width 1 for univariate series"
            )
        for block in layer.blocks:
            hidden = relu(circular_conv1d(hidden, block.weight, block.bias, p.padding))
    return hidden


def stcn_forward(
    x: Tensor,
    p: StcnParams,
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Return concat(MLP1(TCN(x)), MLP2(SCN(xᵀ)ᵀ)) ∈ R^(M×F)."""
    if p.mlp1.n_out != p.mlp2.n_out:
        raise ConfigError(
            f"STCN halves differ ({p.mlp1.n_out} vs {p.mlp2.n_out}); F must be even"
        )
    temporal = p.mlp1(tcn_forward(x, p.tcn, dropout_rate, rng))
    sequence = p.mlp2(transpose(scn_forward(transpose(x), p.scn)))
    return concat_cols(temporal, sequence)
