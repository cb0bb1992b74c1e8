"""The stacked sTransformer: blocks of STCN → sequence-guided mask attention → FFN, then a projection head.

Ablation variants swap or drop one component per block:

- ``full_attention``: mask blocks bypassed (V used directly)
- ``ffn_for_stcn``: STCN replaced by an affine embedding followed by a position-wise FFN
- ``no_attention``: attention sublayer removed, O_A = LayerNorm(h)
- ``no_stcn``: STCN replaced by a single affine embedding
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from stransformer.autodiff import Tensor, add, dropout, hadamard, relu
from stransformer.config import AblationVariant, ModelConfig
from stransformer.data import Normalizer
from stransformer.errors import DimensionError, NumericalError
from stransformer.layers import Affine, Norm, ParamInit, iter_named_tensors
from stransformer.seqmask import AttnParams, MaskBlockParams, full_attention, masked_attention
from stransformer.stcn import StcnParams, stcn_forward

logger = logging.getLogger(__name__)


@dataclass
class EmbedParams:
    """Replacement for STCN in the ablations: affine L_in → F, optionally followed by an FFN."""

    embed: Affine
    hidden: Optional[Affine] = None
    out: Optional[Affine] = None

    def __call__(self, x: Tensor) -> Tensor:
        h = self.embed(x)
        if self.hidden is not None and self.out is not None:
            h = self.out(relu(self.hidden(h)))
        return h


@dataclass
class FfnParams:
    mlp5: Affine
    mlp6: Affine
    norm: Norm


@dataclass
class BlockParams:
    attn: AttnParams
    ffn: FfnParams
    stcn: Optional[StcnParams] = None
    embed: Optional[EmbedParams] = None
    mask: Optional[MaskBlockParams] = None


@dataclass
class ModelParams:
    blocks: list[BlockParams]
    head: Affine

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(iter_named_tensors(self))

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state(self) -> dict[str, np.ndarray]:
        """Copies of every parameter array keyed by dotted name."""
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = sorted(set(named) - set(state))
        extra = sorted(set(state) - set(named))
        if missing or extra:
            raise DimensionError(f"parameter keys differ: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, param in named.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise DimensionError(f"{name}: stored shape {value.shape} != expected {param.shape}")
            param.data[...] = value


def _block_input_length(cfg: ModelConfig, index: int) -> int:
    # Later blocks run on the F-dimensional feature axis as if it were time.
    return cfg.lookback if index == 0 else cfg.d_model


def _init_block(init: ParamInit, cfg: ModelConfig, index: int) -> BlockParams:
    variant = cfg.ablation
    length_in = _block_input_length(cfg, index)
    block = BlockParams(
        attn=AttnParams.init(init, cfg.d_model, cfg.key_dim),
        ffn=FfnParams(
            mlp5=Affine.init(init, cfg.d_model, cfg.d_ff),
            mlp6=Affine.init(init, cfg.d_ff, cfg.d_model),
            norm=Norm.init(init, cfg.d_model),
        ),
    )
    if variant in (AblationVariant.FFN_FOR_STCN, AblationVariant.NO_STCN):
        block.embed = EmbedParams(embed=Affine.init(init, length_in, cfg.d_model))
        if variant is AblationVariant.FFN_FOR_STCN:
            block.embed.hidden = Affine.init(init, cfg.d_model, cfg.d_ff)
            block.embed.out = Affine.init(init, cfg.d_ff, cfg.d_model)
    else:
        block.stcn = StcnParams.init(
            init,
            n_vars=cfg.n_vars,
            length_in=length_in,
            d_model=cfg.d_model,
            d_scn=cfg.d_scn,
            tcn_kernel=cfg.tcn_kernel,
            dilations=cfg.dilations(),
            scn_kernels=cfg.scn_kernel_widths(),
            scn_padding=cfg.scn_padding,
        )
    if variant is not AblationVariant.FULL_ATTENTION:
        block.mask = MaskBlockParams.init(init, cfg.key_dim, cfg.mask_width, cfg.n_mask_blocks)
    return block


def init_params(cfg: ModelConfig, seed: Optional[int] = None) -> ModelParams:
    """Seeded parameter set whose shapes follow from ``cfg`` alone."""
    cfg.validate()
    init = ParamInit(cfg.seed if seed is None else seed)
    blocks = [_init_block(init, cfg, index) for index in range(cfg.n_blocks)]
    params = ModelParams(blocks=blocks, head=Affine.init(init, cfg.d_model, cfg.horizon))
    for name, tensor in params.named_parameters().items():
        tensor.name = name
    return params


def param_count(cfg: ModelConfig) -> int:
    cfg.validate()
    init = ParamInit(None)
    blocks = [_init_block(init, cfg, index) for index in range(cfg.n_blocks)]
    return ModelParams(blocks=blocks, head=Affine.init(init, cfg.d_model, cfg.horizon)).count()


def _check_finite(t: Tensor, block: int, sublayer: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericalError(f"non-finite activation in block {block}, sublayer {sublayer}")
    return t


def _embed(h: Tensor, block: BlockParams, cfg: ModelConfig, rng: Optional[np.random.Generator]) -> Tensor:
    if block.stcn is not None:
        return stcn_forward(h, block.stcn, cfg.dropout, rng)
    return block.embed(h)


def _attend(h: Tensor, block: BlockParams, cfg: ModelConfig) -> Tensor:
    variant = cfg.ablation
    if variant is AblationVariant.NO_ATTENTION:
        return block.attn.norm(h, cfg.layer_norm_eps)
    if variant is AblationVariant.FULL_ATTENTION:
        return full_attention(h, block.attn, cfg.layer_norm_eps)
    return masked_attention(h, block.attn, block.mask, cfg.mask_source, cfg.layer_norm_eps)


def forward(
    x: Union[Tensor, np.ndarray],
    params: ModelParams,
    cfg: ModelConfig,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Map one normalized window x ∈ R^(M×T) to a forecast in R^(M×K).

    ``rng`` drives dropout and is only passed during training.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape != (cfg.n_vars, cfg.lookback):
        raise DimensionError(f"input window has shape {x.shape}, expected ({cfg.n_vars}, {cfg.lookback})")
    if not np.all(np.isfinite(x.data)):
        raise NumericalError("input window contains non-finite values")

    center = spread = None
    if cfg.instance_norm:
        center = x.data.mean(axis=1, keepdims=True)
        spread = np.maximum(x.data.std(axis=1, keepdims=True), 1e-8)
        x = Tensor((x.data - center) / spread)

    h = x
    for index, block in enumerate(params.blocks):
        h = _check_finite(_embed(h, block, cfg, rng), index, "stcn")
        a = _check_finite(_attend(h, block, cfg), index, "attention")
        f = block.ffn.mlp6(dropout(relu(block.ffn.mlp5(a)), cfg.dropout, rng))
        h = _check_finite(block.ffn.norm(add(f, a), cfg.layer_norm_eps), index, "ffn")

    out = _check_finite(params.head(h), len(params.blocks), "projection")
    if cfg.instance_norm:
        out = add(
            hadamard(out, Tensor(np.repeat(spread, cfg.horizon, axis=1))),
            Tensor(np.repeat(center, cfg.horizon, axis=1)),
        )
    return out


def predict_window(
    x_raw: np.ndarray,
    params: ModelParams,
    cfg: ModelConfig,
    normalizer: Normalizer,
) -> np.ndarray:
    """Forecast in original units: normalize, run the model, invert the normalization."""
    x = normalizer.transform(np.asarray(x_raw, dtype=np.float64))
    return normalizer.inverse(forward(x, params, cfg).data)
