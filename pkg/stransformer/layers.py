"""Parameter containers shared by the STCN, attention and model modules."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Any, Iterator, Optional, Sequence

import numpy as np

from stransformer.autodiff import Tensor, affine, layer_norm_rows


class ParamInit:
    """Seeded parameter factory.

    Weights are uniform in ±sqrt(1/fan_in), biases zero, norm gains one. With
    ``seed=None`` weights are zero, which is enough when only shapes matter.
    """

    def __init__(self, seed: Optional[int]) -> None:
        self._rng = np.random.default_rng(seed) if seed is not None else None

    def uniform(self, shape: Sequence[int], fan_in: int) -> Tensor:
        if self._rng is None:
            return Tensor(np.zeros(tuple(shape)), requires_grad=True)
        bound = math.sqrt(1.0 / max(1, fan_in))
        return Tensor(self._rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True)

    @staticmethod
    def zeros(shape: Sequence[int]) -> Tensor:
        return Tensor(np.zeros(tuple(shape)), requires_grad=True)

    @staticmethod
    def ones(shape: Sequence[int]) -> Tensor:
        return Tensor(np.ones(tuple(shape)), requires_grad=True)


@dataclass
class Affine:
    """Row-wise affine map x·W + b with W of shape in×out."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, init: ParamInit, n_in: int, n_out: int) -> "Affine":
        return cls(weight=init.uniform((n_in, n_out), fan_in=n_in), bias=init.zeros((n_out,)))

    @property
    def n_out(self) -> int:
        return self.bias.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.weight, self.bias)


@dataclass
class Conv:
    """1-D convolution weights, C_out×C_in×k, with one bias per output channel."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, init: ParamInit, c_in: int, c_out: int, kernel: int) -> "Conv":
        return cls(
            weight=init.uniform((c_out, c_in, kernel), fan_in=c_in * kernel),
            bias=init.zeros((c_out,)),
        )

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]


@dataclass
class Norm:
    """Layer-norm gain and bias."""

    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, init: ParamInit, width: int) -> "Norm":
        return cls(gain=init.ones((width,)), bias=init.zeros((width,)))

    def __call__(self, x: Tensor, eps: float = 1e-5) -> Tensor:
        return layer_norm_rows(x, self.gain, self.bias, eps)


def iter_named_tensors(obj: Any, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses and lists in field order, yielding dotted names for every Tensor."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            child = getattr(obj, f.name)
            yield from iter_named_tensors(child, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for index, child in enumerate(obj):
            yield from iter_named_tensors(child, f"{prefix}.{index}" if prefix else str(index))
