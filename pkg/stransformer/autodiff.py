"""Dense float64 tensors and a define-by-run reverse-mode tape.

Operations record themselves on the tape that is active in the current context
(``with Tape() as tape: ...``). Outside a tape nothing is recorded, which is how
evaluation forwards run. Element-wise operations never broadcast; the only
broadcast is the explicit ``add_row_bias``.
"""

from __future__ import annotations

import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from stransformer.errors import ConfigError, DimensionError, UsageError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], tuple]

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "stransformer_active_tape", default=None
)


class Tensor:
    """A dense row-major array of 64-bit reals with an optional gradient slot."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> None:
        array = np.array(data, dtype=np.float64, order="C")
        if array.ndim == 0:
            array = array.reshape(1)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[int] = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data, dtype=np.float64)
        out.requires_grad = requires_grad
        out.grad = None
        out.node = None
        out.name = None
        return out

    @classmethod
    def zeros(cls, shape: Sequence[int], requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(tuple(shape)), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if grad.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {grad.shape} does not match tensor shape {self.shape}"
            )
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad += grad

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Use as a context manager; the tape is bound to the current thread's context
    only, so concurrent forwards on separate threads keep separate tapes.
    """

    def __init__(self) -> None:
        self._records: list[_Record] = []
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc_info) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self._records)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn) -> None:
        output.node = len(self._records)
        self._records.append(_Record(inputs=inputs, output=output, backward=backward))

    def owns(self, tensor: Tensor) -> bool:
        node = tensor.node
        return node is not None and node < len(self._records) and self._records[node].output is tensor

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor that requires it.

        Gradients add onto whatever is already stored; callers zero them between steps.
        """
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.owns(loss):
            raise UsageError("loss was not recorded on this tape")

        pending: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        for record in reversed(self._records[: loss.node + 1]):
            upstream = pending.pop(record.output.node, None)
            if upstream is None:
                continue
            record.output.accumulate_grad(upstream)
            input_grads = record.backward(upstream)
            for tensor, grad in zip(record.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if self.owns(tensor):
                    if tensor.node in pending:
                        pending[tensor.node] = pending[tensor.node] + grad
                    else:
                        pending[tensor.node] = grad
                else:
                    tensor.accumulate_grad(grad)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._from_op(data, requires_grad=tracked)
    if tracked:
        tape.record(inputs, out, backward)
    return out


def _as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _require_2d(op: str, a: Tensor) -> None:
    if a.data.ndim != 2:
        raise DimensionError(f"{op}: expected a 2-D tensor, got shape {a.shape}")


# --- Element-wise ---


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("hadamard", a, b)
    a_data, b_data = a.data, b.data
    return _result(a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    # Subgradient at exactly zero is zero.
    positive = a.data > 0.0
    return _result(np.where(positive, a.data, 0.0), (a,), lambda g: (g * positive,))


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is supplied."""
    if rate <= 0.0 or rng is None:
        return a
    if rate >= 1.0:
        raise ConfigError(f"dropout rate must be < 1, got {rate}")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _result(a.data * keep, (a,), lambda g: (g * keep,))


# --- Linear algebra and layout ---


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d("matmul", a)
    _require_2d("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    a_data, b_data = a.data, b.data
    return _result(
        a_data @ b_data,
        (a, b),
        lambda g: (g @ b_data.T, a_data.T @ g),
    )


def add_row_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a length-q vector to every row of a p×q tensor."""
    _require_2d("add_row_bias", a)
    if bias.shape != (a.shape[1],):
        raise DimensionError(f"add_row_bias: bias shape {bias.shape} does not fit rows of {a.shape}")
    return _result(a.data + bias.data[None, :], (a, bias), lambda g: (g, g.sum(axis=0)))


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add_row_bias(matmul(x, weight), bias)


def transpose(a: Tensor) -> Tensor:
    _require_2d("transpose", a)
    return _result(a.data.T, (a,), lambda g: (g.T,))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    _require_2d("concat_cols", a)
    _require_2d("concat_cols", b)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: row counts differ for shapes {a.shape} and {b.shape}")
    split = a.shape[1]
    return _result(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :split], g[:, split:]),
    )


# --- Reductions and losses ---


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.array([a.data.sum()]), (a,), lambda g: (np.full(shape, g[0]),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def mse_loss(prediction: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    """Mean squared error over all elements, as a single-element tensor."""
    target = _as_tensor(target)
    _same_shape("mse_loss", prediction, target)
    diff = prediction.data - target.data
    n = diff.size

    def backward(g: np.ndarray) -> tuple:
        grad = (2.0 * g[0] / n) * diff
        return grad, -grad

    return _result(np.array([np.mean(diff * diff)]), (prediction, target), backward)


# --- Row-wise normalizers ---


def softmax_rows(a: Tensor) -> Tensor:
    _require_2d("softmax_rows", a)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> tuple:
        return (probs * (g - (g * probs).sum(axis=1, keepdims=True)),)

    return _result(probs, (a,), backward)


def layer_norm_rows(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization with population variance, then gain and bias."""
    _require_2d("layer_norm_rows", a)
    q = a.shape[1]
    if q < 1:
        raise DimensionError("layer_norm_rows: rows must have at least one column")
    if gain.shape != (q,) or bias.shape != (q,):
        raise DimensionError(
            f"layer_norm_rows: gain {gain.shape} / bias {bias.shape} do not match width {q}"
        )
    if eps <= 0.0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")

    centered = a.data - a.data.mean(axis=1, keepdims=True)
    variance = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(variance + eps)
    normed = centered * inv_std
    gain_data = gain.data

    def backward(g: np.ndarray) -> tuple:
        d_normed = g * gain_data[None, :]
        d_input = inv_std * (
            d_normed
            - d_normed.mean(axis=1, keepdims=True)
            - normed * (d_normed * normed).mean(axis=1, keepdims=True)
        )
        return d_input, (g * normed).sum(axis=0), g.sum(axis=0)

    return _result(normed * gain_data[None, :] + bias.data[None, :], (a, gain, bias), backward)


# --- Convolutions ---


def _conv_by_index(
    op: str,
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    padded: np.ndarray,
    taps: np.ndarray,
    unpad: slice,
) -> Tensor:
    """Convolution where ``taps[j, t]`` is the padded position read by kernel tap j at output t."""
    patches = padded[:, taps]  # C_in × k × L
    weight_data = weight.data
    out = np.einsum("oik,ikl->ol", weight_data, patches) + bias.data[:, None]
    kernel = taps.shape[0]

    def backward(g: np.ndarray) -> tuple:
        d_weight = np.einsum("ol,ikl->oik", g, patches)
        d_patches = np.einsum("oik,ol->ikl", weight_data, g)
        d_padded = np.zeros_like(padded)
        for j in range(kernel):
            # Positions within one tap row are distinct, so plain += is exact.
            d_padded[:, taps[j]] += d_patches[:, j, :]
        return d_padded[:, unpad], d_weight, g.sum(axis=1)

    return _result(out, (x, weight, bias), backward)


def _check_conv_shapes(op: str, x: Tensor, weight: Tensor, bias: Tensor) -> int:
    _require_2d(op, x)
    if weight.data.ndim != 3:
        raise DimensionError(f"{op}: weight must be C_out×C_in×k, got shape {weight.shape}")
    c_out, c_in, kernel = weight.shape
    if c_in != x.shape[0]:
        raise DimensionError(
            f"{op}: weight expects {c_in} input channels, input has shape {x.shape}"
        )
    if bias.shape != (c_out,):
        raise DimensionError(f"{op}: bias shape {bias.shape} does not match {c_out} output channels")
    if kernel < 1:
        raise ConfigError(f"{op}: kernel width must be at least 1")
    return kernel


def causal_dilated_conv1d(x: Tensor, weight: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """Convolution along the length axis whose output at t reads only inputs at positions ≤ t.

    The input is left-padded with (k−1)·dilation zeros, so the output keeps length L.
    """
    kernel = _check_conv_shapes("causal_dilated_conv1d", x, weight, bias)
    if dilation < 1:
        raise ConfigError(f"causal_dilated_conv1d: dilation must be ≥ 1, got {dilation}")
    channels, length = x.shape
    pad = (kernel - 1) * dilation
    padded = np.concatenate([np.zeros((channels, pad)), x.data], axis=1)
    taps = np.arange(length)[None, :] + dilation * np.arange(kernel)[:, None]
    return _conv_by_index(
        "causal_dilated_conv1d", x, weight, bias, padded, taps, slice(pad, pad + length)
    )


def circular_conv1d(x: Tensor, weight: Tensor, bias: Tensor, padding: str = "circular") -> Tensor:
    """Same-length convolution that pads by concatenating the first k−1 positions onto the end.

    ``padding="zero"`` puts zeros where the wrap-around copy would sit.
    """
    kernel = _check_conv_shapes("circular_conv1d", x, weight, bias)
    channels, length = x.shape
    if kernel > length:
        raise ConfigError(
            f"circular_conv1d: kernel width {kernel} exceeds sequence length {length}"
        )
    offsets = np.arange(length)[None, :] + np.arange(kernel)[:, None]
    if padding == "circular":
        taps = offsets % length
        return _conv_by_index(
            "circular_conv1d", x, weight, bias, x.data, taps, slice(0, length)
        )
    if padding == "zero":
        padded = np.concatenate([x.data, np.zeros((channels, kernel - 1))], axis=1)
        return _conv_by_index(
            "circular_conv1d", x, weight, bias, padded, offsets, slice(0, length)
        )
    raise ConfigError(f"unknown padding mode '{padding}' (expected 'circular' or 'zero')")
