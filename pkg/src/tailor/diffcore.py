"""Differentiable primitives used throughout the model.

Tensors are plain ``torch.Tensor`` objects and reverse-mode accumulation is
delegated to torch autograd. This module pins the conventions the rest of the
package relies on: shape checks with readable errors, a stabilised row
softmax, a hand-written layer norm, the tanh GELU, clamped logs, a seeded
dropout and the gradient reversal op.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import torch

DEFAULT_DTYPE = torch.float64

_DTYPES = {"f64": torch.float64, "f32": torch.float32}


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def dtype_for(precision: str) -> torch.dtype:
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}, expected one of {sorted(_DTYPES)}") from None


def tensor(values, requires_grad: bool = False, dtype: torch.dtype = DEFAULT_DTYPE) -> torch.Tensor:
    return torch.tensor(values, dtype=dtype, requires_grad=requires_grad)


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise DomainError(f"{what} contains non-finite values")
    return x


def _same_shape(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise DimensionError(f"add: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None
    return a + b


def sub(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise DimensionError(f"sub: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None
    return a - b


def scale(x: torch.Tensor, c: float) -> torch.Tensor:
    return x * c


def relu(x: torch.Tensor) -> torch.Tensor:
    # subgradient at 0 is 0
    return x * (x > 0).to(x.dtype)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """tanh approximation of GELU."""
    return 0.5 * x * (1.0 + torch.tanh(_GELU_C * (x + 0.044715 * x.pow(3))))


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def log(x: torch.Tensor) -> torch.Tensor:
    if (x <= 0).any():
        raise DomainError("log of non-positive value")
    return torch.log(x)


def clamped_log(p: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    return torch.log(p.clamp(eps, 1.0 - eps))


def concat(xs: Sequence[torch.Tensor], axis: int) -> torch.Tensor:
    ref = xs[0]
    for x in xs[1:]:
        if x.dim() != ref.dim() or any(
            s != r for i, (s, r) in enumerate(zip(x.shape, ref.shape)) if i != axis % ref.dim()
        ):
            raise DimensionError(
                f"concat along axis {axis}: shapes {tuple(ref.shape)} and {tuple(x.shape)} incompatible"
            )
    return torch.cat(list(xs), dim=axis)


def mean(x: torch.Tensor, axis: int | None = None) -> torch.Tensor:
    return x.mean() if axis is None else x.mean(dim=axis)


def sum(x: torch.Tensor, axis: int | None = None) -> torch.Tensor:  # noqa: A001
    return x.sum() if axis is None else x.sum(dim=axis)


def transpose(x: torch.Tensor) -> torch.Tensor:
    """Swap the last two axes."""
    return x.transpose(-1, -2)


def frobenius_sq(x: torch.Tensor) -> torch.Tensor:
    return (x * x).sum()


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis, stabilised by per-row max subtraction."""
    check_finite(x, "softmax input")
    shifted = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise DimensionError(
            f"layer_norm: feature size {x.shape[-1]} vs gain {tuple(gain.shape)} / bias {tuple(bias.shape)}"
        )
    mu = x.mean(dim=-1, keepdim=True)
    centred = x - mu
    var = (centred * centred).mean(dim=-1, keepdim=True)
    return centred / torch.sqrt(var + eps) * gain + bias


def dropout(x: torch.Tensor, rate: float, training: bool, generator: torch.Generator | None = None) -> torch.Tensor:
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        return torch.zeros_like(x)
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


class _GradReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -grad_output


def grad_reversal(x: torch.Tensor) -> torch.Tensor:
    """Identity forward; the backward pass multiplies the incoming gradient by -1."""
    return _GradReversal.apply(x)


def backward(loss: torch.Tensor, params: Iterable[tuple[str, torch.Tensor]] | None = None) -> dict[str, torch.Tensor]:
    """Run reverse-mode accumulation from a scalar loss.

    Gradients are accumulated into ``.grad`` of every leaf that requires
    grad. When ``params`` (name, tensor) pairs are given, a name -> gradient
    map is returned for them.
    """
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()
    if params is None:
        return {}
    return {name: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for name, p in params}
