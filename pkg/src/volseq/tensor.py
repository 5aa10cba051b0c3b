"""Dense array primitives.

Tensors are plain row-major ``numpy.ndarray`` objects (float64 unless a
caller opts into float32 for training).  The helpers here add the shape
contracts the rest of the package relies on; none of them mutate inputs.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError

Tensor = np.ndarray

MAX_RANK = 5
ACTIVATIONS = ("sigmoid", "tanh", "relu", "linear")


def as_tensor(x, dtype=np.float64) -> Tensor:
    """Return ``x`` as a C-contiguous array of ``dtype`` (copying if needed)."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim == 0 or arr.ndim > MAX_RANK:
        raise ShapeError(f"tensor rank must be 1..{MAX_RANK}, got shape {arr.shape}")
    return arr


def flat_offset(index: Sequence[int], shape: Sequence[int]) -> int:
    """Row-major flat offset of a multi-index."""
    if len(index) != len(shape):
        raise ShapeError(f"index {tuple(index)} does not match rank of {tuple(shape)}")
    offset = 0
    for i, n in zip(index, shape):
        if not 0 <= i < n:
            raise IndexError(f"index {tuple(index)} out of range for shape {tuple(shape)}")
        offset = offset * n + i
    return offset


def unravel(offset: int, shape: Sequence[int]) -> tuple[int, ...]:
    return tuple(int(i) for i in np.unravel_index(offset, tuple(shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "linear":
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_grad(pre: Tensor, out: Tensor, kind: str) -> Tensor:
    """Derivative of ``activation`` evaluated at pre-activation ``pre`` / output ``out``."""
    if kind == "sigmoid":
        return out * (1.0 - out)
    if kind == "tanh":
        return 1.0 - out * out
    if kind == "relu":
        return (pre > 0).astype(pre.dtype)
    if kind == "linear":
        return np.ones_like(pre)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def flip(x: Tensor, axis: int) -> Tensor:
    if not 0 <= axis < x.ndim:
        raise IndexError(f"flip axis {axis} out of range for rank {x.ndim}")
    return np.flip(x, axis=axis).copy()


def argmax_last(x: Tensor) -> list[int]:
    """Per-row argmax of an ``[n, K]`` array; ties go to the lowest index."""
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"argmax_last expects [n, K>=1], got {x.shape}")
    # np.argmax returns the first occurrence of the maximum
    return [int(i) for i in np.argmax(x, axis=1)]
