"""Dense float tensors and the validated op set used by the layer stack.

Values are plain numpy arrays in row-major order. float32 is the working
precision for training and inference; float64 is reserved for
finite-difference gradient checks. Arrays are treated as immutable once
built: every op returns a fresh array. (Batch-norm running statistics are
the one documented exception, owned by the training loop.)

There is no implicit broadcasting beyond scalars; binary ops on mismatched
shapes are rejected so shape bugs surface early.
"""

from __future__ import annotations

import numpy as np

F32 = np.float32
F64 = np.float64


class ShapeMismatchError(ValueError):
    """Operand shapes do not line up; message reports both shapes."""

    def __init__(self, what: str, a_shape, b_shape):
        self.a_shape = tuple(a_shape)
        self.b_shape = tuple(b_shape)
        super().__init__(f"{what}: shapes {self.a_shape} vs {self.b_shape}")


def tensor(data, dtype=F32) -> np.ndarray:
    """Build a dense tensor (contiguous, given float dtype)."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.size == 0:
        raise ValueError("tensors must have at least one element")
    return arr


def _is_scalar(x) -> bool:
    return np.isscalar(x) or (isinstance(x, np.ndarray) and x.ndim == 0)


def _binary(name, fn, a, b):
    if not _is_scalar(b) and not _is_scalar(a):
        if a.shape != b.shape:
            raise ShapeMismatchError(name, a.shape, b.shape)
    return fn(a, b)


def add(a, b):
    return _binary("add", np.add, a, b)


def sub(a, b):
    return _binary("sub", np.subtract, a, b)


def mul(a, b):
    return _binary("mul", np.multiply, a, b)


def max0(a):
    """Rectifier: elementwise max(a, 0)."""
    return np.maximum(a, np.asarray(0, dtype=a.dtype))


def tanh(a):
    return np.tanh(a)


_UNARY = {"max0": max0, "tanh": tanh}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b=None):
    """Dispatch by name over the supported elementwise op set."""
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} takes a single operand")
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} takes two operands")
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def reduce_mean(a: np.ndarray, axes) -> np.ndarray:
    """Arithmetic mean over `axes`; reduced extents are removed.

    An empty axis set is an identity copy, not an error.
    """
    axes = tuple(sorted({int(ax) for ax in axes}))
    if not axes:
        return a.copy()
    for ax in axes:
        if not 0 <= ax < a.ndim:
            raise ValueError(f"axis {ax} invalid for rank-{a.ndim} tensor")
    return a.mean(axis=axes)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of 2-d tensors; accumulation at operand precision."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError("matmul needs rank-2 operands", a.shape, b.shape)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul inner extents", a.shape, b.shape)
    return a @ b


def reshape(a: np.ndarray, shape) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ValueError(f"extents must be >= 1, got {shape}")
    n = 1
    for s in shape:
        n *= s
    if n != a.size:
        raise ShapeMismatchError("reshape element count", a.shape, shape)
    return np.ascontiguousarray(a).reshape(shape)
