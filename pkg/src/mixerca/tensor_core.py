"""Tensor substrate for the whole engine.

A tensor is a C-contiguous float64 ``numpy.ndarray`` with channels-last
layout for spatial data: maps are ``(H, W, C)`` and batches prepend a
leading axis. Every operation here validates shapes explicitly and
raises :class:`~mixerca.errors.ShapeError` instead of relying on numpy
broadcasting; the arithmetic itself is delegated to numpy.

These primitives are deliberately dumb. Convolution, normalization and
the rest of the network-level operations live in :mod:`mixerca.kernels`.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

# Alias used in signatures throughout the package. Not a wrapper class:
# keeping values as plain ndarrays means slicing, ufuncs and linalg all
# behave exactly as any numpy user expects.
Tensor = np.ndarray


def as_tensor(values) -> Tensor:
    """Coerce ``values`` to a C-contiguous float64 array.

    Accepts scalars, nested sequences and existing arrays. Arrays that
    already satisfy the layout are returned as-is (no copy).
    """
    try:
        out = np.ascontiguousarray(values, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ShapeError(f"cannot build a float64 tensor from {type(values).__name__}: {exc}") from exc
    return out


def tensor_new(shape, fill: float = 0.0) -> Tensor:
    """Allocate a tensor of ``shape`` filled with ``fill``.

    Every extent must be a positive integer; zero-sized tensors are not
    part of the contract and are rejected.
    """
    shape = tuple(shape)
    for extent in shape:
        if not isinstance(extent, (int, np.integer)) or extent < 1:
            raise ShapeError(f"tensor extents must be positive integers, got {shape!r}")
    return np.full(shape, float(fill), dtype=np.float64)


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Combine two tensors of identical shape element by element.

    ``op`` is ``"add"`` or ``"multiply"``. Shapes must match exactly:
    there is no implicit broadcasting at this layer, so a mismatch is a
    bug in the caller and raises :class:`ShapeError`.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise {op}: shapes {a.shape} and {b.shape} differ")
    if op == "add":
        return a + b
    if op == "multiply":
        return a * b
    raise ShapeError(f"unknown elementwise op {op!r}")


def reduce_mean(a: Tensor, axes) -> Tensor:
    """Mean of ``a`` over ``axes`` (an iterable of axis indices).

    Reduced axes are dropped. Reducing every axis yields a 0-d tensor.
    """
    a = as_tensor(a)
    axes = tuple(int(ax) for ax in axes)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"reduce_mean: repeated axis in {axes!r}")
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise ShapeError(f"reduce_mean: axis {ax} out of range for rank {a.ndim}")
    return np.mean(a, axis=axes) if axes else a.copy()


def reshape(a: Tensor, shape) -> Tensor:
    """Reinterpret ``a`` with a new shape of identical element count."""
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    count = 1
    for extent in shape:
        if extent < 1:
            raise ShapeError(f"reshape: extents must be positive, got {shape!r}")
        count *= extent
    if count != a.size:
        raise ShapeError(f"reshape: cannot view {a.size} elements as {shape!r}")
    return np.ascontiguousarray(a.reshape(shape))


def check_finite(a: Tensor, what: str = "tensor") -> Tensor:
    """Raise :class:`ShapeError` if ``a`` contains NaN or infinity."""
    a = as_tensor(a)
    if not np.all(np.isfinite(a)):
        raise ShapeError(f"{what} contains non-finite values")
    return a
