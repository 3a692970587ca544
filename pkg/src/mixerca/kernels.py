"""Network-level operations with hand-derived backward passes.

Every operation comes as a forward/backward pair of pure functions.
There is no autodiff tape: the backward functions take whatever forward
state they need (usually the original inputs) plus the gradient of the
loss with respect to the forward output, and return gradients for the
inputs and parameters. All gradients are exact derivatives of the
forward expressions; ``mixerca.gradcheck`` verifies each pair against
central finite differences.

Spatial operations accept a single map ``(H, W, C)`` or a batch
``(N, H, W, C)`` and return the same rank they were given. Convolutions
use stride 1 and same zero padding, so spatial extent is always
preserved; kernels must be square with odd side length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ShapeError
from .tensor_core import Tensor, as_tensor

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _promote_spatial(x: Tensor, what: str) -> tuple[Tensor, bool]:
    # Returns a 4-D view plus a flag telling the caller to squeeze the
    # batch axis off again.
    x = as_tensor(x)
    if x.ndim == 3:
        return x[np.newaxis], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{what}: expected (H, W, C) or (N, H, W, C), got shape {x.shape}")


def _check_kernel(w: Tensor, ndim: int, what: str) -> int:
    if w.ndim != ndim:
        raise ShapeError(f"{what}: kernel must have rank {ndim}, got shape {w.shape}")
    k = w.shape[0]
    if w.shape[1] != k:
        raise ShapeError(f"{what}: kernel must be square, got shape {w.shape}")
    if k % 2 == 0:
        raise ShapeError(f"{what}: kernel side must be odd, got {k}")
    return k


def _pad_same(x4: Tensor, k: int) -> Tensor:
    p = (k - 1) // 2
    if p == 0:
        return x4
    return np.pad(x4, ((0, 0), (p, p), (p, p), (0, 0)))


# ---------------------------------------------------------------------------
# Standard convolution
# ---------------------------------------------------------------------------

def conv2d_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 same-padded convolution.

    Parameters
    ----------
    x : Tensor
        Input map ``(H, W, Cin)`` or batch ``(N, H, W, Cin)``.
    w : Tensor
        Kernel ``(K, K, Cin, Cout)`` with odd ``K``.
    b : Tensor
        Bias ``(Cout,)``, added to every output position.

    Returns
    -------
    Tensor
        Output of the same spatial extent with ``Cout`` channels.

    Notes
    -----
    The sum runs over kernel taps and input channels: for each output
    position the window is the same-zero-padded neighbourhood of the
    input. Implemented as a loop over the ``K * K`` taps with one
    matrix product per tap over the channel axes; the tap loop runs in
    row-major ``(i, j)`` order, which fixes the floating-point
    summation order.
    """
    x4, squeeze = _promote_spatial(x, "conv2d")
    w = as_tensor(w)
    b = as_tensor(b)
    k = _check_kernel(w, 4, "conv2d")
    cin, cout = w.shape[2], w.shape[3]
    if x4.shape[3] != cin:
        raise ShapeError(f"conv2d: input has {x4.shape[3]} channels, kernel expects {cin}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {cout} output channels")

    n, h, wd, _ = x4.shape
    xp = _pad_same(x4, k)
    out = np.zeros((n * h * wd, cout), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            window = xp[:, i:i + h, j:j + wd, :].reshape(-1, cin)
            out += window @ w[i, j]
    out += b
    out = out.reshape(n, h, wd, cout)
    return out[0] if squeeze else out


def conv2d_backward(x: Tensor, w: Tensor, grad_out: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients of :func:`conv2d_forward` with respect to input, kernel and bias.

    ``grad_out`` must match the forward output shape for the given
    ``x``. The input gradient scatters each tap's contribution back
    through the same zero padding; the kernel gradient is, per tap, the
    correlation of the input window with ``grad_out``.
    """
    x4, squeeze = _promote_spatial(x, "conv2d_backward")
    w = as_tensor(w)
    k = _check_kernel(w, 4, "conv2d_backward")
    cin, cout = w.shape[2], w.shape[3]
    n, h, wd, _ = x4.shape
    g4 = as_tensor(grad_out)
    if squeeze:
        g4 = g4[np.newaxis]
    if g4.shape != (n, h, wd, cout):
        raise ShapeError(f"conv2d_backward: grad shape {grad_out.shape} does not match output")

    p = (k - 1) // 2
    xp = _pad_same(x4, k)
    gflat = g4.reshape(-1, cout)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(k):
        for j in range(k):
            window = xp[:, i:i + h, j:j + wd, :].reshape(-1, cin)
            dw[i, j] = window.T @ gflat
            dxp[:, i:i + h, j:j + wd, :] += (gflat @ w[i, j].T).reshape(n, h, wd, cin)
    db = gflat.sum(axis=0)
    dx = dxp[:, p:p + h, p:p + wd, :] if p else dxp
    dx = np.ascontiguousarray(dx)
    return (dx[0] if squeeze else dx), dw, db


# ---------------------------------------------------------------------------
# Depthwise convolution
# ---------------------------------------------------------------------------

def depthwise_conv2d_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-channel stride-1 same-padded convolution.

    ``w`` has shape ``(K, K, C)``: channel ``c`` of the output sees only
    channel ``c`` of the input, filtered by ``w[:, :, c]`` plus bias
    ``b[c]``. No cross-channel mixing happens here; that is the job of
    the pointwise convolutions in the mixer block.
    """
    x4, squeeze = _promote_spatial(x, "depthwise_conv2d")
    w = as_tensor(w)
    b = as_tensor(b)
    k = _check_kernel(w, 3, "depthwise_conv2d")
    c = w.shape[2]
    if x4.shape[3] != c:
        raise ShapeError(f"depthwise_conv2d: input has {x4.shape[3]} channels, kernel expects {c}")
    if b.shape != (c,):
        raise ShapeError(f"depthwise_conv2d: bias shape {b.shape} does not match {c} channels")

    n, h, wd, _ = x4.shape
    xp = _pad_same(x4, k)
    out = np.zeros((n, h, wd, c), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            out += xp[:, i:i + h, j:j + wd, :] * w[i, j]
    out += b
    return out[0] if squeeze else out


def depthwise_conv2d_backward(x: Tensor, w: Tensor, grad_out: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients of :func:`depthwise_conv2d_forward`."""
    x4, squeeze = _promote_spatial(x, "depthwise_conv2d_backward")
    w = as_tensor(w)
    k = _check_kernel(w, 3, "depthwise_conv2d_backward")
    c = w.shape[2]
    n, h, wd, _ = x4.shape
    g4 = as_tensor(grad_out)
    if squeeze:
        g4 = g4[np.newaxis]
    if g4.shape != (n, h, wd, c):
        raise ShapeError(f"depthwise_conv2d_backward: grad shape {grad_out.shape} does not match output")

    p = (k - 1) // 2
    xp = _pad_same(x4, k)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(k):
        for j in range(k):
            window = xp[:, i:i + h, j:j + wd, :]
            dw[i, j] = (window * g4).sum(axis=(0, 1, 2))
            dxp[:, i:i + h, j:j + wd, :] += g4 * w[i, j]
    db = g4.sum(axis=(0, 1, 2))
    dx = dxp[:, p:p + h, p:p + wd, :] if p else dxp
    dx = np.ascontiguousarray(dx)
    return (dx[0] if squeeze else dx), dw, db


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, ``x * Phi(x)``.

    Uses the error-function form of the standard normal CDF rather than
    the tanh approximation, so ``gelu(1.0)`` is ``0.8413447...`` to
    double precision.
    """
    x = as_tensor(x)
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def gelu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    """Derivative ``Phi(x) + x * phi(x)`` applied to ``grad_out``."""
    x = as_tensor(x)
    grad_out = as_tensor(grad_out)
    if x.shape != grad_out.shape:
        raise ShapeError(f"gelu_backward: shapes {x.shape} and {grad_out.shape} differ")
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return grad_out * (cdf + x * pdf)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return np.maximum(x, 0.0)


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    # Subgradient 0 at exactly 0.
    x = as_tensor(x)
    grad_out = as_tensor(grad_out)
    if x.shape != grad_out.shape:
        raise ShapeError(f"relu_backward: shapes {x.shape} and {grad_out.shape} differ")
    return np.where(x > 0.0, grad_out, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    x = as_tensor(x)
    grad_out = as_tensor(grad_out)
    if x.shape != grad_out.shape:
        raise ShapeError(f"sigmoid_backward: shapes {x.shape} and {grad_out.shape} differ")
    s = sigmoid(x)
    return grad_out * s * (1.0 - s)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BnMoments:
    """Running mean and variance, one value per channel."""

    mean: Tensor
    var: Tensor

    def copy(self) -> "BnMoments":
        return BnMoments(self.mean.copy(), self.var.copy())


@dataclass
class BnCache:
    """Forward state needed by :func:`batchnorm_backward`."""

    mode: str
    x_hat: Tensor
    inv_std: Tensor
    gamma: Tensor
    count: int


def batchnorm_forward(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    moments: BnMoments,
    mode: str,
    momentum: float = 0.99,
    epsilon: float = 1e-3,
) -> tuple[Tensor, BnCache, BnMoments]:
    """Per-channel batch normalization over ``(N, H, W, C)`` input.

    In ``"train"`` mode the batch mean and biased batch variance over
    the ``N * H * W`` positions normalize the input, and the returned
    moments are the exponential update
    ``momentum * old + (1 - momentum) * batch``. In ``"infer"`` mode the
    supplied running moments normalize the input and are returned
    unchanged. The function never mutates ``moments``.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm: expected (N, H, W, C), got shape {x.shape}")
    c = x.shape[3]
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must have shape ({c},)")
    if mode not in ("train", "infer"):
        raise ShapeError(f"batchnorm: mode must be 'train' or 'infer', got {mode!r}")
    if not epsilon > 0.0:
        raise ShapeError(f"batchnorm: epsilon must be positive, got {epsilon}")
    count = x.shape[0] * x.shape[1] * x.shape[2]

    if mode == "train":
        if count < 2:
            raise ShapeError(f"batchnorm: train mode needs at least 2 positions, got {count}")
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))  # biased, divides by count
        new_moments = BnMoments(
            momentum * moments.mean + (1.0 - momentum) * mean,
            momentum * moments.var + (1.0 - momentum) * var,
        )
    else:
        mean = moments.mean
        var = moments.var
        new_moments = moments.copy()

    inv_std = 1.0 / np.sqrt(var + epsilon)
    x_hat = (x - mean) * inv_std
    y = gamma * x_hat + beta
    return y, BnCache(mode, x_hat, inv_std, gamma, count), new_moments


def batchnorm_backward(cache: BnCache, grad_out: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients of :func:`batchnorm_forward` for input, gamma and beta.

    In train mode the input gradient includes the coupling through the
    batch statistics; in infer mode the statistics are constants and the
    mapping is affine per channel.
    """
    g = as_tensor(grad_out)
    if g.shape != cache.x_hat.shape:
        raise ShapeError(f"batchnorm_backward: grad shape {g.shape} does not match forward")
    dgamma = (g * cache.x_hat).sum(axis=(0, 1, 2))
    dbeta = g.sum(axis=(0, 1, 2))
    if cache.mode == "infer":
        dx = g * (cache.gamma * cache.inv_std)
        return dx, dgamma, dbeta
    m = float(cache.count)
    dxhat = g * cache.gamma
    sum_dxhat = dxhat.sum(axis=(0, 1, 2))
    sum_dxhat_xhat = (dxhat * cache.x_hat).sum(axis=(0, 1, 2))
    dx = (cache.inv_std / m) * (m * dxhat - sum_dxhat - cache.x_hat * sum_dxhat_xhat)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Pooling, dense, softmax
# ---------------------------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean: ``(H, W, C) -> (C,)`` or ``(N, H, W, C) -> (N, C)``."""
    x4, squeeze = _promote_spatial(x, "global_avg_pool")
    out = x4.mean(axis=(1, 2))
    return out[0] if squeeze else out


def global_avg_pool_backward(x_shape, grad_out: Tensor) -> Tensor:
    """Spread the pooled gradient uniformly over the spatial positions."""
    x_shape = tuple(x_shape)
    g = as_tensor(grad_out)
    if len(x_shape) == 3:
        h, wd, c = x_shape
        if g.shape != (c,):
            raise ShapeError(f"global_avg_pool_backward: grad shape {g.shape} does not match ({c},)")
        return np.broadcast_to(g / (h * wd), x_shape).copy()
    if len(x_shape) == 4:
        n, h, wd, c = x_shape
        if g.shape != (n, c):
            raise ShapeError(f"global_avg_pool_backward: grad shape {g.shape} does not match ({n}, {c})")
        return np.broadcast_to(g[:, np.newaxis, np.newaxis, :] / (h * wd), x_shape).copy()
    raise ShapeError(f"global_avg_pool_backward: bad input shape {x_shape!r}")


def dense_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` for a vector ``(C,)`` or batch ``(N, C)``."""
    x = as_tensor(x)
    w = as_tensor(w)
    b = as_tensor(b)
    if w.ndim != 2:
        raise ShapeError(f"dense: weight must be (Cin, Cout), got shape {w.shape}")
    if x.ndim not in (1, 2) or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense: input shape {x.shape} does not match weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias shape {b.shape} does not match {w.shape[1]} outputs")
    return x @ w + b


def dense_backward(x: Tensor, w: Tensor, grad_out: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients of :func:`dense_forward`."""
    x = as_tensor(x)
    w = as_tensor(w)
    g = as_tensor(grad_out)
    squeeze = x.ndim == 1
    x2 = x[np.newaxis] if squeeze else x
    g2 = g[np.newaxis] if squeeze else g
    if g2.shape != (x2.shape[0], w.shape[1]):
        raise ShapeError(f"dense_backward: grad shape {g.shape} does not match output")
    dx = g2 @ w.T
    dw = x2.T @ g2
    db = g2.sum(axis=0)
    return (dx[0] if squeeze else dx), dw, db


def softmax(logits: Tensor) -> Tensor:
    """Softmax over the last axis, computed with the max subtracted."""
    z = as_tensor(logits)
    if z.ndim < 1:
        raise ShapeError("softmax: input must have at least one axis")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y: Tensor, grad_out: Tensor) -> Tensor:
    """Jacobian-transpose product of softmax given its output ``y``."""
    y = as_tensor(y)
    g = as_tensor(grad_out)
    if y.shape != g.shape:
        raise ShapeError(f"softmax_backward: shapes {y.shape} and {g.shape} differ")
    inner = (g * y).sum(axis=-1, keepdims=True)
    return y * (g - inner)
