"""Finite-difference verification of every hand-derived gradient.

Each check builds a scalar loss around one operation (a fixed random
projection of the output), computes the analytic gradient through the
op's backward function, and compares against central differences with
step 1e-5. Errors are norm-relative: ``|ga - gn| / (|ga| + |gn|)`` with
an absolute fallback when both norms vanish. Per-op tolerance is 1e-6;
the full-model check composes every layer and the loss, and gets 1e-5.

``run_checks`` powers both the test suite and the ``gradcheck`` CLI
subcommand.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import kernels, model, train
from .kernels import BnMoments

FD_STEP = 1e-5
OP_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-5


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                       step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, element by element."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        original = flat_x[i]
        flat_x[i] = original + step
        upper = f(x)
        flat_x[i] = original - step
        lower = f(x)
        flat_x[i] = original
        flat_g[i] = (upper - lower) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-relative disagreement; absolute when both gradients are near zero."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    diff = float(np.linalg.norm(a - n))
    denom = float(np.linalg.norm(a) + np.linalg.norm(n))
    if denom < 1e-8:
        return diff
    return diff / denom


@dataclass
class CheckResult:
    op: str
    target: str  # which gradient: input, weight, bias, ...
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def _project(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)


# Each op check returns a list of (target, analytic, numeric) triples.

def _check_conv2d(rng):
    x = rng.standard_normal((2, 5, 4, 3))
    w = rng.standard_normal((3, 3, 3, 4)) * 0.5
    b = rng.standard_normal(4) * 0.1
    proj = _project(rng, (2, 5, 4, 4))
    dx, dw, db = kernels.conv2d_backward(x, w, proj)
    return [
        ("input", dx, numerical_gradient(lambda v: float(np.sum(kernels.conv2d_forward(v, w, b) * proj)), x)),
        ("weight", dw, numerical_gradient(lambda v: float(np.sum(kernels.conv2d_forward(x, v, b) * proj)), w)),
        ("bias", db, numerical_gradient(lambda v: float(np.sum(kernels.conv2d_forward(x, w, v) * proj)), b)),
    ]


def _check_depthwise(rng):
    x = rng.standard_normal((2, 4, 5, 3))
    w = rng.standard_normal((5, 5, 3)) * 0.5
    b = rng.standard_normal(3) * 0.1
    proj = _project(rng, (2, 4, 5, 3))
    dx, dw, db = kernels.depthwise_conv2d_backward(x, w, proj)
    fwd = kernels.depthwise_conv2d_forward
    return [
        ("input", dx, numerical_gradient(lambda v: float(np.sum(fwd(v, w, b) * proj)), x)),
        ("weight", dw, numerical_gradient(lambda v: float(np.sum(fwd(x, v, b) * proj)), w)),
        ("bias", db, numerical_gradient(lambda v: float(np.sum(fwd(x, w, v) * proj)), b)),
    ]


def _check_gelu(rng):
    x = rng.standard_normal((4, 6)) * 2.0
    proj = _project(rng, x.shape)
    dx = kernels.gelu_backward(x, proj)
    return [("input", dx, numerical_gradient(lambda v: float(np.sum(kernels.gelu(v) * proj)), x))]


def _check_relu(rng):
    # Keep inputs away from the kink at zero, where the derivative jumps.
    x = rng.uniform(0.1, 2.0, (4, 6)) * rng.choice([-1.0, 1.0], (4, 6))
    proj = _project(rng, x.shape)
    dx = kernels.relu_backward(x, proj)
    return [("input", dx, numerical_gradient(lambda v: float(np.sum(kernels.relu(v) * proj)), x))]


def _check_sigmoid(rng):
    x = rng.standard_normal((4, 6)) * 2.0
    proj = _project(rng, x.shape)
    dx = kernels.sigmoid_backward(x, proj)
    return [("input", dx, numerical_gradient(lambda v: float(np.sum(kernels.sigmoid(v) * proj)), x))]


def _check_batchnorm_train(rng):
    x = rng.standard_normal((2, 3, 3, 4)) * 1.5
    gamma = rng.uniform(0.5, 1.5, 4)
    beta = rng.standard_normal(4) * 0.3
    moments = BnMoments(rng.standard_normal(4) * 0.1, rng.uniform(0.5, 1.5, 4))
    proj = _project(rng, x.shape)

    def loss(vx, vg, vb):
        y, _, _ = kernels.batchnorm_forward(vx, vg, vb, moments, "train")
        return float(np.sum(y * proj))

    _, cache, _ = kernels.batchnorm_forward(x, gamma, beta, moments, "train")
    dx, dgamma, dbeta = kernels.batchnorm_backward(cache, proj)
    return [
        ("input", dx, numerical_gradient(lambda v: loss(v, gamma, beta), x)),
        ("gamma", dgamma, numerical_gradient(lambda v: loss(x, v, beta), gamma)),
        ("beta", dbeta, numerical_gradient(lambda v: loss(x, gamma, v), beta)),
    ]


def _check_batchnorm_infer(rng):
    x = rng.standard_normal((2, 3, 3, 4))
    gamma = rng.uniform(0.5, 1.5, 4)
    beta = rng.standard_normal(4) * 0.3
    moments = BnMoments(rng.standard_normal(4) * 0.1, rng.uniform(0.5, 1.5, 4))
    proj = _project(rng, x.shape)
    _, cache, _ = kernels.batchnorm_forward(x, gamma, beta, moments, "infer")
    dx, _, _ = kernels.batchnorm_backward(cache, proj)

    def loss(v):
        y, _, _ = kernels.batchnorm_forward(v, gamma, beta, moments, "infer")
        return float(np.sum(y * proj))

    return [("input", dx, numerical_gradient(loss, x))]


def _check_global_avg_pool(rng):
    x = rng.standard_normal((2, 5, 4, 3))
    proj = _project(rng, (2, 3))
    dx = kernels.global_avg_pool_backward(x.shape, proj)
    return [
        ("input", dx,
         numerical_gradient(lambda v: float(np.sum(kernels.global_avg_pool(v) * proj)), x)),
    ]


def _check_dense(rng):
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((6, 3)) * 0.5
    b = rng.standard_normal(3) * 0.1
    proj = _project(rng, (4, 3))
    dx, dw, db = kernels.dense_backward(x, w, proj)
    return [
        ("input", dx, numerical_gradient(lambda v: float(np.sum(kernels.dense_forward(v, w, b) * proj)), x)),
        ("weight", dw, numerical_gradient(lambda v: float(np.sum(kernels.dense_forward(x, v, b) * proj)), w)),
        ("bias", db, numerical_gradient(lambda v: float(np.sum(kernels.dense_forward(x, w, v) * proj)), b)),
    ]


def _check_softmax(rng):
    z = rng.standard_normal((3, 5)) * 2.0
    proj = _project(rng, z.shape)
    y = kernels.softmax(z)
    dz = kernels.softmax_backward(y, proj)
    return [
        ("input", dz,
         numerical_gradient(lambda v: float(np.sum(kernels.softmax(v) * proj)), z)),
    ]


def _check_cross_entropy(rng):
    # Probabilities come from a softmax so they sit far from the clamp.
    logits = rng.standard_normal((4, 5))
    probs = kernels.softmax(logits)
    targets = train.one_hot(rng.integers(1, 6, 4), 5)
    d_pred = train.cross_entropy_backward(targets, probs)
    return [
        ("prediction", d_pred,
         numerical_gradient(lambda v: train.cross_entropy(targets, v), probs)),
    ]


def _attention_setup(rng):
    config = model.MixerConfig(
        patch_size=7, pca_count=4, num_classes=3, stem_filters=8,
        kernel_sizes=(3,), num_blocks=1, ca_reduction=4,
    )
    params = model.init_params(config, int(rng.integers(0, 2 ** 31)))
    x = rng.standard_normal((2, 7, 7, 8))
    return config, params, x


def _check_attention(rng):
    config, params, x = _attention_setup(rng)
    proj = _project(rng, x.shape)
    _, cache = model.attention_apply(x, params, config)
    dx, grads = model.attention_backward(cache, params, proj)

    def loss_x(v):
        y, _ = model.attention_apply(v, params, config)
        return float(np.sum(y * proj))

    results = [("input", dx, numerical_gradient(loss_x, x))]
    for name in ("ca.squeeze.w", "ca.squeeze.b", "ca.height.w",
                 "ca.height.b", "ca.width.w", "ca.width.b"):
        def loss_p(v, _name=name):
            trial = dict(params)
            trial[_name] = v
            y, _ = model.attention_apply(x, trial, config)
            return float(np.sum(y * proj))

        results.append((name, grads[name], numerical_gradient(loss_p, params[name])))
    return results


OP_CHECKS = {
    "conv2d": _check_conv2d,
    "depthwise_conv2d": _check_depthwise,
    "gelu": _check_gelu,
    "relu": _check_relu,
    "sigmoid": _check_sigmoid,
    "batchnorm_train": _check_batchnorm_train,
    "batchnorm_infer": _check_batchnorm_infer,
    "global_avg_pool": _check_global_avg_pool,
    "dense": _check_dense,
    "softmax": _check_softmax,
    "cross_entropy": _check_cross_entropy,
    "coordinate_attention": _check_attention,
}


def toy_model_config() -> model.MixerConfig:
    """Small end-to-end configuration used by the full-model check."""
    return model.MixerConfig(
        patch_size=7, pca_count=4, num_classes=3, stem_filters=8,
        kernel_sizes=(3, 5, 7), num_blocks=2, ca_reduction=4,
    )


def check_model(seed: int) -> list[CheckResult]:
    """Finite-difference check of the full training-mode loss gradient.

    Covers the gradient with respect to every parameter tensor and the
    input batch, through stem, blocks, attention, head and the
    cross-entropy loss.
    """
    rng = np.random.default_rng(seed)
    config = toy_model_config()
    params = model.init_params(config, seed)
    bn_state = model.init_bn_state(config)
    # One patch keeps the finite-difference sweep over ~1.8k parameters
    # fast; batch norm still reduces over the 49 spatial positions.
    x = rng.standard_normal((1, 7, 7, 4))
    targets = train.one_hot(rng.integers(1, config.num_classes + 1, 1), config.num_classes)

    def loss_for(trial_params, trial_x):
        probs, _ = model.forward_batch(trial_x, trial_params, bn_state, config, "train")
        return train.cross_entropy(targets, probs)

    probs, cache = model.forward_batch(x, params, bn_state, config, "train")
    d_probs = train.cross_entropy_backward(targets, probs)
    grads, d_input = model.backward_batch(cache, params, config, d_probs)

    results = []
    numeric_dx = numerical_gradient(lambda v: loss_for(params, v), x)
    results.append(CheckResult("model", "input", relative_error(d_input, numeric_dx),
                               MODEL_TOLERANCE))
    for name, value in params.items():
        def loss_p(v, _name=name):
            trial = dict(params)
            trial[_name] = v
            return loss_for(trial, x)

        numeric = numerical_gradient(loss_p, value)
        results.append(CheckResult("model", name, relative_error(grads[name], numeric),
                                   MODEL_TOLERANCE))
    return results


def run_checks(seeds: Iterable[int] = (0, 1, 2, 3, 4),
               include_model: bool = True) -> list[CheckResult]:
    """Run every registered check for every seed; one result per gradient."""
    results: list[CheckResult] = []
    for seed in seeds:
        for op_name, check in OP_CHECKS.items():
            rng = np.random.default_rng(seed * 1009 + 17)
            for target, analytic, numeric in check(rng):
                results.append(CheckResult(op_name, target,
                                           relative_error(analytic, numeric), OP_TOLERANCE))
        if include_model:
            results.extend(check_model(seed))
    return results


def summarize(results: list[CheckResult]) -> dict[tuple[str, str], float]:
    """Worst error per (op, target) pair across all seeds."""
    worst: dict[tuple[str, str], float] = {}
    for r in results:
        key = (r.op, r.target)
        worst[key] = max(worst.get(key, 0.0), r.error)
    return worst
