"""The classifier: stem, mixer blocks, coordinate attention, head.

The network maps a patch of PCA scores ``(S, S, C)`` to a probability
vector over ``L`` classes:

* stem: pointwise convolution to ``F1`` channels, GELU, batch norm;
* ``num_blocks`` mixer blocks, each combining three depthwise
  convolutions (kernel sizes 3, 5, 7 by default) and a pointwise branch
  with two residual connections, GELU and batch norm;
* coordinate attention: per-channel gates factored along height and
  width, optional;
* head: global average pooling, dense layer, softmax.

Parameters live in a flat insertion-ordered ``dict[str, ndarray]`` whose
keys (``"stem.conv.w"``, ``"block1.dw3.w"``, ``"ca.squeeze.w"``,
``"head.b"``, ...) are stable across save and load. Batch-norm running
moments are carried separately so that the parameter dict holds exactly
the trainable tensors the optimizer updates.

Forward functions are pure: they return the output plus a cache of the
intermediate state the matching backward function needs, and updated
running moments instead of mutating anything.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError
from .kernels import BnCache, BnMoments
from .tensor_core import Tensor, as_tensor

ATTENTION_KINDS = ("ca", "none")


@dataclass(frozen=True)
class MixerConfig:
    """Architecture hyperparameters.

    ``mix_filters`` defaults to ``stem_filters`` and must equal it: both
    residual additions in a block require the channel width to be
    preserved end to end.
    """

    patch_size: int
    pca_count: int
    num_classes: int
    stem_filters: int = 64
    mix_filters: Optional[int] = None
    kernel_sizes: tuple[int, ...] = (3, 5, 7)
    num_blocks: int = 4
    ca_reduction: int = 8
    attention: str = "ca"

    def __post_init__(self):
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch_size must be odd and >= 3, got {self.patch_size}")
        if self.pca_count < 1:
            raise ConfigError(f"pca_count must be positive, got {self.pca_count}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.stem_filters < 1:
            raise ConfigError(f"stem_filters must be positive, got {self.stem_filters}")
        if self.mix_filters is None:
            object.__setattr__(self, "mix_filters", self.stem_filters)
        if self.mix_filters != self.stem_filters:
            raise ConfigError(
                f"mix_filters ({self.mix_filters}) must equal stem_filters "
                f"({self.stem_filters}); both residual sums need matching widths"
            )
        if not self.kernel_sizes:
            raise ConfigError("kernel_sizes must not be empty")
        for k in self.kernel_sizes:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd and positive, got {k}")
        if self.num_blocks < 1:
            raise ConfigError(f"num_blocks must be positive, got {self.num_blocks}")
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        if self.attention == "ca":
            if self.ca_reduction < 1 or self.stem_filters % self.ca_reduction != 0:
                raise ConfigError(
                    f"ca_reduction ({self.ca_reduction}) must divide stem_filters "
                    f"({self.stem_filters})"
                )

    def to_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "pca_count": self.pca_count,
            "num_classes": self.num_classes,
            "stem_filters": self.stem_filters,
            "mix_filters": self.mix_filters,
            "kernel_sizes": list(self.kernel_sizes),
            "num_blocks": self.num_blocks,
            "ca_reduction": self.ca_reduction,
            "attention": self.attention,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MixerConfig":
        known = {
            "patch_size", "pca_count", "num_classes", "stem_filters", "mix_filters",
            "kernel_sizes", "num_blocks", "ca_reduction", "attention",
        }
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        data = dict(data)
        if "kernel_sizes" in data:
            data["kernel_sizes"] = tuple(data["kernel_sizes"])
        return cls(**data)


ModelParams = dict  # name -> float64 ndarray, insertion ordered


def _param_manifest(config: MixerConfig):
    """Yield ``(name, shape, kind)`` for every trainable tensor, in build order.

    ``kind`` selects the fan-in rule at init time: ``conv`` kernels use
    ``K * K * Cin``, ``depthwise`` kernels ``K * K``, ``dense`` maps the
    input width; ``bias``/``gamma``/``beta`` are constant-initialized.
    """
    f1 = config.stem_filters
    yield "stem.conv.w", (1, 1, config.pca_count, f1), "conv"
    yield "stem.conv.b", (f1,), "bias"
    yield "stem.bn.gamma", (f1,), "gamma"
    yield "stem.bn.beta", (f1,), "beta"
    for i in range(1, config.num_blocks + 1):
        for k in config.kernel_sizes:
            yield f"block{i}.dw{k}.w", (k, k, f1), "depthwise"
            yield f"block{i}.dw{k}.b", (f1,), "bias"
        yield f"block{i}.branch.w", (1, 1, f1, f1), "conv"
        yield f"block{i}.branch.b", (f1,), "bias"
        yield f"block{i}.mix.w", (1, 1, f1, config.mix_filters), "conv"
        yield f"block{i}.mix.b", (config.mix_filters,), "bias"
        yield f"block{i}.bn.gamma", (config.mix_filters,), "gamma"
        yield f"block{i}.bn.beta", (config.mix_filters,), "beta"
    if config.attention == "ca":
        squeezed = f1 // config.ca_reduction
        yield "ca.squeeze.w", (f1, squeezed), "dense"
        yield "ca.squeeze.b", (squeezed,), "bias"
        yield "ca.height.w", (squeezed, f1), "dense"
        yield "ca.height.b", (f1,), "bias"
        yield "ca.width.w", (squeezed, f1), "dense"
        yield "ca.width.b", (f1,), "bias"
    yield "head.w", (f1, config.num_classes), "dense"
    yield "head.b", (config.num_classes,), "bias"


def param_shapes(config: MixerConfig) -> dict[str, tuple[int, ...]]:
    """Map every parameter name to its shape, in canonical order."""
    return {name: shape for name, shape, _ in _param_manifest(config)}


def _fan_in(shape: tuple[int, ...], kind: str) -> int:
    if kind == "conv":
        return shape[0] * shape[1] * shape[2]
    if kind == "depthwise":
        return shape[0] * shape[1]
    return shape[0]  # dense


def init_params(config: MixerConfig, seed: int) -> ModelParams:
    """Seeded fan-in-scaled uniform initialization.

    Weight tensors draw from ``U(-sqrt(6 / fan_in), +sqrt(6 / fan_in))``
    in a fixed traversal order so a seed fully determines every value;
    biases and batch-norm shifts start at zero, batch-norm scales at one.
    """
    rng = np.random.default_rng(seed)
    params: ModelParams = {}
    for name, shape, kind in _param_manifest(config):
        if kind in ("conv", "depthwise", "dense"):
            bound = np.sqrt(6.0 / _fan_in(shape, kind))
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif kind == "gamma":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def init_bn_state(config: MixerConfig) -> dict[str, BnMoments]:
    """Fresh running moments (mean 0, variance 1) for every batch-norm layer."""
    state = {"stem.bn": BnMoments(np.zeros(config.stem_filters), np.ones(config.stem_filters))}
    for i in range(1, config.num_blocks + 1):
        state[f"block{i}.bn"] = BnMoments(
            np.zeros(config.mix_filters), np.ones(config.mix_filters)
        )
    return state


def _check_params(params: ModelParams, config: MixerConfig) -> None:
    expected = param_shapes(config)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ConfigError(f"parameter names do not match config (missing {missing}, extra {extra})")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"parameter {name} has shape {params[name].shape}, expected {shape}")


# ---------------------------------------------------------------------------
# Stage forwards with caches
# ---------------------------------------------------------------------------

@dataclass
class StemCache:
    x: Tensor
    pre_act: Tensor
    act: Tensor
    bn_cache: BnCache
    new_moments: BnMoments


@dataclass
class BlockCache:
    index: int
    x: Tensor
    aggregate: Tensor
    pre_act: Tensor
    act: Tensor
    bn_cache: BnCache
    new_moments: BnMoments


@dataclass
class CaCache:
    x: Tensor
    pooled: Tensor
    squeezed_pre: Tensor
    gate_h: Tensor
    gate_w: Tensor
    weight_map: Tensor


@dataclass
class HeadCache:
    map_shape: tuple[int, ...]
    pooled: Tensor
    probs: Tensor


@dataclass
class ModelCache:
    stem: StemCache
    blocks: list[BlockCache]
    ca: Optional[CaCache]
    head: HeadCache


def stem_apply(
    x4: Tensor,
    params: ModelParams,
    bn_state: dict,
    config: MixerConfig,
    mode: str,
) -> tuple[Tensor, StemCache]:
    s = kernels.conv2d_forward(x4, params["stem.conv.w"], params["stem.conv.b"])
    a = kernels.gelu(s)
    y, bn_cache, new_moments = kernels.batchnorm_forward(
        a, params["stem.bn.gamma"], params["stem.bn.beta"], bn_state["stem.bn"], mode
    )
    return y, StemCache(x4, s, a, bn_cache, new_moments)


def block_apply(
    x4: Tensor,
    index: int,
    params: ModelParams,
    bn_state: dict,
    config: MixerConfig,
    mode: str,
) -> tuple[Tensor, BlockCache]:
    """One mixer block.

    aggregate = x + sum of depthwise branches + pointwise branch
    mixed     = pointwise(aggregate)
    output    = batchnorm(gelu(mixed + x))
    """
    prefix = f"block{index}"
    agg = x4.copy()
    for k in config.kernel_sizes:
        agg += kernels.depthwise_conv2d_forward(
            x4, params[f"{prefix}.dw{k}.w"], params[f"{prefix}.dw{k}.b"]
        )
    agg += kernels.conv2d_forward(x4, params[f"{prefix}.branch.w"], params[f"{prefix}.branch.b"])
    mixed = kernels.conv2d_forward(agg, params[f"{prefix}.mix.w"], params[f"{prefix}.mix.b"])
    pre_act = mixed + x4
    act = kernels.gelu(pre_act)
    y, bn_cache, new_moments = kernels.batchnorm_forward(
        act, params[f"{prefix}.bn.gamma"], params[f"{prefix}.bn.beta"],
        bn_state[f"{prefix}.bn"], mode,
    )
    return y, BlockCache(index, x4, agg, pre_act, act, bn_cache, new_moments)


def attention_apply(
    x4: Tensor, params: ModelParams, config: MixerConfig
) -> tuple[Tensor, CaCache]:
    """Coordinate attention.

    The feature map is pooled along width (one row profile per height
    index) and along height (one column profile per width index); the
    two profiles are concatenated on the position axis and squeezed to
    ``C / r`` channels by a shared pointwise map with ReLU. Separate
    pointwise maps expand each half back to ``C`` channels, sigmoids
    turn them into gates in (0, 1), and the output multiplies every
    input element by its height gate times its width gate.
    """
    n, h, w, c = x4.shape
    row_profile = x4.mean(axis=2)  # (N, H, C)
    col_profile = x4.mean(axis=1)  # (N, W, C)
    pooled = np.concatenate([row_profile, col_profile], axis=1)  # (N, H+W, C)

    flat = pooled.reshape(-1, c)
    squeezed_pre = kernels.dense_forward(flat, params["ca.squeeze.w"], params["ca.squeeze.b"])
    squeezed = kernels.relu(squeezed_pre)
    sq = squeezed.reshape(n, h + w, -1)

    logit_h = kernels.dense_forward(
        sq[:, :h].reshape(-1, sq.shape[2]), params["ca.height.w"], params["ca.height.b"]
    ).reshape(n, h, c)
    logit_w = kernels.dense_forward(
        sq[:, h:].reshape(-1, sq.shape[2]), params["ca.width.w"], params["ca.width.b"]
    ).reshape(n, w, c)
    gate_h = kernels.sigmoid(logit_h)
    gate_w = kernels.sigmoid(logit_w)

    weight_map = gate_h[:, :, np.newaxis, :] * gate_w[:, np.newaxis, :, :]
    y = x4 * weight_map
    return y, CaCache(x4, pooled, squeezed_pre, gate_h, gate_w, weight_map)


def attention_backward(
    cache: CaCache, params: ModelParams, grad_out: Tensor
) -> tuple[Tensor, dict]:
    """Input and parameter gradients for :func:`attention_apply`."""
    x4 = cache.x
    n, h, w, c = x4.shape
    g = as_tensor(grad_out)

    dx = g * cache.weight_map
    d_map = g * x4
    d_gate_h = (d_map * cache.gate_w[:, np.newaxis, :, :]).sum(axis=2)  # (N, H, C)
    d_gate_w = (d_map * cache.gate_h[:, :, np.newaxis, :]).sum(axis=1)  # (N, W, C)
    d_logit_h = d_gate_h * cache.gate_h * (1.0 - cache.gate_h)
    d_logit_w = d_gate_w * cache.gate_w * (1.0 - cache.gate_w)

    squeezed = kernels.relu(cache.squeezed_pre)
    sq_dim = squeezed.shape[1]
    sq = squeezed.reshape(n, h + w, sq_dim)

    d_sq = np.empty_like(sq)
    d_sq_h, dw_h, db_h = kernels.dense_backward(
        sq[:, :h].reshape(-1, sq_dim), params["ca.height.w"], d_logit_h.reshape(-1, c)
    )
    d_sq_w, dw_w, db_w = kernels.dense_backward(
        sq[:, h:].reshape(-1, sq_dim), params["ca.width.w"], d_logit_w.reshape(-1, c)
    )
    d_sq[:, :h] = d_sq_h.reshape(n, h, sq_dim)
    d_sq[:, h:] = d_sq_w.reshape(n, w, sq_dim)

    d_squeezed_pre = kernels.relu_backward(cache.squeezed_pre, d_sq.reshape(-1, sq_dim))
    d_pooled_flat, dw_s, db_s = kernels.dense_backward(
        cache.pooled.reshape(-1, c), params["ca.squeeze.w"], d_squeezed_pre
    )
    d_pooled = d_pooled_flat.reshape(n, h + w, c)

    # Means spread their gradient uniformly over the pooled axis.
    dx += d_pooled[:, :h][:, :, np.newaxis, :] / w
    dx += d_pooled[:, h:][:, np.newaxis, :, :] / h

    grads = {
        "ca.squeeze.w": dw_s, "ca.squeeze.b": db_s,
        "ca.height.w": dw_h, "ca.height.b": db_h,
        "ca.width.w": dw_w, "ca.width.b": db_w,
    }
    return dx, grads


def head_apply(x4: Tensor, params: ModelParams) -> tuple[Tensor, HeadCache]:
    pooled = kernels.global_avg_pool(x4)
    logits = kernels.dense_forward(pooled, params["head.w"], params["head.b"])
    probs = kernels.softmax(logits)
    return probs, HeadCache(x4.shape, pooled, probs)


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------

def forward_batch(
    x: Tensor,
    params: ModelParams,
    bn_state: dict,
    config: MixerConfig,
    mode: str = "infer",
) -> tuple[Tensor, ModelCache]:
    """Run a batch ``(N, S, S, C)`` through the network.

    Returns per-sample class probabilities ``(N, L)`` and the cache
    consumed by :func:`backward_batch`. Updated batch-norm moments are
    inside the cache; :func:`collect_bn_updates` extracts them.
    """
    x4 = as_tensor(x)
    if x4.ndim != 4:
        raise ShapeError(f"forward_batch: expected (N, S, S, C), got shape {x4.shape}")
    s, c = config.patch_size, config.pca_count
    if x4.shape[1:] != (s, s, c):
        raise ShapeError(f"forward_batch: patches {x4.shape[1:]} do not match config ({s}, {s}, {c})")
    _check_params(params, config)

    y, stem_cache = stem_apply(x4, params, bn_state, config, mode)
    block_caches = []
    for i in range(1, config.num_blocks + 1):
        y, bc = block_apply(y, i, params, bn_state, config, mode)
        block_caches.append(bc)
    ca_cache = None
    if config.attention == "ca":
        y, ca_cache = attention_apply(y, params, config)
    probs, head_cache = head_apply(y, params)
    return probs, ModelCache(stem_cache, block_caches, ca_cache, head_cache)


def collect_bn_updates(cache: ModelCache) -> dict[str, BnMoments]:
    """Running-moment updates from a forward pass, keyed like the state dict."""
    updates = {"stem.bn": cache.stem.new_moments}
    for bc in cache.blocks:
        updates[f"block{bc.index}.bn"] = bc.new_moments
    return updates


def backward_batch(
    cache: ModelCache,
    params: ModelParams,
    config: MixerConfig,
    grad_probs: Tensor,
) -> tuple[dict, Tensor]:
    """Backpropagate ``d loss / d probs`` through the whole network.

    Returns a gradient dict with exactly the keys of ``params`` plus the
    gradient with respect to the input batch.
    """
    head = cache.head
    d_logits = kernels.softmax_backward(head.probs, grad_probs)
    d_pooled, dw_head, db_head = kernels.dense_backward(head.pooled, params["head.w"], d_logits)
    d_map = kernels.global_avg_pool_backward(head.map_shape, d_pooled)

    grads = {"head.w": dw_head, "head.b": db_head}
    if cache.ca is not None:
        d_map, ca_grads = attention_backward(cache.ca, params, d_map)
        grads.update(ca_grads)

    for bc in reversed(cache.blocks):
        prefix = f"block{bc.index}"
        d_act, dgamma, dbeta = kernels.batchnorm_backward(bc.bn_cache, d_map)
        grads[f"{prefix}.bn.gamma"] = dgamma
        grads[f"{prefix}.bn.beta"] = dbeta
        d_pre = kernels.gelu_backward(bc.pre_act, d_act)
        dx = d_pre.copy()  # residual into pre_act
        d_agg, dw_mix, db_mix = kernels.conv2d_backward(
            bc.aggregate, params[f"{prefix}.mix.w"], d_pre
        )
        grads[f"{prefix}.mix.w"] = dw_mix
        grads[f"{prefix}.mix.b"] = db_mix
        dx += d_agg  # residual into the aggregate
        for k in config.kernel_sizes:
            dxk, dwk, dbk = kernels.depthwise_conv2d_backward(
                bc.x, params[f"{prefix}.dw{k}.w"], d_agg
            )
            grads[f"{prefix}.dw{k}.w"] = dwk
            grads[f"{prefix}.dw{k}.b"] = dbk
            dx += dxk
        dxb, dw_br, db_br = kernels.conv2d_backward(bc.x, params[f"{prefix}.branch.w"], d_agg)
        grads[f"{prefix}.branch.w"] = dw_br
        grads[f"{prefix}.branch.b"] = db_br
        dx += dxb
        d_map = dx

    d_act, dgamma, dbeta = kernels.batchnorm_backward(cache.stem.bn_cache, d_map)
    grads["stem.bn.gamma"] = dgamma
    grads["stem.bn.beta"] = dbeta
    d_pre = kernels.gelu_backward(cache.stem.pre_act, d_act)
    d_input, dw_stem, db_stem = kernels.conv2d_backward(cache.stem.x, params["stem.conv.w"], d_pre)
    grads["stem.conv.w"] = dw_stem
    grads["stem.conv.b"] = db_stem

    ordered = {name: grads[name] for name in params}
    return ordered, d_input


# ---------------------------------------------------------------------------
# Single-sample convenience surface
# ---------------------------------------------------------------------------

def _promote_single(x: Tensor, what: str) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 3:
        return x[np.newaxis], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{what}: expected rank 3 or 4, got shape {x.shape}")


def stem_forward(
    patch: Tensor, params: ModelParams, bn_state: dict, config: MixerConfig, mode: str = "infer"
) -> Tensor:
    """Stem output for one patch or a batch; see :func:`stem_apply`."""
    x4, squeeze = _promote_single(patch, "stem_forward")
    y, _ = stem_apply(x4, params, bn_state, config, mode)
    return y[0] if squeeze else y


def mixer_block_forward(
    x: Tensor, index: int, params: ModelParams, bn_state: dict,
    config: MixerConfig, mode: str = "infer",
) -> Tensor:
    """Output of block ``index`` (1-based); see :func:`block_apply`."""
    x4, squeeze = _promote_single(x, "mixer_block_forward")
    y, _ = block_apply(x4, index, params, bn_state, config, mode)
    return y[0] if squeeze else y


def coordinate_attention(x: Tensor, params: ModelParams, config: MixerConfig) -> Tensor:
    """Attention-weighted map for one input or a batch; see :func:`attention_apply`."""
    x4, squeeze = _promote_single(x, "coordinate_attention")
    y, _ = attention_apply(x4, params, config)
    return y[0] if squeeze else y


def model_forward(
    patch: Tensor, params: ModelParams, bn_state: dict, config: MixerConfig, mode: str = "infer"
) -> Tensor:
    """Class probabilities for a single patch ``(S, S, C)``."""
    x = as_tensor(patch)
    if x.ndim != 3:
        raise ShapeError(f"model_forward: expected one (S, S, C) patch, got shape {x.shape}")
    probs, _ = forward_batch(x[np.newaxis], params, bn_state, config, mode)
    return probs[0]


def predict_batches(
    patches: Tensor,
    params: ModelParams,
    bn_state: dict,
    config: MixerConfig,
    batch_size: int = 256,
) -> Tensor:
    """Predicted labels (1-based) for ``(N, S, S, C)``, evaluated in chunks."""
    patches = as_tensor(patches)
    if patches.ndim != 4:
        raise ShapeError(f"predict_batches: expected (N, S, S, C), got shape {patches.shape}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    out = np.empty(patches.shape[0], dtype=np.int64)
    for start in range(0, patches.shape[0], batch_size):
        chunk = patches[start:start + batch_size]
        probs, _ = forward_batch(chunk, params, bn_state, config, "infer")
        out[start:start + chunk.shape[0]] = np.argmax(probs, axis=1) + 1
    return out
