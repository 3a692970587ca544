"""Loss, optimizer and the training loop.

Everything here is functional: ``adam_step`` returns new parameter and
state dicts, and ``train_loop`` owns the only mutable copies. The loop
carves a validation slice off the training patches, shuffles what
remains every epoch with its own seeded generator, and stops once the
validation loss has not improved for ``patience`` consecutive epochs,
restoring the parameters saved at the best epoch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .model import (
    MixerConfig,
    ModelParams,
    backward_batch,
    collect_bn_updates,
    forward_batch,
    init_bn_state,
    init_params,
)
from .preprocess import PatchSet, round_half_up
from .tensor_core import Tensor, as_tensor

PROB_FLOOR = 1e-12


def one_hot(labels, num_classes: int) -> Tensor:
    """Encode 1-based class labels ``(M,)`` as rows of ``(M, L)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ShapeError(f"labels must be a vector, got shape {labels.shape}")
    if labels.size and (labels.min() < 1 or labels.max() > num_classes):
        raise ShapeError(f"labels must lie in 1..{num_classes}")
    out = np.zeros((labels.shape[0], num_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels - 1] = 1.0
    return out


def cross_entropy(y_true: Tensor, y_pred: Tensor) -> float:
    """Mean categorical cross-entropy over a batch.

    ``y_true`` holds one-hot (or soft) target rows, ``y_pred`` predicted
    probabilities; both ``(M, L)``. Predictions are clamped below at
    1e-12 before the logarithm so a confidently wrong model yields a
    large finite loss instead of infinity.
    """
    y_true = as_tensor(y_true)
    y_pred = as_tensor(y_pred)
    if y_true.ndim != 2 or y_true.shape != y_pred.shape:
        raise ShapeError(
            f"cross_entropy expects matching (M, L) arrays, got {y_true.shape} and {y_pred.shape}"
        )
    m = y_true.shape[0]
    if m == 0:
        raise ShapeError("cross_entropy: empty batch")
    clamped = np.maximum(y_pred, PROB_FLOOR)
    return float(-np.sum(y_true * np.log(clamped)) / m)


def cross_entropy_backward(y_true: Tensor, y_pred: Tensor) -> Tensor:
    """Gradient of :func:`cross_entropy` with respect to ``y_pred``.

    Zero where the clamp is active: there the loss is locally constant
    in the prediction.
    """
    y_true = as_tensor(y_true)
    y_pred = as_tensor(y_pred)
    if y_true.ndim != 2 or y_true.shape != y_pred.shape:
        raise ShapeError(
            f"cross_entropy_backward expects matching (M, L) arrays, "
            f"got {y_true.shape} and {y_pred.shape}"
        )
    m = y_true.shape[0]
    clamped = np.maximum(y_pred, PROB_FLOOR)
    return np.where(y_pred >= PROB_FLOOR, -y_true / (m * clamped), 0.0)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First and second moment estimates plus the step counter."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(params: ModelParams, beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> AdamState:
    if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
        raise ConfigError(f"Adam betas must lie in [0, 1), got {beta1}, {beta2}")
    if epsilon <= 0.0:
        raise ConfigError(f"Adam epsilon must be positive, got {epsilon}")
    zeros = {name: np.zeros_like(value) for name, value in params.items()}
    return AdamState(m=zeros, v={name: z.copy() for name, z in zeros.items()},
                     beta1=beta1, beta2=beta2, epsilon=epsilon)


def adam_step(
    params: ModelParams, grads: dict, state: AdamState, lr: float
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update. Pure: inputs are not mutated."""
    if lr <= 0.0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if set(grads) != set(params):
        raise ConfigError("gradient names do not match parameter names")
    t = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    new_params: ModelParams = {}
    new_m = {}
    new_v = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(new_m, new_v, t, b1, b2, eps)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 150
    patience: int = 10
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be positive, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be positive, got {self.patience}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError(
                f"validation_fraction must be in (0, 1), got {self.validation_fraction}"
            )

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "validation_fraction": self.validation_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {"learning_rate", "batch_size", "max_epochs", "patience",
                 "validation_fraction", "seed"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown train config keys: {sorted(extra)}")
        return cls(**data)


@dataclass
class EpochRecord:
    epoch: int  # 1-based
    train_loss: float
    val_loss: float
    val_accuracy: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_accuracy": self.val_accuracy,
        }


@dataclass
class TrainResult:
    params: ModelParams  # snapshot from the best epoch
    bn_state: dict
    history: list
    best_epoch: int
    best_val_loss: float
    total_steps: int
    stopped_early: bool


def _batch_slices(count: int, batch_size: int) -> list[tuple[int, int]]:
    # A trailing batch of a single sample is merged into its predecessor:
    # batch statistics over one sample are meaningless for normalization.
    slices = [(start, min(start + batch_size, count)) for start in range(0, count, batch_size)]
    if len(slices) > 1 and slices[-1][1] - slices[-1][0] == 1:
        last = slices.pop()
        prev = slices.pop()
        slices.append((prev[0], last[1]))
    return slices


def evaluate_split(
    patches: Tensor,
    labels: np.ndarray,
    params: ModelParams,
    bn_state: dict,
    config: MixerConfig,
    batch_size: int = 256,
) -> tuple[float, float]:
    """Inference-mode mean loss and accuracy over a labeled patch array."""
    patches = as_tensor(patches)
    n = patches.shape[0]
    targets = one_hot(labels, config.num_classes)
    loss_sum = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        probs, _ = forward_batch(patches[start:stop], params, bn_state, config, "infer")
        loss_sum += cross_entropy(targets[start:stop], probs) * (stop - start)
        correct += int(np.sum(np.argmax(probs, axis=1) + 1 == labels[start:stop]))
    return loss_sum / n, correct / n


def train_loop(
    train_set: PatchSet,
    model_config: MixerConfig,
    train_config: TrainConfig,
    monitor_hook: Optional[Callable[[int, float], float]] = None,
) -> TrainResult:
    """Train from a fresh initialization on ``train_set``.

    A ``validation_fraction`` slice of the patches is held out for early
    stopping, and the rest is shuffled into batches every epoch. The
    epoch whose monitored validation loss is strictly lower than every
    previous epoch's defines the returned parameters: training keeps its
    own deep copies, so the snapshot is exactly the state at that epoch.

    ``monitor_hook`` (mainly for tests) maps ``(epoch, val_loss)`` to
    the value the early-stopping comparison actually uses; the recorded
    history always keeps the real loss.
    """
    if len(train_set) < 3:
        raise ConfigError(f"training set has {len(train_set)} patches; need at least 3")
    rng = np.random.default_rng(train_config.seed)
    params = init_params(model_config, train_config.seed)
    bn_state = init_bn_state(model_config)
    adam = adam_init(params)

    n = len(train_set)
    n_val = max(1, round_half_up(train_config.validation_fraction * n))
    if n - n_val < 2:
        raise ConfigError(
            f"validation carve of {n_val} leaves {n - n_val} training patches; need at least 2"
        )
    order = rng.permutation(n)
    val_idx = order[:n_val]
    fit_idx = order[n_val:]
    fit_patches = train_set.patches[fit_idx]
    fit_targets = one_hot(train_set.labels[fit_idx], model_config.num_classes)
    val_patches = train_set.patches[val_idx]
    val_labels = train_set.labels[val_idx]

    best_monitored = np.inf
    best_epoch = 0
    best_val_loss = np.inf
    best_params = {name: value.copy() for name, value in params.items()}
    best_bn = {name: moments.copy() for name, moments in bn_state.items()}
    history: list[EpochRecord] = []
    stale = 0
    total_steps = 0
    stopped_early = False

    n_fit = fit_patches.shape[0]
    for epoch in range(1, train_config.max_epochs + 1):
        perm = rng.permutation(n_fit)
        loss_sum = 0.0
        for start, stop in _batch_slices(n_fit, train_config.batch_size):
            batch = perm[start:stop]
            probs, cache = forward_batch(fit_patches[batch], params, bn_state, model_config, "train")
            loss_sum += cross_entropy(fit_targets[batch], probs) * (stop - start)
            bn_state = collect_bn_updates(cache)
            d_probs = cross_entropy_backward(fit_targets[batch], probs)
            grads, _ = backward_batch(cache, params, model_config, d_probs)
            params, adam = adam_step(params, grads, adam, train_config.learning_rate)
            total_steps += 1

        val_loss, val_acc = evaluate_split(val_patches, val_labels, params, bn_state, model_config)
        history.append(EpochRecord(epoch, loss_sum / n_fit, val_loss, val_acc))

        monitored = monitor_hook(epoch, val_loss) if monitor_hook else val_loss
        if monitored < best_monitored:
            best_monitored = monitored
            best_epoch = epoch
            best_val_loss = val_loss
            best_params = {name: value.copy() for name, value in params.items()}
            best_bn = {name: moments.copy() for name, moments in bn_state.items()}
            stale = 0
        else:
            stale += 1
            if stale >= train_config.patience:
                stopped_early = True
                break

    return TrainResult(
        params=best_params,
        bn_state=best_bn,
        history=history,
        best_epoch=best_epoch,
        best_val_loss=best_val_loss,
        total_steps=total_steps,
        stopped_early=stopped_early,
    )
