import math

import numpy as np
import pytest

from mixerca import train
from mixerca.errors import ConfigError, ShapeError
from mixerca.model import MixerConfig, forward_batch, init_bn_state, init_params
from mixerca.preprocess import PatchSet
from mixerca.train import (
    AdamState,
    TrainConfig,
    adam_init,
    adam_step,
    cross_entropy,
    cross_entropy_backward,
    evaluate_split,
    one_hot,
    train_loop,
)


def tiny_model_config():
    return MixerConfig(
        patch_size=3,
        pca_count=2,
        num_classes=2,
        stem_filters=4,
        kernel_sizes=(3,),
        num_blocks=1,
        attention="none",
    )


def make_train_set(n=20, seed=0):
    gen = np.random.default_rng(seed)
    patches = gen.standard_normal((n, 3, 3, 2))
    labels = (np.arange(n) % 2) + 1
    coords = np.stack([np.arange(n), np.arange(n)], axis=1)
    return PatchSet(patches, labels.astype(np.int64), coords)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def test_one_hot_hand_case():
    rows = one_hot(np.array([1, 3, 2]), 3)
    np.testing.assert_array_equal(rows, [[1, 0, 0], [0, 0, 1], [0, 1, 0]])
    with pytest.raises(ShapeError):
        one_hot(np.array([0, 1]), 3)
    with pytest.raises(ShapeError):
        one_hot(np.array([4]), 3)


def test_cross_entropy_hand_cases():
    perfect = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert cross_entropy(perfect, perfect) <= 1e-9
    half = np.array([[0.5, 0.5]])
    assert cross_entropy(np.array([[1.0, 0.0]]), half) == pytest.approx(math.log(2.0), abs=1e-12)
    uniform = np.full((2, 4), 0.25)
    y = one_hot(np.array([1, 3]), 4)
    assert cross_entropy(y, uniform) == -math.log(0.25)
    assert cross_entropy(y, uniform) == pytest.approx(math.log(4.0), abs=1e-15)


def test_cross_entropy_nonnegative(rng):
    probs = rng.dirichlet(np.ones(5), size=8)
    y = one_hot(rng.integers(1, 6, size=8), 5)
    assert cross_entropy(y, probs) >= 0.0


def test_cross_entropy_shape_errors():
    with pytest.raises(ShapeError):
        cross_entropy(np.ones((2, 3)), np.ones((2, 4)))
    with pytest.raises(ShapeError):
        cross_entropy(np.ones(3), np.ones(3))
    with pytest.raises(ShapeError):
        cross_entropy(np.ones((0, 3)), np.ones((0, 3)))


def test_cross_entropy_backward_values():
    y = np.array([[0.0, 1.0]])
    p = np.array([[0.3, 0.7]])
    grad = cross_entropy_backward(y, p)
    np.testing.assert_allclose(grad, [[0.0, -1.0 / 0.7]], rtol=1e-15)
    # probability at the floor: the clamp flattens the loss there, so the
    # gradient is zero rather than -1/floor
    hard = cross_entropy_backward(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]))
    np.testing.assert_array_equal(hard, [[0.0, 0.0]])
    # averaged over the batch
    batch = cross_entropy_backward(np.array([[0.0, 1.0], [1.0, 0.0]]),
                                   np.array([[0.5, 0.5], [0.5, 0.5]]))
    np.testing.assert_allclose(batch, [[0.0, -1.0], [-1.0, 0.0]], rtol=1e-15)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_first_step_moves_by_signed_rate():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    grads = {"w": np.array([0.4, -0.3, 0.9])}
    state = adam_init(params)
    new_params, new_state = adam_step(params, grads, state, lr=0.01)
    delta = new_params["w"] - params["w"]
    np.testing.assert_allclose(delta, -0.01 * np.sign(grads["w"]), rtol=0, atol=1e-6)
    assert new_state.step == 1


def test_adam_zero_gradient_is_identity():
    params = {"w": np.array([1.0, -2.0]), "b": np.array([0.25])}
    grads = {name: np.zeros_like(value) for name, value in params.items()}
    state = adam_init(params)
    new_params, new_state = adam_step(params, grads, state, lr=0.1)
    for name in params:
        np.testing.assert_array_equal(new_params[name], params[name])
    assert new_state.step == state.step + 1


def test_adam_step_is_pure():
    params = {"w": np.array([1.0, 2.0])}
    grads = {"w": np.array([0.5, -0.5])}
    state = adam_init(params)
    before_p = params["w"].copy()
    before_m = state.m["w"].copy()
    adam_step(params, grads, state, lr=0.05)
    np.testing.assert_array_equal(params["w"], before_p)
    np.testing.assert_array_equal(state.m["w"], before_m)
    assert state.step == 0


def test_adam_two_steps_shrink_update_toward_signs():
    # with a constant gradient the second step keeps moving the same way
    params = {"w": np.array([1.0])}
    grads = {"w": np.array([0.7])}
    state = adam_init(params)
    p1, state = adam_step(params, grads, state, lr=0.01)
    p2, state = adam_step(p1, grads, state, lr=0.01)
    assert p2["w"][0] < p1["w"][0] < params["w"][0]
    assert state.step == 2


def test_adam_validation_errors():
    params = {"w": np.ones(2)}
    state = adam_init(params)
    with pytest.raises(ConfigError):
        adam_init(params, beta1=1.0)
    with pytest.raises(ConfigError):
        adam_init(params, epsilon=0.0)
    with pytest.raises(ConfigError):
        adam_step(params, {"v": np.ones(2)}, state, lr=0.1)
    with pytest.raises(ConfigError):
        adam_step(params, {"w": np.ones(2)}, state, lr=0.0)
    with pytest.raises(ShapeError):
        adam_step(params, {"w": np.ones(3)}, state, lr=0.1)


# ---------------------------------------------------------------------------
# configuration and batching
# ---------------------------------------------------------------------------


def test_train_config_validation():
    TrainConfig()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(patience=0)
    with pytest.raises(ConfigError):
        TrainConfig(max_epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(validation_fraction=1.0)


def test_train_config_dict_roundtrip():
    cfg = TrainConfig(learning_rate=5e-4, batch_size=16, seed=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({**cfg.to_dict(), "momentum": 0.9})


def test_batch_slices():
    assert train._batch_slices(10, 4) == [(0, 4), (4, 8), (8, 10)]
    assert train._batch_slices(8, 4) == [(0, 4), (4, 8)]
    # a trailing batch of one merges into its neighbor so batch statistics
    # stay defined
    assert train._batch_slices(9, 4) == [(0, 4), (4, 9)]
    assert train._batch_slices(1, 4) == [(0, 1)]
    assert train._batch_slices(3, 8) == [(0, 3)]


def test_evaluate_split_matches_direct_computation(rng):
    cfg = tiny_model_config()
    params = init_params(cfg, seed=0)
    bn_state = init_bn_state(cfg)
    patches = rng.standard_normal((11, 3, 3, 2))
    labels = rng.integers(1, 3, size=11)
    loss, acc = evaluate_split(patches, labels, params, bn_state, cfg)
    probs, _ = forward_batch(patches, params, bn_state, cfg, mode="infer")
    assert loss == cross_entropy(one_hot(labels, 2), probs)
    assert acc == float(np.mean(np.argmax(probs, axis=1) + 1 == labels))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def test_train_loop_runs_to_max_epochs_when_improving():
    result = train_loop(
        make_train_set(20), tiny_model_config(),
        TrainConfig(batch_size=4, max_epochs=3, patience=2, seed=0),
        monitor_hook=lambda epoch, val_loss: 1.0 / epoch,
    )
    assert len(result.history) == 3
    assert not result.stopped_early
    assert result.best_epoch == 3
    # 20 patches, 2 held out, batches of 4: five steps per epoch
    assert result.total_steps == 15
    assert [r.epoch for r in result.history] == [1, 2, 3]
    assert result.best_val_loss == result.history[-1].val_loss


def test_train_loop_stops_after_plateau_and_restores_best():
    cfg = tiny_model_config()
    halt_at = 3
    hook = lambda epoch, val_loss: 1.0 / min(epoch, halt_at)
    long = train_loop(
        make_train_set(20), cfg,
        TrainConfig(batch_size=4, max_epochs=50, patience=4, seed=7),
        monitor_hook=hook,
    )
    assert long.stopped_early
    assert len(long.history) == halt_at + 4
    assert long.best_epoch == halt_at

    # replaying the identical schedule but halting at the best epoch must
    # land on bit-identical parameters: the snapshot really is epoch 3
    short = train_loop(
        make_train_set(20), cfg,
        TrainConfig(batch_size=4, max_epochs=halt_at, patience=4, seed=7),
        monitor_hook=hook,
    )
    assert set(long.params) == set(short.params)
    for name in long.params:
        np.testing.assert_array_equal(long.params[name], short.params[name])
    for name in long.bn_state:
        np.testing.assert_array_equal(long.bn_state[name].mean, short.bn_state[name].mean)
        np.testing.assert_array_equal(long.bn_state[name].var, short.bn_state[name].var)


def test_train_loop_seed_determinism():
    cfg = tiny_model_config()
    tc = TrainConfig(batch_size=4, max_epochs=2, patience=5, seed=11)
    a = train_loop(make_train_set(20), cfg, tc)
    b = train_loop(make_train_set(20), cfg, tc)
    assert a.history == b.history
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    c = train_loop(make_train_set(20), cfg, TrainConfig(batch_size=4, max_epochs=2,
                                                        patience=5, seed=12))
    assert a.history != c.history


def test_train_loop_best_loss_comes_from_history():
    result = train_loop(
        make_train_set(24), tiny_model_config(),
        TrainConfig(batch_size=4, max_epochs=4, patience=10, seed=2),
    )
    assert result.best_val_loss == result.history[result.best_epoch - 1].val_loss
    assert min(r.val_loss for r in result.history) == result.best_val_loss


def test_train_loop_rejects_degenerate_sets():
    with pytest.raises(ConfigError):
        train_loop(make_train_set(2), tiny_model_config(), TrainConfig(batch_size=4))
    with pytest.raises(ConfigError):
        train_loop(
            make_train_set(3), tiny_model_config(),
            TrainConfig(batch_size=4, validation_fraction=0.9),
        )
