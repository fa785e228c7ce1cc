import math

import numpy as np
import pytest

from weedctx import net
from weedctx.net import (
    REDUCED_SPEC,
    CheckpointError,
    ModelParams,
    NetworkSpec,
    TrainingConfig,
    backward,
    forward,
    gradient_check,
    init_params,
    load_checkpoint,
    loss,
    save_checkpoint,
    sgd_step,
    train,
)

MICRO_SPEC = NetworkSpec(input_h=8, input_w=8, input_c=3,
                         conv_filters=(2, 2), dense_units=(3, 1))
TOY_SPEC = NetworkSpec(input_h=8, input_w=8, input_c=3,
                       conv_filters=(4, 4), dense_units=(8, 1))


def zero_params(spec, dtype=np.float64):
    p = init_params(spec, seed=0, dtype=dtype)
    for arr in p.arrays():
        arr[:] = 0
    return p


# ---------------------------------------------------------------- spec & init

def test_spec_feature_dims_follow_floor_pooling():
    spec = NetworkSpec()  # 300 -> 150 -> 75 -> 37
    assert spec.feature_hw() == (37, 37)
    assert REDUCED_SPEC.feature_hw() == (3, 3)
    assert REDUCED_SPEC.flat_features() == 72


def test_spec_rejects_bad_shapes():
    with pytest.raises(net.ShapeError):
        NetworkSpec(conv_filters=(32, 32, 64))
    with pytest.raises(net.ShapeError):
        NetworkSpec(dense_units=(64, 2))
    with pytest.raises(net.ShapeError):
        NetworkSpec(input_h=4, input_w=4, conv_filters=(2, 2, 2, 2, 2, 2), dense_units=(1,))


def test_init_deterministic_and_zero_biases():
    a = init_params(REDUCED_SPEC, seed=42)
    b = init_params(REDUCED_SPEC, seed=42)
    for x, y in zip(a.arrays(), b.arrays()):
        assert np.array_equal(x, y)
    assert all((bias == 0).all() for bias in a.conv_b + a.dense_b)
    c = init_params(REDUCED_SPEC, seed=43)
    assert not np.array_equal(a.conv_w[0], c.conv_w[0])


def test_init_variance_matches_fan_in():
    # First conv kernel with 10800 draws; fan_in = 9*3 = 27.
    spec = NetworkSpec(input_h=8, input_w=8, conv_filters=(400, 400), dense_units=(4, 1))
    p = init_params(spec, seed=7, dtype=np.float64)
    observed = p.conv_w[0].var()
    expected = 2.0 / 27.0
    assert abs(observed - expected) / expected < 0.20
    assert p.conv_w[0].size >= 10_000


# ---------------------------------------------------------------- forward

def test_forward_zero_params_gives_half():
    p = zero_params(MICRO_SPEC)
    x = np.random.default_rng(0).uniform(0, 1, (4, 8, 8, 3))
    out = forward(p, x)
    assert np.all(out == 0.5)


def test_forward_final_bias_only_is_logistic_of_bias():
    p = zero_params(MICRO_SPEC)
    p.dense_b[-1][:] = 0.7
    out = forward(p, np.zeros((2, 8, 8, 3)))
    assert np.allclose(out, 1.0 / (1.0 + math.exp(-0.7)), atol=1e-12)


def naive_forward_single(params, x):
    """Independent direct-convolution reference: plain nested loops."""
    a = x.astype(np.float64)
    for i, (w, b) in enumerate(zip(params.conv_w, params.conv_b)):
        H, W, _ = a.shape
        F = w.shape[-1]
        z = np.zeros((H, W, F))
        for yy in range(H):
            for xx in range(W):
                acc = b.astype(np.float64).copy()
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        sy, sx = yy + dy, xx + dx
                        if 0 <= sy < H and 0 <= sx < W:
                            acc = acc + a[sy, sx] @ w[dy + 1, dx + 1]
                z[yy, xx] = acc
        a = np.maximum(z, 0)
        if i % 2 == 1:
            H2, W2 = a.shape[0] // 2, a.shape[1] // 2
            pooled = np.zeros((H2, W2, F))
            for yy in range(H2):
                for xx in range(W2):
                    pooled[yy, xx] = a[2 * yy:2 * yy + 2, 2 * xx:2 * xx + 2].reshape(4, F).max(axis=0)
            a = pooled
    v = a.reshape(-1)
    for i, (w, b) in enumerate(zip(params.dense_w, params.dense_b)):
        v = v @ w + b
        if i < len(params.dense_w) - 1:
            v = np.maximum(v, 0)
    return 1.0 / (1.0 + math.exp(-v[0]))


def test_forward_matches_direct_convolution_reference():
    params = init_params(REDUCED_SPEC, seed=3, dtype=np.float64)
    x = np.random.default_rng(5).uniform(0, 1, (1, 24, 24, 3))
    got = forward(params, x)[0]
    want = naive_forward_single(params, x[0])
    assert abs(got - want) < 1e-5


def test_forward_output_range_and_shape_errors():
    params = init_params(REDUCED_SPEC, seed=1)
    x = np.random.default_rng(2).uniform(0, 1, (6, 24, 24, 3)).astype(np.float32)
    p = forward(params, x)
    assert np.all((p > 0) & (p < 1)) and np.all(np.isfinite(p))
    with pytest.raises(net.ShapeError):
        forward(params, x[:, :12])


def test_monotone_shift_of_final_preactivation():
    params = init_params(REDUCED_SPEC, seed=4, dtype=np.float64)
    x = np.random.default_rng(6).uniform(0, 1, (5, 24, 24, 3))
    base = forward(params, x)
    shifted = params.copy()
    shifted.dense_b[-1][:] += 0.3
    up = forward(shifted, x)
    assert np.all(up > base)
    assert np.array_equal(np.argsort(up), np.argsort(base))


# ---------------------------------------------------------------- loss

def test_loss_at_half_is_ln2():
    assert abs(loss(np.full(7, 0.5), np.array([0, 1, 0, 1, 1, 0, 1])) - math.log(2)) < 1e-12


def test_loss_perfect_predictions_near_zero():
    p = np.array([1.0, 0.0, 1.0])
    y = np.array([1, 0, 1])
    val = loss(p, y)
    assert 0 < val < 2e-7


def test_loss_matches_manual_evaluation():
    rng = np.random.default_rng(8)
    p = rng.uniform(0.01, 0.99, 50)
    y = rng.integers(0, 2, 50)
    manual = -sum(math.log(pi) if yi else math.log(1 - pi) for pi, yi in zip(p, y)) / 50
    assert abs(loss(p, y) - manual) < 1e-10


# ---------------------------------------------------------------- gradients

def test_final_bias_gradient_is_mean_residual():
    params = init_params(REDUCED_SPEC, seed=9, dtype=np.float64)
    x = np.random.default_rng(10).uniform(0, 1, (6, 24, 24, 3))
    y = np.array([1, 0, 1, 1, 0, 0], dtype=np.float64)
    p = forward(params, x)
    grads = backward(params, x, y)
    assert abs(grads.dense_b[-1][0] - np.mean(p - y)) < 1e-12


def test_gradient_check_micro_spec():
    errors = gradient_check(spec=MICRO_SPEC, batch=2, seed=11, h=1e-5)
    assert max(errors.values()) < 1e-4


def test_near_zero_gradients_when_confident_and_correct():
    params = zero_params(MICRO_SPEC)
    params.dense_b[-1][:] = 30.0  # p ~ 1 - 1e-13, clamped region
    x = np.random.default_rng(12).uniform(0, 1, (3, 8, 8, 3))
    grads = backward(params, x, np.ones(3))
    assert max(np.abs(g).max() for g in grads.arrays()) < 1e-12


# ---------------------------------------------------------------- sgd

def test_sgd_step_arithmetic():
    params = init_params(MICRO_SPEC, seed=13, dtype=np.float64)
    grads = init_params(MICRO_SPEC, seed=14, dtype=np.float64)
    out = sgd_step(params, grads, 0.1)
    for o, p, g in zip(out.arrays(), params.arrays(), grads.arrays()):
        assert np.allclose(o, p - 0.1 * g, atol=1e-15)
    same = sgd_step(params, grads, 0.0)
    for o, p in zip(same.arrays(), params.arrays()):
        assert np.array_equal(o, p)


def test_sgd_two_steps_equal_one_combined_for_constant_grad():
    params = init_params(MICRO_SPEC, seed=15, dtype=np.float64)
    grads = init_params(MICRO_SPEC, seed=16, dtype=np.float64)
    two = sgd_step(sgd_step(params, grads, 0.03), grads, 0.07)
    one = sgd_step(params, grads, 0.10)
    for a, b in zip(two.arrays(), one.arrays()):
        assert np.allclose(a, b, atol=1e-12)


# ---------------------------------------------------------------- training

def toy_sets(n=24, seed=17):
    # Bright tiles are weed(1), dark tiles are not: linearly separable.
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = np.empty((n, 8, 8, 3), dtype=np.uint8)
    for i, yi in enumerate(y):
        base = 180 if yi else 60
        x[i] = rng.integers(base - 30, base + 30, (8, 8, 3))
    return (x, y), (x[: n // 2], y[: n // 2])


def test_train_history_shape_and_determinism():
    train_set, val_set = toy_sets()
    cfg = TrainingConfig(learning_rate=0.05, decay=1e-3, epochs=5, batch_size=8,
                         seed=21, precision="f64")
    params_a, hist_a = train(train_set, val_set, cfg, spec=TOY_SPEC)
    params_b, hist_b = train(train_set, val_set, cfg, spec=TOY_SPEC)
    assert hist_a == hist_b
    for x, y in zip(params_a.arrays(), params_b.arrays()):
        assert np.array_equal(x, y)
    assert len(hist_a) == 5
    assert [h["epoch"] for h in hist_a] == [1, 2, 3, 4, 5]
    assert hist_a[0]["lr"] == 0.05
    assert hist_a[1]["lr"] == pytest.approx(0.05 / 1.001)


def test_train_learns_separable_toy():
    train_set, val_set = toy_sets()
    cfg = TrainingConfig(learning_rate=0.05, epochs=30, batch_size=8, seed=22)
    params, hist = train(train_set, val_set, cfg, spec=TOY_SPEC)
    assert max(h["train_acc"] for h in hist) == 1.0
    _, acc = net._eval_split(params, val_set[0], val_set[1])
    assert acc == 1.0


def test_train_returns_best_validation_epoch():
    train_set, val_set = toy_sets()
    cfg = TrainingConfig(learning_rate=0.05, epochs=12, batch_size=8, seed=23, precision="f64")
    params, hist = train(train_set, val_set, cfg, spec=TOY_SPEC)
    best = max(h["val_acc"] for h in hist)
    _, acc = net._eval_split(params, val_set[0], val_set[1])
    assert acc == best


def test_train_rejects_bad_config_and_empty_sets():
    with pytest.raises(ValueError):
        TrainingConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainingConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainingConfig(precision="f16")
    train_set, val_set = toy_sets()
    cfg = TrainingConfig(epochs=1)
    with pytest.raises(ValueError):
        train((train_set[0][:0], train_set[1][:0]), val_set, cfg, spec=TOY_SPEC)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_bit_exact():
    params = init_params(REDUCED_SPEC, seed=30)
    blob = save_checkpoint(params)
    loaded = load_checkpoint(blob)
    assert loaded.spec == REDUCED_SPEC
    for a, b in zip(params.arrays(), loaded.arrays()):
        assert np.array_equal(a, b)
    assert np.array_equal(save_checkpoint(loaded), blob)


def test_checkpoint_length_formula():
    params = init_params(REDUCED_SPEC, seed=31)
    blob = save_checkpoint(params)
    assert len(blob) == net.checkpoint_header_length(REDUCED_SPEC) + 4 * REDUCED_SPEC.param_count()


def test_checkpoint_rejects_corruption():
    params = init_params(MICRO_SPEC, seed=32)
    blob = save_checkpoint(params)
    with pytest.raises(CheckpointError):
        load_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(blob[:4] + bytes([99]) + blob[5:])
    with pytest.raises(CheckpointError):
        load_checkpoint(blob[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(blob + b"\x00")
