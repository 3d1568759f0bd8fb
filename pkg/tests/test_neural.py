"""
Tests for the training engine:
1) architecture validation and shrinking
2) forward / backward against analytic values and finite differences
3) SGD with momentum, local training, evaluation
"""
import math
import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(__file__)))
from engine.neural import (Dense, Flatten, ModelArch, ModelError, Scaler, TrainConfig, backward, default_arch,
                           dense_arch, evaluate, forward, gradient_check, init_params, local_train,
                           random_tiny_arch, sgd_step, shrink_arch)
from etl.synthetic import synthetic_classes
from fl.partition import Ratio


def test_default_arch_shapes():
    arch = default_arch((1, 28, 28), 10, (16, 32))
    shapes = arch.param_shapes()
    assert shapes["conv1.weight"] == (16, 1, 3, 3)
    assert shapes["conv2.weight"] == (32, 16, 3, 3)
    assert shapes["fc.weight"] == (10, 32 * 7 * 7)
    with pytest.raises(ModelError):
        default_arch((1, 28, 28), 10, (12, 32))


def test_arch_validation():
    with pytest.raises(ModelError):
        ModelArch((Flatten(), Dense("out", 3, 5, partition_out=False)), (1, 1, 4), 3)
    with pytest.raises(ModelError):
        ModelArch((Flatten(), Dense("out", 3, 4)), (1, 1, 4), 3)  # partitioned output dim


def test_shrink_arch():
    arch = default_arch((1, 28, 28), 10, (32, 64))
    assert shrink_arch(arch, Ratio(0)) is arch
    small = shrink_arch(arch, Ratio(2))
    shapes = small.param_shapes()
    assert shapes["conv1.weight"] == (8, 1, 3, 3)
    assert shapes["conv2.weight"] == (16, 8, 3, 3)
    assert shapes["fc.weight"][0] == 10
    assert small.input_shape == arch.input_shape
    assert math.prod(shapes["conv2.weight"]) * 16 == math.prod(arch.param_shapes()["conv2.weight"])


def test_zero_params_give_zero_logits_and_ln_c_loss():
    arch = dense_arch(6, (16, 16), 5)
    params = {k: np.zeros(s) for k, s in arch.param_shapes().items()}
    x = np.random.default_rng(0).standard_normal((7, 1, 1, 6))
    logits, cache = forward(params, arch, x)
    assert not logits.any()
    loss, _ = backward(cache, np.arange(7) % 5)
    assert loss == pytest.approx(math.log(5), abs=1e-12)


def test_single_neuron_with_scaler():
    arch = ModelArch((Flatten(), Dense("out", 1, 1, bias=False, partition_out=False), Scaler(0.5)), (1, 1, 1), 1)
    logits, _ = forward({"out.weight": np.array([[3.0]])}, arch, np.array([[[[2.0]]]]))
    assert logits[0, 0] == pytest.approx(12.0)
    same = ModelArch((Flatten(), Dense("out", 1, 1, bias=False, partition_out=False), Scaler(1.0)), (1, 1, 1), 1)
    logits, _ = forward({"out.weight": np.array([[3.0]])}, same, np.array([[[[2.0]]]]))
    assert logits[0, 0] == pytest.approx(6.0)


def test_duplicated_batch_keeps_loss_and_gradients():
    rng = np.random.default_rng(5)
    arch = default_arch((1, 8, 8), 4, (16, 16))
    params = init_params(arch, rng)
    x = rng.standard_normal((3, 1, 8, 8))
    y = np.array([0, 3, 1])
    loss1, g1 = backward(forward(params, arch, x)[1], y)
    loss2, g2 = backward(forward(params, arch, np.concatenate([x, x]))[1], np.concatenate([y, y]))
    assert loss1 == pytest.approx(loss2, abs=1e-12)
    for k in g1:
        assert np.allclose(g1[k], g2[k], atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_check_random_tiny_arch(seed):
    rng = np.random.default_rng(seed)
    arch = random_tiny_arch(rng)
    params = init_params(arch, rng)
    x = rng.standard_normal((4, *arch.input_shape))
    y = rng.integers(0, arch.num_classes, size=4)
    errors = gradient_check(params, arch, x, y, rng)
    assert max(errors.values()) < 1e-4, errors


def test_sgd_momentum_hand_iteration():
    cfg = TrainConfig(lr=1.0, momentum=0.9, weight_decay=0.0)
    p, state = {"w": np.array([0.0])}, {}
    g = {"w": np.array([1.0])}
    p, state = sgd_step(p, g, state, cfg)
    p, state = sgd_step(p, g, state, cfg)
    assert p["w"][0] == pytest.approx(-2.9)


def test_sgd_degenerate_cases():
    p = {"w": np.array([1.5, -2.0])}
    plain = sgd_step(p, {"w": np.array([1.0, 2.0])}, {}, TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.0))[0]
    assert np.allclose(plain["w"], [1.4, -2.2])
    fixed = sgd_step(p, {"w": np.zeros(2)}, {}, TrainConfig(lr=0.1, weight_decay=0.0))[0]
    assert np.array_equal(fixed["w"], p["w"])
    with pytest.raises(ModelError):
        TrainConfig(momentum=1.0)


def separable_shard(seed=0):
    return synthetic_classes(2, 50, 16, 8.0, np.random.default_rng(seed))


def test_local_train_zero_epochs_is_noop():
    arch = dense_arch(16, (16, 16), 2)
    params = init_params(arch, np.random.default_rng(1))
    result = local_train(params, arch, separable_shard(), TrainConfig(local_epochs=0), np.random.default_rng(2))
    assert result.steps == 0 and math.isnan(result.loss)
    assert all(np.array_equal(result.params[k], params[k]) for k in params)


def test_local_train_descends_and_is_deterministic():
    arch = dense_arch(16, (16, 16), 2)
    shard = separable_shard()
    params = init_params(arch, np.random.default_rng(1))
    cfg = TrainConfig(lr=0.05, batch_size=16, local_epochs=5)
    before, _ = backward(forward(params, arch, shard.images)[1], shard.labels)
    a = local_train(params, arch, shard, cfg, np.random.default_rng(3))
    b = local_train(params, arch, shard, cfg, np.random.default_rng(3))
    after, _ = backward(forward(a.params, arch, shard.images)[1], shard.labels)
    assert after <= before
    assert all(np.array_equal(a.params[k], b.params[k]) for k in params)


def test_evaluate_bounds_and_logit_scale_invariance():
    arch = dense_arch(16, (16, 16), 2)
    shard = separable_shard()
    trained = local_train(init_params(arch, np.random.default_rng(1)), arch, shard,
                          TrainConfig(lr=0.05, batch_size=16, local_epochs=10), np.random.default_rng(4)).params
    acc = evaluate(trained, arch, shard)
    assert 0.98 <= acc <= 1.0
    scaled = dict(trained)
    scaled["out.weight"] = trained["out.weight"] * 3.0
    scaled["out.bias"] = trained["out.bias"] * 3.0
    assert evaluate(scaled, arch, shard) == acc


def test_constant_predictor_is_chance_level():
    arch = dense_arch(16, (16, 16), 4)
    params = {k: np.zeros(s) for k, s in arch.param_shapes().items()}
    data = synthetic_classes(4, 250, 16, 3.0, np.random.default_rng(0))
    assert evaluate(params, arch, data) == pytest.approx(0.25)
