import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from semifed.errors import DegenerateBatchError, DimensionError, NumericError, ParameterError
from semifed.nn import (BatchNorm, Dense, KLTerm, LossSpec, Network, ReLU, cross_entropy,
                        grad_check, kl_distill, kl_distill_with_grad, loss_and_grad, minibatches,
                        mlp, random_network, train_step)


def small_net(seed=0, batchnorm=True):
    return mlp(4, [5, 3], 3, np.random.default_rng(seed), batchnorm=batchnorm)


# ------------------------------------------------------------------ forward


def test_zero_weight_network_gives_zero_logits():
    net = Network([Dense(np.zeros((3, 4)), np.zeros(4)), ReLU(), Dense(np.zeros((4, 2)), np.zeros(2))])
    assert np.array_equal(net.forward(np.random.default_rng(0).normal(size=(5, 3))), np.zeros((5, 2)))


def test_identity_layer():
    net = Network([Dense(np.eye(2), np.zeros(2))])
    assert np.array_equal(net.forward(np.array([[1.0, 2.0]])), [[1.0, 2.0]])


def test_eval_forward_is_repeatable_and_pure():
    net = small_net()
    x = np.random.default_rng(1).normal(size=(7, 4))
    before = [p.copy() for p in net.parameters()]
    a, b = net.forward(x, "eval"), net.forward(x, "eval")
    assert np.array_equal(a, b)
    assert all(np.array_equal(p, q) for p, q in zip(before, net.parameters()))


def test_train_forward_updates_running_stats():
    net = small_net()
    bn = net.layers[1]
    before = bn.running_mean.copy()
    net.forward(np.random.default_rng(1).normal(size=(8, 4)), "train")
    assert not np.array_equal(before, bn.running_mean)


def test_train_mode_singleton_batch_rejected():
    with pytest.raises(DegenerateBatchError):
        small_net().forward(np.ones((1, 4)), "train")


def test_input_width_mismatch():
    with pytest.raises(DimensionError):
        small_net().forward(np.ones((3, 5)))


def test_incompatible_layers_rejected():
    with pytest.raises(DimensionError):
        Network([Dense(np.ones((3, 4)), np.zeros(4)), BatchNorm(5)])


# ------------------------------------------------------------------ losses


def test_cross_entropy_hand_values():
    assert cross_entropy([0.0, 0.0], [0]) == pytest.approx(math.log(2), abs=1e-12)
    assert cross_entropy(np.zeros((3, 4)), [0, 1, 3]) == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_saturated_logits_are_stable():
    assert cross_entropy([1000.0, -1000.0], [0]) == pytest.approx(0.0, abs=1e-12)
    assert math.isfinite(cross_entropy([1000.0, -1000.0], [1]))


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy([0.0, 1.0], [2])


def test_kl_hand_value():
    expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    assert kl_distill([math.log(3), 0.0], [0.0, 0.0]) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.1308, abs=1e-4)


def test_kl_errors():
    with pytest.raises(DimensionError):
        kl_distill(np.zeros((2, 3)), np.zeros((2, 4)))
    with pytest.raises(ParameterError):
        kl_distill([0.0, 1.0], [0.0, 1.0], temperature=0.0)


def test_kl_gradient_finite_difference():
    rng = np.random.default_rng(3)
    t, s = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    for reverse in (False, True):
        _, g = kl_distill_with_grad(t, s, 2.0, reverse)
        num = np.zeros_like(s)
        for idx in np.ndindex(s.shape):
            e = np.zeros_like(s)
            e[idx] = 1e-6
            num[idx] = (kl_distill(t, s + e, 2.0, reverse) - kl_distill(t, s - e, 2.0, reverse)) / 2e-6
        assert np.allclose(g, num, atol=1e-8)


logit_rows = arrays(np.float64, (3, 5), elements=st.floats(-50, 50))


@settings(max_examples=60, deadline=None)
@given(logit_rows, logit_rows)
def test_kl_non_negative_property(t, s):
    assert kl_distill(t, s) >= -1e-12
    assert kl_distill(t, s, reverse=True) >= -1e-12
    assert kl_distill(t, t) <= 1e-10


@settings(max_examples=60, deadline=None)
@given(logit_rows, st.lists(st.integers(0, 4), min_size=3, max_size=3))
def test_cross_entropy_non_negative_property(z, y):
    assert cross_entropy(z, y) >= 0.0


# ------------------------------------------------------------------ training


def test_lr_zero_is_identity():
    net = small_net()
    before = [p.copy() for p in net.parameters()]
    x = np.random.default_rng(1).normal(size=(6, 4))
    train_step(net, x, LossSpec(labels=np.array([0, 1, 2, 0, 1, 2])), lr=0.0)
    assert all(np.array_equal(p, q) for p, q in zip(before, net.parameters()))


def test_single_dense_descent():
    rng = np.random.default_rng(2)
    net = Network([Dense(rng.normal(size=(3, 2)), np.zeros(2))])
    x, y = rng.normal(size=(10, 3)), rng.integers(0, 2, 10)
    spec = LossSpec(labels=y)
    before = train_step(net, x, spec, lr=1e-3)
    after = loss_and_grad(net, x, spec, mode="train")[0]
    assert after <= before


def test_identical_steps_are_deterministic():
    a, b = small_net(), small_net()
    x = np.random.default_rng(1).normal(size=(6, 4))
    spec = LossSpec(labels=np.array([0, 1, 2, 0, 1, 2]))
    train_step(a, x, spec, 0.1)
    train_step(b, x, spec, 0.1)
    assert all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_momentum_changes_second_step():
    x = np.random.default_rng(1).normal(size=(6, 4))
    spec = LossSpec(labels=np.array([0, 1, 2, 0, 1, 2]))
    plain, heavy = small_net(), small_net()
    for _ in range(2):
        train_step(plain, x, spec, 0.1)
        train_step(heavy, x, spec, 0.1, momentum=0.9)
    assert not np.array_equal(plain.layers[0].weights, heavy.layers[0].weights)


def test_non_finite_loss_names_term():
    net = small_net()
    x = np.ones((4, 4))
    target = np.full((4, 3), np.nan)
    with pytest.raises(NumericError) as info:
        loss_and_grad(net, x, LossSpec(kl_terms=[KLTerm(target, name="teacher")]))
    assert "teacher" in info.value.term


def test_frozen_weights_stay_zero():
    net = small_net(batchnorm=False)
    dense = net.layers[0]
    dense.live = np.ones(dense.weights.shape, dtype=bool)
    dense.live[0, :] = False
    dense.weights[0, :] = 0.0
    x = np.random.default_rng(1).normal(size=(6, 4))
    train_step(net, x, LossSpec(labels=np.array([0, 1, 2, 0, 1, 2])), 0.5)
    assert np.all(dense.weights[0, :] == 0.0)


def test_minibatches_cover_indices_without_singletons():
    batches = minibatches(33, 8, np.random.default_rng(0))
    assert sorted(np.concatenate(batches).tolist()) == list(range(33))
    assert min(len(b) for b in batches) >= 2


# ------------------------------------------------------------- grad checks


def test_gradcheck_linear_ce():
    rng = np.random.default_rng(0)
    net = Network([Dense(rng.normal(size=(3, 4)), rng.normal(size=4))])
    assert grad_check(net, rng.normal(size=(5, 3)), rng.integers(0, 4, 5)) < 1e-4


def test_gradcheck_batchnorm_eval_and_train():
    net = small_net(4)
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(6, 4)), rng.integers(0, 3, 6)
    assert grad_check(net, x, y) < 1e-4
    # a dense bias feeding train-mode batch norm has an exactly zero gradient, so
    # its finite difference is pure rounding noise that grows as 1/epsilon
    _, grads = loss_and_grad(net, x, LossSpec(labels=y), mode="train")
    assert np.abs(grads[1]).max() < 1e-12
    assert grad_check(net, x, y, epsilon=1e-3, mode="train") < 1e-4


def test_gradcheck_kl_and_bn_l1():
    net = small_net(5)
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(6, 4)), rng.integers(0, 3, 6)
    assert grad_check(net, x, y, kl_target=rng.normal(size=(6, 3)), temperature=2.0) < 1e-4


def test_gradcheck_zero_input_zero_weights_is_defined():
    net = Network([Dense(np.zeros((3, 2)), np.zeros(2))])
    err = grad_check(net, np.zeros((4, 3)), np.array([0, 1, 0, 1]))
    assert math.isfinite(err)


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_random_architectures(seed):
    net = random_network(np.random.default_rng(100 + seed))
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, net.input_width))
    assert grad_check(net, x, rng.integers(0, net.num_classes, 5)) < 1e-4
