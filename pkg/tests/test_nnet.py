import numpy as np
import pytest

from mild.errors import DimensionMismatch, ShapeMismatch
from mild.nnet import AdamW, Dense, DenseNet, OptimizerState, adamw_step, finite_difference_check


def test_build_shapes_and_init_bounds(rng):
    net = DenseNet.build((6, 5, 3), rng)
    assert [l.weight.shape for l in net.layers] == [(6, 5), (5, 3)]
    assert net.n_parameters() == 6 * 5 + 5 + 5 * 3 + 3
    assert np.abs(net.layers[0].weight).max() <= 1 / np.sqrt(6)
    assert [l.activation for l in net.layers] == ["leaky_relu", "linear"]


def test_forward_leaky_relu_values():
    net = DenseNet([Dense(np.eye(2), np.zeros(2), "leaky_relu")], leaky_slope=0.1)
    np.testing.assert_allclose(net(np.array([[2.0, -3.0]])), [[2.0, -0.3]])


def test_forward_rejects_wrong_width(rng):
    net = DenseNet.build((3, 2), rng)
    with pytest.raises(DimensionMismatch):
        net(np.zeros((1, 4)))


def test_layers_must_chain(rng):
    with pytest.raises(ShapeMismatch):
        DenseNet([Dense(np.zeros((2, 3)), np.zeros(3)), Dense(np.zeros((2, 1)), np.zeros(1))])
    with pytest.raises(ValueError):
        DenseNet([Dense(np.zeros((2, 3)), np.zeros(3))], leaky_slope=1.5)


def test_backward_matches_finite_differences(rng):
    for _ in range(10):
        net = DenseNet.build((4, 6, 5, 2), rng, output_activation="leaky_relu")
        x = rng.standard_normal((7, 4))
        target = rng.standard_normal((7, 2))

        def loss():
            return float(np.sum((net(x) - target) ** 2))

        out, cache = net.forward(x)
        grads, gx = net.backward(cache, 2 * (out - target))
        assert finite_difference_check(loss, net.parameters(), grads, floor=1e-3) < 1e-6
        assert finite_difference_check(loss, [x], [gx], floor=1e-3) < 1e-6


def test_adamw_first_step_by_hand():
    p = np.array([1.0, -2.0])
    g = np.array([0.5, 0.5])
    state = OptimizerState(learning_rate=0.1, weight_decay=0.01)
    adamw_step([p], [g], state)
    # bias-corrected first step moves each coordinate by lr * sign(g), after decoupled decay
    expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8)
    np.testing.assert_allclose(p, expected)


def test_adamw_converges_on_quadratic():
    p = np.array([5.0, -3.0])
    opt = AdamW([p], learning_rate=0.1, weight_decay=0.0)
    for _ in range(500):
        opt.step([2 * p])
    np.testing.assert_allclose(p, 0.0, atol=1e-2)


def test_adamw_shape_checks():
    with pytest.raises(ShapeMismatch):
        adamw_step([np.zeros(2)], [np.zeros(3)], OptimizerState())
    with pytest.raises(ShapeMismatch):
        adamw_step([np.zeros(2)], [], OptimizerState())


def test_copy_is_independent(rng):
    net = DenseNet.build((2, 2), rng)
    other = net.copy()
    other.layers[0].weight += 1
    assert not np.allclose(net.layers[0].weight, other.layers[0].weight)


def test_five_point_stencil_on_cubic():
    p = np.array([0.7])
    g = np.array([3 * 0.7**2])
    assert finite_difference_check(lambda: float(p[0] ** 3), [p], [g], h=1e-2, order=4) < 1e-12
    assert finite_difference_check(lambda: float(p[0] ** 3), [p], [g], h=1e-2, order=2) > 1e-6


def test_backward_without_input_grad(rng):
    net = DenseNet.build((3, 4, 2), rng)
    out, cache = net.forward(rng.standard_normal((5, 3)))
    full, gx = net.backward(cache, out)
    part, none = net.backward(cache, out, input_grad=False)
    assert none is None and gx.shape == (5, 3)
    for a, b in zip(full, part):
        np.testing.assert_array_equal(a, b)


def test_retain_heap_is_idempotent():
    from mild.nnet import retain_heap

    first = retain_heap()
    assert retain_heap() == first
