import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from psdistill import numerics as nx

TOL = 1e-4


def _rand(rng, *shape):
    return rng.normal(size=shape)


# each entry: name, builder(rng) -> (fn, arrays)
def _cases():
    def pos(rng, *shape):
        return rng.uniform(0.5, 2.0, size=shape)

    return {
        "add": lambda r: (lambda a, b: nx.sum(nx.multiply(nx.add(a, b), nx.add(a, b))), [_rand(r, 3, 4), _rand(r, 3, 4)]),
        "subtract": lambda r: (lambda a, b: nx.squared_l2(nx.subtract(a, b)), [_rand(r, 5), _rand(r, 5)]),
        "multiply": lambda r: (lambda a, b: nx.sum(nx.multiply(a, b)), [_rand(r, 2, 3), _rand(r, 2, 3)]),
        "scale": lambda r: (lambda a: nx.sum(nx.scale(a, 2.5) ** 2), [_rand(r, 4)]),
        "matmul": lambda r: (lambda a, b: nx.sum(nx.matmul(a, b) ** 2), [_rand(r, 3, 4), _rand(r, 4, 2)]),
        "conv2d_s1": lambda r: (lambda x, w, b: nx.sum(nx.conv2d(x, w, b, stride=1) ** 2),
                                [_rand(r, 1, 2, 5, 5), _rand(r, 3, 2, 3, 3), _rand(r, 3)]),
        "conv2d_s2": lambda r: (lambda x, w: nx.sum(nx.conv2d(x, w, stride=2) ** 2),
                                [_rand(r, 2, 1, 6, 6), _rand(r, 2, 1, 3, 3)]),
        # distinct values keep the max away from ties
        "max_pool2d": lambda r: (lambda x: nx.sum(nx.max_pool2d(x, 2) ** 2),
                                 [r.permutation(32).reshape(1, 2, 4, 4) * 0.1 + _rand(r, 1, 2, 4, 4) * 1e-3]),
        "relu": lambda r: (lambda x: nx.sum(nx.relu(x) ** 2),
                           [np.sign(_rand(r, 6)) * r.uniform(0.1, 1.0, size=6)]),
        "sigmoid": lambda r: (lambda x: nx.sum(nx.sigmoid(x) * x), [_rand(r, 6)]),
        "log_softmax": lambda r: (lambda x: nx.sum(nx.log_softmax(x, dim=1)[:, 0]), [_rand(r, 3, 4)]),
        "softmax_t": lambda r: (lambda x: nx.sum(nx.softmax(x, dim=1, temperature=0.3) ** 2), [_rand(r, 2, 5)]),
        "log": lambda r: (lambda x: nx.sum(nx.log(x)), [pos(r, 5)]),
        "mean": lambda r: (lambda x: nx.mean(x ** 3), [_rand(r, 4, 2)]),
        "smooth_l1": lambda r: (lambda x: nx.sum(nx.smooth_l1(x, beta=0.5)),
                                [np.sign(_rand(r, 8)) * r.uniform(0.05, 2.0, size=8)]),
        "l2_normalize": lambda r: (lambda x: nx.sum(nx.l2_normalize(x, dim=1)[:, 0]), [_rand(r, 3, 4)]),
        "group_norm": lambda r: (lambda x: nx.sum(nx.group_norm(x, 2)[:, :, 0] ** 3), [_rand(r, 1, 4, 3, 3)]),
        "layer_norm": lambda r: (lambda x: nx.sum(nx.layer_norm(x)[:, 0] ** 3), [_rand(r, 2, 5)]),
    }


CASES = _cases()


@pytest.mark.parametrize("name", sorted(CASES))
@pytest.mark.parametrize("seed", range(6))
def test_op_gradients_match_finite_differences(name, seed):
    fn, arrays = CASES[name](np.random.default_rng(seed))
    assert nx.gradient_check(fn, arrays) < TOL


def test_relative_error_definition():
    assert nx.relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert nx.relative_error(np.array([1.0, 2.0]), np.array([1.0, 1.0])) == pytest.approx(0.5)
    assert nx.relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_numerical_gradient_of_quadratic():
    g = nx.numerical_gradient(lambda a: float((a[0] ** 2).sum()), [np.array([1.0, -2.0, 3.0])])[0]
    np.testing.assert_allclose(g, [2.0, -4.0, 6.0], atol=1e-8)


@pytest.mark.parametrize("op", [nx.add, nx.subtract, nx.multiply])
def test_elementwise_rejects_mismatched_shapes(op):
    with pytest.raises(nx.ShapeError):
        op(nx.tensor(np.ones((2, 3))), nx.tensor(np.ones((3, 2))))


def test_elementwise_allows_scalar_broadcast():
    out = nx.multiply(nx.tensor(np.ones((2, 2))), 3.0)
    assert out.shape == (2, 2) and float(out.sum()) == 12.0


def test_matmul_shape_checks():
    with pytest.raises(nx.ShapeError):
        nx.matmul(nx.tensor(np.ones((2, 3))), nx.tensor(np.ones((2, 3))))
    with pytest.raises(nx.ShapeError):
        nx.matmul(nx.tensor(np.ones((2, 3, 1))), nx.tensor(np.ones((1, 3))))


def test_conv_rejects_channel_mismatch_and_bad_stride():
    x = nx.tensor(np.ones((1, 2, 5, 5)))
    with pytest.raises(nx.ShapeError):
        nx.conv2d(x, nx.tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        nx.conv2d(x, nx.tensor(np.ones((1, 2, 3, 3))), stride=3)


def test_backward_rejects_non_scalar():
    x = nx.tensor(np.ones(3), requires_grad=True)
    with pytest.raises(nx.ShapeError):
        nx.backward(x * 2)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(0.05, 20.0))
def test_softmax_sums_to_one_and_keeps_argmax(values, temperature):
    x = nx.tensor(np.array([values]))
    p = nx.softmax(x, dim=1, temperature=temperature)
    assert abs(float(p.sum()) - 1.0) < 1e-9
    p1 = nx.softmax(x, dim=1)
    best = int(np.argmax(values))
    assert float(p[0, best]) == float(p.max()) and float(p1[0, best]) == float(p1.max())


def test_softmax_survives_tiny_temperature():
    x = nx.tensor(np.array([[1.0, 0.9, -3.0]]))
    p = nx.softmax(x, dim=1, temperature=1e-3)
    assert torch.isfinite(p).all()
    assert float(p[0, 0]) == pytest.approx(1.0)
    lp = nx.log_softmax(x, dim=1, temperature=1e-3)
    assert torch.isfinite(lp).all()


def test_softmax_rejects_non_positive_temperature():
    with pytest.raises(ValueError):
        nx.softmax(nx.tensor(np.zeros((1, 2))), dim=1, temperature=0.0)


def test_sgd_zero_lr_leaves_params():
    p = nx.tensor(np.array([1.0, -2.0]), requires_grad=True)
    nx.sgd_step([p], [nx.tensor(np.array([5.0, 7.0]))], lr=0.0, momentum=0.9)
    np.testing.assert_array_equal(p.detach().numpy(), [1.0, -2.0])


def test_sgd_plain_step():
    p = nx.tensor(np.array([1.0]), requires_grad=True)
    nx.sgd_step([p], [nx.tensor(np.array([0.5]))], lr=1.0, momentum=0.0)
    assert float(p.detach()) == 0.5


def test_sgd_two_momentum_steps():
    # v1 = g1 = 1 ; p1 = 1 - 0.1*1 = 0.9
    # v2 = 0.5*1 + 2 = 2.5 ; p2 = 0.9 - 0.1*2.5 = 0.65
    p = nx.tensor(np.array([1.0]), requires_grad=True)
    v = nx.sgd_step([p], [nx.tensor(np.array([1.0]))], lr=0.1, momentum=0.5)
    nx.sgd_step([p], [nx.tensor(np.array([2.0]))], lr=0.1, momentum=0.5, velocities=v)
    assert float(p.detach()) == pytest.approx(0.65, abs=1e-12)


def test_sgd_rejects_bad_arguments_and_non_finite_gradients():
    p = nx.tensor(np.array([1.0]), requires_grad=True)
    g = nx.tensor(np.array([1.0]))
    with pytest.raises(ValueError):
        nx.sgd_step([p], [g], lr=-0.1)
    with pytest.raises(ValueError):
        nx.sgd_step([p], [g], lr=0.1, momentum=1.0)
    with pytest.raises(nx.NonFiniteGradient):
        nx.sgd_step([p], [nx.tensor(np.array([np.nan]))], lr=0.1)
    assert float(p.detach()) == 1.0


def test_sgd_deterministic():
    def run():
        rng = np.random.default_rng(3)
        p = nx.tensor(rng.normal(size=4), requires_grad=True)
        opt = nx.SGD([p], lr=0.05, momentum=0.9, weight_decay=1e-3)
        for _ in range(5):
            opt.zero_grad()
            nx.backward(nx.squared_l2(p - 1.0))
            opt.step()
        return p.detach().numpy().tobytes()

    assert run() == run()
