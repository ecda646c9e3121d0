import zlib

import numpy as np
import pytest

from mpq_forge import tensor as T

from gradcases import CASES, TOL, mlp_case
from oracles import naive_conv2d


def test_matmul_shape():
    out = T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 4))))
    assert out.shape == (2, 4)


def test_matmul_mismatch_names_op_and_dims():
    with pytest.raises(T.ShapeError, match=r"matmul.*3.*5"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((5, 4))))


def test_relu_values():
    assert T.relu(T.Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_conv_output_shape():
    out = T.conv2d(T.Tensor(np.ones((1, 1, 5, 5))), T.Tensor(np.ones((1, 1, 3, 3))), stride=1, padding=0)
    assert out.shape == (1, 1, 3, 3)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_direct_loops(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    out = T.conv2d(T.Tensor(x), T.Tensor(w), stride, padding)
    np.testing.assert_allclose(out.data, naive_conv2d(x, w, stride, padding), rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(T.ShapeError, match="conv2d"):
        T.conv2d(T.Tensor(np.ones((1, 2, 5, 5))), T.Tensor(np.ones((1, 3, 3, 3))))


def test_add_bias_mismatch():
    with pytest.raises(T.ShapeError, match="add_bias"):
        T.add_bias(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones(4)))


def test_cross_entropy_label_shape():
    with pytest.raises(T.ShapeError, match="softmax_cross_entropy"):
        T.softmax_cross_entropy(T.Tensor(np.zeros((3, 4))), [0, 1])


def test_cross_entropy_uniform_logits():
    loss = T.softmax_cross_entropy(T.Tensor(np.zeros((5, 4))), [0, 1, 2, 3, 0])
    assert loss.item() == pytest.approx(np.log(4), rel=1e-15)


def test_backward_sum():
    w = T.parameter(np.zeros(3))
    T.backward(T.tsum(w))
    assert w.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_sum_of_squares():
    w = T.parameter([1.0, 2.0])
    T.backward(T.tsum(T.mul(w, w)))
    assert w.grad.tolist() == [2.0, 4.0]


def test_backward_rejects_non_scalar():
    w = T.parameter(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        T.backward(T.mul(w, w))


def test_gradient_accumulates_exactly():
    rng = np.random.default_rng(0)
    w = T.parameter(rng.normal(size=(3, 2)))
    x = T.Tensor(rng.normal(size=(4, 3)))

    def loss():
        return T.softmax_cross_entropy(T.matmul(x, w), [0, 1, 1, 0])

    T.backward(loss())
    once = w.grad.copy()
    T.backward(loss())
    assert np.array_equal(w.grad, 2 * once)


def test_graph_is_topological_and_reset():
    a = T.parameter(np.ones((2, 2)))
    b = T.relu(T.matmul(a, a))
    loss = T.tsum(T.add(b, a))
    graph = T.Graph(loss)
    pos = {id(t): k for k, t in enumerate(graph.tensors)}
    for t in graph.tensors:
        if t.node is not None:
            assert all(pos[id(p)] < pos[id(t)] for p in t.node.inputs)
    assert graph.leaves() == [a]
    T.backward(loss)
    assert loss.node is None and a.grad is not None


def test_no_grad_records_nothing():
    w = T.parameter(np.ones(2))
    with T.no_grad():
        out = T.mul(w, w)
    assert out.node is None and not out.requires_grad


@pytest.mark.parametrize("case", CASES, ids=lambda c: c.__name__[5:])
def test_op_gradients_match_finite_differences(case):
    rng = np.random.default_rng(zlib.crc32(case.__name__.encode()))
    for _ in range(20):
        assert case(rng) <= TOL


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(10):
        assert mlp_case(rng) <= TOL


def test_sgd_plain_step():
    w = T.parameter([1.0])
    w.grad = np.array([1.0])
    T.SGD([w], lr=0.1).step()
    assert w.data[0] == pytest.approx(0.9, abs=1e-15)
    assert w.grad is None


def test_sgd_momentum_two_steps():
    w = T.parameter([1.0])
    opt = T.SGD([w], lr=0.1, momentum=0.9)
    for _ in range(2):
        w.grad = np.array([1.0])
        opt.step()
    assert w.data[0] == pytest.approx(0.71, abs=1e-15)


def test_sgd_weight_decay():
    w = T.parameter([1.0])
    w.grad = np.array([0.0])
    T.SGD([w], lr=0.1, weight_decay=0.01).step()
    assert w.data[0] == pytest.approx(0.999, abs=1e-15)


def test_sgd_missing_gradient():
    w = T.parameter([1.0], name="w")
    with pytest.raises(ValueError, match="no gradient"):
        T.SGD([w], lr=0.1).step()


def test_sgd_groups_override_defaults():
    a, b = T.parameter([1.0]), T.parameter([1.0])
    opt = T.SGD([{"params": [a]}, {"params": [b], "lr": 0.5}], lr=0.1)
    a.grad, b.grad = np.array([1.0]), np.array([1.0])
    opt.step()
    assert a.data[0] == pytest.approx(0.9) and b.data[0] == pytest.approx(0.5)


def _trajectory(seed):
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.normal(size=(8, 4)))
    labels = rng.integers(3, size=8)
    w = T.parameter(rng.normal(size=(4, 3)))
    opt = T.SGD([w], lr=0.1, momentum=0.9, weight_decay=1e-4)
    out = []
    for _ in range(5):
        T.backward(T.softmax_cross_entropy(T.matmul(x, w), labels))
        opt.step()
        out.append(w.data.copy())
    return np.stack(out)


def test_training_is_bit_deterministic():
    assert np.array_equal(_trajectory(3), _trajectory(3))
