import numpy as np
import pytest

from dynamixer import ops
from dynamixer.errors import ContractError, DimensionError, NumericError
from dynamixer.gradcheck import grad_check, grad_check_detailed
from dynamixer.tensor import Graph, Tensor, current_graph, no_grad

from conftest import leaf

TOL = 1e-6


def check(f, *params, samples=200):
    err = grad_check(f, params, eps=1e-6, n_samples=samples)
    assert err < TOL, err


def test_add_sub_mul_broadcast_grads(rng):
    a = leaf(rng.standard_normal((3, 4)))
    b = leaf(rng.standard_normal((4,)))
    c = leaf(rng.standard_normal((3, 1)))
    check(lambda: ops.sum(ops.mul(ops.sub(ops.add(a, b), c), ops.mul(a, c))), a, b, c)


def test_operator_sugar_matches_ops(rng):
    a = Tensor(rng.standard_normal((2, 3)))
    b = Tensor(rng.standard_normal((3, 2)))
    np.testing.assert_array_equal((a @ b).data, a.data @ b.data)
    np.testing.assert_array_equal((a * 2 - 1 + a / 4).data, a.data * 2 - 1 + a.data / 4)
    np.testing.assert_array_equal((-a).data, -a.data)
    np.testing.assert_array_equal((1 - a).data, 1 - a.data)


@pytest.mark.parametrize("shapes", [((5, 3), (3, 4)), ((2, 5, 3), (3, 4)), ((2, 5, 3), (2, 3, 4)), ((1, 5, 3), (2, 3, 4))])
def test_matmul_grads(shapes, rng):
    a = leaf(rng.standard_normal(shapes[0]))
    b = leaf(rng.standard_normal(shapes[1]))
    y = ops.matmul(a, b)
    np.testing.assert_allclose(y.data, a.data @ b.data, atol=1e-14)
    w = rng.standard_normal(y.shape)
    check(lambda: ops.sum(ops.mul(ops.matmul(a, b), w)), a, b)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_shape_ops_grads(rng):
    a = leaf(rng.standard_normal((2, 3, 4)))
    w = rng.standard_normal((4, 2, 3))
    check(lambda: ops.sum(ops.mul(ops.permute(a, (2, 0, 1)), w)), a)
    w2 = rng.standard_normal((6, 4))
    check(lambda: ops.sum(ops.mul(ops.reshape(a, (6, 4)), w2)), a)
    b = leaf(rng.standard_normal((1, 3, 1)))
    check(lambda: ops.sum(ops.mul(ops.expand(b, (2, 3, 4)), a.data)), b)


def test_concat_narrow_split_roundtrip(rng):
    a = leaf(rng.standard_normal((2, 6)))
    parts = ops.split(a, [1, 2, 3], axis=1)
    assert [p.shape for p in parts] == [(2, 1), (2, 2), (2, 3)]
    np.testing.assert_array_equal(ops.concat(parts, axis=1).data, a.data)
    w = rng.standard_normal((2, 6))
    check(lambda: ops.sum(ops.mul(ops.concat(ops.split(a, 3, axis=1)[::-1], axis=1), w)), a)
    with pytest.raises(DimensionError):
        ops.split(a, 4, axis=1)
    with pytest.raises(DimensionError):
        ops.narrow(a, 1, 5, 2)


def test_sum_mean_grads(rng):
    a = leaf(rng.standard_normal((2, 3, 4)))
    w = rng.standard_normal((2, 4))
    check(lambda: ops.sum(ops.mul(ops.mean(a, axis=1), w)), a)
    w2 = rng.standard_normal((1, 3, 1))
    check(lambda: ops.sum(ops.mul(ops.sum(a, axis=(0, 2), keepdims=True), w2)), a)
    np.testing.assert_allclose(ops.mean(a, axis=(1, 2)).data, a.data.mean(axis=(1, 2)))


@pytest.mark.parametrize("axis", [-1, 0, 1])
def test_softmax_grads_any_axis(backend, axis, rng):
    a = leaf(rng.standard_normal((3, 4, 5)))
    y = ops.softmax(a, axis)
    np.testing.assert_allclose(y.data.sum(axis=axis), 1.0, atol=1e-14)
    w = rng.standard_normal(y.shape)
    check(lambda: ops.sum(ops.mul(ops.softmax(a, axis), w)), a)


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        ops.softmax(Tensor(np.array([[1.0, np.nan]])))


def test_layer_norm_and_gelu_grads(backend, rng):
    x = leaf(rng.standard_normal((2, 3, 6)))
    gain = leaf(1 + 0.1 * rng.standard_normal(6))
    bias = leaf(rng.standard_normal(6))
    w = rng.standard_normal((2, 3, 6))
    check(lambda: ops.sum(ops.mul(ops.gelu(ops.layer_norm(x, gain, bias)), w)), x, gain, bias)


def test_layer_norm_shape_error():
    with pytest.raises(DimensionError):
        ops.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_cross_entropy_value_and_grad(rng):
    logits = leaf(rng.standard_normal((4, 5)))
    targets = np.array([0, 3, 4, 1])
    loss = ops.cross_entropy(logits, targets)
    z = logits.data
    want = np.mean([np.log(np.exp(z[i]).sum()) - z[i, t] for i, t in enumerate(targets)])
    assert abs(loss.item() - want) < 1e-14
    check(lambda: ops.cross_entropy(logits, targets), logits)
    check(lambda: ops.cross_entropy(logits, targets, label_smoothing=0.1), logits)


def test_cross_entropy_uniform_logits_give_log_classes():
    loss = ops.cross_entropy(Tensor(np.zeros((3, 10))), [0, 1, 2], label_smoothing=0.1)
    assert abs(loss.item() - np.log(10)) < 1e-14
    with pytest.raises(ValueError):
        ops.cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_no_graph_records_nothing(rng):
    a = leaf(rng.standard_normal(3))
    y = ops.mul(a, a)
    assert current_graph() is None
    assert not y.requires_grad


def test_no_grad_inside_graph(rng):
    a = leaf(rng.standard_normal(3))
    with Graph() as tape:
        with no_grad():
            ops.mul(a, a)
        assert tape.nodes == []
        ops.mul(a, a)
    assert len(tape.nodes) == 1


def test_backward_once_and_leaves(rng):
    a = leaf(rng.standard_normal(3))
    unused = leaf(rng.standard_normal(3))
    side = leaf(rng.standard_normal(3))
    with Graph() as tape:
        loss = ops.sum(ops.mul(a, a))
        ops.add(side, side)  # taped but not on the loss path
    leaves = tape.backward(loss)
    np.testing.assert_allclose(a.grad, 2 * a.data)
    np.testing.assert_array_equal(side.grad, 0)
    assert unused.grad is None
    assert {id(t) for t in leaves} == {id(a), id(side)}
    with pytest.raises(ContractError):
        tape.backward(loss)


def test_backward_non_scalar_needs_grad(rng):
    a = leaf(rng.standard_normal(3))
    with Graph() as tape:
        y = ops.scale(a, 3.0)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_shared_input_accumulates(rng):
    a = leaf(rng.standard_normal((2, 2)))
    with Graph() as tape:
        loss = ops.sum(ops.add(ops.matmul(a, a), a))
    tape.backward(loss)
    ones = np.ones((2, 2))
    np.testing.assert_allclose(a.grad, ones @ a.data.T + a.data.T @ ones + ones, atol=1e-14)


def test_tensor_rejects_empty_and_casts_ints():
    with pytest.raises(DimensionError):
        Tensor(np.ones((0, 3)))
    assert Tensor([1, 2]).dtype == np.float64


def test_gradcheck_catches_wrong_gradient(rng):
    from dynamixer.tensor import record

    a = leaf(rng.standard_normal(4))

    def bad_square(t):
        return record(t.data**2, (t,), lambda g: (g * t.data,))  # missing factor 2

    assert grad_check(lambda: ops.sum(bad_square(a)), [a]) > 0.3
    res = grad_check_detailed(lambda: ops.sum(ops.mul(a, a)), [a])
    assert res.n_checked == 4 and res.max_rel_error < 1e-8


def test_gradcheck_requires_scalar(rng):
    a = leaf(rng.standard_normal(4))
    with pytest.raises(ContractError):
        grad_check(lambda: ops.mul(a, a), [a])
