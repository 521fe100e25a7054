import numpy as np
import pytest

from minimm import tensor as T
from minimm.errors import ContractError, NumericsError, ShapeError, StructureError
from minimm.gradcheck import check_gradients, fd_gradient, max_rel_err
from minimm.nn import Parameter
from minimm.tensor import PackedSequence, Tensor, concat, matmul


def test_matmul_identity():
    x = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4))
    eye = Tensor(np.eye(3, dtype=np.float64))
    assert np.array_equal(matmul(eye, x).data, x.data)


def test_matmul_hand_arithmetic():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    assert np.array_equal(matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((4, 2)))
    with pytest.raises(ShapeError) as e:
        matmul(a, b)
    assert "(2, 3)" in str(e.value) and "(4, 2)" in str(e.value)


def test_matmul_gradient_matches_central_differences(rng):
    a = Parameter(rng.standard_normal((5, 7)).astype(np.float64))
    b = Parameter(rng.standard_normal((7, 3)).astype(np.float64))

    def loss():
        return matmul(a, b).sum()

    analytic_a = None
    a.grad = b.grad = None
    loss().backward()
    analytic_a, analytic_b = a.grad, b.grad
    numeric = fd_gradient(loss, [a, b], h=1e-5)
    assert max_rel_err(analytic_a, numeric[id(a)]) < 1e-6
    assert max_rel_err(analytic_b, numeric[id(b)]) < 1e-6


def test_batched_matmul_broadcast_grad(rng):
    a = Parameter(rng.standard_normal((4, 3, 5)).astype(np.float64))
    b = Parameter(rng.standard_normal((5, 2)).astype(np.float64))
    check_gradients(lambda: ((matmul(a, b)) ** 2).sum(), [a, b], tol=1e-6)


def test_grad_zero_when_loss_independent():
    p = Parameter(np.ones(3, dtype=np.float64))
    q = Parameter(np.full(3, 2.0, dtype=np.float64))
    loss = (q * q).sum()
    loss.backward()
    assert p.grad is None
    assert np.allclose(q.grad, 4.0)


def test_grad_of_sum_is_ones():
    p = Parameter(np.arange(6, dtype=np.float64).reshape(2, 3))
    p.sum().backward()
    assert np.array_equal(p.grad, np.ones((2, 3)))


def test_backward_rejects_non_scalar():
    p = Parameter(np.ones((2, 2)))
    with pytest.raises(ContractError):
        (p * 2).backward()


def test_elementwise_ops_pass_fd_below_1e6(rng):
    x = Parameter(rng.uniform(0.5, 2.0, size=(4, 3)))
    cases = {
        "exp": lambda: x.exp().sum(),
        "log": lambda: x.log().sum(),
        "sqrt": lambda: x.sqrt().sum(),
        "mul": lambda: (x * x).sum(),
        "div": lambda: (1.0 / x).sum(),
        "pow": lambda: (x**3).sum(),
        "mean": lambda: (x.mean(axis=0) ** 2).sum(),
    }
    for name, fn in cases.items():
        check_gradients(fn, [x], tol=1e-6)


def test_reshape_transpose_getitem_concat_grads(rng):
    a = Parameter(rng.standard_normal((3, 4)).astype(np.float64))
    b = Parameter(rng.standard_normal((2, 4)).astype(np.float64))

    def loss():
        c = concat([a, b], axis=0)  # [5, 4]
        d = c.transpose(1, 0).reshape(2, 10)
        return (d[0] * d[1]).sum()

    check_gradients(loss, [a, b], tol=1e-6)


def test_broadcast_add_grads(rng):
    a = Parameter(rng.standard_normal((3, 4)).astype(np.float64))
    b = Parameter(rng.standard_normal((4,)).astype(np.float64))
    check_gradients(lambda: ((a + b) ** 2).sum(), [a, b], tol=1e-6)


def test_checked_mode_traps_nonfinite():
    x = Tensor(np.array([1.0, 0.0]))
    with np.errstate(divide="ignore"):
        with T.checked_mode(True):
            with pytest.raises(NumericsError):
                x.log()  # log(0) -> -inf
        with T.checked_mode(False):
            y = x.log()
            assert np.isneginf(y.data[1])


def test_no_grad_skips_graph():
    p = Parameter(np.ones(3))
    with T.no_grad():
        y = (p * 2).sum()
    assert not y.requires_grad
    assert y._parents == ()


def test_ops_bitwise_deterministic(rng):
    a = Tensor(rng.standard_normal((16, 16)).astype(np.float32))
    b = Tensor(rng.standard_normal((16, 16)).astype(np.float32))
    first = matmul(a, b).data
    second = matmul(a, b).data
    assert np.array_equal(first, second)


def test_packed_sequence_validates_lengths():
    data = Tensor(np.zeros((5, 2)))
    with pytest.raises(StructureError):
        PackedSequence(data, [2, 2])
    ps = PackedSequence(data, [2, 3])
    assert len(ps) == 2
    assert ps.item(1).shape == (3, 2)
