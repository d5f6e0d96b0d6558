import gc
import weakref

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lightattn.autograd import Tape, Tensor, backward, concat, matmul, no_grad, take, tensor_from, unbroadcast, where
from lightattn.errors import ContractError, DimensionError, DomainError
from lightattn.gradcheck import grad_check

from oracles import finite_difference


def test_tensor_from_identity():
    t = tensor_from([2, 2], [1, 0, 0, 1])
    np.testing.assert_array_equal(t.data, np.eye(2))
    assert not t.requires_grad


def test_tensor_from_zero_vector():
    assert tensor_from([3], [0, 0, 0]).sum().item() == 0.0


def test_tensor_from_length_mismatch():
    with pytest.raises(DimensionError):
        tensor_from([2, 3], [1, 2, 3, 4, 5])


@pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
def test_tensor_from_non_finite(bad):
    with pytest.raises(DomainError):
        tensor_from([2], [1.0, bad])


def test_tensor_from_rejects_nonpositive_dims():
    with pytest.raises(DimensionError):
        tensor_from([0, 2], [])


def test_matmul_identity_and_hand_values():
    M = np.array([[2.0, -1.0], [0.5, 3.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(M)).data, M)
    out = matmul(tensor_from([2, 2], [1, 2, 3, 4]), tensor_from([2, 1], [1, 1]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_dimension_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    A0, B0 = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))
    A = Tensor(A0, requires_grad=True)
    B = Tensor(B0, requires_grad=True)
    backward((A @ B).sum())
    numeric = finite_difference(lambda a: float((a @ B0).sum()), A0)
    assert np.max(np.abs(A.grad - numeric) / np.maximum(np.abs(numeric), 1e-8)) < 1e-6
    np.testing.assert_allclose(A.grad, np.ones((3, 2)) @ B0.T, atol=1e-14)
    np.testing.assert_allclose(B.grad, A0.T @ np.ones((3, 2)), atol=1e-14)


def test_backward_linear_and_quadratic():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    y = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward((y * y).sum())
    np.testing.assert_array_equal(y.grad, [2.0, 4.0])


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_tape_mode_zero_grad_for_unused_leaf():
    a = Tensor(np.ones(2), requires_grad=True)
    unused = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = (a * 3.0).sum()
        _ = unused * 2.0
    backward(loss, tape)
    np.testing.assert_array_equal(a.grad, [3.0, 3.0])
    np.testing.assert_array_equal(unused.grad, np.zeros(3))


def test_tape_records_in_topological_order():
    a = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        b = a * 2.0
        c = b + a
        d = c.sum()
    seen = set()
    for node in tape.nodes:
        for inp in node.inputs:
            assert inp.node is None or id(inp.node) in seen
        seen.add(id(node))
    assert tape.nodes[-1].output is d


def test_tape_and_graph_walk_agree():
    rng = np.random.default_rng(1)
    W = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(3, 2)))
    with Tape() as tape:
        loss = ((W @ x).relu() * (W @ x)).sum()
    backward(loss, tape)
    g_tape = W.grad.copy()
    W.grad = None
    backward(((W @ x).relu() * (W @ x)).sum())
    np.testing.assert_allclose(W.grad, g_tape, atol=1e-14)


def test_gradient_linearity():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=4), requires_grad=True)

    def l1():
        return (x * x * x).sum()

    def l2():
        return (x.exp() * 0.5).sum()

    (g1,) = backward(l1(), inputs=[x])
    (g2,) = backward(l2(), inputs=[x])
    (g12,) = backward(l1() + l2(), inputs=[x])
    np.testing.assert_allclose(g12, g1 + g2, atol=1e-13)


def test_gradients_accumulate_over_reuse():
    w = Tensor(np.array([2.0]), requires_grad=True)
    h = Tensor(np.array([1.5]))
    for _ in range(3):
        h = h * w
    backward(h.sum())
    # d(1.5 w^3)/dw = 4.5 w^2
    np.testing.assert_allclose(w.grad, [18.0])


def test_repeated_backward_accumulates_into_grad():
    x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    backward((x * 2.0).sum())
    backward((x * 2.0).sum())
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape, no_grad():
        y = x * 2.0
    assert y.node is None and not y.requires_grad and len(tape) == 0


def test_interior_gradient_requested_via_inputs():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    h = x * 3.0
    loss = (h * h).sum()
    gh, gx = backward(loss, inputs=[h, x])
    np.testing.assert_allclose(gh, 2 * h.data)
    np.testing.assert_allclose(gx, 18 * x.data)


def test_getitem_with_repeated_index_accumulates():
    x = Tensor(np.arange(4.0), requires_grad=True)
    backward(x[np.array([0, 0, 2])].sum())
    np.testing.assert_array_equal(x.grad, [2, 0, 1, 0])


def test_take_concat_where_values():
    a = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(take(a, np.array([2, 0]), axis=1).data, [[2, 0], [5, 3]])
    np.testing.assert_array_equal(concat([a, a], axis=0).data.shape, (4, 3))
    np.testing.assert_array_equal(where(np.array([True, False, True]), a, -a).data[0], [0, -1, 2])


def test_graph_is_freed_without_cycle_collection():
    gc.disable()
    try:
        x = Tensor(np.ones(3), requires_grad=True)
        y = (x * 2.0).exp()
        ref = weakref.ref(y)
        del y
        assert ref() is None
    finally:
        gc.enable()


def test_grad_check_exact_quadratic():
    x = Tensor(np.random.default_rng(3).uniform(-1, 1, size=5), requires_grad=True)
    assert grad_check(lambda: (x * x).sum(), [x]) < 1e-9


def test_grad_check_rejects_nondeterministic_function():
    from lightattn.functional import dropout

    x = Tensor(np.linspace(0.1, 2.0, 20), requires_grad=True)
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        grad_check(lambda: dropout(x, 0.5, True, rng).sum(), [x])


def test_grad_check_leaves_existing_grad_untouched():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    x.grad = np.array([7.0, 7.0])
    grad_check(lambda: (x * x).sum(), [x])
    np.testing.assert_array_equal(x.grad, [7.0, 7.0])


shapes = st.sampled_from([((3, 4), (4,)), ((3, 4), (3, 1)), ((2, 3, 4), (1, 4)), ((5,), ())])


@settings(max_examples=40, deadline=None)
@given(shapes, st.integers(0, 2**31 - 1))
def test_broadcast_add_mul_gradients(shape_pair, seed):
    sa, sb = shape_pair
    rng = np.random.default_rng(seed)
    a0, b0 = rng.uniform(-1, 1, sa), rng.uniform(-1, 1, sb)
    a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
    backward((a * b + a).sum())
    np.testing.assert_allclose(a.grad, np.broadcast_to(b0, np.broadcast_shapes(sa, sb)) + 1.0, atol=1e-13)
    expected_b = unbroadcast(np.broadcast_to(a0, np.broadcast_shapes(sa, sb)).copy(), np.shape(b0))
    np.testing.assert_allclose(b.grad, expected_b, atol=1e-13)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-1, 1)))
def test_forward_ops_stay_finite(x0):
    x = Tensor(x0, requires_grad=True)
    out = ((x.exp() + 1.0).log() * x.relu() - x / (x * x + 1.0)).sum()
    assert np.isfinite(out.item())
    backward(out)
    assert np.all(np.isfinite(x.grad)) and x.grad.shape == x0.shape
