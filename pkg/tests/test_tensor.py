from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vagcil import tensor as T
from vagcil.errors import ContractError, DegenerateAxisError, NumericError, OutOfVocabularyError, ShapeError
from vagcil.tensor import Tape, Tensor, grad_check

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def backward_of(f, *leaves):
    with Tape() as tape:
        out = f(*leaves)
    tape.backward(out)
    return out


# --- matmul -----------------------------------------------------------------

def test_matmul_identity_and_dot():
    assert np.array_equal((Tensor([[1.0, 0.0], [0.0, 1.0]]) @ Tensor([[3.0], [4.0]])).data, [[3], [4]])
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    assert grad_check(lambda x: (x @ Tensor(b)).sum(), a) < 1e-6
    assert grad_check(lambda x: (Tensor(a) @ x).sum(), b) < 1e-6


def test_matmul_backward_formulas():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    g = rng.normal(size=(3, 2))
    backward_of(lambda x, y: ((x @ y) * Tensor(g)).sum(), a, b)
    np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 5)))


# --- softmax ----------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0, 0, 0]])).data, [[0.25] * 4], atol=1e-15)
    big = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(big).all() and big[0, 0] == pytest.approx(1.0) and big[0, 1] < 1e-300


def test_softmax_matches_extended_precision_oracle():
    getcontext().prec = 50
    e = [Decimal(v).exp() for v in (1, 2, 3)]
    oracle = [float(x / sum(e)) for x in e]
    np.testing.assert_allclose(T.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0], oracle, rtol=0, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 12)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    p = T.softmax_rows(Tensor(x)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        T.softmax_rows(Tensor([[1.0, np.nan]]))
    with pytest.raises(NumericError):
        T.log_softmax(Tensor([[np.inf, 0.0]]))


def test_masked_log_softmax_zero_gradient_outside_mask():
    x = Tensor(np.random.default_rng(2).normal(size=(3, 6)), requires_grad=True)
    mask = np.array([True, False, True, False, False, True])
    backward_of(lambda t: T.pick(T.log_softmax(t, mask=mask), np.array([0, 2, 5])).sum(), x)
    assert np.all(x.grad[:, ~mask] == 0.0)


# --- layer norm -------------------------------------------------------------

def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.array_equal(T.layer_norm(Tensor([1.0, 1, 1, 1]), one, zero).data, np.zeros(4))
    out = T.layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, np.array([-1, 1]) / np.sqrt(1 + 1e-5), atol=1e-12)


def test_layer_norm_degenerate_axis():
    with pytest.raises(DegenerateAxisError):
        T.layer_norm(Tensor(np.ones((3, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)))


def test_layer_norm_gradients():
    rng = np.random.default_rng(3)
    x, g, b = rng.normal(size=(3, 8)), rng.normal(size=8), rng.normal(size=8)
    w = rng.normal(size=(3, 8))
    assert grad_check(lambda t: (T.layer_norm(t, Tensor(g), Tensor(b)) * Tensor(w)).sum(), x) < 1e-5
    assert grad_check(lambda t: (T.layer_norm(Tensor(x), t, Tensor(b)) * Tensor(w)).sum(), g) < 1e-5
    assert grad_check(lambda t: (T.layer_norm(Tensor(x), Tensor(g), t) * Tensor(w)).sum(), b) < 1e-5


# --- gather -----------------------------------------------------------------

def test_gather_rows_examples():
    table = Tensor(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]]), requires_grad=True)
    assert T.gather_rows(table, [0]).data.tolist() == [[1.0, 2.0]]
    backward_of(lambda t: T.gather_rows(t, [3, 3]).sum(), table)
    assert table.grad[3].tolist() == [2.0, 2.0]
    assert np.all(table.grad[:3] == 0)


def test_gather_rows_out_of_vocabulary():
    with pytest.raises(OutOfVocabularyError):
        T.gather_rows(Tensor(np.zeros((4, 2))), [1, 4])


def test_gather_rows_gradient_check():
    rng = np.random.default_rng(4)
    ids = rng.integers(0, 6, size=9)
    w = rng.normal(size=(9, 3))
    assert grad_check(lambda t: (T.gather_rows(t, ids) * Tensor(w)).sum(), rng.normal(size=(6, 3))) < 1e-6


# --- grad_check -------------------------------------------------------------

def test_grad_check_examples():
    # integer x and a power-of-two step keep the central difference exact
    x = np.random.default_rng(5).integers(-9, 9, size=7).astype(float)
    assert grad_check(lambda t: t.sum(), x, h=2.0 ** -17) == 0.0
    assert grad_check(lambda t: (t * t).sum(), np.array([3.0]), h=1e-5) < 1e-9


def test_grad_check_contracts():
    with pytest.raises(ContractError):
        grad_check(lambda t: t * 2.0, np.ones(3))
    with pytest.raises(ContractError):
        grad_check(lambda t: t.sum(), np.ones(3), h=1e-2)


UNARY = {
    "exp": lambda t: T.exp(t),
    "log": lambda t: T.log(T.exp(t) + 1.0),
    "tanh": T.tanh,
    "gelu": T.gelu,
    "softmax": lambda t: T.softmax(t),
    "log_softmax": lambda t: T.log_softmax(t),
    "mean": lambda t: T.tmean(t, axis=1, keepdims=True) * t,
    "transpose": lambda t: T.transpose(t) @ t,
    "div": lambda t: t / (t * t + 1.0),
    "rdiv": lambda t: 1.0 / (t * t + 1.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_elementwise_ops_gradients(name):
    rng = np.random.default_rng(6)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=UNARY[name](Tensor(x)).shape)
    assert grad_check(lambda t: (UNARY[name](t) * Tensor(w)).sum(), x) < 1e-5


def test_broadcast_add_gradient():
    rng = np.random.default_rng(7)
    b = rng.normal(size=4)
    x = Tensor(rng.normal(size=(3, 4)))
    assert grad_check(lambda t: ((x + t) * (x + t)).sum(), b) < 1e-6


# --- tape ------------------------------------------------------------------

def test_no_recording_without_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)


def test_backward_is_deterministic_and_populates_ancestors():
    rng = np.random.default_rng(8)
    a = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    unused = Tensor(rng.normal(size=4), requires_grad=True)
    with Tape() as tape:
        h = T.tanh(a @ a)
        _ = h * unused  # recorded but not on the loss path
        loss = T.log_softmax(h).sum()
    tape.backward(loss)
    first = a.grad.copy()
    assert unused.grad is not None and np.all(unused.grad == 0)
    a.grad = None
    tape.backward(loss)
    assert np.array_equal(first, a.grad)


def test_five_point_stencil_is_more_accurate():
    x = np.array([0.7, -1.3, 2.1])
    f = lambda t: T.exp(t * t).sum()
    assert grad_check(f, x, h=1e-3, order=4) < grad_check(f, x, h=1e-3) / 100
    with pytest.raises(ContractError):
        grad_check(f, x, order=3)
