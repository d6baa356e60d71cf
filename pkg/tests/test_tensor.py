import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sentadapt import tensor as T
from sentadapt.tensor import BackwardError, Graph, NonFiniteError, ShapeError, Tensor, finite_difference_check

rng = np.random.default_rng(0)


def rand(*shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape))


def away_from_zero(*shape):
    x = rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x)


# scalar-valued wrappers: op(x) contracted against a fixed random weight
def contract(y, w=None):
    w = w if w is not None else Tensor(np.linspace(-1, 1, y.data.size).reshape(y.shape))
    return T.sum(y * w)


UNARY = {
    "relu": (T.relu, away_from_zero),
    "max_with_zero": (T.max_with_zero, away_from_zero),
    "gelu": (T.gelu, rand),
    "tanh": (T.tanh, rand),
    "exp": (T.exp, rand),
    "log": (T.log, lambda *s: rand(*s, low=0.5, high=2.0)),
    "softmax_lastdim": (T.softmax_lastdim, rand),
    "layernorm_lastdim": (T.layernorm_lastdim, rand),
    "l2_norm": (lambda x: T.l2_norm(x, axis=-1), rand),
    "sum": (lambda x: T.sum(x, axis=0), rand),
    "mean": (lambda x: T.mean(x, axis=-1), rand),
    "scale": (lambda x: T.scale(x, -2.5), rand),
    "slice": (lambda x: x[1:, ::2], rand),
    "transpose": (lambda x: T.transpose(x, (1, 0)), rand),
    "reshape": (lambda x: T.reshape(x, (x.data.size,)), rand),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradient_matches_finite_differences(name):
    op, make = UNARY[name]
    x = make(3, 4)
    assert finite_difference_check(lambda t: contract(op(t)), x) < 1e-4


def _binary_cases():
    return {
        "add": (T.add, (3, 4), (3, 4)),
        "add_suffix_broadcast": (T.add, (3, 4), (4,)),
        "sub": (T.sub, (3, 4), (4,)),
        "mul": (T.mul, (3, 4), (3, 4)),
        "div": (T.div, (3, 4), (3, 4)),
        "matmul": (T.matmul, (3, 4), (4, 2)),
        "batched_matmul": (T.matmul, (2, 3, 4), (2, 4, 5)),
        "dot": (T.dot, (3, 4), (3, 4)),
        "concat_lastdim": (lambda a, b: T.concat_lastdim([a, b]), (3, 4), (3, 2)),
    }


@pytest.mark.parametrize("name", sorted(_binary_cases()))
def test_binary_op_gradient_matches_finite_differences(name):
    op, sa, sb = _binary_cases()[name]
    a = rand(*sa)
    b = away_from_zero(*sb) if name == "div" else rand(*sb)
    assert finite_difference_check(lambda t: contract(op(t, b)), a) < 1e-4
    assert finite_difference_check(lambda t: contract(op(a, t)), b) < 1e-4


def test_layernorm_affine_gradients():
    x, g, b, w = rand(3, 5), rand(5), rand(5), rand(3, 5)
    assert finite_difference_check(lambda t: contract(T.layernorm_lastdim(x, t, b), w), g) < 1e-4
    assert finite_difference_check(lambda t: contract(T.layernorm_lastdim(x, g, t), w), b) < 1e-4


def test_embedding_gradient_accumulates_repeated_ids():
    w = rand(6, 3)
    ids = np.array([[1, 1, 4], [0, 1, 5]])
    assert finite_difference_check(lambda t: contract(T.embedding(t, ids)), w) < 1e-4
    w = Tensor(np.zeros((6, 3)), requires_grad=True)
    T.sum(T.embedding(w, ids)).backward()
    np.testing.assert_array_equal(w.grad[:, 0], [1, 3, 0, 0, 1, 1])


def test_hand_examples():
    np.testing.assert_array_equal(T.softmax_lastdim(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert T.max_with_zero(Tensor(-3.2)).item() == 0.0
    assert T.forward_op("matmul", [Tensor(np.eye(2)), Tensor([[1.0], [2.0]])]).data.ravel().tolist() == [1.0, 2.0]


def test_kink_gradients_are_zero():
    x = Tensor(np.array([0.0, -1.0, 2.0]), requires_grad=True)
    T.sum(T.max_with_zero(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])
    z = Tensor(np.zeros((1, 3)), requires_grad=True)
    T.sum(T.l2_norm(z)).backward()
    assert np.all(np.isfinite(z.grad)) and not z.grad.any()


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                     elements=st.floats(-50, 50, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(finite_rows)
def test_softmax_rows_are_distributions(x):
    y = T.softmax_lastdim(Tensor(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)),
              elements=st.floats(-10, 10, allow_nan=False)))
def test_layernorm_standardizes_rows(x):
    # rows need some spread for the variance to be meaningful against eps
    x = x + 100.0 * np.arange(x.shape[-1])
    y = T.layernorm_lastdim(Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-8)


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(rand(2, 3), rand(2, 3))
    with pytest.raises(ShapeError, match="add"):
        T.add(rand(2, 3), rand(2,))  # leading-dimension broadcasting is not supported
    assert T.add(rand(2, 3), rand(3)).shape == (2, 3)


def test_zero_dim_tensors_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 0)))


def test_strict_mode_rejects_non_finite():
    bad = Tensor([1.0, math.inf])
    T.exp(bad)  # permissive by default
    with T.strict(), pytest.raises(NonFiniteError):
        T.exp(bad)


def test_backward_twice_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.sum(x * x)
    loss.backward()
    with pytest.raises(BackwardError):
        loss.backward()


def test_gradients_accumulate_over_fresh_graphs():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.sum(x * x).backward()
    T.sum(x * x).backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_frozen_tensors_never_receive_grad():
    w = Tensor([1.0, 2.0])
    x = Tensor([3.0, 4.0], requires_grad=True)
    T.sum(w * x).backward()
    assert w.grad is None
    np.testing.assert_array_equal(x.grad, [1.0, 2.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.exp(x)
    assert y.node is None and not y.requires_grad


def test_scopes_label_recorded_nodes():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with T.scope("outer"):
        y = T.exp(x)
        with T.scope("inner"):
            z = T.sum(y)
    graph = Graph.from_output(z)
    assert graph.kinds() == ["exp", "sum"]
    assert graph.scopes() == ["outer", "outer/inner"]


def test_graph_is_topologically_ordered():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = x @ x
    z = T.sum(y + y)
    position = {n.output_id: i for i, n in enumerate(Graph.from_output(z))}
    for i, node in enumerate(Graph.from_output(z)):
        for inp in node.inputs:
            if inp.node is not None:
                assert position[inp.id] < i


def test_finite_difference_check_rejects_non_finite_output():
    with pytest.raises(NonFiniteError):
        finite_difference_check(lambda t: T.sum(T.log(t)), Tensor([-1.0, 2.0]))


def test_unknown_op_rejected():
    with pytest.raises(ValueError, match="unknown op"):
        T.forward_op("conv2d", [rand(2)])


def test_finite_difference_check_ignores_rounding_level_gradients():
    # a shared bias cancels in the difference, so its gradient is zero up to rounding
    rng = np.random.default_rng(3)
    a, b = Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=(4, 5)))

    def f(bias):
        diff = (a + bias) - (b + bias)
        return T.sum(diff * diff) + 1e3

    assert finite_difference_check(f, Tensor(rng.normal(size=5))) < 1e-6


def test_finite_difference_check_flags_wrong_gradient():
    # detaching one branch makes the analytic gradient half the true one
    x = Tensor(np.linspace(0.5, 1.5, 6))
    err = finite_difference_check(lambda t: T.sum(t * Tensor(t.data)), x)
    assert err > 0.3
