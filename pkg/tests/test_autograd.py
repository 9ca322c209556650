import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eva import autograd as ag
from eva.autograd import Tensor

from conftest import analytic_grad, numeric_grad, rel_err

finite = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)


def test_matmul_identity(rng):
    m = rng.normal(size=(3, 3))
    out = ag.matmul(Tensor(np.eye(3)), Tensor(m))
    assert np.array_equal(out.data, m)


def test_softmax_uniform():
    out = ag.softmax(Tensor(np.zeros(3)))
    assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_layer_norm_hand_value():
    # population sigma of [1, 2, 3] is sqrt(2/3)
    out = ag.layer_norm(Tensor([1.0, 2.0, 3.0]), eps=0.0)
    assert np.allclose(out.data, [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-12)


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ag.backward(ag.tsum(x * x))
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_nll_grad_is_softmax_minus_onehot(rng):
    z = rng.normal(size=5)
    k = 2
    g = analytic_grad(lambda t: -ag.log_softmax(t)[k], z)
    p = np.exp(z - z.max())
    p /= p.sum()
    assert np.allclose(g, p - np.eye(5)[k], atol=1e-12)
    num = numeric_grad(lambda v: -ag.log_softmax(Tensor(v))[k].item(), z)
    assert rel_err(g, num) < 1e-6


def test_unreached_parameter_gets_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    p = Tensor([3.0], requires_grad=True)
    grads = ag.grad(ag.tsum(x * x), {"x": x, "p": p})
    assert np.array_equal(grads["p"], [0.0])


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ag.backward(x * 2.0)


def test_shape_errors_name_the_op():
    with pytest.raises(ag.ShapeError, match="matmul"):
        ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ag.ShapeError, match="add"):
        ag.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


def test_max_routes_gradient_to_first_max():
    x = Tensor([[1.0, 3.0, 3.0, 0.0]], requires_grad=True)
    ag.backward(ag.tsum(ag.tmax(x, axis=1)))
    assert np.array_equal(x.grad, [[0.0, 1.0, 0.0, 0.0]])
    assert ag.argmax(x, axis=1)[0] == 1


def test_topk_mask_ties_lower_index():
    masked, idx = ag.topk_mask(Tensor([[1.0, 1.0, 1.0, 0.5]]), 2)
    assert idx.tolist() == [[0, 1]]
    assert np.isneginf(masked.data[0, 2:]).all()


# every primitive against central differences on inputs in [-2, 2]
UNARY = {
    "exp": ag.exp,
    "log": lambda t: ag.log(t * t + 0.5),
    "gelu": ag.gelu,
    "softplus": ag.softplus,
    "softmax": lambda t: ag.softmax(t, axis=-1),
    "log_softmax": lambda t: ag.log_softmax(t, axis=0),
    "layer_norm": ag.layer_norm,
    "l2_normalize": ag.l2_normalize,
    "max": lambda t: ag.tmax(t, axis=-1),
    "mean": lambda t: ag.mean(t, axis=0),
    "transpose": ag.transpose,
    "reshape": lambda t: ag.reshape(t, (-1,)),
    "getitem": lambda t: t[1:, ::2],
    "fancy_getitem": lambda t: t[np.array([0, 2, 2]), np.array([1, 0, 1])],
    "take": lambda t: ag.take(t, np.array([[2, 0], [2, 1]]), axis=0),
    "take_axis1": lambda t: ag.take(t, np.array([0, 3, 3]), axis=1),
    "neg_scale": lambda t: ag.scale(-t, 0.7),
    "relu": lambda t: ag.relu(t + 0.05),
    "concat": lambda t: ag.concat([t, t * 2.0], axis=1),
    "stack": lambda t: ag.stack([t, ag.exp(t)], axis=0),
    "topk_softmax": lambda t: ag.softmax(ag.topk_mask(t, 2)[0], axis=-1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_primitive_gradients(name, rng):
    op = UNARY[name]
    x = rng.uniform(-2, 2, size=(3, 4))
    w = rng.normal(size=op(Tensor(x)).shape)

    def f(v):
        return float(np.sum(op(Tensor(v)).data * w))

    g = analytic_grad(lambda t: ag.tsum(op(t) * w), x)
    assert rel_err(g, numeric_grad(f, x)) < 1e-4


BINARY = {
    "add": ag.add,
    "sub": ag.sub,
    "mul": ag.mul,
    "div": lambda a, b: ag.div(a, b * b + 1.0),
    "matmul": lambda a, b: ag.matmul(a, ag.transpose(b)),
    "broadcast_add": lambda a, b: ag.add(a, b[0]),
    "broadcast_mul": lambda a, b: ag.mul(a, b[:, :1]),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients(name, rng):
    op = BINARY[name]
    a = rng.uniform(-2, 2, size=(3, 4))
    b = rng.uniform(-2, 2, size=(3, 4))
    w = rng.normal(size=op(Tensor(a), Tensor(b)).shape)
    ga = analytic_grad(lambda t: ag.tsum(op(t, Tensor(b)) * w), a)
    gb = analytic_grad(lambda t: ag.tsum(op(Tensor(a), t) * w), b)
    na = numeric_grad(lambda v: float(np.sum(op(Tensor(v), Tensor(b)).data * w)), a)
    nb = numeric_grad(lambda v: float(np.sum(op(Tensor(a), Tensor(v)).data * w)), b)
    assert rel_err(ga, na) < 1e-4
    assert rel_err(gb, nb) < 1e-4


def test_batched_matmul_gradient(rng):
    a = rng.uniform(-2, 2, size=(2, 3, 4))
    b = rng.uniform(-2, 2, size=(4, 5))
    w = rng.normal(size=(2, 3, 5))
    gb = analytic_grad(lambda t: ag.tsum(ag.matmul(Tensor(a), t) * w), b)
    nb = numeric_grad(lambda v: float(np.sum((a @ v) * w)), b)
    assert rel_err(gb, nb) < 1e-4


def test_reused_node_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    ag.backward(ag.tsum(y + y * x))  # d/dx (x^2 + x^3) = 2x + 3x^2
    assert np.allclose(x.grad, [6.0 + 27.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    p = ag.softmax(Tensor(x), axis=-1).data
    assert (p >= 0).all()
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 3), elements=finite.filter(lambda v: v == 0 or abs(v) > 1e-100)))
def test_l2_normalize_unit_norm(x):
    x = x + np.where(np.abs(x).sum(axis=1, keepdims=True) == 0, 1.0, 0.0)
    y = ag.l2_normalize(Tensor(x)).data
    assert np.allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-9)


def test_forward_is_bit_reproducible(rng):
    w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    x = rng.normal(size=(3, 4))

    def run():
        return ag.softmax(ag.layer_norm(ag.gelu(Tensor(x) @ w)), axis=-1).data.tobytes()

    assert run() == run()


# ---------------------------------------------------------------- graph + finite_diff_check


def quadratic_graph(rng):
    w = Tensor(rng.normal(size=(3,)), requires_grad=True)
    c = Tensor(rng.normal(size=(3,)))

    def fn(inputs):
        d = w - c
        return {"loss": ag.tsum(d * d) * inputs["k"]}

    return ag.Graph(fn, {"w": w}, {"c": c})


def test_finite_diff_quadratic(rng):
    g = quadratic_graph(rng)
    rep = ag.finite_diff_check(g, {"k": 1.5}, "loss", epsilon=1e-5)
    assert rep.max_rel_error < 1e-7
    assert rep.passed and rep.n_checked == 3


def test_finite_diff_constant_loss():
    w = Tensor([1.0, 2.0], requires_grad=True)
    g = ag.Graph(lambda inputs: {"loss": ag.Tensor(3.0) + ag.tsum(w) * 0.0}, {"w": w})
    rep = ag.finite_diff_check(g, {}, "loss")
    assert rep.max_rel_error == 0.0
    assert np.array_equal(g.backward(g.forward({})["loss"])["w"], [0.0, 0.0])


def test_graph_forward_checks_signature(rng):
    g = quadratic_graph(rng)
    g.signature = {"x": (2, 3)}
    with pytest.raises(ag.ShapeError, match="'x'"):
        g.forward({"x": np.zeros((3, 3))})


def test_finite_diff_rejects_nonpositive_epsilon(rng):
    with pytest.raises(ValueError):
        ag.finite_diff_check(quadratic_graph(rng), {"k": 1.0}, "loss", epsilon=0.0)
