import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conflictlab import autodiff as ad
from conflictlab.autodiff import ParamVector


def fd_grad(f, x, eps=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(b)))


def tiny_net(x, W1, b1, W2):
    return ad.matmul(ad.tanh(ad.matmul(x, W1) + b1), W2)


def test_evaluate_trivial_graphs():
    x = ad.variable(0.0, "x")
    assert ad.evaluate(ad.tanh(x), inputs={"x": 0.0}) == 0.0
    y = ad.variable(0.0, "y")
    assert ad.evaluate(ad.sin(y) * 2.0, inputs={"y": math.pi / 2}) == pytest.approx(2.0, abs=1e-15)


def test_evaluate_unbound_leaf():
    p = ad.param(1.0, "w")
    with pytest.raises(ad.UnboundLeafError):
        ad.evaluate(p * 2.0)


def test_evaluate_replays_with_new_bindings():
    w = ad.param(np.array([1.0, 2.0]), "w")
    out = ad.sum(ad.square(w))
    assert ad.evaluate(out, params={"w": [3.0, 4.0]}) == 25.0


def test_evaluate_deterministic():
    rng = np.random.default_rng(0)
    W = ad.param(rng.normal(size=(3, 4)), "W")
    x = ad.variable(rng.normal(size=(5, 3)), "x")
    out = ad.sum(ad.tanh(ad.matmul(x, W)))
    vals = {"W": rng.normal(size=(3, 4))}
    a = ad.evaluate(out, vals, {"x": x.value})
    b = ad.evaluate(out, vals, {"x": x.value})
    assert a.tobytes() == b.tobytes()


def test_grad_square():
    t = ad.param(3.0, "t")
    (g,) = ad.grad(ad.square(t), [t])
    assert g == 6.0


def test_grad_sum_is_ones():
    t = ad.param(np.arange(5.0), "t")
    vec = ad.grad_params(ad.sum(t), {"t": t})
    np.testing.assert_array_equal(vec.flat(), np.ones(5))


def test_grad_non_scalar_root():
    t = ad.param(np.ones(3), "t")
    with pytest.raises(ValueError):
        ad.grad(t * 2.0, [t])


def test_grad_unreachable_leaf_is_zero():
    a, b = ad.param(1.0, "a"), ad.param(np.ones(2), "b")
    ga, gb = ad.grad(a * 3.0, [a, b])
    assert ga == 3.0
    np.testing.assert_array_equal(gb, np.zeros(2))


def test_grad_two_layer_net_matches_fd():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 2))
    W1, b1, W2 = rng.normal(size=(2, 5)), rng.normal(size=5), rng.normal(size=(5, 1))
    leaves = {"W1": ad.param(W1, "W1"), "b1": ad.param(b1, "b1"), "W2": ad.param(W2, "W2")}
    loss = ad.mean(ad.square(tiny_net(ad.const(x), leaves["W1"], leaves["b1"], leaves["W2"])))
    g = ad.grad_params(loss, leaves)
    for name, val in (("W1", W1), ("b1", b1), ("W2", W2)):
        def f(v, name=name):
            args = {"W1": W1, "b1": b1, "W2": W2, name: v}
            return float(np.mean((np.tanh(x @ args["W1"] + args["b1"]) @ args["W2"]) ** 2))
        assert rel_err(g.blocks[name].reshape(val.shape), fd_grad(f, val.copy())) < 1e-6


@pytest.mark.parametrize("op,fn,lo", [
    (ad.tanh, np.tanh, -2), (ad.sin, np.sin, -2), (ad.cos, np.cos, -2),
    (ad.exp, np.exp, -2), (ad.log, np.log, 0.5), (ad.square, np.square, -2),
    (lambda a: ad.power(a, 3.0), lambda v: v ** 3, -2),
    (lambda a: ad.div(1.0, a), lambda v: 1.0 / v, 0.5),
])
def test_unary_primitives_match_fd(op, fn, lo):
    rng = np.random.default_rng(2)
    v = rng.uniform(lo, lo + 2.0, size=4)
    p = ad.param(v, "p")
    (g,) = ad.grad(ad.sum(op(p)), [p])
    assert rel_err(g, fd_grad(lambda z: float(np.sum(fn(z))), v.copy())) < 1e-5


def test_binary_and_structural_primitives_match_fd():
    rng = np.random.default_rng(3)
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    pa, pb = ad.param(A, "A"), ad.param(B, "B")
    idx = [2, 0]
    m = ad.matmul(pa, pb)
    out = ad.sum(ad.take(ad.concat([m, m * 2.0], axis=-1), idx, axis=-1))
    ga, gb = ad.grad(out, [pa, pb])

    def f(Av, Bv):
        m = Av @ Bv
        return float(np.concatenate([m, 2 * m], axis=-1)[:, idx].sum())
    assert rel_err(ga, fd_grad(lambda z: f(z, B), A.copy())) < 1e-5
    assert rel_err(gb, fd_grad(lambda z: f(A, z), B.copy())) < 1e-5


def test_input_derivative_examples():
    x = ad.variable(np.array([[2.0]]), "x")
    d2 = ad.input_derivative(ad.power(x, 3.0), x, 0, 2)
    assert d2.value.item() == pytest.approx(12.0, rel=1e-14)
    y = ad.variable(np.array([[0.5]]), "y")
    d2 = ad.input_derivative(ad.sin(ad.mul(math.pi, y)), y, 0, 2)
    assert d2.value.item() == pytest.approx(-math.pi ** 2, rel=1e-14)


def test_input_derivative_order_three_rejected():
    x = ad.variable(np.array([[1.0]]), "x")
    with pytest.raises(NotImplementedError):
        ad.input_derivative(x * x, x, 0, 3)


def test_second_derivative_param_gradient_matches_nested_fd():
    rng = np.random.default_rng(4)
    W1, b1, W2 = rng.normal(size=(1, 6)), rng.normal(size=6), rng.normal(size=(6, 1))
    xs = np.linspace(-1, 1, 5)[:, None]
    x = ad.variable(xs, "x")
    lv = {"W1": ad.param(W1, "W1"), "b1": ad.param(b1, "b1"), "W2": ad.param(W2, "W2")}
    u_xx = ad.input_derivative(tiny_net(x, lv["W1"], lv["b1"], lv["W2"]), x, 0, 2)
    g = ad.grad_params(ad.sum(u_xx), lv)

    def uxx_fd(W1v, h=1e-3):
        # second difference in x of the forward pass
        f = lambda z: np.tanh(z @ W1v + b1) @ W2
        return float(np.sum((f(xs + h) - 2 * f(xs) + f(xs - h)) / h ** 2))

    num = fd_grad(uxx_fd, W1.copy(), eps=1e-5)
    assert rel_err(g.blocks["W1"].reshape(W1.shape), num) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_first_derivative_of_product(a, b):
    x = ad.variable(np.array([[a, b]]), "x")
    u = x.col(0) * ad.sin(x.col(1))
    assert ad.input_derivative(u, x, 0).value.item() == pytest.approx(math.sin(b), abs=1e-12)
    assert ad.input_derivative(u, x, 1).value.item() == pytest.approx(a * math.cos(b), abs=1e-12)


def test_param_vector_layout_and_select():
    v = ParamVector({"trunk.block0.W1": np.ones((2, 2)), "adapter0.layer0.D": np.zeros(3),
                     "phys.alpha": np.array(0.5)})
    assert v.total_len == 8
    assert v.names == ["trunk.block0.W1", "adapter0.layer0.D", "phys.alpha"]
    assert v.select(["adapter0"]) == ["adapter0.layer0.D"]
    assert v.group("trunk").size == 4
    with pytest.raises(KeyError):
        v.select(["nope"])
    w = v.like(np.arange(8.0))
    np.testing.assert_array_equal(w.blocks["phys.alpha"], [7.0])
    assert (w - w).norm() == 0.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=6))
def test_param_vector_flat_roundtrip(vals):
    v = ParamVector({"a": np.array(vals), "b": np.array(vals[::-1])})
    assert v.like(v.flat()).flat().tobytes() == v.flat().tobytes()
    assert v.total_len == 2 * len(vals)
