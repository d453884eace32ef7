import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddro import tensor as T
from ddro.tensor import (
    Graph,
    GraphError,
    NonFiniteError,
    OptimizerState,
    Tensor,
    adam_step,
    backward,
    forward_eval,
    grad,
    init_params,
)


def central_diff(fn, x, h=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b))))


def test_identity_graph():
    x = Tensor([1.0, 2.0, 3.0])
    g = Graph({"y": x}, {"x": x})
    assert forward_eval(g, {"x": [1, 2, 3]})["y"].tolist() == [1, 2, 3]


def test_matmul_hand_value():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_tanh_against_series():
    # Maclaurin series with Bernoulli-number coefficients, fine for |x| < pi/2
    x = 0.5
    series = sum((-1) ** n * x ** (2 * n + 1) * 2 ** (2 * n + 2) * (2 ** (2 * n + 2) - 1) * _bernoulli(2 * n + 2) / math.factorial(2 * n + 2) for n in range(12))
    assert abs(T.tanh(Tensor(x)).item() - series) < 1e-12
    assert abs(T.tanh(Tensor(x)).item() - 0.46211715726000974) < 1e-15


def _bernoulli(n):
    from fractions import Fraction

    B = [Fraction(1)]
    for m in range(1, n + 1):
        B.append(-sum(math.comb(m + 1, k) * B[k] for k in range(m)) / (m + 1))
    return float(abs(B[n]))


def test_scalar_derivatives():
    x = Tensor(3.0, requires_grad=True)
    assert grad(T.square(x), [x])[0] == 6.0
    z = Tensor(0.0, requires_grad=True)
    assert grad(T.tanh(z), [z])[0] == 1.0


UNARY = {
    "tanh": T.tanh,
    "relu": T.relu,
    "square": T.square,
    "exp": T.exp,
    "log": lambda a: T.log(T.square(a) + 0.5),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitives_fd(name):
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(3, 4))
    x0[np.abs(x0) < 1e-3] = 0.1  # keep relu away from its kink
    f = UNARY[name]
    w = rng.normal(size=(3, 4))

    def val(x):
        return float(np.sum(f(Tensor(x)).data * w))

    xt = Tensor(x0, requires_grad=True)
    (g,) = grad(T.sum_(f(xt) * w), [xt])
    assert rel_err(g, central_diff(val, x0)) < 1e-5


def test_structural_primitives_fd():
    rng = np.random.default_rng(2)
    a0, b0 = rng.normal(size=(3, 2)), rng.normal(size=(3, 4))
    c0 = rng.normal(size=(1, 6))

    def build(a, b, c):
        cat = T.concatenate([a, b], axis=1)  # (3, 6)
        s = cat[:, 1:5]
        m = T.mean(T.broadcast(c, (3, 6)) * cat, axis=0, keepdims=True)
        return T.sum_(T.square(s)) + T.sum_(m * c) + T.mean(T.sum_(cat, axis=1))

    ts = [Tensor(v, requires_grad=True) for v in (a0, b0, c0)]
    gs = grad(build(*ts), ts)
    for i, v in enumerate((a0, b0, c0)):
        def val(x, i=i):
            args = [Tensor(a0), Tensor(b0), Tensor(c0)]
            args[i] = Tensor(x)
            return build(*args).item()

        assert rel_err(gs[i], central_diff(val, v)) < 1e-6


def test_random_network_gradients_fd():
    rng = np.random.default_rng(3)
    params = init_params([5, 7, 3], 4)
    x = rng.normal(size=(6, 5))
    y = rng.normal(size=(6, 3))

    def loss(ps):
        return T.mean(T.sum_(T.square(T.mlp(Tensor(x), ps) - y), axis=1))

    ts = [Tensor(p, requires_grad=True) for p in params]
    gs = grad(loss(ts), ts)
    for i, p in enumerate(params):
        def val(v, i=i):
            ps = [Tensor(q) for q in params]
            ps[i] = Tensor(v)
            return loss(ps).item()

        assert rel_err(gs[i], central_diff(val, p)) < 1e-6


def test_composites():
    a = Tensor([-2.0, 0.3, 5.0])
    assert np.allclose(T.clip(a, -1.0, 1.0).data, [-1.0, 0.3, 1.0], rtol=0, atol=1e-15)
    assert T.minimum(a, Tensor([0.0, 0.0, 6.0])).data.tolist() == [-2.0, 0.0, 5.0]
    assert np.allclose((Tensor([1.0, 4.0]) / Tensor([2.0, 8.0])).data, [0.5, 0.5])


def test_broadcasting_gradient_reduces():
    a = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    ga, gb = grad(T.sum_(a * b), [a, b])
    assert ga.shape == (4, 3) and gb.tolist() == [4.0, 4.0, 4.0]


def test_unreachable_gets_zero():
    a = Tensor(2.0, requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    ga, gb = grad(T.square(a), [a, b])
    assert ga == 4.0 and gb.tolist() == [0, 0, 0]


def test_shape_mismatch_names_node():
    x = Tensor(np.ones((2, 3)))
    g = Graph({"y": T.tanh(x)}, {"x": x})
    with pytest.raises(GraphError, match="node 0"):
        forward_eval(g, {"x": np.ones((3, 3))})
    with pytest.raises(GraphError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(GraphError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_non_finite_rejected():
    with pytest.raises(NonFiniteError):
        T.exp(Tensor(1000.0))
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    x = Tensor(1.0)
    g = Graph({"y": T.exp(x)}, {"x": x})
    with pytest.raises(NonFiniteError, match="node"):
        forward_eval(g, {"x": 1000.0})


def test_backward_requires_forward_pass():
    x = Tensor(np.ones(2))
    g = Graph({"y": T.sum_(T.square(x))}, {"x": x})
    with pytest.raises(GraphError):
        backward(g, "y")
    ev = forward_eval(g, {"x": [1.0, -2.0]})
    assert backward(ev, "y")["x"].tolist() == [2.0, -4.0]


def test_graph_params_and_purity():
    rng = np.random.default_rng(5)
    params = init_params([3, 4, 1], 0)
    ps = [Tensor(p) for p in params]
    x = Tensor(np.zeros((5, 3)))
    out = T.sum_(T.mlp(x, ps))
    g = Graph({"out": out}, {"x": x}, {f"p{i}": p for i, p in enumerate(ps)})
    xv = rng.normal(size=(5, 3))
    e1, e2 = forward_eval(g, {"x": xv}), forward_eval(g, {"x": xv})
    assert e1["out"].tobytes() == e2["out"].tobytes()
    b = backward(e1, "out")
    tp = [Tensor(p, requires_grad=True) for p in params]
    direct = grad(T.sum_(T.mlp(Tensor(xv), tp)), tp)
    for i in range(4):
        assert np.allclose(b[f"p{i}"], direct[i], rtol=0, atol=1e-14)


def test_gradient_linearity():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(4,)), requires_grad=True)
    f1 = T.sum_(T.tanh(x) * 2.0)
    f2 = T.sum_(T.square(x))
    (g1,), (g2,) = grad(f1, [x]), grad(f2, [x])
    (g12,) = grad(f1 + f2, [x])
    assert np.allclose(g12, g1 + g2, atol=1e-14)


def test_adam_zero_grad_and_first_step():
    p = [np.array([1.0, -2.0])]
    st0 = OptimizerState.for_params(p, lr=0.01)
    p1, st1 = adam_step(p, [np.zeros(2)], st0)
    assert p1[0].tolist() == [1.0, -2.0] and st1.step == 1
    p2, _ = adam_step(p, [np.ones(2)], st0)
    assert np.allclose(p[0] - p2[0], 0.01, atol=1e-8)
    assert st0.step == 0 and p[0].tolist() == [1.0, -2.0]


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(0)
        p = init_params([3, 2], 1)
        st = OptimizerState.for_params(p)
        for _ in range(5):
            p, st = adam_step(p, [rng.normal(size=q.shape) for q in p], st)
        return b"".join(q.tobytes() for q in p)

    assert run() == run()


def test_adam_shape_mismatch():
    p = [np.zeros(2)]
    with pytest.raises(ValueError):
        adam_step(p, [np.zeros(3)], OptimizerState.for_params(p))


def test_init_params():
    a, b = init_params([4, 8, 2], 7), init_params([4, 8, 2], 7)
    assert [x.shape for x in a] == [(4, 8), (8,), (8, 2), (2,)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    W = init_params([64, 64], 0)[0]
    assert abs(W.std() - 1 / 8) < 0.2 / 8
    with pytest.raises(ValueError):
        init_params([4, 0, 2], 0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6))
def test_mean_matches_sum_over_n(xs):
    x = Tensor(np.array(xs), requires_grad=True)
    (g,) = grad(T.mean(x), [x])
    assert np.allclose(g, 1.0 / len(xs))
    assert math.isclose(T.mean(x).item(), T.sum_(x).item() / len(xs), rel_tol=1e-12, abs_tol=1e-12)
