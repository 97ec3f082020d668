import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdpgan import autodiff as ad
from pdpgan import gan

H = 1e-5


def fd_grad(f, x, h=H):
    """Central finite differences of scalar f at array x."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def max_rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def tape_grad(build, arrays):
    with ad.Tape() as tape:
        xs = ad.tensors(arrays)
        out = build(*xs)
    return [np.asarray(g) for g in tape.gradient(out, xs)]


# -- forward semantics -----------------------------------------------------------

def test_leaky_relu_and_sigmoid_values():
    assert ad.leaky_relu(np.array(-2.0), 0.2) == pytest.approx(-0.4)
    assert ad.leaky_relu(np.array(3.0), 0.2) == 3.0
    assert ad.sigmoid(np.array(0.0)) == 0.5
    big = ad.sigmoid(np.array([-800.0, 800.0]))
    assert np.all(np.isfinite(big)) and big[0] == 0.0 and big[1] == 1.0


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    with ad.Tape():
        out = ad.matmul(ad.Tensor(a), ad.Tensor(b))
    np.testing.assert_allclose(out.value, ref, rtol=0, atol=1e-13)


def test_l2_norm_rows_values(rng):
    x = rng.normal(size=(4, 3))
    np.testing.assert_allclose(ad.l2_norm_rows(x), np.linalg.norm(x, axis=1), rtol=1e-15)
    with pytest.raises(ValueError):
        ad.l2_norm_rows(np.ones(3))


def test_shape_errors_name_both_shapes():
    with pytest.raises(ValueError, match=r"\(3, 4\).*\(2, 2\)"):
        ad.matmul(ad.Tensor(np.ones((3, 4))), ad.Tensor(np.ones((2, 2))))
    with pytest.raises(ValueError, match=r"\(3,\).*\(4,\)"):
        ad.add(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(4)))


def test_tensor_operators():
    with ad.Tape() as tape:
        x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = ad.sum_((2 * x - 1) / (x + 1) * -x)
    (g,) = tape.gradient(y, [x])
    # d/dx of -x(2x-1)/(x+1) = -(2x^2 + 4x - 1)/(x+1)^2
    xv = np.array([1.0, 2.0])
    np.testing.assert_allclose(g, -(2 * xv**2 + 4 * xv - 1) / (xv + 1) ** 2, rtol=1e-14)


# -- backward --------------------------------------------------------------------

def test_sum_of_squares_gradient():
    with ad.Tape() as tape:
        x = ad.Tensor([1.0, -2.0, 3.0], requires_grad=True)
        loss = ad.sum_(ad.square(x))
    np.testing.assert_array_equal(tape.gradient(loss, [x])[0], [2.0, -4.0, 6.0])
    np.testing.assert_array_equal(ad.backward(loss)[x], [2.0, -4.0, 6.0])


def test_non_scalar_target_rejected():
    with ad.Tape() as tape:
        x = ad.Tensor(np.ones(3), requires_grad=True)
        y = ad.square(x)
    with pytest.raises(ValueError, match="scalar"):
        tape.gradient(y, [x])
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(y)


def test_unaffected_parameter_gets_zero():
    with ad.Tape() as tape:
        x = ad.Tensor(np.ones(3), requires_grad=True)
        unused = ad.Tensor(np.ones((2, 2)), requires_grad=True)
        loss = ad.sum_(x)
    gx, gu = tape.gradient(loss, [x, unused])
    np.testing.assert_array_equal(gu, np.zeros((2, 2)))


def test_leaky_relu_gradient_at_zero_is_alpha():
    (g,) = tape_grad(lambda x: ad.sum_(ad.leaky_relu(x, 0.3)), [np.array([0.0, -1.0, 1.0])])
    np.testing.assert_array_equal(g, [0.3, 0.3, 1.0])


def test_backward_is_repeatable_bitwise(rng):
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    build = lambda x, y: ad.mean(ad.sigmoid(ad.leaky_relu(ad.matmul(x, y), 0.2)))  # noqa: E731
    g1 = tape_grad(build, [a, b])
    g2 = tape_grad(build, [a.copy(), b.copy()])
    for u, v in zip(g1, g2):
        assert u.tobytes() == v.tobytes()


UNARY = {
    "square": ad.square,
    "sqrt": lambda x: ad.sqrt(ad.add(ad.square(x), 0.5)),
    "leaky_relu": lambda x: ad.leaky_relu(x, 0.2),
    "sigmoid": ad.sigmoid,
    "neg": ad.neg,
    "scalar_mul": lambda x: ad.scalar_mul(-1.7, x),
    "transpose": ad.transpose,
    "reshape": lambda x: ad.reshape(x, (-1,)),
    "mean_axis": lambda x: ad.mean(x, axis=0),
    "sum_axis": lambda x: ad.sum_(x, axis=1, keepdims=True),
    "l2_norm_rows": lambda x: ad.l2_norm_rows(x, 1e-12),
}
BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": lambda a, b: ad.div(a, ad.add(ad.square(b), 1.0)),
    "add_broadcast_row": lambda a, b: ad.add(a, ad.sum_(b, axis=0)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(seed=st.integers(0, 2**31))
def test_unary_ops_match_finite_differences(name, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(4, 3))
    x[np.abs(x) < 1e-3] = 0.1  # keep FD away from the leaky kink
    w = r.normal(size=np.shape(UNARY[name](x)))
    f = lambda v: float(np.sum(w * np.asarray(UNARY[name](v))))  # noqa: E731
    (g,) = tape_grad(lambda t: ad.sum_(ad.mul(UNARY[name](t), w)), [x])
    assert max_rel_err(g, fd_grad(f, x.copy())) < 1e-5


@pytest.mark.parametrize("name", sorted(BINARY))
@given(seed=st.integers(0, 2**31))
def test_binary_ops_match_finite_differences(name, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(4, 3)), r.normal(size=(4, 3))
    op = BINARY[name]
    w = r.normal(size=np.shape(op(a, b)))
    ga, gb = tape_grad(lambda x, y: ad.sum_(ad.mul(op(x, y), w)), [a, b])
    assert max_rel_err(ga, fd_grad(lambda v: float(np.sum(w * op(v, b))), a.copy())) < 1e-5
    assert max_rel_err(gb, fd_grad(lambda v: float(np.sum(w * op(a, v))), b.copy())) < 1e-5


@given(seed=st.integers(0, 2**31))
def test_matmul_gradients(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(3, 4)), r.normal(size=(4, 2))
    ga, gb = tape_grad(lambda x, y: ad.sum_(ad.sigmoid(ad.matmul(x, y))), [a, b])
    f = lambda x, y: float(np.sum(ad.sigmoid(x @ y)))  # noqa: E731
    assert max_rel_err(ga, fd_grad(lambda v: f(v, b), a.copy())) < 1e-5
    assert max_rel_err(gb, fd_grad(lambda v: f(a, v), b.copy())) < 1e-5


# -- gradient penalty --------------------------------------------------------------

def linear_critic(w):
    return lambda x: ad.matmul(x, ad.reshape(w, (-1, 1)))


def test_penalty_vanishes_for_unit_norm_linear_critic(rng):
    with ad.Tape() as tape:
        w = ad.Tensor(np.array([0.6, 0.8]), requires_grad=True)
        pen = ad.grad_norm_penalty(linear_critic(w), rng.normal(size=(7, 2)), 10.0)
    assert float(pen.value) == pytest.approx(0.0, abs=1e-20)
    np.testing.assert_allclose(tape.gradient(pen, [w])[0], 0.0, atol=1e-10)


def test_penalty_closed_form_linear_critic(rng):
    wv = np.array([3.0, 4.0])
    with ad.Tape() as tape:
        w = ad.Tensor(wv, requires_grad=True)
        pen = ad.grad_norm_penalty(linear_critic(w), rng.normal(size=(6, 2)), 10.0)
    norm = np.linalg.norm(wv)
    # the 1e-12 guard under the root shifts the norm by ~1e-13
    assert float(pen.value) == pytest.approx(160.0, abs=1e-10)
    expected = 2 * 10.0 * (norm - 1) * wv / norm
    np.testing.assert_allclose(tape.gradient(pen, [w])[0], expected, rtol=0, atol=1e-10)


def _two_layer(rng, din=3, hidden=4):
    return [rng.normal(size=(din, hidden)), rng.normal(size=hidden) * 0.1,
            rng.normal(size=(hidden, 1)), rng.normal(size=1) * 0.1]


def _penalty_value(params, x, lam=10.0):
    w1, b1, w2, b2 = params
    a = x @ w1 + b1
    slope = np.where(a > 0, 1.0, 0.2)
    g = (slope * w2[:, 0]) @ w1.T
    return lam * np.mean((np.sqrt(np.sum(g * g, axis=1) + 1e-12) - 1) ** 2)


@pytest.mark.parametrize("seed", range(5))
def test_penalty_second_order_matches_finite_differences(seed):
    r = np.random.default_rng(seed)
    params = _two_layer(r)
    x = r.normal(size=(5, 3))
    with ad.Tape() as tape:
        ps = ad.tensors(params)

        def critic(inp):
            h = ad.leaky_relu(ad.add(ad.matmul(inp, ps[0]), ps[1]), 0.2)
            return ad.add(ad.matmul(h, ps[2]), ps[3])

        pen = ad.grad_norm_penalty(critic, x, 10.0)
        grads = tape.gradient(pen, ps)
    assert float(pen.value) == pytest.approx(_penalty_value(params, x), rel=1e-12)
    for i, g in enumerate(grads):
        def f(v, i=i):
            q = list(params)
            q[i] = v
            return _penalty_value(q, x)
        assert max_rel_err(g, fd_grad(f, params[i].copy())) < 1e-4
    # biases only move the kink pattern, which is locally constant
    np.testing.assert_array_equal(grads[3], 0.0)


@given(seed=st.integers(0, 2**31), lam=st.floats(0, 50))
def test_penalty_non_negative(seed, lam):
    r = np.random.default_rng(seed)
    D = gan.DiscriminatorNet.create(r, 5, (4, 3))
    with ad.Tape():
        pen = ad.grad_norm_penalty(D.bind(), r.normal(size=(3, 5)), lam)
    assert float(pen.value) >= 0.0


def test_penalty_requires_active_tape():
    with pytest.raises(RuntimeError):
        ad.grad_norm_penalty(lambda x: x, np.ones((2, 1)), 1.0)


@pytest.mark.parametrize("hidden", [(8,), (8, 8), (8, 8, 8, 8), (8,) * 8])
def test_penalty_node_budget(hidden, rng):
    D = gan.DiscriminatorNet.create(rng, 6, hidden)
    x = rng.normal(size=(5, 6))
    with ad.Tape() as t:
        D.bind()(x)
    forward = len(t)
    with ad.Tape() as t:
        ad.grad_norm_penalty(D.bind(), x, 10.0)
    # forward pass + its recorded backward pass + a fixed number of norm and
    # mean nodes
    assert len(t) <= 2 * forward + 12


def test_tape_growth_is_linear():
    counts = []
    for n in (10, 20, 40):
        with ad.Tape() as t:
            x = ad.Tensor(np.ones(3), requires_grad=True)
            y = x
            for _ in range(n):
                y = ad.sigmoid(ad.mul(y, 1.01))
        counts.append(len(t))
    assert counts[1] - counts[0] == (counts[2] - counts[1]) / 2
