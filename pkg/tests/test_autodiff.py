"""Tape engine tests: finite-difference oracles, adjoint identities, accumulation."""

import numpy as np
import pytest

from trisdf import autodiff as ad


def fd_grad(f, x, step=1e-5):
    """Independent central-difference gradient of scalar f at ndarray x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def analytic_grad(build, x_data):
    x = ad.tensor(x_data, requires_grad=True)
    with ad.Tape() as t:
        y = build(x)
        t.backward(y)
    return x.grad


def max_rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b) / denom))


def test_exp_gradient_at_zero():
    x = ad.tensor(0.0, requires_grad=True)
    with ad.Tape() as t:
        y = ad.exp(x)
        t.backward(y)
    assert x.grad == pytest.approx(1.0, abs=1e-12)


def test_sigmoid_gradient_at_zero():
    x = ad.tensor(0.0, requires_grad=True)
    with ad.Tape() as t:
        y = ad.sigmoid(x)
        t.backward(y)
    assert x.grad == pytest.approx(0.25, abs=1e-12)


def test_product_rule():
    x = ad.tensor(3.0, requires_grad=True)
    y = ad.tensor(-2.0, requires_grad=True)
    with ad.Tape() as t:
        z = x * y
        t.backward(z)
    assert x.grad == pytest.approx(-2.0)
    assert y.grad == pytest.approx(3.0)


@pytest.mark.parametrize("seed", range(10))
def test_elementwise_chain_matches_fd(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(4, 3))

    def build(x):
        a = ad.exp(ad.mul(x, ad.constant(0.3)))
        b = ad.sigmoid(ad.sub(a, ad.constant(0.5)))
        c = ad.softplus(ad.add(b, x), beta=2.0)
        d = ad.log(ad.add(c, ad.constant(1.5)))
        e = ad.sqrt(ad.add(ad.mul(d, d), ad.constant(0.1)))
        return ad.sum_(e)

    g = analytic_grad(build, x0)

    def scalar(xd):
        return float(build(ad.tensor(xd)).data)

    assert max_rel_err(g, fd_grad(scalar, x0.copy())) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_matmul_broadcast_div_matches_fd(seed):
    rng = np.random.default_rng(100 + seed)
    x0 = rng.normal(size=(5, 4))
    w = rng.normal(size=(4, 3))
    b = rng.normal(size=(3,))

    def build(x):
        h = ad.matmul(x, ad.constant(w))
        h = ad.add(h, ad.constant(b))
        h = ad.div(h, ad.add(ad.norm_last(h, keepdims=True), ad.constant(1.0)))
        return ad.sum_(ad.mul(h, h))

    g = analytic_grad(build, x0)

    def scalar(xd):
        return float(build(ad.tensor(xd)).data)

    assert max_rel_err(g, fd_grad(scalar, x0.copy())) < 1e-6


def test_matmul_weight_gradient_matches_fd():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(6, 4))
    w0 = rng.normal(size=(4, 2))

    def build(w):
        return ad.sum_(ad.relu(ad.matmul(ad.constant(x), w)))

    g = analytic_grad(build, w0)

    def scalar(wd):
        return float(build(ad.tensor(wd)).data)

    assert max_rel_err(g, fd_grad(scalar, w0.copy())) < 1e-6


def test_batched_matmul_gradient():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 3, 4))
    w0 = rng.normal(size=(4, 5))

    def build(w):
        return ad.sum_(ad.mul(ad.matmul(ad.constant(x), w), ad.constant(2.0)))

    g = analytic_grad(build, w0)

    def scalar(wd):
        return float(build(ad.tensor(wd)).data)

    assert max_rel_err(g, fd_grad(scalar, w0.copy())) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_gather_scatter_reductions_match_fd(seed):
    rng = np.random.default_rng(200 + seed)
    x0 = rng.normal(size=(8, 3))
    idx = rng.integers(0, 8, size=(10,))

    def build(x):
        rows = ad.gather(x, idx)                    # (10, 3)
        back = ad.scatter_add(rows, idx, 8)         # (8, 3)
        s = ad.cumsum_exclusive(back, axis=0)
        return ad.sum_(ad.mul(s, s))

    g = analytic_grad(build, x0)

    def scalar(xd):
        return float(build(ad.tensor(xd)).data)

    assert max_rel_err(g, fd_grad(scalar, x0.copy())) < 1e-6


def test_gather_duplicate_indices_accumulate():
    x = ad.tensor(np.arange(4.0).reshape(4, 1), requires_grad=True)
    idx = np.array([2, 2, 2])
    with ad.Tape() as t:
        y = ad.sum_(ad.gather(x, idx))
        t.backward(y)
    expected = np.zeros((4, 1))
    expected[2] = 3.0
    assert np.array_equal(x.grad, expected)


def test_gather_scatter_adjoint_identity():
    # <scatter(u), v> == <u, gather(v)> for random u, v, idx
    rng = np.random.default_rng(3)
    for _ in range(5):
        idx = rng.integers(0, 6, size=(9,))
        u = rng.normal(size=(9, 2))
        v = rng.normal(size=(6, 2))
        lhs = np.sum(ad.scatter_add(ad.constant(u), idx, 6).data * v)
        rhs = np.sum(u * ad.gather(ad.constant(v), idx).data)
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_cumsum_exclusive_values():
    x = ad.constant(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    y = ad.cumsum_exclusive(x, axis=1)
    assert np.array_equal(y.data, np.array([[0.0, 1.0, 3.0], [0.0, 4.0, 9.0]]))


def test_concat_narrow_transpose_reshape_match_fd():
    rng = np.random.default_rng(17)
    x0 = rng.normal(size=(3, 4))

    def build(x):
        a = ad.concat([x, ad.mul(x, ad.constant(2.0))], axis=1)   # (3, 8)
        b = ad.narrow(a, 1, 2, 4)                                 # (3, 4)
        c = ad.transpose(b, (1, 0))                               # (4, 3)
        d = ad.reshape(c, (2, 6))
        return ad.sum_(ad.mul(d, d))

    g = analytic_grad(build, x0)

    def scalar(xd):
        return float(build(ad.tensor(xd)).data)

    assert max_rel_err(g, fd_grad(scalar, x0.copy())) < 1e-6


def test_clamp_subgradient_zero_outside():
    x = ad.tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    with ad.Tape() as t:
        y = ad.sum_(ad.clamp(x, 0.0, 1.0))
        t.backward(y)
    assert np.array_equal(x.grad, np.array([0.0, 1.0, 0.0]))


def test_abs_subgradient():
    x = ad.tensor(np.array([-2.0, 0.0, 3.0]), requires_grad=True)
    with ad.Tape() as t:
        y = ad.sum_(ad.abs_(x))
        t.backward(y)
    assert np.array_equal(x.grad, np.array([-1.0, 0.0, 1.0]))


def test_mean_and_axis_reductions_match_fd():
    rng = np.random.default_rng(23)
    x0 = rng.normal(size=(4, 5))

    def build(x):
        m = ad.mean(x, axis=1)            # (4,)
        s = ad.sum_(x, axis=0)            # (5,)
        return ad.add(ad.sum_(ad.mul(m, m)), ad.mean(ad.mul(s, s)))

    g = analytic_grad(build, x0)

    def scalar(xd):
        return float(build(ad.tensor(xd)).data)

    assert max_rel_err(g, fd_grad(scalar, x0.copy())) < 1e-6


def test_backward_accumulates_and_reset_clears():
    x = ad.tensor(2.0, requires_grad=True)
    with ad.Tape() as t:
        y = x * x
        t.backward(y)
        first = float(x.grad)
        t.backward(y)
        second = float(x.grad)
    assert first == pytest.approx(4.0)
    assert second == pytest.approx(8.0)
    ad.zero_grads([x])
    assert x.grad is None


def test_backward_requires_scalar_root():
    x = ad.tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as t:
        y = x * x
        with pytest.raises(ad.ShapeError):
            t.backward(y)


def test_shape_mismatch_raises_with_shapes():
    a = ad.constant(np.ones((2, 3)))
    b = ad.constant(np.ones((4, 5)))
    with pytest.raises(ad.ShapeError) as ei:
        ad.matmul(a, b)
    assert "(2, 3)" in str(ei.value)
    assert "(4, 5)" in str(ei.value)


def test_no_tape_means_no_recording():
    x = ad.tensor(1.0, requires_grad=True)
    y = ad.exp(x)
    assert y._op_output is False


def test_norm_last_zero_vector_subgradient():
    x = ad.tensor(np.zeros((2, 3)), requires_grad=True)
    with ad.Tape() as t:
        y = ad.sum_(ad.norm_last(x))
        t.backward(y)
    assert np.array_equal(x.grad, np.zeros((2, 3)))


def test_grad_check_utility():
    rng = np.random.default_rng(5)
    x = ad.tensor(rng.normal(size=(3, 2)), requires_grad=True)

    def f(t):
        return ad.sum_(ad.sigmoid(ad.mul(t, t)))

    assert ad.grad_check(f, x, step=1e-5) < 1e-6


def test_grad_check_rejects_nonfinite():
    x = ad.tensor(np.array([-1.0]), requires_grad=True)

    def f(t):
        return ad.sum_(ad.log(t))

    with pytest.raises(FloatingPointError):
        ad.grad_check(f, x)


def test_softplus_beta_sharp_is_stable():
    x = ad.constant(np.array([-500.0, 0.0, 500.0]))
    y = ad.softplus(x, beta=100.0)
    assert np.all(np.isfinite(y.data))
    assert y.data[0] == pytest.approx(0.0, abs=1e-12)
    assert y.data[2] == pytest.approx(500.0, rel=1e-12)
