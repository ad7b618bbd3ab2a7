import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qcpo.autodiff import GradTape, UntapedError, constant, concat, minimum, where


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def taped_grad(build, x):
    with GradTape() as tape:
        w = tape.watch(x)
        loss = build(w)
    return tape.gradient(loss, w), float(loss.value)


def test_sum_of_squares():
    g, _ = taped_grad(lambda w: (w * w).sum(), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_constant_loss_has_zero_gradient():
    g, v = taped_grad(lambda w: (w * 0.0).sum() + 5.0, np.array([1.0, -3.0]))
    assert v == 5.0
    np.testing.assert_array_equal(g, [0.0, 0.0])


def test_untaped_loss_rejected():
    with GradTape() as tape:
        w = tape.watch(np.ones(2))
    with pytest.raises(UntapedError):
        tape.gradient(constant(3.0), w)


def test_non_scalar_loss_rejected():
    with GradTape() as tape:
        w = tape.watch(np.ones(2))
        y = w * 2.0
    with pytest.raises(ValueError):
        tape.gradient(y, w)


def test_gradient_wrt_foreign_tensor_rejected():
    with GradTape() as a:
        x = a.watch(np.ones(2))
        loss = x.sum()
    with GradTape() as b:
        y = b.watch(np.ones(2))
    with pytest.raises(UntapedError):
        a.gradient(loss, y)


def test_unused_input_gets_zeros():
    with GradTape() as tape:
        x = tape.watch(np.ones(3))
        y = tape.watch(np.ones(2))
        loss = (x * 2.0).sum()
    gx, gy = tape.gradient(loss, [x, y])
    np.testing.assert_array_equal(gx, 2.0 * np.ones(3))
    np.testing.assert_array_equal(gy, np.zeros(2))


ELEMENTWISE = {
    "tanh": lambda w: w.tanh().sum(),
    "exp": lambda w: (w.exp() * 0.1).sum(),
    "log": lambda w: (w * w + 1.0).log().sum(),
    "sigmoid": lambda w: w.sigmoid().sum(),
    "div": lambda w: (1.0 / (w * w + 2.0)).sum(),
    "pow": lambda w: ((w * w + 1.0) ** 1.5).sum(),
    "abs": lambda w: (w * w * w).abs().sum(),
    "clip": lambda w: (w.clip(-0.5, 0.5) * w).sum(),
    "huber": lambda w: (w * 3.0).huber(1.0).sum(),
    "log_softmax": lambda w: (w.reshape(2, 3).log_softmax(axis=-1) * np.arange(6.0).reshape(2, 3)).sum(),
    "mean_axis": lambda w: (w.reshape(2, 3).mean(axis=0) ** 2).sum(),
    "getitem": lambda w: (w[np.array([0, 0, 4])] * np.array([1.0, 2.0, 3.0])).sum(),
    "where": lambda w: where(w.value > 0, w * w, w * 3.0).sum(),
    "minimum": lambda w: minimum(w * 2.0, w * w).sum(),
    "concat": lambda w: (concat([w[:2], w * w], axis=-1) ** 2).sum(),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_ops_match_finite_differences(name):
    rng = np.random.default_rng(7)
    # keep away from the kinks of abs/clip/huber/where/minimum
    x = rng.uniform(0.6, 1.4, size=6) * rng.choice([-1.0, 1.0], size=6)
    if name == "minimum":
        x = np.array([0.5, 3.0, -1.0, 1.5, 2.5, -0.3])
    build = ELEMENTWISE[name]
    g, _ = taped_grad(build, x)

    def f(v):
        with GradTape() as t:
            return float(build(t.watch(v)).value)

    fd = central_diff(f, x)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_matmul_broadcast_bias():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(5, 3))
    W0 = rng.normal(size=(3, 4))

    def build(w):
        return ((constant(X) @ w.reshape(3, 4) + w[:4]) ** 2).sum()

    g, _ = taped_grad(build, W0.ravel())

    def f(v):
        with GradTape() as t:
            return float(build(t.watch(v)).value)

    np.testing.assert_allclose(g, central_diff(f, W0.ravel()), rtol=1e-6)


def _mlp_loss(w, X, dims):
    h = constant(X)
    off = 0
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        W = w[off:off + a * b].reshape(a, b)
        off += a * b
        h = h @ W + w[off:off + b]
        off += b
        if i < len(dims) - 2:
            h = h.tanh()
    return (h * h).mean()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_random_mlp_gradient_matches_finite_differences(d_in, d_hidden, d_out, seed):
    rng = np.random.default_rng(seed)
    dims = [d_in, d_hidden, d_hidden, d_out]
    n = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    w0 = rng.normal(scale=0.8, size=n)
    X = rng.normal(size=(4, d_in))
    g, _ = taped_grad(lambda w: _mlp_loss(w, X, dims), w0)

    def f(v):
        with GradTape() as t:
            return float(_mlp_loss(t.watch(v), X, dims).value)

    fd = central_diff(f, w0)
    rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3)
    assert rel.max() <= 1e-4
