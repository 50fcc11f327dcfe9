import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualassign import autodiff as ad
from dualassign.autodiff import ShapeError, Tensor, conv2d, grad_check
from oracles import naive_conv2d

TOL = 1e-4


def rand(shape, seed=0, lo=-1.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, shape)


def test_conv_identity_kernel():
    x = rand((1, 3, 3))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    assert np.array_equal(out.data, x)


def test_conv_all_ones_kernel_center_is_total():
    x = rand((1, 3, 3), seed=4)
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert out.data[0, 1, 1] == pytest.approx(x.sum(), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 2),
    st.integers(1, 3),
    st.integers(1, 3),
    st.integers(4, 7),
    st.sampled_from([1, 3]),
    st.integers(1, 2),
    st.integers(0, 1),
    st.integers(0, 2**31 - 1),
)
def test_conv_matches_naive_loops_exactly(n, cin, cout, size, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    # small integers keep every partial sum exact, so equality is bit-for-bit
    x = rng.integers(-4, 5, (n, cin, size, size)).astype(float)
    w = rng.integers(-3, 4, (cout, cin, k, k)).astype(float)
    b = rng.integers(-2, 3, cout).astype(float)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
    assert np.array_equal(out.data, naive_conv2d(x, w, b, stride, pad))


def test_conv_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_relu_examples():
    assert ad.relu(Tensor(-2.0)).item() == 0.0
    assert ad.relu(Tensor(3.0)).item() == 3.0


def test_backward_simple_gradients():
    x = Tensor(rand((3, 4)), requires_grad=True)
    ad.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))
    y = Tensor(rand((3, 4), seed=1), requires_grad=True)
    ad.tsum(y * y).backward()
    assert np.allclose(y.grad, 2 * y.data)


def test_backward_requires_scalar():
    x = Tensor(rand(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_backward_frees_graph_and_accumulates_on_leaves():
    x = Tensor(rand(4), requires_grad=True)
    h = x * 3.0
    loss = ad.tsum(h)
    loss.backward()
    assert loss._parents == () and h._parents == ()
    ad.tsum(x * 3.0).backward()
    assert np.allclose(x.grad, 6.0)


def test_shared_subexpression_visited_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    h = x * x
    loss = ad.tsum(h + h)
    loss.backward()
    assert x.grad[0] == pytest.approx(8.0)


def test_no_broadcast_beyond_scalars():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros(3))
    assert (Tensor(np.zeros((2, 3))) + 1.0).shape == (2, 3)


def test_no_grad_builds_no_graph():
    x = Tensor(rand(3), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_forward_is_deterministic():
    x, w = rand((2, 3, 6, 6)), rand((4, 3, 3, 3), seed=2)
    a = conv2d(Tensor(x), Tensor(w), padding=1).data
    b = conv2d(Tensor(x), Tensor(w), padding=1).data
    assert np.array_equal(a, b)


def test_grad_check_examples():
    assert grad_check(lambda t: ad.tsum(t * 3.0 + 1.0), rand(10)) < 1e-10
    assert grad_check(lambda t: ad.tsum(ad.sigmoid(t)), rand(10, seed=5)) < 1e-6


W = rand((3, 3), seed=9)
CASES = {
    "add": (lambda t: ad.tsum((t + Tensor(W)) * (t + Tensor(W))), (3, 3), 0),
    "sub": (lambda t: ad.tsum((Tensor(W) - t) ** 2), (3, 3), 0),
    "mul": (lambda t: ad.tsum(t * t * Tensor(W)), (3, 3), 0),
    "div": (lambda t: ad.tsum(Tensor(W) / t), (3, 3), 1),
    "rdiv_scalar": (lambda t: ad.tsum(2.0 / t), (3, 3), 1),
    "pow": (lambda t: ad.tsum(t**3), (3, 3), 0),
    "matmul": (lambda t: ad.tsum(ad.matmul(t, Tensor(W)) ** 2), (3, 3), 0),
    "relu": (lambda t: ad.tsum(ad.relu(t) * Tensor(W)), (3, 3), 0),
    "sigmoid": (lambda t: ad.tsum(ad.sigmoid(t) * Tensor(W)), (3, 3), 0),
    "exp": (lambda t: ad.tsum(ad.exp(t)), (3, 3), 0),
    "log": (lambda t: ad.tsum(ad.log(t)), (3, 3), 1),
    "sqrt": (lambda t: ad.tsum(ad.sqrt(t)), (3, 3), 1),
    "abs": (lambda t: ad.tsum(ad.tabs(t) * Tensor(W)), (3, 3), 0),
    "maximum": (lambda t: ad.tsum(ad.maximum(t, Tensor(W)) ** 2), (3, 3), 0),
    "minimum": (lambda t: ad.tsum(ad.minimum(t, Tensor(W)) ** 2), (3, 3), 0),
    "clip": (lambda t: ad.tsum(ad.clip(t, -0.5, 0.5) ** 2), (3, 3), 0),
    "mean_axis": (lambda t: ad.tsum(ad.mean(t, axis=1) ** 2), (3, 3), 0),
    "sum_axis": (lambda t: ad.tsum(ad.tsum(t, axis=0) ** 2), (3, 3), 0),
    "reshape_transpose": (lambda t: ad.tsum(ad.transpose(ad.reshape(t, (9, 1)), (1, 0)) ** 2 * 0.5), (3, 3), 0),
    "index": (lambda t: ad.tsum(t[1:, ::2] ** 2), (3, 3), 0),
    "take": (lambda t: ad.tsum(ad.take(ad.reshape(t, (9,)), np.array([0, 3, 3, 8])) ** 2), (3, 3), 0),
    "concat": (lambda t: ad.tsum(ad.concat([t, t * 2.0], axis=0) ** 2), (3, 3), 0),
    "conv2d": (lambda t: ad.tsum(conv2d(t, Tensor(rand((2, 3, 3, 3), seed=3)), stride=2, padding=1) ** 2), (1, 3, 5, 5), 0),
    "conv2d_weight": (lambda t: ad.tsum(conv2d(Tensor(rand((2, 2, 6, 6), seed=8)), t, padding=1) ** 2), (3, 2, 3, 3), 0),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_every_op_passes_grad_check(name):
    f, shape, positive = CASES[name]
    x = rand(shape, seed=7, lo=0.5, hi=2.0) if positive else rand(shape, seed=7)
    assert grad_check(f, x, eps=1e-5, n_samples=32) < TOL


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda t: ad.tsum(t), rand(3), eps=0.0)
