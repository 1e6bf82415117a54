import numpy as np
import pytest

from aenv.autodiff import (Tensor, conv2d, dropout, l2_normalize, logsumexp)
from conftest import finite_difference_check


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_add_mul_backward():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    ((a * b) + a).sum().backward()
    assert np.allclose(a.grad, [4.0, 5.0])
    assert np.allclose(b.grad, [1.0, 2.0])


def test_broadcast_gradients(rng):
    x = rng.standard_normal((3, 4))
    b = rng.standard_normal(4)
    finite_difference_check(lambda ts: ((ts[0] + ts[1]) ** 2.0).sum(), [x, b])


def test_matmul_gradients(rng):
    finite_difference_check(
        lambda ts: (ts[0] @ ts[1]).sum(),
        [rng.standard_normal((3, 5)), rng.standard_normal((5, 2))])


def test_elementwise_gradients(rng):
    x = rng.uniform(0.5, 2.0, size=(4, 3))
    finite_difference_check(lambda ts: (ts[0].log() + ts[0].exp()
                                        + ts[0].sqrt()).sum(), [x])
    finite_difference_check(lambda ts: (ts[0] / ts[0].sum()).sum(), [x])


def test_relu_zero_gradient_at_negative_input():
    x = Tensor(np.array([-1.0, 2.0, -3.0]), requires_grad=True)
    x.relu().sum().backward()
    assert np.allclose(x.grad, [0.0, 1.0, 0.0])


def test_relu_gradient(rng):
    # keep inputs away from the kink where finite differences are invalid
    x = rng.standard_normal((5, 4))
    x[np.abs(x) < 0.05] += 0.2
    finite_difference_check(lambda ts: (ts[0].relu() * ts[0].relu()).sum(), [x])


def test_reduction_gradients(rng):
    x = rng.standard_normal((3, 4, 2))
    finite_difference_check(lambda ts: (ts[0].mean(axis=(0, 2)) ** 2.0).sum(), [x])
    finite_difference_check(
        lambda ts: (ts[0].sum(axis=1, keepdims=True) * ts[0]).sum(), [x])


def test_reshape_transpose_gradients(rng):
    x = rng.standard_normal((2, 3, 4))
    finite_difference_check(
        lambda ts: (ts[0].transpose(2, 0, 1).reshape(4, 6) ** 2.0).sum(), [x])


def test_conv2d_shapes_and_errors(rng):
    x = Tensor(rng.standard_normal((2, 3, 8, 10)))
    w = Tensor(rng.standard_normal((5, 3, 2, 4)))
    out = conv2d(x, w, stride=(2, 2))
    assert out.shape == (2, 5, 4, 4)
    with pytest.raises(ValueError, match="larger than input"):
        conv2d(Tensor(rng.standard_normal((1, 3, 1, 3))), w, (1, 1))
    with pytest.raises(ValueError, match="channel mismatch"):
        conv2d(Tensor(rng.standard_normal((1, 2, 8, 8))), w, (1, 1))


def test_conv2d_matches_naive(rng):
    x = rng.standard_normal((2, 2, 6, 9))
    w = rng.standard_normal((3, 2, 2, 3))
    sh, sw = 2, 3
    out = conv2d(Tensor(x), Tensor(w), (sh, sw)).data
    for b in range(2):
        for o in range(3):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    patch = x[b, :, i * sh:i * sh + 2, j * sw:j * sw + 3]
                    assert out[b, o, i, j] == pytest.approx(
                        float((patch * w[o]).sum()), rel=1e-10)


def test_conv2d_gradients(rng):
    x = rng.standard_normal((2, 2, 5, 7))
    w = rng.standard_normal((3, 2, 2, 3))
    finite_difference_check(
        lambda ts: (conv2d(ts[0], ts[1], (1, 2)) ** 2.0).sum(), [x, w])


def test_l2_normalize_unit_norm(rng):
    x = Tensor(rng.standard_normal((4, 8)))
    out = l2_normalize(x, axis=1)
    assert np.allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-6)


def test_l2_normalize_zero_vector_errors():
    with pytest.raises(ValueError, match="zero-vector normalization"):
        l2_normalize(Tensor(np.zeros((1, 4))), axis=1)


def test_l2_normalize_gradient_orthogonal_to_direction(rng):
    # when the loss depends only on x/||x||, the gradient has no radial part
    x = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
    target = rng.standard_normal((3, 6))
    ((l2_normalize(x, axis=1) - Tensor(target)) ** 2.0).sum().backward()
    unit = x.data / np.linalg.norm(x.data, axis=1, keepdims=True)
    radial = (x.grad * unit).sum(axis=1)
    assert np.abs(radial).max() < 1e-6


def test_l2_normalize_gradients(rng):
    x = rng.standard_normal((3, 5)) + 0.5
    t = rng.standard_normal((3, 5))
    finite_difference_check(
        lambda ts: ((l2_normalize(ts[0], axis=1) * Tensor(t)).sum()), [x])


def test_logsumexp_matches_naive_and_grad(rng):
    x = rng.standard_normal((4, 6)) * 5
    out = logsumexp(Tensor(x), axis=1)
    naive = np.log(np.exp(x).sum(axis=1))
    assert np.allclose(out.data, naive, atol=1e-10)
    finite_difference_check(lambda ts: logsumexp(ts[0], axis=1).sum(), [x])


def test_logsumexp_stable_at_large_values():
    x = Tensor(np.array([[1000.0, 1000.0]]))
    out = logsumexp(x, axis=1)
    assert np.isfinite(out.data).all()
    assert out.data.item() == pytest.approx(1000.0 + np.log(2.0))


def test_dropout_eval_is_identity(rng):
    x = Tensor(rng.standard_normal((4, 5)))
    assert dropout(x, 0.5, rng, training=False) is x


def test_dropout_train_scales_surviving_units(rng):
    x = Tensor(np.ones((2000,)))
    out = dropout(x, 0.5, rng, training=True)
    kept = out.data[out.data != 0]
    assert np.allclose(kept, 2.0)
    assert abs(out.data.mean() - 1.0) < 0.1  # unbiased in expectation


def test_backward_requires_scalar(rng):
    x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_grad_accumulates_across_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x * 3.0
    y.sum().backward()
    assert np.allclose(x.grad, [7.0])


def test_float32_graph_stays_float32(rng):
    x = Tensor(rng.standard_normal((3, 3)).astype(np.float32), requires_grad=True)
    out = ((x * 2.0 + 1.0) / 3.0).mean()
    assert out.dtype == np.float32
    out.backward()
    assert x.grad.dtype == np.float32
