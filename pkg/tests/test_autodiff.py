import pytest
import numpy as np

from maxminwsl import autodiff as ad
from maxminwsl import prob_core


def test_square_gradient():
    x = ad.variable(3.0)
    ad.backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_backward_needs_scalar_root():
    x = ad.variable(np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(x * 2.0)


def test_shared_node_accumulates():
    x = ad.variable(2.0)
    y = x * x + x * 3.0
    ad.backward(y)
    assert x.grad == pytest.approx(7.0)


def test_backward_resets_previous_gradients():
    x = ad.variable(2.0)
    ad.backward(x * 5.0)
    ad.backward(x * 5.0)
    assert x.grad == pytest.approx(5.0)


def test_backward_is_linear(rng):
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))

    def f(n):
        return ad.reduce_sum(ad.mul(ad.exp(n), w))

    def g(n):
        return ad.reduce_sum(ad.softmax(n) * n)

    a, b = 2.5, -0.75
    combined = ad.analytic_gradient(lambda n: f(n) * a + g(n) * b, x)
    separate = a * ad.analytic_gradient(f, x) + b * ad.analytic_gradient(g, x)
    assert np.allclose(combined, separate, rtol=1e-12, atol=1e-12)


def test_constants_get_no_gradient():
    c = ad.constant(np.ones(2))
    x = ad.variable(np.ones(2))
    ad.backward(ad.reduce_sum(ad.mul(x, c)))
    assert c.grad is None
    assert np.allclose(x.grad, 1.0)


def test_add_shape_mismatch():
    with pytest.raises(ValueError):
        ad.add(ad.variable(np.ones(2)), ad.variable(np.ones(3)))
    with pytest.raises(ValueError):
        ad.mul(ad.variable(np.ones((1, 2, 3, 3))), ad.variable(np.ones((1, 2, 4, 4))))


def test_mul_channel_broadcast_gradient():
    image = ad.variable(np.arange(2 * 3 * 2 * 2, dtype=float).reshape(2, 3, 2, 2))
    mask = ad.variable(np.full((2, 1, 2, 2), 0.5))
    ad.backward(ad.reduce_sum(ad.mul(image, mask)))
    assert image.grad.shape == image.shape
    assert np.allclose(image.grad, 0.5)
    assert np.allclose(mask.grad, image.value.sum(axis=1, keepdims=True))


def test_division_only_by_scalars():
    x = ad.variable(np.ones(2))
    assert np.allclose((x / 4).value, 0.25)
    with pytest.raises(TypeError):
        x / np.ones(2)


def test_conv2d_identity_kernel():
    x = ad.constant(np.ones((1, 1, 5, 5)))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = ad.conv2d(x, ad.constant(w))
    assert np.array_equal(out.value, x.value)


def test_conv2d_matches_direct_sum(rng):
    x = rng.normal(size=(2, 2, 4, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = ad.conv2d(ad.constant(x), ad.constant(w), ad.constant(b)).value
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((2, 3, 4, 5))
    for n in range(2):
        for f in range(3):
            for i in range(4):
                for j in range(5):
                    expected[n, f, i, j] = np.sum(padded[n, :, i:i + 3, j:j + 3] * w[f]) + b[f]
    assert np.allclose(out, expected)


def test_conv2d_rejects_bad_kernel():
    with pytest.raises(ValueError):
        ad.conv2d(ad.constant(np.ones((1, 2, 4, 4))), ad.constant(np.ones((1, 2, 2, 2))))
    with pytest.raises(ValueError):
        ad.conv2d(ad.constant(np.ones((1, 2, 4, 4))), ad.constant(np.ones((1, 3, 3, 3))))


def test_topk_mean():
    assert ad.topk_mean(ad.constant([1.0, 2.0, 3.0, 4.0]), 2).item() == pytest.approx(3.5)
    assert ad.topk_mean(ad.constant([1.0, 2.0, 3.0, 4.0]), 2, largest=False).item() == pytest.approx(1.5)


def test_topk_rejects_bad_k():
    with pytest.raises(ValueError):
        ad.topk_mean(ad.constant([1.0, 2.0]), 3)
    with pytest.raises(ValueError):
        ad.topk_mean(ad.constant([1.0, 2.0]), 0)


def test_topk_tie_goes_to_lowest_index():
    x = ad.variable([5.0, 5.0, 1.0])
    ad.backward(ad.topk_mean(x, 1))
    assert x.grad.tolist() == [1.0, 0.0, 0.0]


def test_softmax_cross_entropy_gradient(rng):
    z = ad.variable(rng.normal(size=(1, 4)))
    target = np.eye(4)[[2]]
    p = ad.softmax(z)
    root = -ad.reduce_sum(ad.mul(ad.log(p), target))
    ad.backward(root)
    assert np.allclose(z.grad, prob_core.softmax(z.value).probs - target, atol=1e-12)


def test_matmul_gradient(rng):
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(3, 4))
    err = ad.finite_diff_check(lambda n: ad.reduce_sum(ad.matmul(n, ad.constant(b))), a)
    assert err <= 1e-6


def test_avg_pool2():
    x = ad.variable(np.arange(16, dtype=float).reshape(1, 1, 4, 4))
    out = ad.avg_pool2(x)
    assert out.value[0, 0].tolist() == [[2.5, 4.5], [10.5, 12.5]]
    ad.backward(ad.reduce_sum(out))
    assert np.allclose(x.grad, 0.25)
    with pytest.raises(ValueError):
        ad.avg_pool2(ad.constant(np.ones((1, 1, 3, 4))))


def test_minmax_normalize_constant_map():
    x = ad.variable(np.full((1, 1, 3, 3), 0.75))
    y = ad.minmax_normalize(x)
    assert np.all(y.value == 0.5)
    ad.backward(ad.reduce_sum(y))
    assert np.all(x.grad == 0.0)


def test_minmax_normalize_range(rng):
    y = ad.minmax_normalize(ad.constant(rng.normal(size=(2, 1, 4, 4)))).value
    assert np.allclose(y.reshape(2, -1).min(axis=1), 0.0)
    assert np.allclose(y.reshape(2, -1).max(axis=1), 1.0)


def test_interpolation_corners():
    r = ad.interpolation_matrix(2, 3)
    assert np.allclose(r @ np.array([0.0, 1.0]), [0.0, 0.5, 1.0])
    assert np.allclose(r.sum(axis=1), 1.0)


def test_finite_diff_square():
    assert ad.finite_diff_check(lambda n: n * n, np.array(3.0), h=1e-6) <= 1e-9


def test_finite_diff_entropy_of_softmax(rng):
    def neg_entropy(n):
        p = ad.softmax(n)
        return ad.reduce_sum(ad.mul(p, ad.log(p)))

    assert ad.finite_diff_check(neg_entropy, rng.normal(size=5), h=1e-5, floor=1e-3) <= 1e-6


@pytest.mark.parametrize("op", [ad.exp, ad.relu, lambda n: ad.scaled_sigmoid(n, 5.0, 0.15)])
def test_elementwise_gradients(rng, op):
    # keep clear of the relu kink
    x = rng.uniform(0.1, 1.0, size=(3, 3)) * rng.choice([-1.0, 1.0], size=(3, 3))
    assert ad.finite_diff_check(lambda n: ad.reduce_sum(op(n)), x) <= 1e-6


def test_reductions_and_reshape_gradients(rng):
    x = rng.normal(size=(2, 3, 4))
    v = rng.normal(size=(2, 4))
    assert ad.finite_diff_check(lambda n: ad.reduce_sum(ad.mul(ad.reduce_mean(n, axis=1), v)), x) <= 1e-6
    w = rng.normal(size=(6, 4))
    assert ad.finite_diff_check(lambda n: ad.reduce_sum(ad.mul(ad.reshape(n, (6, 4)), w)), x) <= 1e-6


def test_channel_weighted_sum_gradient(rng):
    maps = rng.normal(size=(2, 3, 4, 4))
    weights = rng.uniform(size=(2, 3))
    r = rng.normal(size=(2, 1, 4, 4))
    err = ad.finite_diff_check(
        lambda n: ad.reduce_sum(ad.mul(ad.channel_weighted_sum(ad.constant(maps), n), r)), weights
    )
    assert err <= 1e-6
