import pytest
import numpy as np

from maxminwsl import prob_core as pc
from maxminwsl.data_types import RegularizerMode


def random_simplex(rng, n, c):
    return rng.dirichlet(np.ones(c), size=n)


def test_posterior_rejects_off_simplex():
    with pytest.raises(ValueError):
        pc.Posterior(np.array([0.6, 0.6]))
    with pytest.raises(ValueError):
        pc.Posterior(np.array([1.2, -0.2]))
    with pytest.raises(ValueError):
        pc.Posterior(np.array([1.0]))


def test_posterior_helpers():
    assert np.allclose(pc.Posterior.uniform(4).probs, 0.25)
    assert pc.Posterior.one_hot(1, 3).probs.tolist() == [0.0, 1.0, 0.0]
    assert pc.Posterior.uniform(5).num_classes == 5


@pytest.mark.parametrize("logits, expected", [
    ([0.0, 0.0], [0.5, 0.5]),
    ([1000.0, 1000.0 + np.log(3.0)], [0.25, 0.75]),
    ([0.0, 0.0, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25]),
])
def test_softmax(logits, expected):
    assert np.allclose(pc.softmax(logits).probs, expected, atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        pc.softmax([0.0, np.inf])
    with pytest.raises(ValueError):
        pc.softmax([np.nan, 1.0])


def test_softmax_shift_invariance(rng):
    z = rng.normal(scale=10.0, size=(200, 5))
    k = rng.uniform(-50.0, 50.0, size=(200, 1))
    assert np.max(np.abs(pc.softmax(z).probs - pc.softmax(z + k).probs)) <= 1e-12


@pytest.mark.parametrize("p, expected", [
    ([1.0, 0.0], 0.0),
    ([0.5, 0.5], 0.693147),
    ([0.75, 0.25], 0.562335),
])
def test_entropy(p, expected):
    assert pc.entropy(p) == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize("p, p_hat, expected", [
    ([1.0, 0.0], [1.0, 0.0], 0.0),
    ([1.0, 0.0], [0.5, 0.5], 0.693147),
    ([0.5, 0.5], [0.75, 0.25], 0.836988),
])
def test_cross_entropy(p, p_hat, expected):
    assert pc.cross_entropy(p, p_hat) == pytest.approx(expected, abs=1e-6)


def test_cross_entropy_is_total_with_zero_prediction():
    value = pc.cross_entropy([1.0, 0.0], [0.0, 1.0])
    assert np.isfinite(value)
    assert value == pytest.approx(-np.log(pc.PROB_FLOOR))


def test_cross_entropy_class_mismatch():
    with pytest.raises(ValueError):
        pc.cross_entropy([1.0, 0.0], [0.2, 0.3, 0.5])


@pytest.mark.parametrize("p_hat, q, expected", [
    ([0.5, 0.5], [0.5, 0.5], 0.0),
    ([0.75, 0.25], [0.5, 0.5], 0.130812),
    ([1.0, 0.0], [0.5, 0.5], 0.693147),
])
def test_kl_forward(p_hat, q, expected):
    assert pc.kl_forward(p_hat, q) == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize("p_hat, expected", [
    ([0.5, 0.5], 0.693147),
    ([0.75, 0.25], 0.836988),
    ([0.9, 0.1], 1.203973),
])
def test_kl_reverse_vs_uniform(p_hat, expected):
    assert pc.kl_reverse_vs_uniform(p_hat) == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize("p_hat, mode, expected", [
    ([0.5, 0.5], RegularizerMode.EEM, -0.693147),
    ([0.5, 0.5], RegularizerMode.SEM, 0.693147),
    ([0.75, 0.25], "eem", -0.562335),
])
def test_regularizer(p_hat, mode, expected):
    assert pc.regularizer(p_hat, mode) == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize("c", [2, 3, 5, 10])
def test_kl_identities(rng, c):
    p_hat = random_simplex(rng, 1000, c)
    q = np.full((1000, c), 1.0 / c)
    forward_gap = pc.kl_forward(p_hat, q) - (np.log(c) - pc.entropy(p_hat))
    assert np.max(np.abs(forward_gap)) <= 1e-10

    # H(q, p_hat) = KL(q || p_hat) + log c
    reverse_kl = pc.kl_forward(q, p_hat)
    reverse_gap = pc.cross_entropy(q, p_hat) - (reverse_kl + np.log(c))
    assert np.max(np.abs(reverse_gap)) <= 1e-10


@pytest.mark.parametrize("c", [2, 3, 5, 10])
def test_entropy_bounds_and_gibbs(rng, c):
    p = random_simplex(rng, 1000, c)
    p_hat = random_simplex(rng, 1000, c)
    h = pc.entropy(p)
    assert np.all(h >= 0.0) and np.all(h <= np.log(c) + 1e-12)
    kl = pc.kl_forward(p, p_hat)
    assert np.max(np.abs(pc.cross_entropy(p, p_hat) - h - kl)) <= 1e-10
    assert np.all(kl >= -1e-12)


@pytest.mark.parametrize("c", [2, 3, 5])
def test_regularizer_minimum_at_uniform(rng, c):
    p_hat = random_simplex(rng, 1000, c)
    far = np.max(np.abs(p_hat - 1.0 / c), axis=-1) > 1e-3
    q = pc.Posterior.uniform(c)
    for mode in RegularizerMode:
        assert np.all(pc.regularizer(q, mode) < pc.regularizer(p_hat[far], mode))


def test_eem_sem_difference(rng):
    p_hat = random_simplex(rng, 1000, 3)
    q = np.full_like(p_hat, 1.0 / 3)
    gap = pc.regularizer(p_hat, "sem") - pc.regularizer(p_hat, "eem")
    expected = pc.cross_entropy(q, p_hat) + pc.entropy(p_hat)
    assert np.max(np.abs(gap - expected)) <= 1e-12


@pytest.mark.parametrize("p1, expected", [(0.5, 0.0), (0.75, 1.098612), (0.25, -1.098612)])
def test_grad_neg_entropy_binary(p1, expected):
    assert pc.grad_neg_entropy_binary(p1) == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize("p1, expected", [(0.5, 0.0), (0.75, 1.333333), (0.25, -1.333333)])
def test_grad_uniform_ce_binary(p1, expected):
    assert pc.grad_uniform_ce_binary(p1) == pytest.approx(expected, abs=1e-6)


def test_binary_gradients_vanish_at_uniform():
    assert abs(pc.grad_neg_entropy_binary(0.5)) <= 1e-9
    assert abs(pc.grad_uniform_ce_binary(0.5)) <= 1e-9


@pytest.mark.parametrize("p1", [0.0, 1.0, -0.1, 1.5])
def test_binary_gradients_reject_boundary(p1):
    with pytest.raises(ValueError):
        pc.grad_neg_entropy_binary(p1)
    with pytest.raises(ValueError):
        pc.grad_uniform_ce_binary(p1)


def test_binary_gradients_match_finite_differences():
    h = 1e-6
    for p1 in np.arange(0.05, 0.951, 0.05):
        numeric = (-pc.entropy([p1 + h, 1 - p1 - h]) + pc.entropy([p1 - h, 1 - p1 + h])) / (2 * h)
        analytic = pc.grad_neg_entropy_binary(p1)
        assert abs(analytic - numeric) <= 1e-6 * max(abs(analytic), 1e-3)

        numeric = (pc.kl_reverse_vs_uniform([p1 + h, 1 - p1 - h])
                   - pc.kl_reverse_vs_uniform([p1 - h, 1 - p1 + h])) / (2 * h)
        analytic = pc.grad_uniform_ce_binary(p1)
        assert abs(analytic - numeric) <= 1e-6 * max(abs(analytic), 1e-3)


def test_to_bits():
    assert pc.to_bits(np.log(2.0)) == pytest.approx(1.0)
    assert pc.to_bits(pc.entropy([0.25] * 4)) == pytest.approx(2.0)
