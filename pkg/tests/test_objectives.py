import numpy as np
import pytest
from scipy import stats

from kivla import autodiff as ad
from kivla.objectives import TimestepSampler, ar_loss, flow_loss, flow_target, noise_actions


def test_sampler_matches_cdf_ks():
    sampler = TimestepSampler()
    tau = sampler.sample(np.random.default_rng(0), 100_000)
    assert stats.kstest(tau, sampler.cdf).statistic < 0.01


def test_sampler_moments_against_closed_form():
    # E[tau] = integral of the survival function ((s - t)/s)^1.5 over [0, s] = s / 2.5
    s = 0.999
    tau = TimestepSampler().sample(np.random.default_rng(1), 100_000)
    assert abs(tau.mean() - s / 2.5) < 0.01
    assert abs(np.median(tau) - s * (1 - 0.5 ** (1 / 1.5))) < 0.01
    assert tau.min() >= 0 and tau.max() <= s
    assert TimestepSampler().mean == pytest.approx(s / 2.5)


def test_sampler_rejects_general_beta():
    with pytest.raises(ValueError):
        TimestepSampler(beta=2.0)


def test_noise_endpoints(rng):
    a, om = rng.standard_normal((2, 8, 3)), rng.standard_normal((2, 8, 3))
    assert np.array_equal(noise_actions(a, 1.0, om), a)
    assert np.array_equal(noise_actions(a, 0.0, om), om)
    mixed = noise_actions(a, np.array([0.0, 1.0]), om)
    assert np.array_equal(mixed[0], om[0]) and np.array_equal(mixed[1], a[1])
    with pytest.raises(ValueError):
        noise_actions(a, 1.5, om)


def test_flow_loss_zero_at_target_and_gradient(rng):
    a, om = rng.standard_normal((4, 8, 3)), rng.standard_normal((4, 8, 3))
    g = ad.Graph()
    exact = g.tensor(flow_target(a, om))
    assert float(flow_loss(exact, a, om).value) == 0.0
    g = ad.Graph()
    pred = g.tensor(rng.standard_normal((4, 8, 3)), trainable=True)
    m = np.array([True, False, True, True])
    loss = flow_loss(pred, a, om, m)
    grad = ad.backward(loss)[pred]
    ref = 2 * (pred.value - (om - a)) / (3 * 8 * 3) * m[:, None, None]
    assert np.allclose(grad, ref, atol=1e-12)
    err = ((pred.value - (om - a)) ** 2).mean(axis=(1, 2))
    assert float(loss.value) == pytest.approx(err[m].mean())


def test_flow_loss_without_action_examples_is_constant_zero(rng):
    g = ad.Graph()
    pred = g.tensor(rng.standard_normal((2, 8, 3)), trainable=True)
    loss = flow_loss(pred, np.zeros((2, 8, 3)), np.zeros((2, 8, 3)), np.zeros(2, bool))
    assert float(loss.value) == 0.0
    assert not np.any(ad.backward(loss)[pred])


def test_flow_loss_shape_mismatch():
    g = ad.Graph()
    with pytest.raises(ValueError, match="shape"):
        flow_loss(g.tensor(np.zeros((1, 8, 3))), np.zeros((1, 4, 3)), np.zeros((1, 4, 3)))


def test_ar_loss_uniform_logits_is_log_vocab():
    g = ad.Graph()
    logits = g.tensor(np.zeros((2, 5, 7)))
    ids = np.array([[0, 1, 2, 3, 4], [6, 5, 4, 3, 2]])
    assert float(ar_loss(logits, ids, np.ones((2, 5), bool)).value) == pytest.approx(np.log(7))


def test_ar_loss_hand_example():
    # position 0 predicts ids[1] = 2: -log softmax([0, 1, 2])[2]
    g = ad.Graph()
    logits = g.tensor(np.array([[[0.0, 1.0, 2.0], [5.0, 5.0, 5.0]]]), trainable=True)
    loss = ar_loss(logits, np.array([[0, 2]]), np.array([[False, True]]))
    ref = -(2.0 - np.log(np.exp([0, 1, 2]).sum()))
    assert float(loss.value) == pytest.approx(ref)
    grad = ad.backward(loss)[logits]
    p = np.exp([0, 1, 2]) / np.exp([0, 1, 2]).sum()
    assert np.allclose(grad[0, 0], p - np.eye(3)[2])
    assert not np.any(grad[0, 1])


def test_ar_loss_errors():
    g = ad.Graph()
    logits = g.tensor(np.zeros((1, 3, 4)))
    with pytest.raises(ValueError, match="at least one"):
        ar_loss(logits, np.zeros((1, 3), int), np.zeros((1, 3), bool))
    with pytest.raises(ValueError, match="vocabulary"):
        ar_loss(logits, np.array([[0, 9, 0]]), np.ones((1, 3), bool))
    with pytest.raises(ValueError, match="do not cover"):
        ar_loss(logits, np.zeros((1, 2), int), np.ones((1, 2), bool))


def test_ar_loss_grad_check(rng):
    ids = rng.integers(0, 6, (2, 4))
    mask = rng.random((2, 4)) < 0.7
    mask[0, 1] = True

    def f(g, x):
        return ar_loss(x, ids, mask)

    assert ad.grad_check(f, [rng.standard_normal((2, 4, 6))], tolerance=1e-6).passed
