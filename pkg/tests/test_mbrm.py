"""Boundary refinement: profiles, priors, likelihoods, posteriors, training."""

import numpy as np
import pytest

from twostream import mbrm
from twostream import numerics as nm
from twostream.mbrm import (MbrmError, MbrmParams, boundary_likelihood,
                            boundary_posterior, boundary_prior,
                            boundary_profile, refine_box, train_mbrm)


def test_default_hyperparameters():
    p = MbrmParams()
    assert p.scope == 4 and p.gamma == 0.05
    assert p.kernel.shape == (9,)  # 2s + 1


def test_profile_matches_loop_oracle():
    rng = np.random.default_rng(0)
    mask = rng.random((6, 9))
    px = boundary_profile(mask, "x")
    py = boundary_profile(mask, "y")
    for j in range(9):
        assert px[j] == max(mask[i, j] for i in range(6))
    for i in range(6):
        assert py[i] == max(mask[i, j] for j in range(9))


def test_profile_bad_axis():
    with pytest.raises(ValueError):
        boundary_profile(np.ones((2, 2)), "z")


def test_likelihood_edge_kernel_hand_example():
    """Kernel [-1, 0, 1] (s=1) turns a step profile into an edge detector."""
    params = MbrmParams(scope=1)
    params.kernel.data[:] = np.array([-1.0, 0.0, 1.0], dtype=np.float32)
    prof = np.array([0, 0, 0, 1, 1, 1], dtype=np.float32)
    like = boundary_likelihood(prof, params, "left").data
    # conv at i: prof[i+1] - prof[i-1] (zero padded)
    z = np.array([0, 0, 1, 1, 0, -1], dtype=np.float32)
    np.testing.assert_allclose(like, 1 / (1 + np.exp(-z)), rtol=1e-6)
    assert like.argmax() in (2, 3)  # fires at the rising edge


def test_likelihood_mirror_property():
    """right-side likelihood == left-side likelihood of the flipped profile,
    flipped back."""
    rng = np.random.default_rng(1)
    params = MbrmParams()
    params.kernel.data[:] = rng.standard_normal(9).astype(np.float32)
    prof = rng.random(20).astype(np.float32)
    right = boundary_likelihood(prof, params, "right").data
    left_flipped = boundary_likelihood(prof[::-1].copy(), params, "left").data
    np.testing.assert_allclose(right, left_flipped[::-1], rtol=1e-6)


def test_prior_gaussian_values():
    p = boundary_prior(5.0, extent=40.0, gamma=0.05, n=11)  # sigma = 2.0
    assert p.shape == (11,)
    np.testing.assert_allclose(p.sum(), 1.0, atol=1e-12)
    raw = np.exp(-((np.arange(11) - 5.0) ** 2) / 8.0)
    np.testing.assert_allclose(p, raw / raw.sum(), atol=1e-12)
    assert p.argmax() == 5


def test_prior_one_hot_below_sigma_floor():
    p = boundary_prior(3.4, extent=1.0, gamma=0.05, n=8)  # sigma = 0.05
    expected = np.zeros(8)
    expected[3] = 1.0
    np.testing.assert_array_equal(p, expected)


def test_prior_one_hot_clips_into_range():
    p = boundary_prior(25.0, extent=0.0, gamma=0.05, n=8)
    assert p[7] == 1.0


def test_posterior_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(3, 40))
        prior = rng.random(n) + 1e-6
        prior /= prior.sum()
        like = rng.random(n)
        post, idx, degen = boundary_posterior(prior, like)
        assert not degen
        # independent brute force
        expected = np.array([prior[i] * like[i] for i in range(n)])
        expected /= sum(expected)
        assert np.abs(post - expected).max() < 1e-9
        best = max(range(n), key=lambda i: (expected[i], -i))
        assert idx == best


def test_posterior_degenerate_falls_back_to_prior():
    prior = np.array([0.2, 0.5, 0.3])
    post, idx, degen = boundary_posterior(prior, np.zeros(3))
    assert degen
    assert idx == 1
    np.testing.assert_array_equal(post, prior)


def test_refine_gamma_zero_bypass():
    params = MbrmParams(gamma=0.0)
    box = (3.7, 2.1, 20.4, 17.9)
    mask = np.random.default_rng(3).random((32, 32))
    refined, flags = refine_box(box, mask, params)
    assert refined == box
    assert not any(flags.values())


def test_refine_no_evidence_flag():
    params = MbrmParams()
    refined, flags = refine_box((2, 2, 10, 10), np.zeros((16, 16)), params)
    assert flags["no_evidence"]
    assert refined == (2.0, 2.0, 10.0, 10.0)


def test_refine_snaps_to_trained_edges():
    """With an ideal edge kernel, refinement recovers the true rectangle."""
    params = MbrmParams(scope=1)
    params.kernel.data[:] = np.array([-8.0, 8.0, 4.0], dtype=np.float32)
    params.bias.data[:] = -8.0
    mask = np.zeros((40, 40), dtype=np.float32)
    mask[10:30, 8:26] = 1.0  # true box (8, 10, 26, 30)
    jittered = (6.0, 12.0, 28.0, 28.0)
    refined, flags = refine_box(jittered, mask, params)
    assert not flags["degenerate_x"] and not flags["degenerate_y"]
    np.testing.assert_allclose(refined, (8.0, 10.0, 26.0, 30.0))


def test_refine_degenerate_ordering_keeps_regressed():
    """A likelihood that inverts the side order must not produce x1 > x2."""
    params = MbrmParams(scope=1, gamma=10.0)  # very wide prior
    params.kernel.data[:] = 0.0
    mask = np.ones((8, 8), dtype=np.float32)
    refined, flags = refine_box((3, 3, 5, 5), mask, params)
    x1, y1, x2, y2 = refined
    assert x1 < x2 and y1 < y2


def test_training_loss_is_differentiable():
    rng = np.random.default_rng(4)
    params = MbrmParams()
    mask = np.zeros((24, 24), dtype=np.float32)
    mask[6:18, 4:20] = 1.0
    sample = (mask, (4, 6, 20, 18), (3.0, 5.0, 21.0, 19.0))
    loss = mbrm.mbrm_training_loss(sample, params)
    loss.backward()
    assert params.kernel.grad is not None and params.kernel.grad.shape == (9,)
    assert np.isfinite(loss.item())


def test_train_mbrm_only_touches_its_parameters():
    rng = np.random.default_rng(5)
    samples = []
    for _ in range(6):
        x1, y1 = rng.integers(2, 8, 2)
        x2, y2 = x1 + rng.integers(10, 16), y1 + rng.integers(10, 16)
        mask = np.zeros((32, 32), dtype=np.float32)
        mask[y1:y2, x1:x2] = 1.0
        gt = (float(x1), float(y1), float(x2), float(y2))
        reg = tuple(c + float(rng.uniform(-2, 2)) for c in gt)
        samples.append((mask, gt, reg))
    params = train_mbrm(samples, iterations=20, seed=0)
    assert np.any(params.kernel.data != 0.0)  # it actually learned something


def test_train_mbrm_empty_set():
    with pytest.raises(MbrmError):
        train_mbrm([])


def test_state_arrays_roundtrip():
    params = MbrmParams()
    params.kernel.data[:] = np.arange(9, dtype=np.float32)
    params.bias.data[:] = 2.5
    fresh = MbrmParams()
    fresh.load_state_arrays(params.state_arrays())
    np.testing.assert_array_equal(fresh.kernel.data, params.kernel.data)
    np.testing.assert_array_equal(fresh.bias.data, params.bias.data)
