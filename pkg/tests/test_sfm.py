import numpy as np
import pytest

from e2bows.errors import DimensionError
from e2bows.numerics import finite_diff_check
from e2bows.sfm import (ClassifierWeights, active_sfm_mask, classification_scores, compute_sfms,
                        conv_to_fc, fc_to_conv, grad_maps_from_scores, init_classifier, sfm_backward)


def test_fc_conv_round_trip_is_exact():
    fc = init_classifier(8, 5, np.random.default_rng(1))
    back = conv_to_fc(fc_to_conv(fc))
    assert np.array_equal(back.weights, fc.weights)
    assert np.array_equal(back.biases, fc.biases)


def test_scores_equal_fc_on_pooled_features():
    # averaging commutes with the 1x1 convolution
    rng = np.random.default_rng(2)
    fc = ClassifierWeights(rng.normal(size=(6, 4)), rng.normal(size=4))
    f = rng.normal(size=(3, 5, 6))
    scores = classification_scores(compute_sfms(f, fc_to_conv(fc)))
    direct = f.mean(axis=(0, 1)) @ fc.weights + fc.biases
    assert np.allclose(scores, direct, atol=1e-12)


def test_mask_keeps_zero_average():
    fc = ClassifierWeights(np.zeros((2, 3)), np.array([-0.1, 0.0, 0.2]))
    s = compute_sfms(np.ones((2, 2, 2)), fc_to_conv(fc))
    assert active_sfm_mask(s).tolist() == [False, True, True]


def test_batched_matches_single():
    rng = np.random.default_rng(3)
    k = fc_to_conv(init_classifier(4, 3, rng))
    f = rng.normal(size=(2, 3, 3, 4))
    batched = compute_sfms(f, k)
    for i in range(2):
        assert np.allclose(batched.maps[i], compute_sfms(f[i], k).maps)


def test_channel_mismatch_raises():
    k = fc_to_conv(init_classifier(4, 3, np.random.default_rng(0)))
    with pytest.raises(DimensionError):
        compute_sfms(np.zeros((2, 2, 5)), k)
    with pytest.raises(ValueError):
        ClassifierWeights(np.zeros((4, 1)), np.zeros(1))


def test_sfm_gradients():
    rng = np.random.default_rng(4)
    k = fc_to_conv(ClassifierWeights(rng.normal(size=(4, 3)), rng.normal(size=3)))
    f = rng.normal(size=(2, 3, 3, 4))
    r = rng.normal(size=(2, 3, 3, 3))
    gk, gf = sfm_backward(f, k, r)

    def loss_k(kern):
        return float(np.sum(compute_sfms(f, type(k)(kern, k.biases)).maps * r))

    def loss_b(b):
        return float(np.sum(compute_sfms(f, type(k)(k.kernels, b)).maps * r))

    def loss_f(x):
        return float(np.sum(compute_sfms(x, k).maps * r))

    assert finite_diff_check(loss_k, k.kernels.copy(), gk.kernels).max_rel_error < 1e-6
    assert finite_diff_check(loss_b, k.biases.copy(), gk.biases).max_rel_error < 1e-6
    assert finite_diff_check(loss_f, f.copy(), gf).max_rel_error < 1e-6


def test_grad_maps_from_scores_is_average_adjoint():
    g = grad_maps_from_scores(np.array([1.0, 2.0]), 2, 2)
    assert np.allclose(g.sum(axis=(1, 2)), [1.0, 2.0])
