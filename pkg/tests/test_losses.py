import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from e2bows.errors import FormatError
from e2bows.losses import (CategoryTree, adaptive_margin, category_similarity, read_category_tree,
                           sigmoid_cross_entropy, softmax_cross_entropy, sparsity_grad_chain_rule,
                           sparsity_loss_and_grad, triplet_cosine_loss, write_category_tree)
from e2bows.numerics import finite_diff_check


def toy_tree():
    # root 0 -> {1, 2}; 1 -> {3, 4}; 2 -> {5, 6}; categories on the four-ish leaves
    return CategoryTree({0: -1, 1: 0, 2: 0, 3: 1, 4: 1, 5: 2, 6: 2},
                        {0: 3, 1: 4, 2: 5, 3: 6})


def test_softmax_uniform_is_ln_n():
    loss, g = softmax_cross_entropy(np.zeros(2), 0)
    assert abs(loss - math.log(2)) < 1e-12
    assert np.allclose(g, [-0.5, 0.5])


def test_softmax_large_scores_stable():
    loss, g = softmax_cross_entropy(np.array([1000.0, 0.0]), 0)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(g))
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros(3), 3)


@pytest.mark.parametrize("fn,label", [(softmax_cross_entropy, 2), (sigmoid_cross_entropy, 2),
                                      (sigmoid_cross_entropy, [0, 3])])
def test_classification_gradients(fn, label):
    s = np.random.default_rng(0).normal(size=5)
    _, g = fn(s, label)
    assert finite_diff_check(lambda x: fn(x, label)[0], s.copy(), g).max_rel_error < 1e-6


def test_triplet_examples():
    e = np.eye(3)
    loss, ga, gp, gn = triplet_cosine_loss(e[0], e[0], e[1], 0.2)
    assert loss == 0 and not ga.any() and not gp.any() and not gn.any()
    loss, *_ = triplet_cosine_loss(e[0], e[0], e[0], 0.2)
    assert loss == pytest.approx(0.2)
    # sim(a, n) = 0.9, sim(a, p) = 0.5
    va = e[0]
    vn = np.array([0.9, np.sqrt(1 - 0.81), 0.0])
    vp = np.array([0.5, 0.0, np.sqrt(0.75)])
    loss, ga, gp, gn = triplet_cosine_loss(va, vp, vn, 0.2)
    assert loss == pytest.approx(0.6)
    assert np.allclose(ga, vn - vp) and np.allclose(gp, -va) and np.allclose(gn, va)


def test_triplet_gradients_off_kink():
    rng = np.random.default_rng(3)
    va, vp, vn = (v / np.linalg.norm(v) for v in rng.normal(size=(3, 6)))
    loss, ga, gp, gn = triplet_cosine_loss(va, vp, vn, 0.5)
    assert loss > 1e-3
    f = lambda x: triplet_cosine_loss(x, vp, vn, 0.5)[0]
    assert finite_diff_check(f, va.copy(), ga).max_rel_error < 1e-6
    f = lambda x: triplet_cosine_loss(va, x, vn, 0.5)[0]
    assert finite_diff_check(f, vp.copy(), gp).max_rel_error < 1e-6
    f = lambda x: triplet_cosine_loss(va, vp, x, 0.5)[0]
    assert finite_diff_check(f, vn.copy(), gn).max_rel_error < 1e-6


def test_sparsity_examples():
    loss, d = sparsity_loss_and_grad(0.08, 0.08)
    assert loss == 0.0 and d == 0.0
    # independent evaluation of the KL term
    rho_hat, rho = 0.08, 0.5
    expected = rho_hat * math.log(rho_hat / rho) + (1 - rho_hat) * math.log((1 - rho_hat) / (1 - rho))
    loss, d = sparsity_loss_and_grad(rho_hat, rho)
    assert loss == pytest.approx(expected, abs=1e-12)
    assert loss == pytest.approx(0.4144, abs=1e-4)
    assert d == pytest.approx(-0.84, abs=1e-12)
    loss, _ = sparsity_loss_and_grad(0.08, 0.0)
    assert math.isfinite(loss)
    for bad in (0.0, 1.0):
        with pytest.raises(ValueError):
            sparsity_loss_and_grad(bad, 0.1)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.001, 0.999), st.integers(1, 999))
def test_chain_rule_matches_closed_form(rho_hat, nz):
    batch = np.zeros(1000)
    batch[:nz] = 1.0
    rho = nz / 1000
    assert sparsity_grad_chain_rule(rho_hat, batch, 0.5) == pytest.approx(
        (rho_hat - rho) / (1 - rho), abs=1e-12)


def test_adaptive_margin_values():
    assert adaptive_margin(0.2, 0.0) == 0.2
    assert adaptive_margin(0.2, 0.5) == pytest.approx(0.0889, abs=1e-4)
    assert adaptive_margin(0.2, 1.0) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        adaptive_margin(0.2, 1.5)


def test_tree_similarity():
    t = toy_tree()
    assert t.height == 2
    assert category_similarity(t, 0, 1) == pytest.approx(0.5)
    assert category_similarity(t, 0, 2) == 0.0
    deep = CategoryTree({0: -1, 1: 0, 2: 1, 3: 2, 4: 2}, {0: 3, 1: 4})
    assert category_similarity(deep, 0, 1) == pytest.approx(2 / 3)
    assert adaptive_margin(0.2, 2 / 3) == pytest.approx(0.072, abs=1e-9)


def test_tree_validation():
    with pytest.raises(ValueError):
        CategoryTree({0: -1, 1: -1}, {})
    with pytest.raises(ValueError):
        CategoryTree({0: -1, 1: 2, 2: 1}, {})
    with pytest.raises(ValueError):
        CategoryTree({0: -1, 1: 0, 2: 1}, {0: 1})


def test_tree_file_round_trip(tmp_path):
    p = tmp_path / "tree.txt"
    write_category_tree(p, toy_tree())
    back = read_category_tree(p)
    assert back.parents == toy_tree().parents and back.category_leaf == toy_tree().category_leaf
    p.write_text("[nodes]\n0 -1\n1 0 9\n")
    with pytest.raises(FormatError):
        read_category_tree(p)
