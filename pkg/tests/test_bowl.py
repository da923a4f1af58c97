import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from e2bows.bowl import (BowlParams, VisualWordVector, binarize, bowl_backward, bowl_forward, init_bowl,
                         read_words, sparsity_ratio, words_postprocess, write_words)
from e2bows.errors import DimensionError, FormatError
from e2bows.numerics import finite_diff_check


def test_postprocess_example():
    # norm of (0.3, 0.4, 0.05, 0) is sqrt(0.2525)
    v = words_postprocess(np.array([0.3, 0.4, 0.05, 0.0]), 0.11)
    norm = np.sqrt(0.3 ** 2 + 0.4 ** 2 + 0.05 ** 2)
    assert v.ids.tolist() == [0, 1]
    assert np.allclose(v.values, [0.3 / norm, 0.4 / norm], atol=1e-6)
    assert np.allclose(v.values, [0.5970, 0.7960], atol=1e-4)


def test_threshold_is_strict_and_zero_vector_ok():
    v = words_postprocess(np.array([1.0, 0.0]), 1.0)
    assert len(v) == 0
    assert len(words_postprocess(np.zeros(3), 0.0)) == 0


def test_threshold_then_normalize_variant():
    v = words_postprocess(np.array([0.3, 0.4, 0.05, 0.0]), 0.1, normalize_first=False)
    assert np.allclose(v.values, [0.6, 0.8])


def test_sparsity_ratio_example():
    batch = np.array([[0.5, 0.0, 0.2, 0.05], [0.9, 0.1, 0.0, 0.0]])
    assert sparsity_ratio(batch, 0.1) == 3 / 8
    with pytest.raises(ValueError):
        sparsity_ratio(np.zeros((0, 4)), 0.1)


def test_masked_sfm_gives_zero_words():
    rng = np.random.default_rng(0)
    p = init_bowl(3, 4, 2, rng)
    raw, _ = bowl_forward(rng.normal(size=(3, 2, 2)), np.array([True, False, True]), p)
    assert raw.shape == (6,)
    assert np.all(raw[2:4] == 0)


def test_bowl_gradients():
    rng = np.random.default_rng(1)
    p = BowlParams(rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 2)))
    maps = rng.normal(size=(2, 3, 2, 2))
    mask = np.array([[True, True, False], [True, False, True]])
    r = rng.normal(size=(2, 6))
    _, cache = bowl_forward(maps, mask, p)
    g, gm = bowl_backward(cache, r)
    loss_w = lambda w: float(np.sum(bowl_forward(maps, mask, BowlParams(w, p.biases))[0] * r))
    loss_b = lambda b: float(np.sum(bowl_forward(maps, mask, BowlParams(p.weights, b))[0] * r))
    loss_m = lambda x: float(np.sum(bowl_forward(x, mask, p)[0] * r))
    assert finite_diff_check(loss_w, p.weights.copy(), g.weights).max_rel_error < 1e-6
    assert finite_diff_check(loss_b, p.biases.copy(), g.biases).max_rel_error < 1e-6
    assert finite_diff_check(loss_m, maps.copy(), gm).max_rel_error < 1e-6


def test_vector_validation():
    with pytest.raises(ValueError):
        VisualWordVector(5, [2, 1], [0.1, 0.2])
    with pytest.raises(DimensionError):
        VisualWordVector(5, [5], [0.1])
    with pytest.raises(ValueError):
        VisualWordVector(5, [1], [0.0])
    with pytest.raises(ValueError):
        BowlParams(np.zeros((1, 1, 1)), np.zeros((1, 1)), -0.1)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.floats(0, 10, width=32), min_size=6, max_size=6), min_size=1, max_size=5),
       st.floats(0, 0.9))
def test_words_file_round_trip(tmp_path_factory, rows, beta):
    path = tmp_path_factory.mktemp("w") / "words.txt"
    recs = [(i * 3, words_postprocess(np.array(r), beta)) for i, r in enumerate(rows)]
    recs += [(1000 + i, binarize(v)) for i, (_, v) in enumerate(recs) if len(v)]
    write_words(path, recs)
    back = read_words(path, 6)
    assert [i for i, _ in back] == [i for i, _ in recs]
    for (_, a), (_, b) in zip(recs, back):
        assert a == b


def test_words_file_errors(tmp_path):
    p = tmp_path / "w.txt"
    p.write_text("1 2 0:0.5\n")
    with pytest.raises(FormatError):
        read_words(p, 4)
    p.write_text("1 1 9:0.5\n")
    with pytest.raises(FormatError):
        read_words(p, 4)
