import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from e2bows.evaluation import (average_precision, brute_force_rank, complete_ranking, dcg_at_k,
                               mean_average_precision, ndcg_at_k, relevance_grades)


def test_ap_example():
    assert average_precision([10, 20, 30, 40], {10, 30}) == pytest.approx((1 + 2 / 3) / 2)
    assert average_precision([1, 2], set()) == 0.0
    assert average_precision([1, 2], {2, 3}) == pytest.approx(0.25)


def test_ndcg_example():
    # grades of the ranked list 1, 0, 2; ideal order 2, 1, 0
    ranking = ["a", "b", "c"]
    grades = {"a": 1, "b": 0, "c": 2}
    dcg = 1 / math.log2(2) + 0 + 3 / math.log2(4)
    idcg = 3 / math.log2(2) + 1 / math.log2(3)
    assert ndcg_at_k(ranking, grades, 3) == pytest.approx(dcg / idcg, abs=1e-12)
    assert ndcg_at_k(ranking, grades, 3) == pytest.approx(0.6885, abs=1e-4)
    assert ndcg_at_k(ranking, {"a": 0}, 3) == 0.0
    with pytest.raises(ValueError):
        ndcg_at_k(ranking, grades, 0)


def test_dcg_truncates():
    assert dcg_at_k([1, 1, 1], 1) == 1.0


def test_map_empty():
    with pytest.raises(ValueError):
        mean_average_precision([])
    assert mean_average_precision([0.5, 1.0]) == 0.75


def test_brute_force_ties_by_id():
    ranked = brute_force_rank([(5, [1.0, 0.0]), (2, [1.0, 0.0]), (9, [0.0, 2.0])], np.array([1.0, 1.0]))
    assert [i for i, _ in ranked] == [9, 2, 5]


def test_grades_and_completion():
    assert relevance_grades({1, 2}, {7: {1}, 8: {1, 2}, 9: {3}}) == {7: 1, 8: 2, 9: 0}
    assert complete_ranking([5, 1], [1, 3, 5, 2]) == [5, 1, 2, 3]


@settings(max_examples=200, deadline=None)
@given(st.permutations(list(range(12))), st.lists(st.integers(0, 3), min_size=12, max_size=12),
       st.integers(1, 15))
def test_metrics_bounded(ranking, grades, k):
    g = dict(enumerate(grades))
    assert 0.0 <= average_precision(ranking, {i for i, x in g.items() if x}) <= 1.0
    assert 0.0 <= ndcg_at_k(ranking, g, k) <= 1.0 + 1e-12


def test_perfect_ranking_scores_one():
    g = {0: 3, 1: 2, 2: 0}
    assert ndcg_at_k([0, 1, 2], g, 2) == pytest.approx(1.0)
    assert average_precision([0, 1, 2], {0, 1}) == 1.0
