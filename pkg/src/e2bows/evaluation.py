"""Retrieval metrics (AP, mAP, NDCG@k) and the brute-force ranking oracle."""

import numpy as np

from .errors import DimensionError


def brute_force_rank(vectors, q):
    """Rank every image by dense dot product with ``q``.

    ``vectors`` is ``[(image_id, dense array), ...]``. Returns
    ``[(image_id, score), ...]`` by descending score, ties by ascending id.
    """
    q = np.asarray(q, dtype=np.float64)
    if not vectors:
        return []
    ids = np.array([int(i) for i, _ in vectors], dtype=np.int64)
    mat = np.asarray([np.asarray(v, dtype=np.float64) for _, v in vectors])
    if mat.ndim != 2 or mat.shape[1] != q.size:
        raise DimensionError(f"vectors of shape {mat.shape[1:]} vs query of length {q.size}")
    scores = mat @ q
    order = np.lexsort((ids, -scores))
    return [(int(ids[i]), float(scores[i])) for i in order]


def average_precision(ranking, relevant):
    """Mean of precision@i over the ranks i holding a relevant id (0 if none are relevant)."""
    relevant = set(relevant)
    if not relevant:
        return 0.0
    hits = 0
    total = 0.0
    for i, image_id in enumerate(ranking, 1):
        if image_id in relevant:
            hits += 1
            total += hits / i
    return total / len(relevant)


def mean_average_precision(aps):
    aps = list(aps)
    if not aps:
        raise ValueError("mean_average_precision needs at least one query")
    return float(np.mean(aps))


def dcg_at_k(gains, k):
    gains = np.asarray(gains, dtype=np.float64)[:k]
    discounts = np.log2(np.arange(2, gains.size + 2))
    return float(np.sum((2.0 ** gains - 1.0) / discounts))


def ndcg_at_k(ranking, grades, k):
    """NDCG@k with gain ``2**grade - 1`` and ``log2(i + 1)`` discount.

    ``grades`` maps image id -> non-negative integer grade; ids missing from
    it have grade 0. The ideal ordering is taken over all graded images.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    ranked = [grades.get(i, 0) for i in list(ranking)[:k]]
    ideal = sorted(grades.values(), reverse=True)
    idcg = dcg_at_k(ideal, k)
    if idcg == 0:
        return 0.0
    return dcg_at_k(ranked, k) / idcg


def relevance_grades(query_labels, database):
    """Grade = number of labels shared with the query.

    ``query_labels`` is a set of labels; ``database`` maps image id -> set.
    Single-label data thus gets binary grades.
    """
    return {i: len(query_labels & labels) for i, labels in database.items()}


def complete_ranking(ranked_ids, database_ids):
    """Append unretrieved database ids in ascending order, giving a full ranking."""
    seen = set(ranked_ids)
    return list(ranked_ids) + sorted(i for i in database_ids if i not in seen)
