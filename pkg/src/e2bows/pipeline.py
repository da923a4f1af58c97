"""End-to-end retrieval helpers: words for a dataset, index + query + metrics,
and the threshold sweep behind the efficiency/accuracy trade-off report."""

from dataclasses import dataclass

import numpy as np

from .bowl import VisualWordVector, binarize, words_postprocess
from .evaluation import (average_precision, complete_ranking, mean_average_precision, ndcg_at_k,
                         relevance_grades)
from .index import build_index, index_stats, query_with_work
from .trainer import extract_dense_words


@dataclass
class QueryResult:
    query_id: int
    ap: float
    ndcg: float
    touched: int


@dataclass
class RetrievalSummary:
    map: float
    ndcg: float
    anv: float
    ani: float
    ano: float
    touched: float  # mean posting entries touched per query
    queries: list


def sparse_from_dense(dense, beta, binary=False):
    """Threshold already-normalized dense words (strict ``> beta``)."""
    out = []
    for row in np.asarray(dense):
        row32 = np.where(row > beta, row, 0.0).astype(np.float32)
        ids = np.flatnonzero(row32 > 0)
        v = VisualWordVector(row.size, ids, row32[ids])
        out.append(binarize(v) if binary else v)
    return out


def extract_words(params, images, beta=None, binary=False):
    """Sparse words for each image using the model's learned threshold unless ``beta`` is given."""
    if beta is None:
        beta = params.bowl.beta
    return sparse_from_dense(extract_dense_words(params, images), beta, binary)


def evaluate_retrieval(db, queries, label_sets, ndcg_k=100):
    """Index ``db`` and score every query against it.

    ``db`` and ``queries`` are ``[(image_id, VisualWordVector), ...]``;
    ``label_sets`` maps every image id to its set of labels.
    """
    index = build_index(db, db[0][1].dim)
    stats = index_stats(index)
    db_ids = [i for i, _ in db]
    db_labels = {i: label_sets[i] for i in db_ids}
    results = []
    for qid, q in queries:
        hits, touched = query_with_work(index, q, len(db_ids))
        ranking = complete_ranking([i for i, _ in hits], db_ids)
        grades = relevance_grades(label_sets[qid], db_labels)
        relevant = {i for i, g in grades.items() if g > 0}
        results.append(QueryResult(qid, average_precision(ranking, relevant),
                                   ndcg_at_k(ranking, grades, ndcg_k), touched))
    return RetrievalSummary(
        mean_average_precision(r.ap for r in results),
        float(np.mean([r.ndcg for r in results])),
        stats.anv, stats.ani, stats.ano,
        float(np.mean([r.touched for r in results])),
        results)


def split_words(dataset, words):
    """Pair words with ids and split into (database, queries) by the dataset's query flag."""
    pairs = list(zip(dataset.ids.tolist(), words))
    db = [p for p, q in zip(pairs, dataset.is_query) if not q]
    qs = [p for p, q in zip(pairs, dataset.is_query) if q]
    return db, qs


def threshold_sweep(params, dataset, betas, ndcg_k=100, binary=False):
    """Retrieval quality and cost as the threshold is swept over ``betas``.

    Returns ``[(beta, RetrievalSummary), ...]``.
    """
    dense = extract_dense_words(params, dataset.images)
    label_sets = dataset.label_sets()
    rows = []
    for beta in betas:
        db, qs = split_words(dataset, sparse_from_dense(dense, beta, binary))
        rows.append((float(beta), evaluate_retrieval(db, qs, label_sets, ndcg_k)))
    return rows
