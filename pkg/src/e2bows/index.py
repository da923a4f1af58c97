"""Inverted file over sparse visual-word vectors, with the E2IX file format.

Queries accumulate dot products by walking only the posting lists of the
query's nonzero words. Scores are accumulated in float64; stored posting
values are float32.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .bowl import VisualWordVector
from .errors import DimensionError, FormatError

INDEX_MAGIC = b"E2IX"
INDEX_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_U32 = struct.Struct("<I")
_POSTING = np.dtype([("image_id", "<u8"), ("value", "<f4")])


@dataclass
class IndexStats:
    anv: float
    ani: float
    ano: float


class InvertedIndex:
    """Word id -> postings sorted by image id.

    ``ids`` holds the sorted ids of images with at least one word; postings
    refer to them by position so query accumulation is a dense array add.
    ``image_count`` also counts images whose vectors are empty.
    """

    def __init__(self, dim, image_count, ids, post_pos, post_val):
        self.dim = int(dim)
        self.image_count = int(image_count)
        self.ids = np.asarray(ids, dtype=np.uint64)
        self.post_pos = post_pos
        self.post_val = post_val
        self.counts = np.bincount(np.concatenate(post_pos), minlength=self.ids.size) \
            if post_pos else np.zeros(0, dtype=np.int64)

    def posting(self, word_id):
        return [(int(self.ids[p]), float(v))
                for p, v in zip(self.post_pos[word_id], self.post_val[word_id])]

    @property
    def total_postings(self):
        return int(sum(p.size for p in self.post_pos))

    def nonzero_count(self, image_id):
        i = np.searchsorted(self.ids, np.uint64(image_id))
        if i < self.ids.size and self.ids[i] == image_id:
            return int(self.counts[i])
        return 0

    def vectors(self):
        """Rebuild ``{image_id: VisualWordVector}`` for every image with words."""
        per_image = [([], []) for _ in range(self.ids.size)]
        for word in range(self.dim):
            for p, v in zip(self.post_pos[word], self.post_val[word]):
                per_image[p][0].append(word)
                per_image[p][1].append(v)
        return {int(i): VisualWordVector(self.dim, w, v) for i, (w, v) in zip(self.ids, per_image)}

    def __eq__(self, other):
        if not isinstance(other, InvertedIndex):
            return NotImplemented
        return (self.dim == other.dim and self.image_count == other.image_count
                and np.array_equal(self.ids, other.ids)
                and all(np.array_equal(a, b) for a, b in zip(self.post_pos, other.post_pos))
                and all(np.array_equal(a, b) for a, b in zip(self.post_val, other.post_val)))


def build_index(vectors, dim):
    """Index ``[(image_id, VisualWordVector), ...]``."""
    vectors = list(vectors)
    all_ids = np.array([int(i) for i, _ in vectors], dtype=np.uint64)
    if np.unique(all_ids).size != all_ids.size:
        raise ValueError("duplicate image_id in index input")
    for image_id, v in vectors:
        if v.dim != dim:
            raise DimensionError(f"image {image_id} has dim {v.dim}, index dim is {dim}")
    nonempty = sorted((int(i), v) for i, v in vectors if len(v))
    ids = np.array([i for i, _ in nonempty], dtype=np.uint64)
    if nonempty:
        words = np.concatenate([v.ids for _, v in nonempty])
        vals = np.concatenate([v.values for _, v in nonempty]).astype(np.float32)
        pos = np.repeat(np.arange(len(nonempty)), [len(v) for _, v in nonempty])
    else:
        words = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0, dtype=np.float32)
        pos = np.zeros(0, dtype=np.int64)
    # stable sort by word keeps positions (= image ids) ascending inside each list
    order = np.argsort(words, kind="stable")
    bounds = np.searchsorted(words[order], np.arange(dim + 1))
    post_pos = [pos[order[a:b]] for a, b in zip(bounds[:-1], bounds[1:])]
    post_val = [vals[order[a:b]] for a, b in zip(bounds[:-1], bounds[1:])]
    return InvertedIndex(dim, len(vectors), ids, post_pos, post_val)


def query_with_work(index, q, k):
    """Like ``query`` but also returns the number of posting entries touched."""
    if k < 1:
        raise ValueError("k must be a positive integer")
    if q.dim != index.dim:
        raise DimensionError(f"query dim {q.dim} != index dim {index.dim}")
    if len(q) == 0:
        return [], 0
    scores = np.zeros(index.ids.size, dtype=np.float64)
    touched = 0
    for word, qv in zip(q.ids, q.values.astype(np.float64)):
        pos = index.post_pos[word]
        scores[pos] += qv * index.post_val[word].astype(np.float64)
        touched += pos.size
    cand = np.flatnonzero(scores > 0)
    # descending score, ties by ascending position (= ascending image id)
    order = cand[np.lexsort((cand, -scores[cand]))][:k]
    return [(int(index.ids[p]), float(scores[p])) for p in order], touched


def query(index, q, k):
    """Top-``k`` images by dot product with ``q``; zero-score images are omitted."""
    return query_with_work(index, q, k)[0]


def index_stats(index):
    if index.image_count == 0:
        raise ValueError("index_stats needs a non-empty index")
    total = index.total_postings
    nonempty_lists = sum(1 for p in index.post_pos if p.size)
    anv = total / index.image_count
    ani = total / nonempty_lists if nonempty_lists else 0.0
    return IndexStats(anv, ani, anv * ani)


def save_index(index, path):
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, index.dim, index.image_count))
        for pos, val in zip(index.post_pos, index.post_val):
            rec = np.empty(pos.size, dtype=_POSTING)
            rec["image_id"] = index.ids[pos]
            rec["value"] = val
            fh.write(_U32.pack(pos.size))
            fh.write(rec.tobytes())


def load_index(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise FormatError("truncated E2IX header", len(buf))
    magic, version, dim, image_count = _HEADER.unpack_from(buf, 0)
    if magic != INDEX_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {INDEX_MAGIC!r}", 0)
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported E2IX version {version}", 4)
    offset = _HEADER.size
    lists = []
    for word in range(dim):
        if offset + 4 > len(buf):
            raise FormatError(f"truncated before posting list {word}", offset)
        (n,) = _U32.unpack_from(buf, offset)
        offset += 4
        if offset + n * _POSTING.itemsize > len(buf):
            raise FormatError(f"truncated posting list {word}", offset)
        rec = np.frombuffer(buf, dtype=_POSTING, count=n, offset=offset)
        if n > 1 and np.any(np.diff(rec["image_id"].astype(np.int64)) <= 0):
            raise FormatError(f"posting list {word} not sorted by image id", offset)
        lists.append(rec)
        offset += n * _POSTING.itemsize
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes", offset)
    ids = np.unique(np.concatenate([r["image_id"] for r in lists])) if lists else np.zeros(0, np.uint64)
    if ids.size > image_count:
        raise FormatError(f"{ids.size} distinct images in postings but header says {image_count}", 12)
    post_pos = [np.searchsorted(ids, r["image_id"]).astype(np.int64) for r in lists]
    post_val = [r["value"].astype(np.float32) for r in lists]
    return InvertedIndex(dim, image_count, ids, post_pos, post_val)
