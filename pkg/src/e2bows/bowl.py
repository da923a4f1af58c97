"""Bag-of-Words layer: per-SFM local FC banks, thresholding and sparse words."""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError
from .numerics import l2_normalize


@dataclass
class BowlParams:
    weights: np.ndarray  # (n, h*w, m), one local FC bank per SFM
    biases: np.ndarray  # (n, m)
    beta: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 3 or self.biases.shape != (self.weights.shape[0], self.weights.shape[2]):
            raise DimensionError("bowl weights must be (n, h*w, m) with (n, m) biases")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")

    @property
    def n(self):
        return self.weights.shape[0]

    @property
    def m(self):
        return self.weights.shape[2]

    @property
    def dim(self):
        return self.n * self.m

    def copy(self):
        return BowlParams(self.weights.copy(), self.biases.copy(), float(self.beta))


@dataclass
class BowlCache:
    maps_flat: np.ndarray
    pre: np.ndarray
    mask: np.ndarray
    params: BowlParams
    maps_shape: tuple


@dataclass
class VisualWordVector:
    """Sparse non-negative word vector with strictly increasing ids."""

    dim: int
    ids: np.ndarray  # int64
    values: np.ndarray  # float32, all > 0
    binary: bool = False

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.ids.shape != self.values.shape or self.ids.ndim != 1:
            raise DimensionError("ids and values must be equal-length 1-D arrays")
        if self.ids.size:
            if np.any(np.diff(self.ids) <= 0):
                raise ValueError("word ids must be strictly increasing")
            if self.ids[0] < 0 or self.ids[-1] >= self.dim:
                raise DimensionError(f"word id out of range [0, {self.dim})")
            if np.any(self.values <= 0):
                raise ValueError("stored word values must be positive")

    def __len__(self):
        return int(self.ids.size)

    def to_dense(self):
        out = np.zeros(self.dim, dtype=np.float32)
        out[self.ids] = self.values
        return out

    def __eq__(self, other):
        return (isinstance(other, VisualWordVector) and self.dim == other.dim
                and self.binary == other.binary and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.values, other.values))


def init_bowl(n, hw, m, rng):
    s = np.sqrt(6.0 / (hw + m))
    return BowlParams(rng.uniform(-s, s, size=(n, hw, m)), np.full((n, m), 0.1), 0.0)


def bowl_forward(s, mask, p):
    """Raw (post-ReLU) words, ``n*m`` per image, zero for masked-off SFMs.

    ``s`` is an SfmStack or a maps array ``(n, h, w)`` / ``(N, n, h, w)``;
    ``mask`` has shape ``(n,)`` / ``(N, n)``.
    """
    maps = np.asarray(getattr(s, "maps", s), dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if maps.ndim < 3 or maps.shape[-3] != p.n or maps.shape[-2] * maps.shape[-1] != p.weights.shape[1]:
        raise DimensionError(
            f"SFM stack {maps.shape} incompatible with bowl banks {p.weights.shape}")
    if mask.shape != maps.shape[:-2]:
        raise DimensionError(f"mask shape {mask.shape} != {maps.shape[:-2]}")
    maps_flat = maps.reshape(maps.shape[:-2] + (-1,))
    pre = np.einsum("...nk,nkm->...nm", maps_flat, p.weights) + p.biases
    raw = np.maximum(pre, 0.0) * mask[..., None]
    raw = raw.reshape(raw.shape[:-2] + (-1,))
    return raw, BowlCache(maps_flat, pre, mask, p, maps.shape)


def bowl_backward(cache, grad_raw):
    """Returns ``(param_grads, grad_maps)``; ``param_grads.beta`` is 0."""
    p = cache.params
    grad_raw = np.asarray(grad_raw, dtype=np.float64)
    if grad_raw.shape != cache.pre.shape[:-2] + (p.dim,):
        raise DimensionError(f"grad_raw shape {grad_raw.shape} does not match forward output")
    g_pre = grad_raw.reshape(cache.pre.shape) * (cache.pre > 0) * cache.mask[..., None]
    flat_maps = cache.maps_flat.reshape((-1,) + cache.maps_flat.shape[-2:])
    flat_g = g_pre.reshape((-1,) + g_pre.shape[-2:])
    g_w = np.einsum("bnk,bnm->nkm", flat_maps, flat_g)
    g_b = flat_g.sum(axis=0)
    g_maps = np.einsum("...nm,nkm->...nk", g_pre, p.weights).reshape(cache.maps_shape)
    return BowlParams(g_w, g_b, 0.0), g_maps


def normalize_rows(raw):
    """L2-normalize each row of a ``(N, dim)`` array; all-zero rows stay zero."""
    raw = np.asarray(raw, dtype=np.float64)
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    return np.divide(raw, norms, out=np.zeros_like(raw), where=norms > 0)


def words_postprocess(raw, beta, normalize_first=True):
    """Normalize then threshold (strict ``> beta``) into a sparse vector.

    With ``normalize_first=False`` the threshold is applied to the raw
    values and the survivors are normalized.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1:
        raise DimensionError("words_postprocess takes a single raw word vector")
    if normalize_first:
        v = l2_normalize(raw)
        v = np.where(v > beta, v, 0.0)
    else:
        v = l2_normalize(np.where(raw > beta, raw, 0.0))
    v32 = v.astype(np.float32)
    ids = np.flatnonzero(v32 > 0)
    return VisualWordVector(raw.size, ids, v32[ids], False)


def binarize(v):
    return VisualWordVector(v.dim, v.ids.copy(), np.ones(len(v), dtype=np.float32), True)


def sparsity_ratio(batch, beta):
    """Fraction of coordinates strictly above ``beta`` over a batch of normalized words."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.size == 0:
        raise ValueError("sparsity_ratio needs a non-empty batch")
    if batch.ndim != 2:
        raise DimensionError(f"expected (N, m*n) batch, got shape {batch.shape}")
    return float(np.count_nonzero(batch > beta)) / batch.size


def write_words(path, records):
    """Write ``[(image_id, VisualWordVector), ...]`` as the sparse words text file."""
    with open(path, "w") as fh:
        for image_id, v in records:
            if v.binary:
                parts = [f"{i}:1" for i in v.ids]
            else:
                parts = [f"{i}:{float(x):#.9g}" for i, x in zip(v.ids, v.values)]
            fh.write(" ".join([str(int(image_id)), str(len(v))] + parts) + "\n")


def read_words(path, dim):
    """Parse a sparse words file. A vector is flagged binary when all its values are 1."""
    records = []
    offset = 0
    with open(path, "rb") as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                offset += len(line)
                continue
            try:
                image_id, k = int(fields[0]), int(fields[1])
                if len(fields) != k + 2:
                    raise ValueError(f"expected {k} entries, found {len(fields) - 2}")
                pairs = [f.split(b":") for f in fields[2:]]
                ids = [int(a) for a, _ in pairs]
                values = [float(b) for _, b in pairs]
                binary = all(b == b"1" for _, b in pairs) and k > 0
                records.append((image_id, VisualWordVector(dim, ids, values, binary)))
            except (ValueError, IndexError, DimensionError) as exc:
                raise FormatError(f"words file line {lineno}: {exc}", offset) from None
            offset += len(line)
    return records
