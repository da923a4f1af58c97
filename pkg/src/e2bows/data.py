"""Datasets: synthetic blob images, the CIFAR binary format, and on-disk dataset dirs.

A dataset directory holds ``images.npy`` (float32, N x H x W x C),
``labels.npy``, ``ids.npy``, ``query.npy`` (bool: held-out query images),
``meta.json`` and optionally ``concepts.npy`` (N x L multi-hot) and
``tree.txt``.
"""

import colorsys
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .losses import read_category_tree, write_category_tree

CIFAR_PIXELS = 32 * 32 * 3
CIFAR_RECORD = {"cifar10": 1 + CIFAR_PIXELS, "cifar100": 2 + CIFAR_PIXELS}


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) float
    labels: np.ndarray  # (N,) int
    class_count: int
    ids: np.ndarray = None
    is_query: np.ndarray = None
    concepts: np.ndarray = None  # optional (N, L) multi-hot, used for graded relevance
    tree: object = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.size
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.int64)
        if self.is_query is None:
            self.is_query = np.zeros(n, dtype=bool)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.is_query = np.asarray(self.is_query, dtype=bool)
        if len(self.images) != n or self.ids.size != n or self.is_query.size != n:
            raise ValueError("images, labels, ids and query flags must have equal length")
        if np.unique(self.ids).size != n:
            raise ValueError("image ids must be unique")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return self.labels.size

    def subset(self, mask):
        mask = np.asarray(mask)
        return Dataset(self.images[mask], self.labels[mask], self.class_count, self.ids[mask],
                       self.is_query[mask],
                       None if self.concepts is None else self.concepts[mask], self.tree)

    def label_sets(self):
        """``{image_id: set of labels}``; concepts when present, else the class label."""
        if self.concepts is not None:
            return {int(i): set(np.flatnonzero(c).tolist()) for i, c in zip(self.ids, self.concepts)}
        return {int(i): {int(lab)} for i, lab in zip(self.ids, self.labels)}


@dataclass
class SyntheticConfig:
    class_count: int = 10
    images_per_class: int = 60
    image_size: int = 32
    noise_sigma: float = 0.1
    rng_seed: int = 7
    queries_per_class: int = 10
    jitter: float = 1.0  # per-image blob displacement, as a fraction of image size
    distractors: int = 3  # colourless blobs at random positions, per image
    distractor_max: float = 1.5

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be at least 2")
        if not 0 <= self.queries_per_class < self.images_per_class:
            raise ValueError("queries_per_class must be smaller than images_per_class")


def _class_geometry(class_count, size):
    centers, colors = [], []
    for c in range(class_count):
        angle = 2 * np.pi * c / class_count
        centers.append((size / 2 + size * 0.28 * np.sin(angle), size / 2 + size * 0.28 * np.cos(angle)))
        colors.append(colorsys.hsv_to_rgb(c / class_count, 1.0, 1.0))
    return np.array(centers), np.array(colors)


def _blob(size, cy, cx, color):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    radius = size / 8.0
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))[..., None] * color


def class_templates(class_count, size):
    """One colour blob per class: hue and blob centre both step around a circle."""
    centers, colors = _class_geometry(class_count, size)
    return np.array([_blob(size, cy, cx, col) for (cy, cx), col in zip(centers, colors)])


def gen_synthetic(cfg):
    rng = np.random.default_rng(cfg.rng_seed)
    size = cfg.image_size
    centers, colors = _class_geometry(cfg.class_count, size)
    labels = np.repeat(np.arange(cfg.class_count), cfg.images_per_class)
    shifts = rng.uniform(-0.5, 0.5, size=(labels.size, 2)) * cfg.jitter * size
    # wrap displaced centres back into the image
    pos = (centers[labels] + shifts) % size
    images = np.array([_blob(size, cy, cx, colors[c]) for (cy, cx), c in zip(pos, labels)])
    for img in images:
        for _ in range(cfg.distractors):
            cy, cx = rng.uniform(0, size, 2)
            img += _blob(size, cy, cx, np.full(3, rng.uniform(0.3, cfg.distractor_max)))
    images += rng.normal(0.0, cfg.noise_sigma, size=images.shape)
    # first queries_per_class images of each class are held-out queries
    within = np.tile(np.arange(cfg.images_per_class), cfg.class_count)
    is_query = within < cfg.queries_per_class
    return Dataset(images.astype(np.float32), labels, cfg.class_count, None, is_query)


def _chroma(a):
    # drop the gray component per pixel, then each image's mean
    a = a - a.mean(axis=-1, keepdims=True)
    return a - a.mean(axis=(-3, -2), keepdims=True)


def template_match_accuracy(dataset, templates):
    """Brute-force nearest-template accuracy, searching every circular shift.

    Matching runs on the colour-opponent part of each pixel (gray removed), so
    colourless distractors and blob displacement do not affect the oracle.
    """
    x = _chroma(dataset.images.astype(np.float64))
    t = _chroma(np.asarray(templates, dtype=np.float64))
    fx = np.fft.rfft2(x, axes=(1, 2))
    ft = np.fft.rfft2(t, axes=(1, 2))
    corr = np.fft.irfft2(fx[:, None] * np.conj(ft[None]), s=x.shape[1:3], axes=(2, 3)).sum(-1)
    # min over shifts of |x - shift(t)|^2, dropping the |x|^2 term shared by all templates
    d = (t ** 2).sum(axis=(1, 2, 3))[None] - 2 * corr.max(axis=(2, 3))
    return float(np.mean(d.argmin(axis=1) == dataset.labels))


def read_cifar(path, variant="cifar10"):
    """Read a CIFAR binary batch. Pixels are scaled to [0, 1]; CIFAR-100 keeps the fine label."""
    if variant not in CIFAR_RECORD:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    record = CIFAR_RECORD[variant]
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) % record:
        raise FormatError(
            f"{variant} file size {len(buf)} is not a multiple of the {record}-byte record "
            f"(expected {len(buf) // record * record} or {(len(buf) // record + 1) * record})",
            len(buf) // record * record)
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, record)
    labels = raw[:, record - CIFAR_PIXELS - 1].astype(np.int64)
    classes = 10 if variant == "cifar10" else 100
    bad = np.flatnonzero(labels >= classes)
    if bad.size:
        raise FormatError(f"record {bad[0]} has label {labels[bad[0]]}, expected < {classes}",
                          int(bad[0]) * record + record - CIFAR_PIXELS - 1)
    planes = raw[:, record - CIFAR_PIXELS:].reshape(-1, 3, 32, 32)
    images = planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return Dataset(images, labels, classes)


def save_dataset(path, ds):
    os.makedirs(path, exist_ok=True)
    np.save(os.path.join(path, "images.npy"), ds.images.astype(np.float32))
    np.save(os.path.join(path, "labels.npy"), ds.labels)
    np.save(os.path.join(path, "ids.npy"), ds.ids)
    np.save(os.path.join(path, "query.npy"), ds.is_query)
    if ds.concepts is not None:
        np.save(os.path.join(path, "concepts.npy"), ds.concepts)
    if ds.tree is not None:
        write_category_tree(os.path.join(path, "tree.txt"), ds.tree)
    with open(os.path.join(path, "meta.json"), "w") as fh:
        json.dump({"class_count": ds.class_count}, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(path, cifar_variant="cifar10"):
    """Load a dataset directory, or a CIFAR ``.bin`` batch file."""
    if os.path.isfile(path):
        return read_cifar(path, cifar_variant)
    try:
        with open(os.path.join(path, "meta.json")) as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"{path} is not a dataset directory (no meta.json)") from None
    concepts_path = os.path.join(path, "concepts.npy")
    tree_path = os.path.join(path, "tree.txt")
    return Dataset(
        np.load(os.path.join(path, "images.npy")),
        np.load(os.path.join(path, "labels.npy")),
        meta["class_count"],
        np.load(os.path.join(path, "ids.npy")),
        np.load(os.path.join(path, "query.npy")),
        np.load(concepts_path) if os.path.exists(concepts_path) else None,
        read_category_tree(tree_path) if os.path.exists(tree_path) else None,
    )
