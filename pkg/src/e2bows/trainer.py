"""SGD training of backbone -> SFM -> BoWL under the three-part objective,
plus the E2BW checkpoint format."""

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import BackboneConfig, BackboneParams, backbone_backward, backbone_forward, init_backbone
from .bowl import BowlParams, bowl_backward, bowl_forward, init_bowl, normalize_rows, sparsity_ratio
from .errors import DimensionError, FormatError, NumericError
from .losses import (adaptive_margin, category_similarity, sigmoid_cross_entropy, softmax_cross_entropy, sparsity_loss_and_grad,
                     triplet_cosine_loss)
from .sfm import (ClassifierWeights, active_sfm_mask, compute_sfms, fc_to_conv, grad_maps_from_scores,
                  init_classifier, sfm_backward)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"E2BW"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    alpha: float = 0.2
    rho_hat: float = 0.05
    learning_rate: float = 0.01
    beta_learning_rate: float = 0.001
    batch_size: int = 8
    epochs: int = 200
    rng_seed: int = 0
    m: int = 10
    freeze_backbone: bool = False
    beta_init: float = 0.0
    cls_loss: str = "softmax"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig.from_dict(self.backbone)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if self.alpha <= 0 or self.learning_rate <= 0 or self.beta_learning_rate <= 0:
            raise ValueError("alpha and learning rates must be positive")
        if not 0 < self.rho_hat < 1:
            raise ValueError("rho_hat must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.m < 1:
            raise ValueError("batch_size and m must be positive, epochs non-negative")
        if self.beta_init < 0:
            raise ValueError("beta_init must be non-negative")
        if self.cls_loss not in ("softmax", "sigmoid"):
            raise ValueError(f"cls_loss must be 'softmax' or 'sigmoid', got {self.cls_loss!r}")

    def to_dict(self):
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        return d


@dataclass
class ModelParams:
    backbone: BackboneParams
    classifier: ClassifierWeights
    bowl: BowlParams

    @property
    def n(self):
        return self.classifier.n

    @property
    def dim(self):
        return self.bowl.dim

    def copy(self):
        return ModelParams(self.backbone.copy(), self.classifier.copy(), self.bowl.copy())

    def tensors(self):
        """Named parameter tensors in a fixed order (beta last, as a 0-d array)."""
        out = []
        for i, (k, b) in enumerate(zip(self.backbone.kernels, self.backbone.biases)):
            out += [(f"backbone.kernel{i}", k), (f"backbone.bias{i}", b)]
        out += [("classifier.weights", self.classifier.weights),
                ("classifier.biases", self.classifier.biases),
                ("bowl.weights", self.bowl.weights),
                ("bowl.biases", self.bowl.biases),
                ("bowl.beta", np.array(self.bowl.beta, dtype=np.float64))]
        return out


@dataclass
class TripletBatch:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    margin: np.ndarray
    labels: np.ndarray  # labels of the batch images the indices refer to

    def __len__(self):
        return self.anchor.size


@dataclass
class LossReport:
    cls: float
    tri: float
    spa: float
    total: float
    rho: float
    beta: float


def init_model(cfg, n, rng=None):
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    backbone = init_backbone(cfg.backbone, rng)
    h, w, c = cfg.backbone.output_shape()
    classifier = init_classifier(c, n, rng)
    bowl = init_bowl(n, h * w, cfg.m, rng)
    bowl.beta = float(cfg.beta_init)
    return ModelParams(backbone, classifier, bowl)


def sample_triplets(labels, count, rng, alpha=0.2, tree=None):
    """Draw ``count`` (anchor, positive, negative) index triples from one batch.

    Anchors are uniform over images that have a same-label partner; returns
    an empty batch if there are none.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if np.unique(labels).size < 2:
        raise ValueError("triplet sampling needs at least two distinct labels")
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    eligible = np.flatnonzero(same.any(axis=1))
    if eligible.size == 0 or count <= 0:
        empty = np.zeros(0, dtype=np.int64)
        return TripletBatch(empty, empty, empty, np.zeros(0), labels)
    anchor = rng.choice(eligible, size=count)
    positive = np.empty(count, dtype=np.int64)
    negative = np.empty(count, dtype=np.int64)
    margin = np.full(count, float(alpha))
    for t, a in enumerate(anchor):
        positive[t] = rng.choice(np.flatnonzero(same[a]))
        negative[t] = rng.choice(np.flatnonzero(labels != labels[a]))
        if tree is not None:
            s = category_similarity(tree, int(labels[a]), int(labels[negative[t]]))
            margin[t] = adaptive_margin(alpha, s)
    return TripletBatch(anchor, positive, negative, margin, labels)


def forward_words(params, images):
    """Full forward pass. Returns a dict of intermediate arrays and caches."""
    feats, bcache = backbone_forward(images, params.backbone)
    if feats.ndim == 3:
        raise DimensionError("forward_words expects a batch of images (N, H, W, C)")
    kernels = fc_to_conv(params.classifier)
    stack = compute_sfms(feats, kernels)
    mask = active_sfm_mask(stack)
    raw, wcache = bowl_forward(stack.maps, mask, params.bowl)
    return {"features": feats, "backbone_cache": bcache, "kernels": kernels, "sfm": stack,
            "mask": mask, "raw": raw, "bowl_cache": wcache, "words": normalize_rows(raw)}


def head_forward(params, features):
    """Forward from precomputed feature maps ``(N, h, w, C)``."""
    kernels = fc_to_conv(params.classifier)
    stack = compute_sfms(features, kernels)
    mask = active_sfm_mask(stack)
    raw, wcache = bowl_forward(stack.maps, mask, params.bowl)
    return {"features": features, "kernels": kernels, "sfm": stack, "mask": mask,
            "raw": raw, "bowl_cache": wcache, "words": normalize_rows(raw)}


def objective_and_grads(params, images, labels, triplets, cfg, with_backbone=True):
    """Value of ``l_cls + lambda1 * l_tri`` on a batch and its gradient.

    ``l_cls`` is averaged over images, ``l_tri`` over triplets. Returns
    ``(l_cls, l_tri, fwd, grads)`` where ``grads`` is ModelParams-shaped
    (backbone grads are ``None`` when ``with_backbone`` is false).
    """
    fwd = forward_words(params, images)
    labels = np.asarray(labels, dtype=np.int64)
    n_img = labels.size
    scores = fwd["sfm"].avg
    h, w = fwd["sfm"].maps.shape[-2:]

    l_cls = 0.0
    g_scores = np.zeros_like(scores)
    for i in range(n_img):
        if cfg.cls_loss == "sigmoid":
            loss, g = sigmoid_cross_entropy(scores[i], labels[i])
        else:
            loss, g = softmax_cross_entropy(scores[i], labels[i])
        l_cls += loss / n_img
        g_scores[i] = g / n_img

    v = fwd["words"]
    g_v = np.zeros_like(v)
    l_tri = 0.0
    for a, p, ng, margin in zip(triplets.anchor, triplets.positive, triplets.negative, triplets.margin):
        loss, g_a, g_p, g_n = triplet_cosine_loss(v[a], v[p], v[ng], margin)
        l_tri += loss / len(triplets)
        g_v[a] += g_a / len(triplets)
        g_v[p] += g_p / len(triplets)
        g_v[ng] += g_n / len(triplets)
    g_v *= cfg.lambda1

    raw = fwd["raw"]
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    proj = g_v - v * np.sum(v * g_v, axis=1, keepdims=True)
    g_raw = np.divide(proj, norms, out=np.zeros_like(proj), where=norms > 0)

    g_bowl, g_maps = bowl_backward(fwd["bowl_cache"], g_raw)
    g_maps = g_maps + grad_maps_from_scores(g_scores, h, w)
    g_kernels, g_feats = sfm_backward(fwd["features"], fwd["kernels"], g_maps)
    g_classifier = ClassifierWeights(g_kernels.kernels.T.copy(), g_kernels.biases)
    g_backbone = backbone_backward(fwd["backbone_cache"], g_feats)[0] if with_backbone else None
    return l_cls, l_tri, fwd, ModelParams(g_backbone, g_classifier, g_bowl)


def update_beta(beta, rho, cfg):
    """One step of the threshold under the sparsity loss; beta stays non-negative."""
    _, d_beta = sparsity_loss_and_grad(cfg.rho_hat, rho)
    return max(0.0, beta - cfg.beta_learning_rate * cfg.lambda2 * d_beta)


def train_step(images, labels, triplets, params, cfg):
    """One SGD update. Returns ``(new_params, LossReport)``; ``params`` is not modified."""
    l_cls, l_tri, fwd, grads = objective_and_grads(
        params, images, labels, triplets, cfg, with_backbone=not cfg.freeze_backbone)
    beta = params.bowl.beta
    rho = sparsity_ratio(fwd["words"], beta)
    l_spa, _ = sparsity_loss_and_grad(cfg.rho_hat, rho)
    for name, value in (("classification", l_cls), ("triplet", l_tri), ("sparsity", l_spa)):
        if not math.isfinite(value):
            raise NumericError(f"non-finite {name} loss: {value}")

    lr = cfg.learning_rate
    new = params.copy()
    if not cfg.freeze_backbone:
        for i in range(len(new.backbone.kernels)):
            new.backbone.kernels[i] -= lr * grads.backbone.kernels[i]
            new.backbone.biases[i] -= lr * grads.backbone.biases[i]
    new.classifier.weights -= lr * grads.classifier.weights
    new.classifier.biases -= lr * grads.classifier.biases
    new.bowl.weights -= lr * grads.bowl.weights
    new.bowl.biases -= lr * grads.bowl.biases
    new.bowl.beta = update_beta(beta, rho, cfg)
    total = l_cls + cfg.lambda1 * l_tri + cfg.lambda2 * l_spa
    return new, LossReport(l_cls, l_tri, l_spa, total, rho, beta)


def train(dataset, cfg, params=None, tree=None, progress=None):
    """Run ``cfg.epochs`` epochs of shuffled mini-batch SGD over ``dataset``.

    Returns ``(params, history)`` with one LossReport per step.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if np.unique(dataset.labels).size < 2:
        raise ValueError("training needs at least two classes")
    rng = np.random.default_rng(cfg.rng_seed)
    if params is None:
        params = init_model(cfg, dataset.class_count, rng)
    if tree is None:
        tree = dataset.tree
    images = dataset.images.astype(np.float64)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            labels = dataset.labels[idx]
            if np.unique(labels).size < 2:
                continue
            triplets = sample_triplets(labels, idx.size, rng, cfg.alpha, tree)
            params, report = train_step(images[idx], labels, triplets, params, cfg)
            history.append(report)
        if history:
            r = history[-1]
            log.info("epoch %d: cls=%.4f tri=%.4f spa=%.4f rho=%.4f beta=%.4f",
                     epoch + 1, r.cls, r.tri, r.spa, r.rho, r.beta)
        if progress is not None:
            progress(epoch, history)
    return params, history


def extract_dense_words(params, images, batch_size=64):
    """Normalized, un-thresholded words for every image, ``(N, m*n)`` float64."""
    out = []
    for start in range(0, len(images), batch_size):
        out.append(forward_words(params, np.asarray(images[start:start + batch_size], np.float64))["words"])
    return np.concatenate(out) if out else np.zeros((0, params.dim))


# checkpoint format ----------------------------------------------------------

def save_checkpoint(params, cfg, path):
    meta = json.dumps({"config": cfg.to_dict(), "classes": params.n}, sort_keys=True).encode()
    tensors = params.tensors()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            arr = np.asarray(arr, dtype="<f8")
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)) + encoded)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.offset = 0

    def take(self, n, what):
        if self.offset + n > len(self.buf):
            raise FormatError(f"checkpoint truncated while reading {what}", self.offset)
        chunk = self.buf[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def load_checkpoint(path):
    """Returns ``(ModelParams, TrainConfig)``."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic, version, meta_len = r.unpack("<4sII", "header")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    try:
        meta = json.loads(r.take(meta_len, "config").decode())
        cfg = TrainConfig(**meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable config block: {exc}", 12) from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "tensor name")
        name = r.take(name_len, "tensor name").decode()
        (ndim,) = r.unpack("<I", f"{name} rank")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * size, name), dtype="<f8").reshape(shape).astype(np.float64)
    if r.offset != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.offset} trailing bytes in checkpoint", r.offset)
    try:
        blocks = len(cfg.backbone.blocks)
        backbone = BackboneParams([tensors[f"backbone.kernel{i}"] for i in range(blocks)],
                                  [tensors[f"backbone.bias{i}"] for i in range(blocks)])
        classifier = ClassifierWeights(tensors["classifier.weights"], tensors["classifier.biases"])
        bowl = BowlParams(tensors["bowl.weights"], tensors["bowl.biases"], float(tensors["bowl.beta"]))
    except KeyError as exc:
        raise FormatError(f"checkpoint missing tensor {exc}") from None
    return ModelParams(backbone, classifier, bowl), cfg
