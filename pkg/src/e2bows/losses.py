"""Training objective: classification, cosine triplet and sparsity terms,
plus the category-tree margin adjustment."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError

RHO_FLOOR = 1e-6


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    alpha: float = 0.2
    rho_hat: float = 0.08

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.rho_hat < 1:
            raise ValueError("rho_hat must lie in (0, 1)")


def softmax_cross_entropy(scores, label):
    """Returns ``(loss, grad_scores)`` for one image."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= label < scores.size:
        raise ValueError(f"label {label} out of range for {scores.size} categories")
    shifted = scores - scores.max()
    log_z = math.log(np.exp(shifted).sum())
    loss = log_z - shifted[label]
    grad = np.exp(shifted - log_z)
    grad[label] -= 1.0
    return float(loss), grad


def sigmoid_cross_entropy(scores, labels):
    """One-vs-rest logistic loss summed over categories.

    ``labels`` is a category index or an iterable of indices (multi-label).
    Returns ``(loss, grad_scores)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    target = np.zeros_like(scores)
    idx = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if idx.size and (idx.min() < 0 or idx.max() >= scores.size):
        raise ValueError(f"label out of range for {scores.size} categories")
    target[idx] = 1.0
    # log(1 + exp(-|s|)) + max(s, 0) - s * t, stable for large |s|
    loss = np.sum(np.logaddexp(0.0, scores) - scores * target)
    prob = np.exp(-np.logaddexp(0.0, -scores))
    return float(loss), prob - target


def triplet_cosine_loss(va, vp, vn, alpha):
    """Hinge on cosine similarities; gradients are zero when the hinge is inactive."""
    va, vp, vn = (np.asarray(v, dtype=np.float64) for v in (va, vp, vn))
    if not va.shape == vp.shape == vn.shape or va.ndim != 1:
        raise DimensionError("triplet vectors must be 1-D and of equal length")
    loss = float(va @ vn - va @ vp + alpha)
    if loss <= 0.0:
        z = np.zeros_like(va)
        return 0.0, z, z.copy(), z.copy()
    return loss, vn - vp, -va, va.copy()


def _check_rho_hat(rho_hat):
    if not 0 < rho_hat < 1:
        raise ValueError(f"rho_hat must lie in (0, 1), got {rho_hat}")


def clamp_rho(rho):
    return min(max(rho, RHO_FLOOR), 1.0 - RHO_FLOOR)


def sparsity_loss_and_grad(rho_hat, rho):
    """KL divergence between target and measured nonzero ratios, and d/dbeta.

    ``rho`` is clamped to ``[1e-6, 1 - 1e-6]`` before use.
    """
    _check_rho_hat(rho_hat)
    rho = clamp_rho(rho)
    loss = rho_hat * math.log(rho_hat / rho) + (1 - rho_hat) * math.log((1 - rho_hat) / (1 - rho))
    return max(loss, 0.0), (rho_hat - rho) / (1 - rho)


def sparsity_dloss_drho(rho_hat, rho):
    _check_rho_hat(rho_hat)
    return -rho_hat / rho + (1 - rho_hat) / (1 - rho)


def surrogate_drho_dbeta(batch, beta):
    """d(rho)/d(beta) with d sign(v - beta)/d beta := -sign(v - beta), averaged per term."""
    batch = np.asarray(batch, dtype=np.float64)
    return -float(np.count_nonzero(batch > beta)) / batch.size


def sparsity_grad_chain_rule(rho_hat, batch, beta):
    """d(l_spa)/d(beta) by the explicit chain rule over the surrogate sign gradient."""
    batch = np.asarray(batch, dtype=np.float64)
    rho = float(np.count_nonzero(batch > beta)) / batch.size
    return sparsity_dloss_drho(rho_hat, rho) * surrogate_drho_dbeta(batch, beta)


def combined_loss(l_cls, l_tri, l_spa, w):
    return l_cls + w.lambda1 * l_tri + w.lambda2 * l_spa


class CategoryTree:
    """Rooted category hierarchy; categories map to leaves."""

    def __init__(self, parents, category_leaf):
        self.parents = {int(k): int(v) for k, v in parents.items()}
        self.category_leaf = {int(k): int(v) for k, v in category_leaf.items()}
        roots = [node for node, parent in self.parents.items() if parent == -1]
        if len(roots) != 1:
            raise ValueError(f"tree must have exactly one root, found {len(roots)}")
        self.root = roots[0]
        for node, parent in self.parents.items():
            if parent != -1 and parent not in self.parents:
                raise ValueError(f"node {node} has unknown parent {parent}")
        self.depth = {}
        for node in self.parents:
            self._depth_of(node)
        children = set(p for p in self.parents.values() if p != -1)
        leaves = [node for node in self.parents if node not in children]
        self.height = max(self.depth[node] for node in leaves)
        if self.height < 1:
            raise ValueError("tree height must be at least 1")
        for cat, leaf in self.category_leaf.items():
            if leaf not in self.parents:
                raise ValueError(f"category {cat} maps to unknown node {leaf}")
            if leaf in children:
                raise ValueError(f"category {cat} maps to non-leaf node {leaf}")

    def _depth_of(self, node):
        path = []
        while node not in self.depth:
            if node in path:
                raise ValueError(f"cycle through node {node}")
            path.append(node)
            parent = self.parents[node]
            if parent == -1:
                self.depth[node] = 0
                path.pop()
                break
            node = parent
        d = self.depth[node]
        for child in reversed(path):
            d += 1
            self.depth[child] = d

    def ancestors(self, node):
        out = []
        while node != -1:
            out.append(node)
            node = self.parents[node]
        return out

    def lca(self, a, b):
        seen = set(self.ancestors(a))
        for node in self.ancestors(b):
            if node in seen:
                return node
        raise AssertionError("single-rooted tree always has a common ancestor")


def category_similarity(tree, c1, c2):
    """Depth of the categories' lowest common ancestor over the tree height."""
    if c1 == c2:
        raise ValueError("category_similarity needs two different categories")
    for c in (c1, c2):
        if c not in tree.category_leaf:
            raise ValueError(f"unknown category {c}")
    lca = tree.lca(tree.category_leaf[c1], tree.category_leaf[c2])
    return tree.depth[lca] / tree.height


def adaptive_margin(alpha, s):
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"similarity must lie in [0, 1], got {s}")
    return alpha / (1.0 + s) ** 2


def read_category_tree(path):
    """Load a tree file with ``[nodes]`` lines ``node_id parent_id`` (root parent -1)
    and ``[categories]`` lines ``category_id node_id``. ``#`` starts a comment."""
    parents, cats = {}, {}
    section = None
    offset = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split(b"#", 1)[0].strip()
            if line in (b"[nodes]", b"[categories]"):
                section = line
            elif line:
                fields = line.split()
                if section is None or len(fields) != 2:
                    raise FormatError(f"tree file line {lineno}: malformed entry", offset)
                a, b = int(fields[0]), int(fields[1])
                target = parents if section == b"[nodes]" else cats
                if a in target:
                    raise FormatError(f"tree file line {lineno}: duplicate id {a}", offset)
                target[a] = b
            offset += len(raw)
    return CategoryTree(parents, cats)


def write_category_tree(path, tree):
    with open(path, "w") as fh:
        fh.write("[nodes]\n")
        for node in sorted(tree.parents):
            fh.write(f"{node} {tree.parents[node]}\n")
        fh.write("[categories]\n")
        for cat in sorted(tree.category_leaf):
            fh.write(f"{cat} {tree.category_leaf[cat]}\n")
