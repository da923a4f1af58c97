"""Semantic feature maps: the category classifier applied as 1x1 convolutions.

Feature maps are ``(h, w, C)`` (or batched ``(N, h, w, C)``); SFM stacks are
``(n, h, w)`` (or ``(N, n, h, w)``).
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


@dataclass
class ClassifierWeights:
    weights: np.ndarray  # (C, n)
    biases: np.ndarray  # (n,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[1],):
            raise DimensionError("classifier weights must be (C, n) with n biases")
        if self.weights.shape[1] < 2:
            raise ValueError("classifier needs at least 2 categories")

    @property
    def n(self):
        return self.weights.shape[1]

    def copy(self):
        return ClassifierWeights(self.weights.copy(), self.biases.copy())


@dataclass
class ConvKernels:
    kernels: np.ndarray  # (n, C); kernel c is a 1x1xC filter
    biases: np.ndarray  # (n,)


@dataclass
class SfmStack:
    maps: np.ndarray  # (n, h, w)
    avg: np.ndarray  # (n,)


def init_classifier(channels, n, rng):
    s = np.sqrt(6.0 / (channels + n))
    return ClassifierWeights(rng.uniform(-s, s, size=(channels, n)), np.zeros(n))


def fc_to_conv(fc):
    """Reshape a (C, n) FC layer into n 1x1 kernels. No value changes."""
    return ConvKernels(fc.weights.T.copy(), fc.biases.copy())


def conv_to_fc(k):
    return ClassifierWeights(k.kernels.T.copy(), k.biases.copy())


def compute_sfms(f, k):
    """Apply the 1x1 kernels at every spatial location of ``f``."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim not in (3, 4):
        raise DimensionError(f"feature maps must be (h, w, C) or (N, h, w, C), got {f.shape}")
    if f.shape[-1] != k.kernels.shape[1]:
        raise DimensionError(
            f"features have {f.shape[-1]} channels but kernels expect {k.kernels.shape[1]}")
    maps = np.einsum("...hwc,nc->...nhw", f, k.kernels) + k.biases[:, None, None]
    avg = maps.mean(axis=(-2, -1))
    return SfmStack(maps, avg)


def classification_scores(s):
    """Category scores are the spatial averages of the SFMs."""
    return s.avg.copy()


def active_sfm_mask(s):
    # SFMs with a negative mean activation are discarded; zero is kept
    return s.avg >= 0.0


def sfm_backward(f, k, grad_maps):
    """Gradients of a scalar wrt kernels, biases and features, given dL/dmaps.

    Shapes follow ``compute_sfms``; a batch axis is summed over for the
    parameter gradients.
    """
    f = np.asarray(f, dtype=np.float64)
    grad_maps = np.asarray(grad_maps, dtype=np.float64)
    if grad_maps.shape[:-3] != f.shape[:-3] or grad_maps.shape[-2:] != f.shape[-3:-1]:
        raise DimensionError(f"grad_maps {grad_maps.shape} inconsistent with features {f.shape}")
    flat_g = grad_maps.reshape((-1,) + grad_maps.shape[-3:])
    g_kernels = np.einsum("bnhw,bhwc->nc", flat_g, f.reshape((-1,) + f.shape[-3:]))
    g_biases = flat_g.sum(axis=(0, 2, 3))
    g_f = np.einsum("...nhw,nc->...hwc", grad_maps, k.kernels)
    return ConvKernels(g_kernels, g_biases), g_f


def grad_maps_from_scores(grad_scores, h, w):
    """Spread dL/dscore uniformly over each map (the adjoint of average pooling)."""
    grad_scores = np.asarray(grad_scores, dtype=np.float64)
    return np.broadcast_to(grad_scores[..., None, None] / (h * w),
                           grad_scores.shape + (h, w)).copy()
