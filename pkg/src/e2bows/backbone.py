"""Small convolutional feature extractor and the E2FM feature file format.

Each block is a stride-1 same-padded k x k convolution, ReLU, and a 2x2
max-pool. Arrays are channel-last: images are ``(H, W, C)`` or a batch
``(N, H, W, C)``.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, FormatError

FEATURE_MAGIC = b"E2FM"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIIIII")
_U64 = struct.Struct("<Q")


@dataclass
class BackboneConfig:
    input_height: int = 32
    input_width: int = 32
    input_channels: int = 3
    blocks: list = field(default_factory=lambda: [(3, 16), (3, 32), (3, 64)])
    rng_seed: int = 0

    def __post_init__(self):
        self.blocks = [(int(k), int(c)) for k, c in self.blocks]
        for k, _ in self.blocks:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel size must be odd and positive, got {k}")
        h, w, _ = self.output_shape()
        if h < 1 or w < 1:
            raise ValueError("backbone output would be empty; use fewer blocks or larger input")

    def output_shape(self):
        h, w = self.input_height, self.input_width
        for _ in self.blocks:
            h, w = h // 2, w // 2
        channels = self.blocks[-1][1] if self.blocks else self.input_channels
        return h, w, channels

    def to_dict(self):
        return {
            "input_height": self.input_height,
            "input_width": self.input_width,
            "input_channels": self.input_channels,
            "blocks": [list(b) for b in self.blocks],
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["input_height"], d["input_width"], d["input_channels"],
                   [tuple(b) for b in d["blocks"]], d["rng_seed"])


@dataclass
class BackboneParams:
    kernels: list  # each (k, k, c_in, c_out)
    biases: list  # each (c_out,)

    def copy(self):
        return BackboneParams([k.copy() for k in self.kernels], [b.copy() for b in self.biases])

    def zeros_like(self):
        return BackboneParams([np.zeros_like(k) for k in self.kernels],
                              [np.zeros_like(b) for b in self.biases])


@dataclass
class ForwardCache:
    input_shape: tuple
    squeeze: bool
    layers: list
    params: BackboneParams


def init_backbone(cfg, rng=None):
    """Glorot-uniform kernels, zero biases."""
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    kernels, biases = [], []
    c_in = cfg.input_channels
    for k, c_out in cfg.blocks:
        s = np.sqrt(6.0 / (k * k * c_in + k * k * c_out))
        kernels.append(rng.uniform(-s, s, size=(k, k, c_in, c_out)))
        biases.append(np.zeros(c_out))
        c_in = c_out
    return BackboneParams(kernels, biases)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")


def _conv_forward(x, kernel, bias):
    n, h, w, c_in = x.shape
    k = kernel.shape[0]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    # (N, H, W, C, k, k) -> (N*H*W, k*k*C) in (i, j, c) order to match the kernel
    cols = sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c_in)
    z = cols @ kernel.reshape(k * k * c_in, -1) + bias
    return z.reshape(n, h, w, -1), cols


def _conv_backward(gz, cols, kernel, x_shape):
    n, h, w, c_in = x_shape
    k = kernel.shape[0]
    p = k // 2
    c_out = kernel.shape[3]
    gz_flat = gz.reshape(-1, c_out)
    g_kernel = (cols.T @ gz_flat).reshape(kernel.shape)
    g_bias = gz_flat.sum(axis=0)
    gcols = (gz_flat @ kernel.reshape(k * k * c_in, c_out).T).reshape(n, h, w, k, k, c_in)
    gxp = np.zeros((n, h + 2 * p, w + 2 * p, c_in))
    for i in range(k):
        for j in range(k):
            gxp[:, i:i + h, j:j + w, :] += gcols[:, :, :, i, j, :]
    return g_kernel, g_bias, gxp[:, p:p + h, p:p + w, :]


def _pool_forward(a):
    n, h, w, c = a.shape
    h2, w2 = h // 2, w // 2
    blocks = a[:, :2 * h2, :2 * w2, :].reshape(n, h2, 2, w2, 2, c)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(gout, arg, a_shape):
    n, h, w, c = a_shape
    h2, w2 = h // 2, w // 2
    g = np.zeros((n, h2, w2, c, 4))
    np.put_along_axis(g, arg[..., None], gout[..., None], axis=-1)
    g = g.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
    ga = np.zeros(a_shape)
    ga[:, :2 * h2, :2 * w2, :] = g
    return ga


def backbone_forward(image, params):
    """Run the conv stack. Returns ``(features, cache)``; features are >= 0."""
    x, squeeze = _as_batch(image)
    if params.kernels and x.shape[3] != params.kernels[0].shape[2]:
        raise DimensionError(
            f"image has {x.shape[3]} channels, backbone expects {params.kernels[0].shape[2]}")
    layers = []
    input_shape = x.shape
    for kernel, bias in zip(params.kernels, params.biases):
        z, cols = _conv_forward(x, kernel, bias)
        a = np.maximum(z, 0.0)
        out, arg = _pool_forward(a)
        layers.append((x.shape, cols, z, arg))
        x = out
    return (x[0] if squeeze else x), ForwardCache(input_shape, squeeze, layers, params)


def backbone_backward(cache, grad_out):
    """Backpropagate ``grad_out`` (shaped like the features). Returns ``(param_grads, grad_image)``."""
    g = np.asarray(grad_out, dtype=np.float64)
    if cache.squeeze:
        g = g[None]
    expected = _expected_out_shape(cache)
    if g.shape != expected:
        raise DimensionError(f"grad_out shape {g.shape} does not match forward output {expected}")
    params = cache.params
    grads = params.zeros_like()
    for li in reversed(range(len(cache.layers))):
        x_shape, cols, z, arg = cache.layers[li]
        ga = _pool_backward(g, arg, z.shape)
        gz = ga * (z > 0)
        gk, gb, g = _conv_backward(gz, cols, params.kernels[li], x_shape)
        grads.kernels[li] = gk
        grads.biases[li] = gb
    return grads, (g[0] if cache.squeeze else g)


def _expected_out_shape(cache):
    if not cache.layers:
        return cache.input_shape
    z_shape = cache.layers[-1][2].shape
    return (z_shape[0], z_shape[1] // 2, z_shape[2] // 2, z_shape[3])


def write_feature_file(path, records):
    """Write ``[(image_id, features (h, w, C)), ...]`` as an E2FM file (float32 payload)."""
    records = list(records)
    if records:
        h, w, c = np.shape(records[0][1])
    else:
        h = w = c = 0
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, len(records), h, w, c))
        for image_id, fmap in records:
            fmap = np.asarray(fmap)
            if fmap.shape != (h, w, c):
                raise DimensionError(f"record {image_id} has shape {fmap.shape}, expected {(h, w, c)}")
            fh.write(_U64.pack(int(image_id)))
            fh.write(np.ascontiguousarray(fmap, dtype="<f4").tobytes())


def read_feature_file(path):
    """Parse an E2FM file into ``[(image_id, float32 array (h, w, C)), ...]``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _FEATURE_HEADER.size:
        raise FormatError("truncated E2FM header", len(buf))
    magic, version, count, h, w, c = _FEATURE_HEADER.unpack_from(buf, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}", 0)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported E2FM version {version}", 4)
    payload = h * w * c * 4
    offset = _FEATURE_HEADER.size
    records = []
    for _ in range(count):
        if offset + 8 + payload > len(buf):
            raise FormatError(f"truncated record {len(records)} of {count}", offset)
        (image_id,) = _U64.unpack_from(buf, offset)
        values = np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=offset + 8)
        records.append((image_id, values.reshape(h, w, c).astype(np.float32)))
        offset += 8 + payload
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after {count} records", offset)
    return records
