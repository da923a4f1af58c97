"""Dense vector helpers and a central-difference gradient checker.

Tensors are plain ``numpy`` arrays; everything trainable is float64.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_coordinate: tuple
    analytic: float
    numeric: float


def dot(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise DimensionError(f"dot needs equal-length vectors, got {u.shape} and {v.shape}")
    return float(u @ v)


def l2_normalize(v):
    """Return ``v / ||v||``; the zero vector is returned unchanged."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return v.copy()
    return v / norm


def finite_diff_check(f, x, analytic_grad, eps=1e-4, coords=None):
    """Compare ``analytic_grad`` against central differences of ``f`` at ``x``.

    ``f`` maps an array shaped like ``x`` to a scalar. ``x`` is perturbed in
    place and restored. ``coords`` optionally restricts the check to a list
    of index tuples (useful for large parameter tensors).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if analytic_grad.shape != x.shape:
        raise DimensionError(f"gradient shape {analytic_grad.shape} != input shape {x.shape}")
    if coords is None:
        coords = list(np.ndindex(x.shape))

    report = GradCheckReport(0.0, (), 0.0, 0.0)
    for idx in coords:
        idx = tuple(idx)
        orig = x[idx]
        x[idx] = orig + eps
        f_plus = float(f(x))
        x[idx] = orig - eps
        f_minus = float(f(x))
        x[idx] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"non-finite function value at coordinate {idx}")
        numeric = (f_plus - f_minus) / (2.0 * eps)
        analytic = float(analytic_grad[idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        if err > report.max_rel_error or not report.worst_coordinate:
            report = GradCheckReport(err, idx, analytic, numeric)
    return report
