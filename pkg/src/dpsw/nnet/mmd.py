"""Gaussian-kernel maximum mean discrepancy (biased V-statistic)."""

import numpy as np

from ..errors import EmptyGroupError, InvalidParameterError, ShapeError
from . import autodiff as ad


def _check(s0, s1, bandwidth):
    if s0.shape[0] == 0 or s1.shape[0] == 0:
        raise EmptyGroupError("MMD needs both sample sets to be nonempty")
    if s0.ndim != 2 or s1.ndim != 2 or s0.shape[1] != s1.shape[1]:
        raise ShapeError(f"sample sets must share a feature dimension, got {s0.shape} and {s1.shape}")
    if not bandwidth > 0:
        raise InvalidParameterError(f"bandwidth must be positive, got {bandwidth}")


def _sqdist_np(a, b):
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def mmd_rbf(s0, s1, bandwidth):
    """MMD^2 with k(x, y) = exp(-||x - y||^2 / (2 h^2))."""
    s0 = np.atleast_2d(np.asarray(s0, dtype=np.float64))
    s1 = np.atleast_2d(np.asarray(s1, dtype=np.float64))
    _check(s0, s1, bandwidth)
    c = -0.5 / bandwidth**2
    k00 = np.exp(c * _sqdist_np(s0, s0)).mean()
    k11 = np.exp(c * _sqdist_np(s1, s1)).mean()
    k01 = np.exp(c * _sqdist_np(s0, s1)).mean()
    return max(float(k00 + k11 - 2.0 * k01), 0.0)


def _sqdist_t(a, b):
    aa = (a * a).sum(axis=1, keepdims=True)
    bb = ad.transpose((b * b).sum(axis=1, keepdims=True))
    return ad.clip(aa + bb - 2.0 * (a @ ad.transpose(b)), lo=0.0)


def mmd_rbf_t(s0, s1, bandwidth):
    """Graph version of :func:`mmd_rbf` for Tensor inputs."""
    _check(s0.data, s1.data, bandwidth)
    c = -0.5 / bandwidth**2
    k00 = ad.exp(_sqdist_t(s0, s0) * c).mean()
    k11 = ad.exp(_sqdist_t(s1, s1) * c).mean()
    k01 = ad.exp(_sqdist_t(s0, s1) * c).mean()
    return k00 + k11 - 2.0 * k01


def median_bandwidth(samples):
    """Median pairwise Euclidean distance (off-diagonal); 1.0 if all coincide."""
    s = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    d = np.sqrt(_sqdist_np(s, s))[np.triu_indices(s.shape[0], k=1)]
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0
