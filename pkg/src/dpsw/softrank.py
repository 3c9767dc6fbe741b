"""Hard and differentiable (l2-regularized) ranking.

Ranks are ascending: the smallest entry gets rank 1, the largest rank n.
A descending rank is ``hard_rank(-w)``.

The soft rank is the Euclidean projection of ``w / epsilon`` onto the
permutahedron of (1, ..., n). Projection reduces to one isotonic regression
on the sorted input, so forward and backward passes cost O(n log n).
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import InvalidInputError, InvalidParameterError
from .nnet.autodiff import Tensor, custom_op


@dataclass(frozen=True)
class RankVector:
    values: np.ndarray
    epsilon: float = 0.0  # 0 marks a hard rank

    def __len__(self):
        return len(self.values)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def _as_finite_vector(w):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise InvalidInputError("expected a non-empty 1-d sequence")
    if not np.all(np.isfinite(w)):
        raise InvalidInputError("input contains non-finite entries")
    return w


def _check_epsilon(epsilon):
    if not epsilon > 0:
        raise InvalidParameterError(f"epsilon must be positive, got {epsilon}")


def hard_rank(w):
    """Position of each entry in the ascending sort; ties keep index order."""
    w = _as_finite_vector(w)
    order = np.argsort(w, kind="stable")
    r = np.empty(w.size, dtype=np.float64)
    r[order] = np.arange(1, w.size + 1)
    return RankVector(r, 0.0)


def isotonic_regression(y):
    """Least-squares nondecreasing fit (pool adjacent violators)."""
    y = _as_finite_vector(y)
    fit, _ = _kernels.pav_blocks(np.ascontiguousarray(y))
    return fit


def _project(w, epsilon):
    """Projection of w/epsilon onto the permutahedron plus its block labels.

    Returns ``(ranks, block_of)`` where ``block_of[i]`` identifies the pooled
    isotonic block containing entry ``i`` (in original order).
    """
    n = w.size
    z = w / epsilon
    order = np.argsort(-z, kind="stable")  # descending
    s = z[order]
    target = np.arange(n, 0, -1, dtype=np.float64)
    # nonincreasing fit of (s - target) == -(nondecreasing fit of (target - s))
    fit, ids = _kernels.pav_blocks(np.ascontiguousarray(target - s))
    v = -fit
    ranks = np.empty(n)
    ranks[order] = s - v
    block_of = np.empty(n, dtype=np.int64)
    block_of[order] = ids
    return ranks, block_of


def _block_center(u, block_of):
    counts = np.bincount(block_of)
    return (np.bincount(block_of, weights=u) / counts)[block_of]


def soft_rank(w, epsilon):
    """Differentiable ascending rank; converges to :func:`hard_rank` as epsilon -> 0."""
    _check_epsilon(epsilon)
    w = _as_finite_vector(w)
    ranks, _ = _project(w, epsilon)
    return RankVector(ranks, float(epsilon))


def soft_rank_vjp(w, epsilon, upstream):
    """Vector-Jacobian product ``upstream^T J`` of :func:`soft_rank` at ``w``.

    The Jacobian is (I - B) / epsilon, where B averages within each isotonic
    block. At kinks the block structure of the computed PAV solution is used.
    """
    _check_epsilon(epsilon)
    w = _as_finite_vector(w)
    u = np.asarray(upstream, dtype=np.float64)
    if u.shape != w.shape:
        raise InvalidInputError("upstream must match the input length")
    _, block_of = _project(w, epsilon)
    return (u - _block_center(u, block_of)) / epsilon


def soft_rank_t(w, epsilon):
    """:func:`soft_rank` as an autodiff node over a 1-d :class:`Tensor`."""
    _check_epsilon(epsilon)
    data = _as_finite_vector(w.data)
    ranks, block_of = _project(data, epsilon)

    def backward(g):
        return ((g - _block_center(g, block_of)) / epsilon,)

    return custom_op(ranks, (w,), backward)


__all__ = [
    "RankVector",
    "Tensor",
    "hard_rank",
    "isotonic_regression",
    "soft_rank",
    "soft_rank_t",
    "soft_rank_vjp",
]
