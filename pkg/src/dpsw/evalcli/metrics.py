"""PEHE and first-layer feature attribution."""

import numpy as np

from ..errors import DegenerateFitError, InvalidInputError, ShapeError

DENOMINATOR_TOL = 1e-12


def pehe(y0, y1, tau_hat):
    """Root mean squared error of tau_hat against y1 - y0."""
    y0 = np.asarray(y0, dtype=np.float64).ravel()
    y1 = np.asarray(y1, dtype=np.float64).ravel()
    tau_hat = np.asarray(tau_hat, dtype=np.float64).ravel()
    if not (y0.shape == y1.shape == tau_hat.shape):
        raise ShapeError(f"length mismatch: y0={y0.size}, y1={y1.size}, tau_hat={tau_hat.size}")
    if y0.size == 0:
        raise ShapeError("pehe needs at least one row")
    return float(np.sqrt(np.mean(((y1 - y0) - tau_hat) ** 2)))


def attribution(W1, block_cols):
    """Relative gap between mean |W1| on the block's columns and on the rest.

    ``W1`` is (out, in) so input features index columns. ``block_cols`` is a
    ``(start, stop)`` range or an explicit sequence of column indices.
    """
    W1 = np.abs(np.atleast_2d(np.asarray(W1, dtype=np.float64)))
    d = W1.shape[1]
    if isinstance(block_cols, tuple) and len(block_cols) == 2 and all(isinstance(c, (int, np.integer)) for c in block_cols):
        cols = np.arange(block_cols[0], block_cols[1])
    else:
        cols = np.asarray(block_cols, dtype=np.int64).ravel()
    if cols.size == 0 or cols.size >= d or np.any((cols < 0) | (cols >= d)) or np.unique(cols).size != cols.size:
        raise InvalidInputError(f"block columns must be a nonempty strict subset of 0..{d - 1}")
    mask = np.zeros(d, dtype=bool)
    mask[cols] = True
    inside = W1[:, mask].mean()
    rest = W1[:, ~mask].mean()
    if rest < DENOMINATOR_TOL:
        raise DegenerateFitError(f"mean |W1| outside the block is {rest:.3g}; attribution undefined")
    return float((inside - rest) / rest)
