"""Synthetic benchmark generator, dataset splits, and CSV I/O.

Synthetic features come in three equal blocks: instruments (drive treatment
only), confounders (drive both), adjustment variables (drive outcome only).
"""

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, InvalidParameterError

log = logging.getLogger(__name__)

BLOCK_NAMES = ("gamma", "delta", "upsilon")
MAX_REGENERATIONS = 100


@dataclass
class Dataset:
    a: np.ndarray
    x: np.ndarray
    y: np.ndarray
    y0: np.ndarray = None
    y1: np.ndarray = None
    feature_blocks: dict = None  # name -> (start, stop) column range
    flags: dict = None

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.int64)
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64)
        n = self.a.shape[0]
        if self.x.shape[0] != n or self.y.shape != (n,):
            raise DataError(f"inconsistent row counts: a={n}, x={self.x.shape[0]}, y={self.y.shape[0]}")
        if not np.all((self.a == 0) | (self.a == 1)):
            raise DataError("treatment must be binary")
        if (self.y0 is None) != (self.y1 is None):
            raise DataError("y0 and y1 must be given together")
        if self.y0 is not None:
            self.y0 = np.asarray(self.y0, dtype=np.float64)
            self.y1 = np.asarray(self.y1, dtype=np.float64)
            if not np.allclose(self.y, np.where(self.a == 1, self.y1, self.y0), rtol=1e-9, atol=1e-12):
                bad = int(np.flatnonzero(~np.isclose(self.y, np.where(self.a == 1, self.y1, self.y0)))[0])
                raise DataError(f"row {bad}: y != a*y1 + (1-a)*y0")
        self.flags = dict(self.flags or {})

    @property
    def n(self):
        return self.a.shape[0]

    @property
    def d(self):
        return self.x.shape[1]

    @property
    def has_potential_outcomes(self):
        return self.y0 is not None

    @property
    def treated_fraction(self):
        return float(self.a.mean())

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.a[idx],
            self.x[idx],
            self.y[idx],
            None if self.y0 is None else self.y0[idx],
            None if self.y1 is None else self.y1[idx],
            self.feature_blocks,
            self.flags,
        )


def thirds(d):
    if d % 3:
        raise InvalidParameterError(f"d must be divisible by 3, got {d}")
    k = d // 3
    return {name: (i * k, (i + 1) * k) for i, name in enumerate(BLOCK_NAMES)}


def gen_synthetic(d, n, seed, coefficients=None):
    """Draw one synthetic replication.

    ``coefficients`` optionally overrides any of ``c_a``, ``c_y0``, ``c_y1``
    (each of length 2d/3). A draw where every unit lands in one treatment
    group is rejected and ``c_a`` is redrawn; the number of redraws is
    recorded in ``flags["regenerated"]``.
    """
    d, n = int(d), int(n)
    blocks = thirds(d)
    if n < 1:
        raise InvalidParameterError(f"n must be positive, got {n}")
    k = d // 3
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    coef = {name: rng.standard_normal(2 * k) for name in ("c_a", "c_y0", "c_y1")}
    for name, value in (coefficients or {}).items():
        if name not in coef:
            raise InvalidParameterError(f"unknown coefficient {name!r}")
        coef[name] = np.asarray(value, dtype=np.float64).reshape(2 * k)
    psi = x[:, : 2 * k]
    phi = x[:, k:]
    noise0 = rng.standard_normal(n)  # independent noise per potential outcome
    noise1 = rng.standard_normal(n)
    u = rng.random(n)

    regenerated = 0
    while True:
        logits = (psi + 1.0) @ coef["c_a"]
        a = (u < 0.5 * (1.0 + np.tanh(0.5 * logits))).astype(np.int64)
        if n < 2 or 0 < a.sum() < n:
            break
        regenerated += 1
        if regenerated > MAX_REGENERATIONS:
            raise DataError("could not draw a dataset with both treatment groups")
        coef["c_a"] = rng.standard_normal(2 * k)
    if regenerated:
        log.warning("seed %s: redrew treatment coefficients %d time(s) for a single-group draw", seed, regenerated)

    scale = 3.0 / (2.0 * d)
    y0 = scale * phi @ coef["c_y0"] + noise0
    y1 = scale * (phi * phi) @ coef["c_y1"] + noise1
    y = np.where(a == 1, y1, y0)
    flags = {"regenerated": regenerated, "coefficients": {k: v.tolist() for k, v in coef.items()}}
    return Dataset(a, x, y, y0, y1, blocks, flags)


def split(data, ratios, seed):
    """Shuffle rows and cut into three parts; sizes use largest remainders."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios <= 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise InvalidParameterError(f"ratios must be three positive fractions summing to 1, got {ratios}")
    exact = ratios * data.n
    sizes = np.floor(exact).astype(np.int64)
    remainder = data.n - sizes.sum()
    for i in np.argsort(-(exact - sizes), kind="stable")[:remainder]:
        sizes[i] += 1
    if np.any(sizes == 0):
        raise InvalidParameterError(f"split sizes {sizes.tolist()} include an empty part")
    perm = np.random.default_rng(seed).permutation(data.n)
    cuts = np.cumsum(sizes)[:-1]
    return tuple(data.subset(np.sort(part)) for part in np.split(perm, cuts))


def _columns(d, with_potential):
    cols = ["a", "y"] + [f"x{j}" for j in range(1, d + 1)]
    return cols + (["y0", "y1"] if with_potential else [])


def write_csv(data, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_columns(data.d, data.has_potential_outcomes))
        for i in range(data.n):
            row = [int(data.a[i]), repr(float(data.y[i]))] + [repr(float(v)) for v in data.x[i]]
            if data.has_potential_outcomes:
                row += [repr(float(data.y0[i])), repr(float(data.y1[i]))]
            writer.writerow(row)


def load_csv(path, blocks="auto"):
    """Read a dataset with columns ``a, y, x1..xd`` and optional ``y0, y1``.

    ``blocks="auto"`` attaches equal-thirds feature blocks when d % 3 == 0;
    pass ``None`` to skip, or an explicit ``{name: (start, stop)}`` mapping.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)
    for required in ("a", "y"):
        if required not in header:
            raise DataError(f"{path}: missing column {required!r}")
    x_cols = sorted((h for h in header if h.startswith("x") and h[1:].isdigit()), key=lambda h: int(h[1:]))
    if not x_cols:
        raise DataError(f"{path}: no feature columns x1..xd")
    expected = [f"x{j}" for j in range(1, len(x_cols) + 1)]
    if x_cols != expected:
        raise DataError(f"{path}: feature columns must be x1..x{len(x_cols)} without gaps")
    has_po = "y0" in header or "y1" in header
    if has_po and not ("y0" in header and "y1" in header):
        raise DataError(f"{path}: y0 and y1 must both be present")
    pos = {h: i for i, h in enumerate(header)}

    def cell(row_no, row, col):
        try:
            return float(row[pos[col]])
        except (ValueError, IndexError):
            raise DataError(f"{path}: row {row_no}, column {col!r}: not a number") from None

    n = len(rows)
    a = np.empty(n, dtype=np.int64)
    y = np.empty(n)
    x = np.empty((n, len(x_cols)))
    y0 = np.empty(n) if has_po else None
    y1 = np.empty(n) if has_po else None
    for i, row in enumerate(rows):
        row_no = i + 2  # 1-based, after the header
        if len(row) != len(header):
            raise DataError(f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}")
        av = cell(row_no, row, "a")
        if av not in (0.0, 1.0):
            raise DataError(f"{path}: row {row_no}, column 'a': treatment {row[pos['a']]!r} is not 0 or 1")
        a[i] = int(av)
        y[i] = cell(row_no, row, "y")
        x[i] = [cell(row_no, row, c) for c in x_cols]
        if has_po:
            y0[i] = cell(row_no, row, "y0")
            y1[i] = cell(row_no, row, "y1")
            if not np.isclose(y[i], y1[i] if a[i] else y0[i], rtol=1e-9, atol=1e-12):
                raise DataError(f"{path}: row {row_no}: y is inconsistent with a*y1 + (1-a)*y0")
    d = len(x_cols)
    if blocks == "auto":
        blocks = thirds(d) if d % 3 == 0 else None
    return Dataset(a, x, y, y0, y1, blocks)


def with_blocks(data, blocks):
    return replace(data, feature_blocks=blocks)
