"""Weighting schemes: raw IPW, truncation, self-normalization, Pareto smoothing.

Every scheme has a numeric form operating on :class:`WeightVector`. The
schemes used inside training also have a Tensor form (suffix ``_t``) so
gradients can flow from the weighted loss back into the propensity inputs.
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateFitError,
    EmptyGroupError,
    InvalidInputError,
    InvalidParameterError,
    PositivityError,
)
from .gpd import GPDParams, fit_pwm_hard, fit_pwm_soft_t, gpd_quantile, gpd_quantile_t, tail_size
from .nnet import autodiff as ad
from .softrank import soft_rank_t

CRUMP_INTERVAL = (0.1, 0.9)


class Scheme(str, enum.Enum):
    RAW = "raw"
    TRUNCATED = "truncated"
    NORMALIZED = "normalized"
    IGNORE = "ignore"
    PARETO_HARD = "pareto_hard"
    PARETO_DIFF = "pareto_diff"
    PARETO_DIFF_NORMALIZED = "pareto_diff_normalized"


@dataclass
class WeightVector:
    values: np.ndarray
    scheme: Scheme = Scheme.RAW
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.scheme = Scheme(self.scheme)

    def __len__(self):
        return len(self.values)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    @property
    def fallback(self):
        return bool(self.diagnostics.get("fallback", False))


def _values(w):
    v = np.asarray(w.values if isinstance(w, WeightVector) else w, dtype=np.float64)
    if v.ndim != 1:
        raise InvalidInputError("weights must be a 1-d sequence")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("weights contain non-finite values")
    return v


def _treatment(a, n):
    a = np.asarray(a)
    if a.shape != (n,) or not np.all((a == 0) | (a == 1)):
        raise InvalidInputError("treatment must be a 0/1 vector matching the weights")
    return a.astype(np.int64)


def marginal_ratio(a, p_treated):
    """P(A = a_i) / P(A = 1 - a_i) per instance."""
    if not 0 < p_treated < 1:
        raise InvalidParameterError(f"p_treated must lie in (0, 1), got {p_treated}")
    a = np.asarray(a)
    return np.where(a == 1, p_treated / (1 - p_treated), (1 - p_treated) / p_treated)


def ipw_weights(pi_a, a, p_treated):
    """Inverse-propensity weights ``1 + ratio_i (1 / pi_a_i - 1)``.

    ``pi_a`` is the probability of the treatment each instance actually got.
    """
    pi_a = np.asarray(pi_a, dtype=np.float64)
    a = _treatment(a, pi_a.size)
    if not np.all((pi_a > 0) & (pi_a < 1)):
        raise PositivityError("propensities must lie strictly inside (0, 1)")
    w = 1.0 + marginal_ratio(a, p_treated) * (1.0 / pi_a - 1.0)
    return WeightVector(w, Scheme.RAW)


def ipw_weights_t(pi_a, a, p_treated):
    return 1.0 + ad.Tensor(marginal_ratio(a, p_treated)) * (1.0 / pi_a - 1.0)


def crump_thresholds(a, p_treated, interval=CRUMP_INTERVAL):
    """Per-instance (L, U): the IPW weight at propensities ``hi`` and ``lo``."""
    lo, hi = interval
    ratio = marginal_ratio(a, p_treated)
    return 1.0 + ratio * (1.0 / hi - 1.0), 1.0 + ratio * (1.0 / lo - 1.0)


def truncate(w, L, U):
    v = _values(w)
    L = np.broadcast_to(np.asarray(L, dtype=np.float64), v.shape)
    U = np.broadcast_to(np.asarray(U, dtype=np.float64), v.shape)
    if np.any(L <= 0) or np.any(L > U):
        raise InvalidParameterError("truncation needs 0 < L <= U")
    return WeightVector(np.clip(v, L, U), Scheme.TRUNCATED)


def _group_means(v, a):
    means = np.empty(2)
    for g in (0, 1):
        members = a == g
        means[g] = v[members].mean() if members.any() else np.nan
    return means


def self_normalize(w, a):
    """Divide each weight by the mean weight of its treatment group."""
    v = _values(w)
    a = _treatment(a, v.size)
    if v.size == 0:
        raise EmptyGroupError("no instances to normalize")
    means = _group_means(v, a)
    if not np.all(means[a] > 0):
        raise EmptyGroupError("a treatment group has zero total weight")
    return WeightVector(v / means[a], Scheme.NORMALIZED)


def self_normalize_t(w, a):
    a = np.asarray(a).astype(np.int64)
    n = a.size
    means = []
    for g in (0, 1):
        members = (a == g).astype(np.float64)
        count = members.sum()
        means.append((w * members).sum() * (1.0 / count) if count else ad.Tensor(1.0))
    denom = ad.where(a == 1, ad.Tensor(np.ones(n)) * means[1], ad.Tensor(np.ones(n)) * means[0])
    return w / denom


def sigmoid_gate(i, j, kappa):
    """Smooth indicator of ``i >= j``: 1 / (1 + exp(-kappa (i - j)))."""
    if not kappa > 0:
        raise InvalidParameterError(f"kappa must be positive, got {kappa}")
    x = kappa * (np.asarray(i, dtype=np.float64) - j)
    out = 0.5 * (1.0 + np.tanh(0.5 * x))
    return float(out) if out.ndim == 0 else out


def pareto_smooth_hard(w, coefficient="survival"):
    """Replace the M largest weights by GPD quantiles at (m - 1/2) / M.

    Degenerate tails (constant weights, M = 1, non-positive scale) return
    the input unchanged with ``diagnostics["fallback"] = True``.
    """
    v = _values(w)
    spec = tail_size(v.size)
    n, M = spec.n, spec.M
    order = np.argsort(v, kind="stable")
    ws = v[order]
    mu_hat = ws[n - M - 1]
    try:
        params = fit_pwm_hard(ws[n - M :], mu_hat, n, M, coefficient)
    except DegenerateFitError as exc:
        return WeightVector(v.copy(), Scheme.PARETO_HARD, {"fallback": True, "reason": str(exc), "M": M})
    out = v.copy()
    probs = (np.arange(1, M + 1) - 0.5) / M
    out[order[n - M :]] = gpd_quantile(probs, params)
    return WeightVector(out, Scheme.PARETO_HARD, {"fallback": False, "gpd": params, "M": M})


def pareto_smooth_diff_t(w, epsilon, kappa, coefficient="survival"):
    """Differentiable Pareto smoothing of a 1-d Tensor of weights.

    Returns ``(smoothed, diagnostics)``. On a degenerate fit the input
    Tensor is returned unchanged and the diagnostics carry the reason.
    """
    n = len(w)
    spec = tail_size(n)
    M = spec.M
    r = soft_rank_t(w, epsilon)
    try:
        mu, sigma, xi, gate = fit_pwm_soft_t(w, r, spec, kappa, coefficient)
    except DegenerateFitError as exc:
        return w, {"fallback": True, "reason": str(exc), "M": M}
    # clamp to [0, 1], then keep the top quantile finite
    prob = ad.clip((r - (n - M) - 0.5) * (1.0 / M), 0.0, 1.0 - 0.5 / M)
    q = gpd_quantile_t(prob, mu, sigma, xi)
    out = gate * q + (1.0 - gate) * w
    if not (np.all(np.isfinite(out.data)) and np.all(out.data > 0)):
        return w, {"fallback": True, "reason": "non-positive or non-finite smoothed weight", "M": M}
    params = GPDParams.fitted(mu.data, sigma.data, xi.data)
    return out, {"fallback": False, "gpd": params, "M": M, "tail_mass": float(gate.data.sum())}


def pareto_smooth_diff(w, epsilon, kappa, coefficient="survival"):
    v = _values(w)
    if not epsilon > 0 or not kappa > 0:
        raise InvalidParameterError("epsilon and kappa must be positive")
    out, diag = pareto_smooth_diff_t(ad.Tensor(v), epsilon, kappa, coefficient)
    return WeightVector(out.data.copy(), Scheme.PARETO_DIFF, diag)


def ignore_mask(propensity, interval=CRUMP_INTERVAL):
    """1 where the treated-propensity lies inside the Crump interval, else 0."""
    lo, hi = interval
    p = np.asarray(propensity, dtype=np.float64)
    return ((p >= lo) & (p <= hi)).astype(np.float64)


def apply_scheme(w_raw, a, scheme, config=None):
    """Dispatch a weighting scheme on raw weights.

    ``config`` keys by scheme: truncated -> ``L``/``U`` or ``p_treated``;
    pareto_diff* -> ``epsilon``, ``kappa``; ignore -> ``propensity``
    (returns the 0/1 mask, not reweighted values).
    """
    config = dict(config or {})
    try:
        scheme = Scheme(scheme)
    except ValueError:
        raise ConfigurationError(f"unknown weighting scheme {scheme!r}") from None
    v = _values(w_raw)
    a = _treatment(a, v.size)

    def need(key):
        if key not in config:
            raise ConfigurationError(f"scheme {scheme.value!r} requires config[{key!r}]")
        return config[key]

    if scheme is Scheme.RAW:
        return WeightVector(v.copy(), Scheme.RAW)
    if scheme is Scheme.TRUNCATED:
        if "L" in config and "U" in config:
            L, U = config["L"], config["U"]
        else:
            L, U = crump_thresholds(a, need("p_treated"))
        return truncate(v, L, U)
    if scheme is Scheme.NORMALIZED:
        return self_normalize(v, a)
    if scheme is Scheme.IGNORE:
        return WeightVector(ignore_mask(need("propensity")), Scheme.IGNORE)
    if scheme is Scheme.PARETO_HARD:
        return pareto_smooth_hard(v)
    smoothed = pareto_smooth_diff(v, need("epsilon"), need("kappa"))
    if scheme is Scheme.PARETO_DIFF:
        return smoothed
    normed = self_normalize(smoothed, a)
    return WeightVector(normed.values, Scheme.PARETO_DIFF_NORMALIZED, smoothed.diagnostics)
