"""Generalized Pareto distribution primitives and PWM tail fitting.

Two fitting routes share one set of formulas:

* :func:`fit_pwm_hard` takes the sorted top-M weights.
* :func:`fit_pwm_soft_t` takes all weights with their soft ranks; sigmoid
  gates select the tail and the fit is differentiable in the weights.

The PWM moments use the empirical survival fraction ``(n - i) / M`` as the
weight of the i-th order statistic. ``coefficient="raw"`` drops the ``/ M``
and reproduces the unnormalized form, which only yields a valid fit for
very short tails.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFitError, DomainError, InvalidInputError, InvalidParameterError
from .nnet import autodiff as ad

XI_ZERO_TOL = 1e-12
DEGENERATE_TOL = 1e-12
RELIABILITY_THRESHOLD = 0.7
MIN_SOFT_TAIL_MASS = 0.5


@dataclass(frozen=True)
class GPDParams:
    mu: float
    sigma: float
    xi: float
    reliable: bool = True

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidParameterError(f"GPD scale must be positive, got {self.sigma}")

    @classmethod
    def fitted(cls, mu, sigma, xi, threshold=RELIABILITY_THRESHOLD):
        return cls(float(mu), float(sigma), float(xi), bool(xi <= threshold))


@dataclass(frozen=True)
class TailSpec:
    n: int
    M: int

    @property
    def threshold(self):
        """Rank cut between body and tail: ranks above it are replaced."""
        return self.n - self.M + 0.5


def tail_size(n):
    """Number of tail weights replaced for a sample of size n (at least 1)."""
    n = int(n)
    if n < 3:
        raise InvalidParameterError(f"need n >= 3 for a tail, got {n}")
    # isqrt(9n) == floor(3 sqrt(n)) without float rounding
    M = max(1, min(n // 5, math.isqrt(9 * n)))
    return TailSpec(n, M)


def gpd_cdf(w, p):
    w = float(w)
    z = (w - p.mu) / p.sigma
    if z < 0:
        raise DomainError(f"{w} is below the GPD location {p.mu}")
    if abs(p.xi) < XI_ZERO_TOL:
        return float(-np.expm1(-z))
    if p.xi < 0 and w > p.mu - p.sigma / p.xi:
        raise DomainError(f"{w} exceeds the GPD upper endpoint {p.mu - p.sigma / p.xi}")
    return float(-np.expm1(-np.log1p(p.xi * z) / p.xi))


def gpd_quantile(prob, params):
    """Inverse CDF; accepts a scalar or an array of probabilities in [0, 1)."""
    q = np.asarray(prob, dtype=np.float64)
    if np.any(q < 0) or np.any(q >= 1) or not np.all(np.isfinite(q)):
        raise DomainError("quantile probabilities must lie in [0, 1)")
    if abs(params.xi) < XI_ZERO_TOL:
        out = params.mu - params.sigma * np.log1p(-q)
    else:
        out = params.mu + params.sigma / params.xi * np.expm1(-params.xi * np.log1p(-q))
    return float(out) if out.ndim == 0 else out


def _pwm_shape_scale(alpha0, alpha1):
    denom = alpha0 - 2.0 * alpha1
    if alpha0 <= DEGENERATE_TOL or denom <= DEGENERATE_TOL:
        raise DegenerateFitError(f"degenerate PWM moments alpha0={alpha0:.3g}, alpha1={alpha1:.3g}")
    sigma = 2.0 * alpha0 * alpha1 / denom
    if not sigma > 0:
        raise DegenerateFitError(f"non-positive GPD scale {sigma:.3g}")
    return sigma, 2.0 - alpha0 / denom


def _coefficients(M, coefficient):
    raw = np.arange(M - 1, -1, -1, dtype=np.float64)  # n - i for i = n-M+1..n
    if coefficient == "survival":
        return raw / M
    if coefficient == "raw":
        return raw
    raise InvalidParameterError(f"unknown PWM coefficient {coefficient!r}")


def pwm_moments(w_sorted_tail, mu_hat, coefficient="survival"):
    exc = np.asarray(w_sorted_tail, dtype=np.float64) - mu_hat
    M = exc.size
    return float(exc.mean()), float((_coefficients(M, coefficient) * exc).mean())


def fit_pwm_hard(w_sorted_tail, mu_hat, n, M, coefficient="survival", threshold=RELIABILITY_THRESHOLD):
    """Fit GPD scale and shape to the M largest weights (ascending) above ``mu_hat``."""
    tail = np.asarray(w_sorted_tail, dtype=np.float64)
    if tail.ndim != 1 or tail.size != M or not 0 < M < n:
        raise InvalidInputError(f"tail must hold exactly M={M} values with 0 < M < n={n}")
    if not np.all(np.isfinite(tail)) or not math.isfinite(mu_hat):
        raise InvalidInputError("tail contains non-finite values")
    if np.any(np.diff(tail) < 0):
        raise InvalidInputError("tail must be sorted ascending")
    if tail[0] < mu_hat:
        raise InvalidInputError("tail values must not be below mu_hat")
    alpha0, alpha1 = pwm_moments(tail, mu_hat, coefficient)
    sigma, xi = _pwm_shape_scale(alpha0, alpha1)
    return GPDParams.fitted(mu_hat, sigma, xi, threshold)


def select_location(r, spec):
    """Index whose soft rank is largest among those below the tail cut.

    Falls back to the smallest soft rank when every rank is in the tail.
    """
    r = np.asarray(r, dtype=np.float64)
    below = r < spec.threshold
    if not below.any():
        return int(np.argmin(r))
    candidates = np.flatnonzero(below)
    return int(candidates[np.argmax(r[candidates])])


def sigmoid_gate_t(r, cut, kappa):
    return ad.sigmoid((r - cut) * kappa)


def fit_pwm_soft_t(w, r, spec, kappa, coefficient="survival"):
    """Differentiable PWM fit from weights ``w`` and their soft ranks ``r`` (Tensors).

    Returns ``(mu, sigma, xi, gate)`` as Tensors. The location index is chosen
    on the current values and held fixed, so gradients reach ``mu`` only
    through the selected weight.
    """
    if not kappa > 0:
        raise InvalidParameterError(f"kappa must be positive, got {kappa}")
    n, M = spec.n, spec.M
    gate = sigmoid_gate_t(r, spec.threshold, kappa)
    mass = gate.sum()
    if mass.data < MIN_SOFT_TAIL_MASS:
        raise DegenerateFitError(f"soft tail mass {float(mass.data):.3g} is below {MIN_SOFT_TAIL_MASS}")
    mu = w[select_location(r.data, spec)]
    exc = w - mu
    scale = 1.0 / M if coefficient == "survival" else 1.0
    if coefficient not in ("survival", "raw"):
        raise InvalidParameterError(f"unknown PWM coefficient {coefficient!r}")
    alpha0 = (gate * exc).sum() / mass
    alpha1 = (gate * ((n - r) * scale) * exc).sum() / mass
    denom = alpha0 - 2.0 * alpha1
    if alpha0.data <= DEGENERATE_TOL or denom.data <= DEGENERATE_TOL:
        raise DegenerateFitError(
            f"degenerate soft PWM moments alpha0={float(alpha0.data):.3g}, alpha1={float(alpha1.data):.3g}"
        )
    sigma = 2.0 * alpha0 * alpha1 / denom
    if not sigma.data > 0:
        raise DegenerateFitError(f"non-positive GPD scale {float(sigma.data):.3g}")
    xi = 2.0 - alpha0 / denom
    return mu, sigma, xi, gate


def fit_pwm_soft(w, r, spec, kappa, coefficient="survival", threshold=RELIABILITY_THRESHOLD):
    """Numeric front end of :func:`fit_pwm_soft_t`; ``r`` is a soft rank of ``w``."""
    w_t = ad.Tensor(np.asarray(w, dtype=np.float64))
    r_t = ad.Tensor(np.asarray(r, dtype=np.float64))
    mu, sigma, xi, _ = fit_pwm_soft_t(w_t, r_t, spec, kappa, coefficient)
    return GPDParams.fitted(mu.data, sigma.data, xi.data, threshold)


def gpd_quantile_t(prob, mu, sigma, xi):
    """Quantile function over Tensors; ``prob`` must stay below 1."""
    tail = ad.log(1.0 - prob) * -1.0  # -log(1 - p) >= 0
    if abs(float(xi.data)) < XI_ZERO_TOL:
        return mu + sigma * tail
    return mu + sigma / xi * ad.expm1(xi * tail)
