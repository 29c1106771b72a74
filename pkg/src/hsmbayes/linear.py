"""Closed-form conditional posteriors and evidences for y = theta * x.

Four model classes are covered:

* ``m1a`` -- one shared theta with a uniform prior, Gaussian output noise;
* ``m1b`` -- one shared theta with a Gaussian prior N(mu_theta, sigma_theta**2);
* ``m2a`` -- one theta per group, Gaussian population prior, no output noise
  (delta likelihood);
* ``m2b`` -- one theta per group, Gaussian population prior, Gaussian noise.

The evidences are written in terms of the sufficient statistics
``A = x.x``, ``B = x.y`` and the least-squares residual ``R = |y - (B/A) x|^2``.
For a Gaussian prior the exponent then reads
``R / sigma_y^2 + A (B/A - mu)^2 / (A sigma_theta^2 + sigma_y^2)``, a sum of
non-negative terms that avoids the catastrophic cancellation of the
``y.y / sigma_y^2 - mu_tilde^2 / sigma_tilde^2`` form.

The ``*_kernel`` functions broadcast over arrays of hyperparameters and are
what the Monte Carlo model-selection code calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

from .core import (
    LOG_2PI,
    DataSet,
    GroupedData,
    HyperParams,
    UniformSpec,
    _sigma,
)

M2A_RATIO_RTOL = 1e-9


@dataclass(frozen=True)
class ConditionalPosterior:
    """Gaussian posterior N(mu_tilde, sigma_tilde**2) of theta."""

    mu_tilde: float
    sigma_tilde: float

    def __post_init__(self):
        if np.any(np.asarray(self.sigma_tilde) <= 0):
            raise ValueError("sigma_tilde must be positive")


@dataclass(frozen=True)
class LinearStats:
    """Sufficient statistics of a data group for the linear model."""

    n: int
    xx: float
    xy: float
    yy: float
    rss: float

    @property
    def theta_ls(self) -> float:
        return self.xy / self.xx if self.xx > 0 else 0.0


def linear_stats(data: DataSet | GroupedData) -> LinearStats:
    if isinstance(data, GroupedData):
        x, y = data.x, data.y
    else:
        x, y = data.x, data.y
    xx = float(x @ x)
    xy = float(x @ y)
    yy = float(y @ y)
    if xx > 0:
        r = y - (xy / xx) * x
        rss = float(r @ r)
    else:
        rss = yy
    return LinearStats(int(x.size), xx, xy, yy, rss)


def group_stats_arrays(data: GroupedData) -> dict[str, np.ndarray]:
    """Per-group sufficient statistics stacked into arrays."""
    stats = [linear_stats(d) for d in data]
    return {
        "n": np.array([s.n for s in stats], dtype=float),
        "xx": np.array([s.xx for s in stats]),
        "theta_ls": np.array([s.theta_ls for s in stats]),
        "rss": np.array([s.rss for s in stats]),
    }


def log_gaussian_mass(a, b):
    """ln(Phi(b) - Phi(a)) for standardized bounds a < b, stable in the tails."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    lhi = log_ndtr(hi)
    llo = log_ndtr(lo)
    with np.errstate(divide="ignore"):
        out = lhi + np.log1p(-np.exp(llo - lhi))
    return out


# ---------------------------------------------------------------------------
# Vectorised kernels
# ---------------------------------------------------------------------------


def gaussian_prior_log_evidence_kernel(n, xx, theta_ls, rss, mu, s, sigma):
    """ln p(D | mu, s, sigma) for theta ~ N(mu, s^2), broadcasting all inputs."""
    denom = xx * s**2 + sigma**2
    quad = rss / sigma**2 + xx * (theta_ls - mu) ** 2 / denom
    return -0.5 * n * LOG_2PI - (n - 1) * np.log(sigma) - 0.5 * np.log(denom) - 0.5 * quad


def uniform_prior_log_evidence_kernel(n, xx, theta_ls, rss, sigma, lower, upper, truncate=True):
    """ln p(D | sigma) for theta ~ U(lower, upper); requires xx > 0."""
    sigma = np.asarray(sigma, dtype=float)
    out = (
        -math.log(upper - lower)
        - 0.5 * (n - 1) * LOG_2PI
        - (n - 1) * np.log(sigma)
        - 0.5 * math.log(xx)
        - rss / (2.0 * sigma**2)
    )
    if truncate:
        sd = sigma / math.sqrt(xx)
        out = out + log_gaussian_mass((lower - theta_ls) / sd, (upper - theta_ls) / sd)
    return out


def delta_log_evidence_kernel(ratio, log_jacobian, mu, s):
    """ln N(ratio | mu, s^2) + log_jacobian for consistent delta groups."""
    return -0.5 * LOG_2PI - np.log(s) - 0.5 * ((ratio - mu) / s) ** 2 + log_jacobian


# ---------------------------------------------------------------------------
# M1a
# ---------------------------------------------------------------------------


def posterior_theta_m1a(data: DataSet | GroupedData, sigma_y) -> ConditionalPosterior:
    st = linear_stats(data)
    if st.xx <= 0:
        raise ValueError("posterior_theta_m1a: x.x = 0, theta is not identifiable")
    sigma = _sigma(sigma_y)
    return ConditionalPosterior(st.theta_ls, sigma / math.sqrt(st.xx))


def log_cond_evidence_m1a(
    data: DataSet | GroupedData,
    sigma_y,
    theta_prior: UniformSpec = UniformSpec(-1.0, 3.0),
    truncate: bool = True,
) -> float:
    """ln p(D | sigma_y, M1a).

    With ``truncate=True`` the Gaussian factor is restricted to the prior
    support, which makes the result exact for posteriors near the bounds.
    ``truncate=False`` gives the untruncated textbook expression.
    """
    st = linear_stats(data)
    if st.xx <= 0:
        raise ValueError("log_cond_evidence_m1a: x.x = 0, theta is not identifiable")
    out = uniform_prior_log_evidence_kernel(
        st.n, st.xx, st.theta_ls, st.rss, _sigma(sigma_y),
        theta_prior.lower, theta_prior.upper, truncate,
    )
    return float(out)


# ---------------------------------------------------------------------------
# M1b / M2b
# ---------------------------------------------------------------------------


def _gaussian_posterior(st: LinearStats, psi: HyperParams, sigma: float) -> ConditionalPosterior:
    s2 = psi.sigma_theta**2
    denom = st.xx * s2 + sigma**2
    mu_t = (st.xy * s2 + psi.mu_theta * sigma**2) / denom
    sd_t = psi.sigma_theta * sigma / math.sqrt(denom)
    return ConditionalPosterior(mu_t, sd_t)


def posterior_theta_m1b(data: DataSet | GroupedData, psi: HyperParams, sigma_y) -> ConditionalPosterior:
    return _gaussian_posterior(linear_stats(data), psi, _sigma(sigma_y))


def log_cond_evidence_m1b(data: DataSet | GroupedData, psi: HyperParams, sigma_y) -> float:
    """ln p(D | mu_theta, sigma_theta, sigma_y, M1b); 0.0 for no data."""
    if isinstance(data, GroupedData) and data.n_points == 0:
        return 0.0
    st = linear_stats(data)
    return float(
        gaussian_prior_log_evidence_kernel(
            st.n, st.xx, st.theta_ls, st.rss, psi.mu_theta, psi.sigma_theta, _sigma(sigma_y)
        )
    )


def posterior_theta_m2b(group: DataSet, psi: HyperParams, sigma_y) -> ConditionalPosterior:
    return _gaussian_posterior(linear_stats(group), psi, _sigma(sigma_y))


def log_cond_evidence_m2b(group: DataSet | GroupedData, psi: HyperParams, sigma_y) -> float:
    """Per-group evidence ln p(D_i | mu_theta, sigma_theta, sigma_y, M2b).

    Given grouped data, each group draws its own theta and the result is the
    sum over groups (not the pooled M1b evidence).
    """
    if isinstance(group, GroupedData):
        return math.fsum(log_cond_evidence_m1b(g, psi, sigma_y) for g in group)
    return log_cond_evidence_m1b(group, psi, sigma_y)


# ---------------------------------------------------------------------------
# M2a
# ---------------------------------------------------------------------------


def delta_ratio(group: DataSet) -> tuple[float, float, bool]:
    """(y_1/x_1, -sum ln|x_j|, consistent) for a delta-likelihood group."""
    if np.any(group.x == 0):
        raise ValueError(f"group {group.id!r}: delta likelihood needs x != 0")
    ratios = group.y / group.x
    spread = float(ratios.max() - ratios.min())
    consistent = spread <= M2A_RATIO_RTOL * max(1.0, abs(float(ratios.mean())))
    return float(ratios[0]), float(-np.sum(np.log(np.abs(group.x)))), consistent


def log_cond_evidence_m2a(group: DataSet, psi: HyperParams) -> float:
    """ln p(D_i | mu_theta, sigma_theta, M2a); -inf if no single theta fits."""
    ratio, log_jac, consistent = delta_ratio(group)
    if not consistent:
        return -math.inf
    return float(delta_log_evidence_kernel(ratio, log_jac, psi.mu_theta, psi.sigma_theta))


# ---------------------------------------------------------------------------
# Robust prediction
# ---------------------------------------------------------------------------


def log_robust_pred_m1_family(x_hat, y_hat, mu_tilde, sigma_tilde, sigma_y):
    """ln p(y_hat | x_hat) with theta ~ N(mu_tilde, sigma_tilde^2) and noise sigma_y.

    Written as N(y_hat | mu_tilde x_hat, sigma_y^2 + sigma_tilde^2 x_hat^2), which
    equals the 1/x_hat form for x_hat != 0 and is its limit at x_hat = 0.
    """
    var = sigma_y**2 + (sigma_tilde * x_hat) ** 2
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (y_hat - mu_tilde * x_hat) ** 2 / var


def robust_pred_density_m1_family(x_hat, y_hat, cond: ConditionalPosterior, sigma_y):
    out = np.exp(log_robust_pred_m1_family(x_hat, y_hat, cond.mu_tilde, cond.sigma_tilde, _sigma(sigma_y)))
    return float(out) if np.ndim(out) == 0 else out


def robust_pred_density_hs_family(x_hat, y_hat, psi: HyperParams, sigma_y=None):
    """Predictive density of a new point given the hyperparameters only.

    ``sigma_y=None`` selects the noise-free (delta) model, otherwise the
    noisy one. Both are the per-group evidence evaluated on {(x_hat, y_hat)}.
    """
    if sigma_y is None:
        if np.any(np.asarray(x_hat) == 0):
            raise ValueError("noise-free predictive density is singular at x_hat = 0")
        ratio = np.asarray(y_hat, dtype=float) / x_hat
        out = np.exp(delta_log_evidence_kernel(ratio, -np.log(np.abs(x_hat)), psi.mu_theta, psi.sigma_theta))
    else:
        out = np.exp(log_robust_pred_m1_family(x_hat, y_hat, psi.mu_theta, psi.sigma_theta, _sigma(sigma_y)))
    return float(out) if np.ndim(out) == 0 else out
