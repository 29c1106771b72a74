"""Weighted Monte Carlo posteriors and a transitional MCMC sampler.

Samplers work on batches: ``prior_sampler(rng, n)`` returns an ``(n, d)``
array and ``log_likelihood(samples)`` / ``log_prior(samples)`` map an
``(n, d)`` array to ``(n,)`` log values. Vectorising over the population is
what makes the within-stage evaluations parallel; results depend only on the
seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import logsumexp

logger = logging.getLogger(__name__)


class ZeroEvidenceError(RuntimeError):
    """Every sample has zero likelihood."""


class TmcmcError(RuntimeError):
    """TMCMC could not reach the posterior within ``max_stages``."""


@dataclass
class WeightedSamples:
    """Samples with normalised log weights and a log-evidence estimate."""

    samples: np.ndarray
    log_weights: np.ndarray
    log_evidence: float
    log_likelihoods: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim == 1:
            self.samples = self.samples[:, None]
        self.log_weights = np.asarray(self.log_weights, dtype=float)
        if self.samples.shape[0] != self.log_weights.size or self.log_weights.size < 1:
            raise ValueError("samples and log_weights must have equal, non-zero length")

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def ess(self) -> float:
        """Kish effective sample size."""
        return float(math.exp(-logsumexp(2.0 * self.log_weights)))

    def __len__(self):
        return self.log_weights.size


def normalize_log_weights(log_w: np.ndarray) -> np.ndarray:
    log_w = np.asarray(log_w, dtype=float)
    return log_w - logsumexp(log_w)


def mcs_weighted_posterior(
    prior_sampler: Callable[[np.random.Generator, int], np.ndarray],
    log_likelihood: Callable[[np.ndarray], np.ndarray],
    n_samples: int,
    seed: int | np.random.Generator,
) -> WeightedSamples:
    """Prior draws weighted by their likelihood.

    The evidence estimate is the mean likelihood over the prior draws.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    samples = np.asarray(prior_sampler(rng, n_samples), dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    log_l = np.asarray(log_likelihood(samples), dtype=float).reshape(-1)
    if np.any(np.isnan(log_l)):
        raise ValueError("log_likelihood returned NaN")
    if not np.any(np.isfinite(log_l)):
        raise ZeroEvidenceError("zero evidence estimate: every likelihood is zero")
    total = logsumexp(log_l)
    return WeightedSamples(
        samples=samples,
        log_weights=log_l - total,
        log_evidence=float(total - math.log(n_samples)),
        log_likelihoods=log_l,
    )


@dataclass(frozen=True)
class Moments:
    mean: float
    std: float


def posterior_stats(
    ws: WeightedSamples,
    extractors: Mapping[str, Callable[[np.ndarray], object]],
) -> dict[str, Moments]:
    """Weighted posterior mean and standard deviation of derived quantities.

    Each extractor maps the ``(n, d)`` sample array either to an ``(n,)``
    array of point values, or to a ``(means, stds)`` pair describing one
    Gaussian component per sample. In the second case the result is the
    moment of the Gaussian mixture: ``E = sum w m`` and
    ``Var = sum w (s^2 + m^2) - E^2``.
    """
    w = ws.weights
    out = {}
    for name, fn in extractors.items():
        value = fn(ws.samples)
        if isinstance(value, tuple):
            means, stds = (np.broadcast_to(np.asarray(v, dtype=float), w.shape) for v in value)
            mean = float(w @ means)
            second = float(w @ (stds**2 + means**2))
        else:
            g = np.broadcast_to(np.asarray(value, dtype=float), w.shape)
            mean = float(w @ g)
            second = float(w @ g**2)
        out[name] = Moments(mean, math.sqrt(max(second - mean**2, 0.0)))
    return out


def column(i: int) -> Callable[[np.ndarray], np.ndarray]:
    return lambda s: s[:, i]


# ---------------------------------------------------------------------------
# TMCMC
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TmcmcConfig:
    population_size: int = 1000
    target_stage_cov: float = 1.0
    proposal_scale: float = 0.04
    max_stages: int = 60
    seed: int = 0
    chain_steps: int = 1

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if not self.target_stage_cov > 0:
            raise ValueError("target_stage_cov must be positive")
        if not self.proposal_scale > 0:
            raise ValueError("proposal_scale must be positive")
        if self.max_stages < 1 or self.chain_steps < 1:
            raise ValueError("max_stages and chain_steps must be >= 1")


@dataclass
class TmcmcResult:
    samples: np.ndarray
    log_evidence: float
    stage_count: int
    acceptance_rates: list[float] = field(default_factory=list)
    exponents: list[float] = field(default_factory=list)
    log_likelihoods: np.ndarray | None = None

    def as_weighted(self) -> WeightedSamples:
        n = self.samples.shape[0]
        return WeightedSamples(self.samples, np.full(n, -math.log(n)), self.log_evidence, self.log_likelihoods)


def _weight_cov(log_l: np.ndarray, dp: float) -> float:
    finite = np.isfinite(log_l)
    w = np.zeros_like(log_l)
    w[finite] = np.exp(dp * (log_l[finite] - log_l[finite].max()))
    m = w.mean()
    return float(w.std() / m) if m > 0 else math.inf


def next_exponent_increment(log_l: np.ndarray, p: float, target: float, tol: float = 1e-12) -> float:
    """Largest step dp <= 1 - p whose stage weights have CoV <= target."""
    remaining = 1.0 - p
    if _weight_cov(log_l, remaining) <= target:
        return remaining
    lo, hi = 0.0, remaining
    while hi - lo > tol * max(1.0, remaining):
        mid = 0.5 * (lo + hi)
        if _weight_cov(log_l, mid) <= target:
            lo = mid
        else:
            hi = mid
    # guarantee progress even when -inf likelihoods dominate the CoV
    return max(lo, hi * 1e-3, 1e-14)


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn proportionally to ``weights`` with one shared uniform offset."""
    n = weights.size
    positions = (rng.uniform() + np.arange(n)) / n
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, positions, side="right").clip(max=n - 1)


def tmcmc_run(
    log_prior: Callable[[np.ndarray], np.ndarray],
    prior_sampler: Callable[[np.random.Generator, int], np.ndarray],
    log_likelihood: Callable[[np.ndarray], np.ndarray],
    config: TmcmcConfig = TmcmcConfig(),
) -> TmcmcResult:
    """Transitional MCMC from the prior to the posterior.

    Each stage raises the likelihood exponent by the largest step keeping the
    weight coefficient of variation at ``target_stage_cov``, accumulates the
    log mean weight into the evidence, resamples, and moves every sample with
    ``chain_steps`` Metropolis random-walk steps whose covariance is
    ``proposal_scale`` times the weighted sample covariance.
    """
    rng = np.random.default_rng(config.seed)
    n = config.population_size
    theta = np.asarray(prior_sampler(rng, n), dtype=float)
    if theta.ndim == 1:
        theta = theta[:, None]
    d = theta.shape[1]
    log_l = np.asarray(log_likelihood(theta), dtype=float).reshape(-1)
    log_p = np.asarray(log_prior(theta), dtype=float).reshape(-1)
    if not np.any(np.isfinite(log_l)):
        raise ZeroEvidenceError("every prior sample has zero likelihood")

    p = 0.0
    log_ev = 0.0
    exponents = [0.0]
    acc_rates = []
    stage = 0
    while p < 1.0:
        if stage >= config.max_stages:
            raise TmcmcError(
                f"max_stages={config.max_stages} reached at exponent p={p:.3g}; "
                f"acceptance rates {np.round(acc_rates[-5:], 3).tolist()}"
            )
        dp = next_exponent_increment(log_l, p, config.target_stage_cov)
        p_new = min(1.0, p + dp)
        dp = p_new - p
        with np.errstate(invalid="ignore"):
            lw = np.where(np.isfinite(log_l), dp * log_l, -np.inf)
        lse = logsumexp(lw)
        log_ev += lse - math.log(n)
        w = np.exp(lw - lse)

        mean = w @ theta
        centered = theta - mean
        cov = config.proposal_scale * (centered.T * w) @ centered
        cov = 0.5 * (cov + cov.T) + 1e-300 * np.eye(d)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            scale = np.sqrt(np.maximum(np.diag(cov), 1e-300))
            chol = np.diag(scale)

        idx = systematic_resample(w, rng)
        theta, log_l, log_p = theta[idx], log_l[idx], log_p[idx]

        accepted = 0
        for _ in range(config.chain_steps):
            prop = theta + rng.standard_normal((n, d)) @ chol.T
            lp_prop = np.asarray(log_prior(prop), dtype=float).reshape(-1)
            ll_prop = np.full(n, -np.inf)
            ok = np.isfinite(lp_prop)
            if np.any(ok):
                ll_prop[ok] = np.asarray(log_likelihood(prop[ok]), dtype=float).reshape(-1)
            with np.errstate(invalid="ignore"):
                cur = log_p + np.where(np.isfinite(log_l), p_new * log_l, -np.inf)
                new = lp_prop + np.where(np.isfinite(ll_prop), p_new * ll_prop, -np.inf)
            log_u = np.log(rng.uniform(size=n))
            move = np.isfinite(new) & (log_u < new - cur)
            theta = np.where(move[:, None], prop, theta)
            log_l = np.where(move, ll_prop, log_l)
            log_p = np.where(move, lp_prop, log_p)
            accepted += int(move.sum())
        acc_rates.append(accepted / (n * config.chain_steps))

        p = p_new
        exponents.append(p)
        stage += 1
        logger.debug("tmcmc stage %d: p=%.4g acc=%.3f", stage, p, acc_rates[-1])

    if not math.isfinite(log_ev):
        raise TmcmcError("non-finite evidence estimate")
    return TmcmcResult(theta, float(log_ev), stage, acc_rates, exponents, log_l)
