"""Importance-sampling estimators of the hierarchical likelihood p(D | psi).

Each group is first analysed on its own under a fixed proposal prior
p(theta | M_i), which yields posterior samples and the evidence p(D_i | M_i).
The hierarchical likelihood is then a post-processing step:

    p(D_i | psi) ~= p(D_i | M_i) * mean_j [ p(theta_j | psi) / p(theta_j | M_i) ]

HS2 carries per-group noise samples as well and multiplies in the ratio of
the two noise priors. All sums are evaluated in log space.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import truncnorm

from .core import (
    LOG_2PI,
    BoxPrior,
    DataSet,
    GaussianNoiseLikelihood,
    GaussianSpec,
    HyperParams,
    PowerModel,
    UniformSpec,
    prior_from_dict,
)
from .linear import (
    gaussian_prior_log_evidence_kernel,
    linear_stats,
    log_gaussian_mass,
    uniform_prior_log_evidence_kernel,
)
from .samplers import (
    TmcmcConfig,
    TmcmcResult,
    WeightedSamples,
    ZeroEvidenceError,
    mcs_weighted_posterior,
    tmcmc_run,
)

ARCHIVE_SCHEMA = "hsmbayes.dataset_inference/1"

PriorSpec = GaussianSpec | UniformSpec


class InvalidArchiveError(ValueError):
    """A stored sample lies outside the support of its proposal prior."""


# ---------------------------------------------------------------------------
# Per-group inference archives
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DatasetInference:
    """Posterior samples and evidence of one group under a fixed proposal prior.

    ``sigma_samples`` / ``sigma_proposal_prior`` are present for groups that
    were inferred with their own noise level (HS2).
    """

    group_id: str
    theta_samples: np.ndarray
    log_evidence: float
    proposal_prior: PriorSpec
    sigma_samples: np.ndarray | None = None
    sigma_proposal_prior: PriorSpec | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        theta = np.array(self.theta_samples, dtype=float).reshape(-1)
        if theta.size == 0:
            raise ValueError(f"group {self.group_id!r}: no posterior samples")
        if not math.isfinite(self.log_evidence):
            raise ValueError(f"group {self.group_id!r}: log_evidence must be finite")
        lp = np.asarray(self.proposal_prior.log_pdf(theta), dtype=float)
        if not np.all(np.isfinite(lp)):
            raise InvalidArchiveError(
                f"invalid inference archive for group {self.group_id!r}: "
                "samples outside the proposal-prior support"
            )
        theta.flags.writeable = False
        lp.flags.writeable = False
        object.__setattr__(self, "group_id", str(self.group_id))
        object.__setattr__(self, "theta_samples", theta)
        object.__setattr__(self, "log_evidence", float(self.log_evidence))
        object.__setattr__(self, "_log_proposal", lp)

        if (self.sigma_samples is None) != (self.sigma_proposal_prior is None):
            raise ValueError("sigma_samples and sigma_proposal_prior go together")
        if self.sigma_samples is not None:
            sig = np.array(self.sigma_samples, dtype=float).reshape(-1)
            if sig.shape != theta.shape:
                raise ValueError("sigma_samples must pair with theta_samples")
            lps = np.asarray(self.sigma_proposal_prior.log_pdf(sig), dtype=float)
            if not np.all(np.isfinite(lps)):
                raise InvalidArchiveError(
                    f"invalid inference archive for group {self.group_id!r}: "
                    "sigma samples outside the proposal-prior support"
                )
            sig.flags.writeable = False
            object.__setattr__(self, "sigma_samples", sig)
            object.__setattr__(self, "_log_sigma_proposal", lps)

    @property
    def n_samples(self) -> int:
        return self.theta_samples.size

    @property
    def log_proposal(self) -> np.ndarray:
        return self._log_proposal

    @property
    def has_sigma(self) -> bool:
        return self.sigma_samples is not None

    def to_record(self) -> dict:
        rec = {
            "schema": ARCHIVE_SCHEMA,
            "group_id": self.group_id,
            "log_evidence": self.log_evidence,
            "proposal_prior": self.proposal_prior.to_dict(),
            "theta_samples": self.theta_samples.tolist(),
        }
        if self.has_sigma:
            rec["sigma_proposal_prior"] = self.sigma_proposal_prior.to_dict()
            rec["sigma_samples"] = self.sigma_samples.tolist()
        if self.meta:
            rec["meta"] = self.meta
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "DatasetInference":
        if rec.get("schema") != ARCHIVE_SCHEMA:
            raise ValueError(f"archive schema mismatch: {rec.get('schema')!r} != {ARCHIVE_SCHEMA!r}")
        sig_prior = rec.get("sigma_proposal_prior")
        return cls(
            group_id=rec["group_id"],
            theta_samples=np.asarray(rec["theta_samples"], dtype=float),
            log_evidence=float(rec["log_evidence"]),
            proposal_prior=prior_from_dict(rec["proposal_prior"]),
            sigma_samples=None if sig_prior is None else np.asarray(rec["sigma_samples"], dtype=float),
            sigma_proposal_prior=None if sig_prior is None else prior_from_dict(sig_prior),
            meta=rec.get("meta", {}),
        )


def write_inferences(path: str | Path, inferences: Sequence[DatasetInference]) -> None:
    """One JSON record per line; floats use their exact shortest repr."""
    with open(path, "w", encoding="utf-8") as fh:
        for inf in inferences:
            fh.write(json.dumps(inf.to_record(), sort_keys=True) + "\n")


def append_inference(path: str | Path, inference: DatasetInference) -> None:
    """Append one group without touching the lines already in the archive."""
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(inference.to_record(), sort_keys=True) + "\n")


def read_inferences(path: str | Path) -> list[DatasetInference]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(DatasetInference.from_record(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# Producing archives
# ---------------------------------------------------------------------------


def _basis_group(group: DataSet, power: int) -> DataSet:
    return group if power == 1 else DataSet(group.id, group.x**power, group.y)


def conjugate_inference(
    group: DataSet,
    sigma_y: float,
    proposal_prior: PriorSpec = UniformSpec(-1.0, 3.0),
    n_samples: int = 10_000,
    seed: int | np.random.Generator = 0,
    power: int = 1,
) -> DatasetInference:
    """Exact posterior draws and evidence for y = theta * x**power at known noise.

    A uniform proposal gives a truncated-normal posterior, a Gaussian one a
    normal posterior; both evidences are closed form.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    st = linear_stats(_basis_group(group, power))
    if st.xx <= 0:
        raise ValueError(f"group {group.id!r}: theta is not identifiable (x.x = 0)")
    if isinstance(proposal_prior, UniformSpec):
        loc, scale = st.theta_ls, sigma_y / math.sqrt(st.xx)
        a = (proposal_prior.lower - loc) / scale
        b = (proposal_prior.upper - loc) / scale
        theta = truncnorm.rvs(a, b, loc=loc, scale=scale, size=n_samples, random_state=rng)
        theta = np.clip(theta, proposal_prior.lower, proposal_prior.upper)
        log_ev = uniform_prior_log_evidence_kernel(
            st.n, st.xx, st.theta_ls, st.rss, sigma_y, proposal_prior.lower, proposal_prior.upper
        )
    else:
        m, s = proposal_prior.mean, proposal_prior.std
        denom = st.xx * s**2 + sigma_y**2
        mu_t = (st.xy * s**2 + m * sigma_y**2) / denom
        sd_t = s * sigma_y / math.sqrt(denom)
        theta = rng.normal(mu_t, sd_t, size=n_samples)
        log_ev = gaussian_prior_log_evidence_kernel(st.n, st.xx, st.theta_ls, st.rss, m, s, sigma_y)
    return DatasetInference(
        group.id, theta, float(log_ev), proposal_prior,
        meta={"method": "conjugate", "sigma_y": float(sigma_y), "n_points": len(group)},
    )


def tmcmc_inference(
    group: DataSet,
    proposal_prior: PriorSpec = UniformSpec(-1.0, 3.0),
    sigma_y: float | None = None,
    sigma_proposal_prior: PriorSpec | None = None,
    config: TmcmcConfig = TmcmcConfig(),
    model=None,
) -> DatasetInference:
    """Per-group TMCMC under the proposal prior.

    Pass a fixed ``sigma_y`` for HS1-style archives, or a
    ``sigma_proposal_prior`` to sample (theta, sigma_y) jointly for HS2.
    """
    if (sigma_y is None) == (sigma_proposal_prior is None):
        raise ValueError("give exactly one of sigma_y or sigma_proposal_prior")
    lik = GaussianNoiseLikelihood(group, model if model is not None else PowerModel(1))
    if sigma_y is not None:
        def log_prior(s):
            return proposal_prior.log_pdf(s[:, 0])

        def sampler(rng, n):
            return proposal_prior.sample(rng, n)[:, None]

        def log_lik(s):
            return lik(s[:, 0], sigma_y)
    else:
        def log_prior(s):
            return proposal_prior.log_pdf(s[:, 0]) + sigma_proposal_prior.log_pdf(s[:, 1])

        def sampler(rng, n):
            return np.column_stack([proposal_prior.sample(rng, n), sigma_proposal_prior.sample(rng, n)])

        def log_lik(s):
            return lik(s[:, 0], s[:, 1])

    res = tmcmc_run(log_prior, sampler, log_lik, config)
    meta = {"method": "tmcmc", "stages": res.stage_count, "seed": config.seed, "n_points": len(group)}
    if sigma_y is not None:
        meta["sigma_y"] = float(sigma_y)
        return DatasetInference(group.id, res.samples[:, 0], res.log_evidence, proposal_prior, meta=meta)
    return DatasetInference(
        group.id, res.samples[:, 0], res.log_evidence, proposal_prior,
        sigma_samples=res.samples[:, 1], sigma_proposal_prior=sigma_proposal_prior, meta=meta,
    )


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------


def _log_theta_prior(theta: np.ndarray, psi) -> np.ndarray:
    if isinstance(psi, HyperParams):
        return psi.theta_prior().log_pdf(theta)
    return psi.log_pdf(theta)


def is_group_log_evidence_hs1(inf: DatasetInference, psi: HyperParams | PriorSpec) -> float:
    """ln p(D_i | psi) estimated from the archive of one group.

    ``psi`` is usually a ``HyperParams``; any prior spec is accepted as the
    population prior p(theta | psi), which makes the matched-prior identity
    testable with uniform proposals.
    """
    if isinstance(psi, HyperParams) and not psi.sigma_theta > 0:
        return -math.inf
    log_ratio = _log_theta_prior(inf.theta_samples, psi) - inf.log_proposal
    return float(inf.log_evidence + (logsumexp(log_ratio) - math.log(inf.n_samples)))


def is_group_log_evidence_hs2(
    inf: DatasetInference,
    psi: HyperParams | PriorSpec,
    hyper_sigma_prior: PriorSpec,
) -> float:
    """HS1 estimator with the extra noise-prior ratio inside the sum."""
    if not inf.has_sigma:
        raise ValueError(f"group {inf.group_id!r}: HS2 needs paired sigma samples")
    if isinstance(psi, HyperParams) and not psi.sigma_theta > 0:
        return -math.inf
    log_ratio = _log_theta_prior(inf.theta_samples, psi) - inf.log_proposal
    log_ratio = log_ratio + (hyper_sigma_prior.log_pdf(inf.sigma_samples) - inf._log_sigma_proposal)
    return float(inf.log_evidence + (logsumexp(log_ratio) - math.log(inf.n_samples)))


def group_log_evidence_batch(
    inf: DatasetInference,
    mu_theta,
    sigma_theta,
    hyper_sigma_prior: PriorSpec | None = None,
    chunk: int = 256,
) -> np.ndarray:
    """Vectorised estimator over arrays of (mu_theta, sigma_theta).

    Entries with sigma_theta <= 0 get -inf.
    """
    mu = np.asarray(mu_theta, dtype=float).reshape(-1)
    s = np.asarray(sigma_theta, dtype=float).reshape(-1)
    out = np.full(mu.size, -np.inf)
    good = np.flatnonzero(s > 0)
    theta = inf.theta_samples
    base = -inf.log_proposal
    if hyper_sigma_prior is not None:
        if not inf.has_sigma:
            raise ValueError(f"group {inf.group_id!r}: HS2 needs paired sigma samples")
        base = base + (hyper_sigma_prior.log_pdf(inf.sigma_samples) - inf._log_sigma_proposal)
    log_n = math.log(inf.n_samples)
    for start in range(0, good.size, chunk):
        idx = good[start:start + chunk]
        m = mu[idx, None]
        sd = s[idx, None]
        z = (theta[None, :] - m) / sd
        lp = -0.5 * LOG_2PI - np.log(sd) - 0.5 * z * z
        out[idx] = inf.log_evidence + (logsumexp(lp + base[None, :], axis=1) - log_n)
    return out


def importance_ess(inf: DatasetInference, psi: HyperParams) -> float:
    """Kish effective sample size of the importance weights at psi."""
    log_ratio = psi.theta_prior().log_pdf(inf.theta_samples) - inf.log_proposal
    w = log_ratio - logsumexp(log_ratio)
    return float(math.exp(-logsumexp(2.0 * w)))


@dataclass
class HsmLikelihoodEstimator:
    """Product of per-group importance-sampling estimates.

    ``variant`` is ``"HS1"`` or ``"HS2"``; HS2 needs ``hyper_sigma_prior``,
    the density p(sigma_y,i | M_HS2) shared by all groups.
    """

    inferences: list[DatasetInference]
    variant: str = "HS1"
    hyper_sigma_prior: PriorSpec | None = None
    threads: int = 1

    def __post_init__(self):
        self.inferences = list(self.inferences)
        if self.variant not in ("HS1", "HS2"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "HS2":
            if self.hyper_sigma_prior is None:
                raise ValueError("HS2 needs hyper_sigma_prior")
            missing = [i.group_id for i in self.inferences if not i.has_sigma]
            if missing:
                raise ValueError(f"HS2 needs sigma samples for groups {missing}")
        if not self.inferences:
            raise ValueError("estimator needs at least one group")

    @property
    def group_ids(self) -> list[str]:
        return [i.group_id for i in self.inferences]

    def group_log_evidence(self, inf: DatasetInference, psi) -> float:
        if self.variant == "HS1":
            return is_group_log_evidence_hs1(inf, psi)
        return is_group_log_evidence_hs2(inf, psi, self.hyper_sigma_prior)

    def log_likelihood(self, psi) -> float:
        return hsm_log_likelihood(self, psi)

    def log_likelihood_batch(self, psi_samples: np.ndarray) -> np.ndarray:
        """ln p(D | psi) for an (m, 2) array of (mu_theta, sigma_theta)."""
        psi_samples = np.asarray(psi_samples, dtype=float).reshape(-1, 2)
        sig = self.hyper_sigma_prior if self.variant == "HS2" else None

        def one(inf):
            return group_log_evidence_batch(inf, psi_samples[:, 0], psi_samples[:, 1], sig)

        if self.threads > 1 and len(self.inferences) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                parts = list(pool.map(one, self.inferences))
        else:
            parts = [one(inf) for inf in self.inferences]
        return np.sum(parts, axis=0)


def hsm_log_likelihood(est: HsmLikelihoodEstimator, psi) -> float:
    """Sum of the per-group log estimates."""
    total = 0.0
    for inf in est.inferences:
        total += est.group_log_evidence(inf, psi)
    return total


DEFAULT_HYPER_PRIOR = BoxPrior.from_pairs(mu_theta=(-1.0, 3.0), sigma_theta=(0.001, 1.0))


def hsm_hyperposterior(
    est: HsmLikelihoodEstimator,
    hyper_prior: BoxPrior = DEFAULT_HYPER_PRIOR,
    config: TmcmcConfig = TmcmcConfig(),
) -> TmcmcResult:
    """TMCMC over (mu_theta, sigma_theta) driven by the IS likelihood."""
    if hyper_prior.names != ("mu_theta", "sigma_theta"):
        raise ValueError("hyper_prior must be over (mu_theta, sigma_theta)")
    return tmcmc_run(hyper_prior.log_pdf, hyper_prior.sample, est.log_likelihood_batch, config)


def hsm_hyperposterior_mcs(
    est: HsmLikelihoodEstimator,
    hyper_prior: BoxPrior = DEFAULT_HYPER_PRIOR,
    n_samples: int = 10_000,
    seed: int = 0,
) -> WeightedSamples:
    """Prior-weighted Monte Carlo alternative to ``hsm_hyperposterior``."""
    return mcs_weighted_posterior(hyper_prior.sample, est.log_likelihood_batch, n_samples, seed)


def hsm_add_groups(previous: WeightedSamples, est_new: HsmLikelihoodEstimator) -> WeightedSamples:
    """Fold newly arrived groups into an existing hyperposterior.

    Since p(psi | D_old, D_new) is proportional to p(psi | D_old) p(D_new | psi),
    the stored samples are reweighted by the new groups' likelihood alone,
    and the evidence gains the factor E[p(D_new | psi) | D_old]. Watch the
    ESS of the result: a new group that moves the posterior a lot
    deserves a fresh run.
    """
    log_l = est_new.log_likelihood_batch(previous.samples)
    log_w = previous.log_weights + log_l
    if not np.any(np.isfinite(log_w)):
        raise ZeroEvidenceError("new groups have zero likelihood at every stored hyperparameter sample")
    total = logsumexp(log_w)
    return WeightedSamples(previous.samples, log_w - total, float(previous.log_evidence + total))


# ---------------------------------------------------------------------------
# Choosing the proposal prior
# ---------------------------------------------------------------------------


def _kl_gaussian_to_uniform(mu, s, lower, upper):
    """KL(N(mu, s^2) restricted to [lower, upper] || U(lower, upper)).

    This is ln(width) minus the entropy of the truncated normal.
    """
    a = (lower - mu) / s
    b = (upper - mu) / s
    log_z = log_gaussian_mass(a, b)
    z = np.exp(log_z)
    pdf_a = np.exp(-0.5 * a * a - 0.5 * LOG_2PI)
    pdf_b = np.exp(-0.5 * b * b - 0.5 * LOG_2PI)
    entropy = 0.5 * (LOG_2PI + 1.0) + np.log(s) + log_z + (a * pdf_a - b * pdf_b) / (2.0 * z)
    return math.log(upper - lower) - entropy


def proposal_objective(
    candidate: PriorSpec,
    hyper_prior: BoxPrior | HyperParams = DEFAULT_HYPER_PRIOR,
    n_mc: int = 100_000,
    seed: int = 0,
) -> float:
    """Prior-averaged KL divergence from p(theta | psi) to a candidate proposal.

    Gaussian candidates use the closed-form KL. Uniform candidates cannot
    cover the Gaussian tails, so the population prior is restricted to the
    candidate support before taking the divergence.
    """
    if isinstance(hyper_prior, HyperParams):
        mu = np.array([hyper_prior.mu_theta])
        s = np.array([hyper_prior.sigma_theta])
    else:
        draws = hyper_prior.sample(np.random.default_rng(seed), n_mc)
        mu = draws[:, hyper_prior.index("mu_theta")]
        s = draws[:, hyper_prior.index("sigma_theta")]
    if isinstance(candidate, GaussianSpec):
        q = candidate
        kl = np.log(q.std / s) + (s**2 + (mu - q.mean) ** 2) / (2.0 * q.std**2) - 0.5
    else:
        kl = _kl_gaussian_to_uniform(mu, s, candidate.lower, candidate.upper)
    return float(np.mean(kl))


__all__ = [
    "ARCHIVE_SCHEMA",
    "DEFAULT_HYPER_PRIOR",
    "DatasetInference",
    "HsmLikelihoodEstimator",
    "InvalidArchiveError",
    "append_inference",
    "conjugate_inference",
    "group_log_evidence_batch",
    "hsm_add_groups",
    "hsm_hyperposterior",
    "hsm_hyperposterior_mcs",
    "hsm_log_likelihood",
    "importance_ess",
    "is_group_log_evidence_hs1",
    "is_group_log_evidence_hs2",
    "proposal_objective",
    "read_inferences",
    "tmcmc_inference",
    "write_inferences",
]
