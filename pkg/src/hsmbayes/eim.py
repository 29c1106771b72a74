"""Empirical interpolation of a Gaussian-noise likelihood across noise levels.

For one group the likelihood p(D_i | theta, sigma_y) is approximated as

    sum_l alpha_l(sigma_y) g_l(theta),   g_l(theta) = p(D_i | theta, sigma_l)

with the coefficients fixed by exactness at L anchor points theta_n. Every
basis carries its own posterior archive (samples drawn at sigma_l plus the
evidence), so the common-noise hierarchical likelihood reduces to a signed
combination of importance-sampling estimates.

The likelihood depends on theta only through the residual sum of squares,

    ln p = -N/2 ln(2 pi) - N ln(sigma) - SSE(theta) / (2 sigma^2),

so a trained model stores anchor SSEs and the point count and never needs
the raw data again. Every quantity is kept in log space; linear values only
appear after shifting by a per-column maximum, which is the column scaling
that keeps the anchor matrix well conditioned.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import (
    LOG_2PI,
    BoxPrior,
    DataSet,
    ForwardModel,
    GaussianNoiseLikelihood,
    HyperParams,
    PowerModel,
    UniformSpec,
    prior_from_dict,
)
from .importance import DatasetInference, conjugate_inference, group_log_evidence_batch, tmcmc_inference
from .samplers import TmcmcConfig, TmcmcResult, tmcmc_run

logger = logging.getLogger(__name__)

EIM_SCHEMA = "hsmbayes.eim_model/1"
COND_LIMIT = 1e13
EXACT_TOL = 1e-12

BasisSampler = Callable[[DataSet, float, np.random.Generator], DatasetInference]


class EimDegenerateError(np.linalg.LinAlgError):
    """The scaled anchor matrix is numerically singular."""


# ---------------------------------------------------------------------------
# Basis samplers
# ---------------------------------------------------------------------------


def conjugate_basis_sampler(
    proposal_prior=UniformSpec(-1.0, 3.0), n_samples: int = 10_000, power: int = 1
) -> BasisSampler:
    """Exact posterior draws for y = theta * x**power at a fixed noise level."""

    def sample(group: DataSet, sigma_y: float, rng: np.random.Generator) -> DatasetInference:
        return conjugate_inference(group, sigma_y, proposal_prior, n_samples, rng, power)

    return sample


def tmcmc_basis_sampler(
    proposal_prior=UniformSpec(-1.0, 3.0),
    config: TmcmcConfig = TmcmcConfig(),
    model: ForwardModel | None = None,
) -> BasisSampler:
    """TMCMC posterior draws for an arbitrary scalar-parameter forward model."""

    def sample(group: DataSet, sigma_y: float, rng: np.random.Generator) -> DatasetInference:
        cfg = replace(config, seed=int(rng.integers(2**63)))
        return tmcmc_inference(group, proposal_prior, sigma_y=sigma_y, config=cfg, model=model)

    return sample


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EimBasis:
    """One basis: its noise level, anchor, and posterior archive at that noise."""

    sigma_y: float
    theta_anchor: float
    anchor_sse: float
    archive: DatasetInference

    @property
    def log_evidence(self) -> float:
        return self.archive.log_evidence

    @property
    def posterior_samples(self) -> np.ndarray:
        return self.archive.theta_samples


@dataclass(frozen=True)
class EimCoefficients:
    """alpha_l = exp(log_c_p - log_c_g[l]) * alpha_hat[l]."""

    alpha_hat: np.ndarray
    log_c_p: float
    log_c_g: np.ndarray

    @property
    def alpha(self) -> np.ndarray:
        return self.alpha_hat * np.exp(self.log_c_p - self.log_c_g)


@dataclass
class EimModel:
    """Trained (or partially trained) interpolant for one group."""

    group_id: str
    n_points: int
    sigma_grid: np.ndarray
    bases: list[EimBasis] = field(default_factory=list)
    training_theta: np.ndarray = field(default_factory=lambda: np.empty(0))
    training_sse: np.ndarray = field(default_factory=lambda: np.empty(0))
    epsilon_lim: float = 1e-5
    achieved_error: float = math.inf
    converged: bool = False
    error_trace: list[tuple[int, float]] = field(default_factory=list)
    status: str = "initial"

    @property
    def n_bases(self) -> int:
        return len(self.bases)

    @property
    def basis_sigmas(self) -> np.ndarray:
        return np.array([b.sigma_y for b in self.bases])

    @property
    def anchors(self) -> np.ndarray:
        return np.array([b.theta_anchor for b in self.bases])

    @property
    def anchor_sse(self) -> np.ndarray:
        return np.array([b.anchor_sse for b in self.bases])

    def log_lik_from_sse(self, sse, sigma_y):
        sse = np.asarray(sse, dtype=float)
        sigma_y = np.asarray(sigma_y, dtype=float)
        n = self.n_points
        return -0.5 * n * LOG_2PI - n * np.log(sigma_y) - sse / (2.0 * sigma_y**2)

    @property
    def log_g_matrix(self) -> np.ndarray:
        """ln g_{nl} = ln p(D_i | theta_n, sigma_l); rows anchors, columns bases."""
        return self.log_lik_from_sse(self.anchor_sse[:, None], self.basis_sigmas[None, :])

    @property
    def g_matrix(self) -> np.ndarray:
        return np.exp(self.log_g_matrix)


def _scaled_anchor_matrix(model: EimModel) -> tuple[np.ndarray, np.ndarray]:
    log_g = model.log_g_matrix
    log_c_g = log_g.max(axis=0)
    return np.exp(log_g - log_c_g), log_c_g


def _check_conditioning(g_hat: np.ndarray) -> None:
    cond = np.linalg.cond(g_hat)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise EimDegenerateError(f"EIM basis degenerate: scaled condition number {cond:.3g}")


def _solve_scaled(model: EimModel, sigma_y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(alpha_hat (L, m), log_c_p (m,), log_c_g (L,)) for an array of sigma_y."""
    if model.n_bases == 0:
        raise ValueError(f"EIM model for group {model.group_id!r} has no bases")
    sig = np.asarray(sigma_y, dtype=float).reshape(-1)
    g_hat, log_c_g = _scaled_anchor_matrix(model)
    _check_conditioning(g_hat)
    log_p = model.log_lik_from_sse(model.anchor_sse[:, None], sig[None, :])
    log_c_p = log_p.max(axis=0)
    p_hat = np.exp(log_p - log_c_p)
    alpha_hat = np.linalg.solve(g_hat, p_hat)
    return alpha_hat, log_c_p, log_c_g


def solve_coefficients(model: EimModel, sigma_y) -> EimCoefficients:
    """Column-scaled solve of [g_nl] alpha = P at one noise level."""
    sigma = float(getattr(sigma_y, "sigma_y", sigma_y))
    alpha_hat, log_c_p, log_c_g = _solve_scaled(model, sigma)
    return EimCoefficients(alpha_hat[:, 0], float(log_c_p[0]), log_c_g)


def _log_interpolant(model: EimModel, log_g_rows: np.ndarray, sigma: np.ndarray):
    """Signed log of sum_l alpha_l(sigma) g_l(theta) for rows of ln g_l(theta).

    Returns (log_abs, sign) with shape (n_theta, n_sigma).
    """
    alpha_hat, log_c_p, log_c_g = _solve_scaled(model, sigma)
    x = log_g_rows - log_c_g[None, :]
    shift = x.max(axis=1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    total = np.exp(x - shift) @ alpha_hat
    with np.errstate(divide="ignore"):
        log_abs = np.log(np.abs(total)) + shift + log_c_p[None, :]
    return log_abs, np.sign(total)


def _normalized_error(model: EimModel, sse: np.ndarray, sigma: np.ndarray, chunk: int = 2048):
    """|p - interpolant| / max_theta p for each sigma column, over the given thetas.

    Returns (per-sigma max error, per-sigma argmax theta index).
    """
    log_p_all = model.log_lik_from_sse(sse[:, None], sigma[None, :])
    col_max = log_p_all.max(axis=0)
    best = np.full(sigma.size, -1.0)
    arg = np.zeros(sigma.size, dtype=int)
    log_g_basis = None
    for start in range(0, sse.size, chunk):
        s = sse[start:start + chunk]
        log_p = log_p_all[start:start + chunk]
        p_hat = np.exp(log_p - col_max)
        if model.n_bases:
            log_g_basis = model.log_lik_from_sse(s[:, None], model.basis_sigmas[None, :])
            log_abs, sign = _log_interpolant(model, log_g_basis, sigma)
            approx = sign * np.exp(np.minimum(log_abs - col_max, 700.0))
        else:
            approx = 0.0
        err = np.abs(p_hat - approx)
        idx = err.argmax(axis=0)
        val = err[idx, np.arange(sigma.size)]
        better = val > best
        best = np.where(better, val, best)
        arg = np.where(better, idx + start, arg)
    return best, arg


def eim_error(model: EimModel, theta, sigma_y, likelihood: GaussianNoiseLikelihood | None = None):
    """Absolute interpolation error e_L(theta, sigma_y) in likelihood units.

    ``likelihood`` supplies SSE(theta) for thetas outside the training set;
    without it ``theta`` is interpreted as an SSE-carrying training value.
    """
    sigma = float(getattr(sigma_y, "sigma_y", sigma_y))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if likelihood is None:
        sse = _lookup_sse(model, theta)
    else:
        sse = np.atleast_1d(likelihood.sse(theta))
    log_p = model.log_lik_from_sse(sse, sigma)
    log_g = model.log_lik_from_sse(sse[:, None], model.basis_sigmas[None, :])
    log_abs, sign = _log_interpolant(model, log_g, np.array([sigma]))
    out = np.abs(np.exp(log_p) - sign[:, 0] * np.exp(log_abs[:, 0]))
    return float(out[0]) if out.size == 1 else out


def _lookup_sse(model: EimModel, theta: np.ndarray) -> np.ndarray:
    pool_theta = np.concatenate([model.anchors, model.training_theta])
    pool_sse = np.concatenate([model.anchor_sse, model.training_sse])
    out = np.empty(theta.size)
    for k, t in enumerate(theta):
        hit = np.flatnonzero(pool_theta == t)
        if hit.size == 0:
            raise ValueError("theta not in the training set; pass likelihood= to evaluate it")
        out[k] = pool_sse[hit[0]]
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EimGridSpec:
    """Training grids: log-uniform noise levels and a sparse theta grid."""

    sigma_bounds: tuple[float, float] = (0.001, 1.0)
    n_sigma: int = 128
    theta_grid: tuple[float, float, int] = (-1.0, 3.0, 64)
    n_initial: int = 2
    n_train_per_basis: int = 500
    growth_delta: float = 1e-3

    def sigma_grid(self) -> np.ndarray:
        lo, hi = self.sigma_bounds
        if not 0 < lo < hi:
            raise ValueError("sigma bounds must satisfy 0 < low < high")
        return np.geomspace(lo, hi, self.n_sigma)

    def sparse_theta(self) -> np.ndarray:
        lo, hi, n = self.theta_grid
        return np.linspace(lo, hi, int(n)) if n > 0 else np.empty(0)


class _Trainer:
    """Holds the data-side state (likelihood, sampler, RNG) while training."""

    def __init__(self, group, grid: EimGridSpec, sampler: BasisSampler, model_fn, seed):
        self.group = group
        self.grid = grid
        self.sampler = sampler
        self.lik = GaussianNoiseLikelihood(group, model_fn if model_fn is not None else PowerModel(1))
        self.seed_seq = np.random.SeedSequence(seed)

    def next_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed_seq.spawn(1)[0])

    def add_basis(self, model: EimModel, sigma: float, theta_anchor: float, grow: bool) -> None:
        archive = self.sampler(self.group, float(sigma), self.next_rng())
        sse_anchor = float(self.lik.sse(theta_anchor))
        model.bases.append(EimBasis(float(sigma), float(theta_anchor), sse_anchor, archive))
        if grow:
            self.extend_training(model, archive.theta_samples)

    def extend_training(self, model: EimModel, samples: np.ndarray) -> None:
        n = self.grid.n_train_per_basis
        take = samples if samples.size <= n else samples[np.linspace(0, samples.size - 1, n).astype(int)]
        model.training_theta = np.concatenate([model.training_theta, take])
        model.training_sse = np.concatenate([model.training_sse, self.lik.sse(take)])


def _significantly_new(model: EimModel, sigma: float, delta: float) -> bool:
    s = model.basis_sigmas
    return s.size == 0 or bool(np.all(np.abs(s - sigma) > delta * sigma))


def construct_initial_sets(
    group: DataSet,
    grid: EimGridSpec = EimGridSpec(),
    sampler: BasisSampler | None = None,
    model_fn: ForwardModel | None = None,
    seed: int = 0,
    epsilon_lim: float = 1e-5,
) -> tuple[EimModel, _Trainer]:
    """Seed the interpolant with extreme noise levels, flattest first.

    Larger sigma_y gives a flatter likelihood in theta, so the initial bases
    are the grid's extreme values in descending order. The first anchor is
    the likelihood maximiser over the sparse grid; later anchors maximise
    the current error.
    """
    sampler = sampler if sampler is not None else conjugate_basis_sampler()
    trainer = _Trainer(group, grid, sampler, model_fn, seed)
    sigma_grid = grid.sigma_grid()
    model = EimModel(group_id=group.id, n_points=len(group), sigma_grid=sigma_grid, epsilon_lim=epsilon_lim)
    sparse = grid.sparse_theta()
    model.training_theta = sparse
    model.training_sse = trainer.lik.sse(sparse) if sparse.size else np.empty(0)

    initial = np.geomspace(sigma_grid[-1], sigma_grid[0], max(grid.n_initial, 1))
    for k, sigma in enumerate(initial):
        if k == 0:
            if model.training_theta.size == 0:
                archive = sampler(group, float(sigma), trainer.next_rng())
                trainer.extend_training(model, archive.theta_samples)
            log_g = model.log_lik_from_sse(model.training_sse, sigma)
            j = int(np.argmax(log_g))
        else:
            err, arg = _normalized_error(model, model.training_sse, np.array([sigma]))
            if err[0] <= EXACT_TOL:
                logger.info("group %s: sigma=%.4g already reproduced, basis skipped", group.id, sigma)
                continue
            j = int(arg[0])
        trainer.add_basis(model, sigma, model.training_theta[j], grow=True)
    err, _ = _normalized_error(model, model.training_sse, sigma_grid)
    model.achieved_error = float(err.max())
    model.error_trace.append((model.n_bases, model.achieved_error))
    model.status = "initial"
    return model, trainer


def greedy_train(
    model: EimModel,
    trainer: _Trainer,
    epsilon_lim: float | None = None,
    max_bases: int = 60,
) -> EimModel:
    """Add the worst-approximated noise level as a new basis until converged."""
    if epsilon_lim is not None:
        model.epsilon_lim = epsilon_lim
    sigma_grid = model.sigma_grid
    while True:
        err, arg = _normalized_error(model, model.training_sse, sigma_grid)
        model.achieved_error = float(err.max())
        if not model.error_trace or model.error_trace[-1][0] != model.n_bases:
            model.error_trace.append((model.n_bases, model.achieved_error))
        if model.achieved_error <= model.epsilon_lim:
            model.converged, model.status = True, "converged"
            break
        if model.n_bases >= max_bases:
            model.converged, model.status = False, "max_bases reached"
            break
        l = int(np.argmax(err))
        if err[l] <= EXACT_TOL:
            model.converged, model.status = True, "converged"
            break
        sigma = float(sigma_grid[l])
        theta = float(model.training_theta[arg[l]])
        grow = _significantly_new(model, sigma, trainer.grid.growth_delta)
        trainer.add_basis(model, sigma, theta, grow=grow)
        try:
            _check_conditioning(_scaled_anchor_matrix(model)[0])
        except EimDegenerateError:
            model.bases.pop()
            model.converged, model.status = False, "basis degenerate"
            break
        logger.debug("group %s: L=%d err=%.3g sigma=%.4g", model.group_id, model.n_bases, err[l], sigma)
    return model


def train_eim(
    group: DataSet,
    grid: EimGridSpec = EimGridSpec(),
    sampler: BasisSampler | None = None,
    model_fn: ForwardModel | None = None,
    epsilon_lim: float = 1e-5,
    max_bases: int = 60,
    seed: int = 0,
) -> EimModel:
    model, trainer = construct_initial_sets(group, grid, sampler, model_fn, seed, epsilon_lim)
    return greedy_train(model, trainer, epsilon_lim, max_bases)


# ---------------------------------------------------------------------------
# Online estimation
# ---------------------------------------------------------------------------


@dataclass
class FlooringStats:
    """How often the interpolated group likelihood came out non-positive."""

    evaluations: int = 0
    floored: int = 0

    @property
    def rate(self) -> float:
        return self.floored / self.evaluations if self.evaluations else 0.0


def group_hs3_log_likelihood_batch(
    model: EimModel, mu_theta, sigma_theta, sigma_y, stats: FlooringStats | None = None
) -> np.ndarray:
    """ln p(D_i | psi, sigma_y) for arrays of (mu_theta, sigma_theta, sigma_y)."""
    if model.n_bases == 0:
        raise ValueError(f"EIM model for group {model.group_id!r} is untrained")
    mu = np.asarray(mu_theta, dtype=float).reshape(-1)
    st = np.asarray(sigma_theta, dtype=float).reshape(-1)
    sy = np.asarray(sigma_y, dtype=float).reshape(-1)
    out = np.full(mu.size, -np.inf)
    ok = (st > 0) & (sy > 0)
    if not np.any(ok):
        return out
    # ln of each basis's IS estimate, shape (L, m)
    log_t = np.stack([group_log_evidence_batch(b.archive, mu[ok], st[ok]) for b in model.bases])
    alpha_hat, log_c_p, log_c_g = _solve_scaled(model, sy[ok])
    terms = log_t - log_c_g[:, None]
    val, sign = logsumexp(terms, axis=0, b=alpha_hat, return_sign=True)
    good = sign > 0
    res = np.where(good, val + log_c_p, -np.inf)
    out[ok] = res
    if stats is not None:
        stats.evaluations += int(ok.sum())
        stats.floored += int((~good).sum())
    return out


def hs3_log_likelihood(
    models: Sequence[EimModel], psi: HyperParams, sigma_y, stats: FlooringStats | None = None
) -> float:
    """Sum over groups of the EIM-interpolated log likelihood.

    Non-positive interpolated values are floored to zero likelihood and
    counted in ``stats``.
    """
    sigma = float(getattr(sigma_y, "sigma_y", sigma_y))
    total = 0.0
    for m in models:
        total += float(group_hs3_log_likelihood_batch(m, psi.mu_theta, psi.sigma_theta, sigma, stats)[0])
    return total


def hs3_log_likelihood_batch(
    models: Sequence[EimModel], samples: np.ndarray, stats: FlooringStats | None = None
) -> np.ndarray:
    """Batch version over an (m, 3) array of (mu_theta, sigma_theta, sigma_y)."""
    s = np.asarray(samples, dtype=float).reshape(-1, 3)
    return np.sum(
        [group_hs3_log_likelihood_batch(m, s[:, 0], s[:, 1], s[:, 2], stats) for m in models], axis=0
    )


DEFAULT_HS3_PRIOR = BoxPrior.from_pairs(mu_theta=(-1.0, 3.0), sigma_theta=(0.001, 1.0), sigma_y=(0.001, 1.0))


def hs3_hyperposterior(
    models: Sequence[EimModel],
    hyper_prior: BoxPrior = DEFAULT_HS3_PRIOR,
    config: TmcmcConfig = TmcmcConfig(),
    stats: FlooringStats | None = None,
) -> TmcmcResult:
    if hyper_prior.names != ("mu_theta", "sigma_theta", "sigma_y"):
        raise ValueError("hyper_prior must be over (mu_theta, sigma_theta, sigma_y)")
    return tmcmc_run(
        hyper_prior.log_pdf, hyper_prior.sample, lambda s: hs3_log_likelihood_batch(models, s, stats), config
    )


# ---------------------------------------------------------------------------
# Persistence: JSON description plus an .npz sample sidecar
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_npz(path: Path, arrays: dict) -> None:
    """Like ``np.savez`` but with fixed zip timestamps, so equal arrays give equal bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


def save_eim_model(model: EimModel, path: str | Path) -> Path:
    """Write ``<path>`` (JSON) and ``<path stem>.npz`` (sample arrays)."""
    path = Path(path)
    sidecar = path.with_suffix(".npz")
    arrays = {"training_theta": model.training_theta, "training_sse": model.training_sse}
    for k, b in enumerate(model.bases):
        arrays[f"basis_{k}_samples"] = b.archive.theta_samples
    _write_npz(sidecar, arrays)
    doc = {
        "schema": EIM_SCHEMA,
        "group_id": model.group_id,
        "n_points": model.n_points,
        "sigma_grid": model.sigma_grid.tolist(),
        "epsilon_lim": model.epsilon_lim,
        "achieved_error": model.achieved_error,
        "converged": model.converged,
        "status": model.status,
        "error_trace": [list(t) for t in model.error_trace],
        "samples_file": sidecar.name,
        "samples_sha256": _sha256(sidecar),
        "bases": [
            {
                "sigma_y": b.sigma_y,
                "theta_anchor": b.theta_anchor,
                "anchor_sse": b.anchor_sse,
                "log_evidence": b.log_evidence,
                "proposal_prior": b.archive.proposal_prior.to_dict(),
                "n_samples": b.archive.n_samples,
                "samples_key": f"basis_{k}_samples",
            }
            for k, b in enumerate(model.bases)
        ],
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_eim_model(path: str | Path) -> EimModel:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("schema") != EIM_SCHEMA:
        raise ValueError(f"EIM schema mismatch: {doc.get('schema')!r} != {EIM_SCHEMA!r}")
    sidecar = path.parent / doc["samples_file"]
    if _sha256(sidecar) != doc["samples_sha256"]:
        raise ValueError(f"sample archive {sidecar} does not match its recorded checksum")
    with np.load(sidecar) as arrays:
        data = {k: arrays[k] for k in arrays.files}
    bases = []
    for rec in doc["bases"]:
        archive = DatasetInference(
            doc["group_id"], data[rec["samples_key"]], rec["log_evidence"], prior_from_dict(rec["proposal_prior"]),
            meta={"sigma_y": rec["sigma_y"]},
        )
        bases.append(EimBasis(rec["sigma_y"], rec["theta_anchor"], rec["anchor_sse"], archive))
    return EimModel(
        group_id=doc["group_id"],
        n_points=int(doc["n_points"]),
        sigma_grid=np.asarray(doc["sigma_grid"], dtype=float),
        bases=bases,
        training_theta=data["training_theta"],
        training_sse=data["training_sse"],
        epsilon_lim=float(doc["epsilon_lim"]),
        achieved_error=float(doc["achieved_error"]),
        converged=bool(doc["converged"]),
        error_trace=[(int(a), float(b)) for a, b in doc["error_trace"]],
        status=doc["status"],
    )
