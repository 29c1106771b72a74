"""Synthetic data, grouping schemes, model-class selection and the three studies.

Candidate model classes for y = theta * x:

========  ==========================================  ======================
name      prior / likelihood                           hyperparameters (MCS)
========  ==========================================  ======================
``M1a``   theta ~ U(-1, 3), Gaussian noise             sigma_y
``M1b``   theta ~ N(mu, s^2), Gaussian noise           mu, s, sigma_y
``M2a``   theta_i ~ N(mu, s^2) per group, no noise     mu, s
``M2b``   theta_i ~ N(mu, s^2) per group, noise        mu, s, sigma_y
========  ==========================================  ======================

The theta integrals are closed form; the remaining hyperparameters are
integrated by prior Monte Carlo. M1 classes pool every point; M2 classes use
the grouping of the data they are given.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, ndtr

from .core import BoxPrior, DataSet, GroupedData, UniformSpec
from .linear import (
    delta_log_evidence_kernel,
    delta_ratio,
    gaussian_prior_log_evidence_kernel,
    group_stats_arrays,
    linear_stats,
    uniform_prior_log_evidence_kernel,
)
from .samplers import WeightedSamples, ZeroEvidenceError, mcs_weighted_posterior, posterior_stats

logger = logging.getLogger(__name__)

FUNCTION_POWERS = {"linear": 1, "quadratic": 2, "cubic": 3}
ERROR_TYPES = ("additive", "embedded", "mixed", "none")
MODEL_NAMES = ("M1a", "M1b", "M2a", "M2b")
REPORT_COLUMNS = ("model", "E_theta", "Std_theta", "E_sigma_y", "Std_sigma_y", "ln_evidence", "post_prob")


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for one synthetic data set.

    Random draws always happen in the order x, eps_theta, eps_y (all three
    arrays are drawn whatever the error type), so a spec regenerates
    bit-identically and a zero noise level reproduces the noiseless data.
    """

    function: str = "linear"
    error_type: str = "additive"
    theta_hat: float = 1.0
    sigma_theta_hat: float = 0.0
    sigma_y_hat: float = 0.2
    x_range: tuple[float, float] = (0.0, 1.0)
    n_points: int = 1000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x_range", tuple(float(v) for v in self.x_range))
        if self.function not in FUNCTION_POWERS:
            raise ValueError(f"unknown function {self.function!r}")
        if self.error_type not in ERROR_TYPES:
            raise ValueError(f"unknown error_type {self.error_type!r}")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        lo, hi = self.x_range
        if not lo < hi:
            raise ValueError("x_range must satisfy low < high")
        if self.sigma_theta_hat < 0 or self.sigma_y_hat < 0:
            raise ValueError("noise levels must be non-negative")
        uses_theta = self.error_type in ("embedded", "mixed")
        uses_y = self.error_type in ("additive", "mixed")
        if not uses_theta and self.sigma_theta_hat != 0:
            raise ValueError(f"error_type {self.error_type!r} has no parameter noise; set sigma_theta_hat = 0")
        if not uses_y and self.sigma_y_hat != 0:
            raise ValueError(f"error_type {self.error_type!r} has no output noise; set sigma_y_hat = 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["x_range"] = list(self.x_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown SyntheticSpec keys: {sorted(extra)}")
        return cls(**d)


def generate_data(spec: SyntheticSpec, id: str = "data") -> DataSet:
    rng = np.random.default_rng(spec.seed)
    x = rng.uniform(spec.x_range[0], spec.x_range[1], spec.n_points)
    eps_theta = rng.standard_normal(spec.n_points) * spec.sigma_theta_hat
    eps_y = rng.standard_normal(spec.n_points) * spec.sigma_y_hat
    y = (spec.theta_hat + eps_theta) * x ** FUNCTION_POWERS[spec.function] + eps_y
    return DataSet(id, x, y)


def design_grid(x_range=(0.1, 1.0), n: int = 11) -> np.ndarray:
    return np.linspace(x_range[0], x_range[1], n)


def generate_grouped_data(
    hyper: tuple[float, float, float] = (1.0, 0.5, 0.1),
    n_groups: int = 5,
    points_per_group: int = 11,
    x_range: tuple[float, float] = (0.1, 1.0),
    seed: int = 0,
    x_design: str = "grid",
) -> GroupedData:
    """theta_i ~ N(mu, s^2) per group, y = theta_i x + N(0, sigma_y^2).

    ``x_design="grid"`` puts every group on the same evenly spaced x values
    (which the constant-x grouping needs); ``"uniform"`` draws them.
    """
    mu, s, sy = hyper
    if s < 0 or sy < 0:
        raise ValueError("noise levels must be non-negative")
    rng = np.random.default_rng(seed)
    theta = mu + s * rng.standard_normal(n_groups)
    groups = []
    for i in range(n_groups):
        if x_design == "grid":
            x = design_grid(x_range, points_per_group)
        elif x_design == "uniform":
            x = rng.uniform(x_range[0], x_range[1], points_per_group)
        else:
            raise ValueError(f"unknown x_design {x_design!r}")
        y = theta[i] * x + sy * rng.standard_normal(points_per_group)
        groups.append(DataSet(f"G{i + 1}", x, y))
    meta = {"theta": theta.tolist(), "hyper": list(hyper), "seed": seed}
    return GroupedData(tuple(groups), meta)


# ---------------------------------------------------------------------------
# Grouping schemes
# ---------------------------------------------------------------------------

GROUPING_KINDS = ("actual", "constant_x", "half_error", "quarter_error", "single_point", "random")


@dataclass(frozen=True)
class GroupingScheme:
    kind: str
    seed: int = 0
    n_random_groups: int = 5

    def __post_init__(self):
        if self.kind not in GROUPING_KINDS:
            raise ValueError(f"unknown grouping {self.kind!r}")


def _split_half(group: DataSet) -> tuple[list[DataSet], bool]:
    if np.any(group.x == 0):
        raise ValueError(f"group {group.id!r}: error-based split needs x != 0")
    theta_j = group.y / group.x
    lower = theta_j <= theta_j.mean()
    out = []
    for tag, mask in (("a", lower), ("b", ~lower)):
        if mask.any():
            out.append(DataSet(group.id + tag, group.x[mask], group.y[mask]))
    return out, len(out) < 2


def apply_grouping(data: GroupedData, scheme: GroupingScheme) -> GroupedData:
    """Regroup the points of ``data`` (taken as the actual grouping)."""
    kind = scheme.kind
    if kind == "actual":
        return data
    if kind in ("half_error", "quarter_error"):
        current = list(data)
        dropped = 0
        for _ in range(1 if kind == "half_error" else 2):
            nxt = []
            for g in current:
                parts, lost = _split_half(g)
                nxt.extend(parts)
                dropped += lost
            current = nxt
        if dropped:
            warnings.warn(f"{kind}: {dropped} empty half group(s) dropped", stacklevel=2)
        return GroupedData(tuple(current), {"scheme": kind, "dropped_empty": dropped})
    x, y = data.x, data.y
    if kind == "single_point":
        return GroupedData(tuple(DataSet(f"p{j}", x[j:j + 1], y[j:j + 1]) for j in range(x.size)), {"scheme": kind})
    if kind == "constant_x":
        values, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
        if np.all(counts == 1):
            raise ValueError("constant_x grouping needs repeated x values")
        groups = tuple(DataSet(f"x={v:.17g}", x[inverse == k], y[inverse == k]) for k, v in enumerate(values))
        return GroupedData(groups, {"scheme": kind})
    # random
    rng = np.random.default_rng(scheme.seed)
    perm = rng.permutation(x.size)
    parts = np.array_split(perm, scheme.n_random_groups)
    groups = tuple(DataSet(f"R{k + 1}", x[np.sort(p)], y[np.sort(p)]) for k, p in enumerate(parts) if p.size)
    return GroupedData(groups, {"scheme": kind, "seed": scheme.seed})


def single_point_groups(data: DataSet | GroupedData) -> GroupedData:
    g = data if isinstance(data, GroupedData) else GroupedData.single(data)
    return apply_grouping(g, GroupingScheme("single_point"))


# ---------------------------------------------------------------------------
# Model classes and their hyperparameter likelihoods
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelClassSpec:
    name: str
    theta_prior: UniformSpec = UniformSpec(-1.0, 3.0)
    mu_prior: UniformSpec = UniformSpec(-1.0, 3.0)
    sigma_theta_prior: UniformSpec = UniformSpec(0.001, 1.0)
    sigma_y_prior: UniformSpec = UniformSpec(0.001, 1.0)
    label: str | None = None

    def __post_init__(self):
        if self.name not in MODEL_NAMES:
            raise ValueError(f"unknown model class {self.name!r}")

    @property
    def display(self) -> str:
        return self.label or self.name

    def hyper_prior(self) -> BoxPrior:
        if self.name == "M1a":
            return BoxPrior(("sigma_y",), (self.sigma_y_prior,))
        if self.name == "M2a":
            return BoxPrior(("mu_theta", "sigma_theta"), (self.mu_prior, self.sigma_theta_prior))
        return BoxPrior(
            ("mu_theta", "sigma_theta", "sigma_y"), (self.mu_prior, self.sigma_theta_prior, self.sigma_y_prior)
        )


def default_candidates() -> list[ModelClassSpec]:
    return [ModelClassSpec(n) for n in MODEL_NAMES]


class _ClassLikelihood:
    """Vectorised ln p(D | hyperparameters) plus the moment extractors."""

    def __init__(self, spec: ModelClassSpec, data: GroupedData, chunk: int = 2_000_000):
        self.spec = spec
        self.chunk = chunk
        self.pooled = linear_stats(data)
        if spec.name in ("M1a", "M1b") and self.pooled.xx <= 0:
            raise ValueError("pooled data have x.x = 0")
        if spec.name == "M2b":
            self.groups = group_stats_arrays(data)
        if spec.name == "M2a":
            info = [delta_ratio(g) for g in data]
            self.consistent = all(c for _, _, c in info)
            self.ratio = np.array([r for r, _, _ in info])
            self.log_jac = float(sum(j for _, j, _ in info))

    def __call__(self, s: np.ndarray) -> np.ndarray:
        name = self.spec.name
        st = self.pooled
        if name == "M1a":
            lo, hi = self.spec.theta_prior.lower, self.spec.theta_prior.upper
            return uniform_prior_log_evidence_kernel(st.n, st.xx, st.theta_ls, st.rss, s[:, 0], lo, hi)
        if name == "M1b":
            return gaussian_prior_log_evidence_kernel(st.n, st.xx, st.theta_ls, st.rss, s[:, 0], s[:, 1], s[:, 2])
        if name == "M2a":
            if not self.consistent:
                return np.full(s.shape[0], -np.inf)
            return self._chunked(
                s, lambda blk: delta_log_evidence_kernel(self.ratio[None, :], 0.0, blk[:, :1], blk[:, 1:2])
            ) + self.log_jac
        g = self.groups

        def m2b(blk):
            return gaussian_prior_log_evidence_kernel(
                g["n"][None, :], g["xx"][None, :], g["theta_ls"][None, :], g["rss"][None, :],
                blk[:, :1], blk[:, 1:2], blk[:, 2:3],
            )

        return self._chunked(s, m2b)

    def _chunked(self, s, fn):
        n_groups = self.ratio.size if self.spec.name == "M2a" else self.groups["n"].size
        rows = max(1, self.chunk // max(n_groups, 1))
        out = np.empty(s.shape[0])
        for start in range(0, s.shape[0], rows):
            out[start:start + rows] = fn(s[start:start + rows]).sum(axis=1)
        return out

    def extractors(self) -> dict:
        name = self.spec.name
        st = self.pooled
        if name == "M1a":
            return {
                "theta": lambda s: (np.full(s.shape[0], st.theta_ls), s[:, 0] / math.sqrt(st.xx)),
                "sigma_y": lambda s: s[:, 0],
            }
        if name == "M1b":
            def cond(s):
                mu, sd, sig = s[:, 0], s[:, 1], s[:, 2]
                denom = st.xx * sd**2 + sig**2
                return (st.xy * sd**2 + mu * sig**2) / denom, sd * sig / np.sqrt(denom)

            return {"theta": cond, "sigma_y": lambda s: s[:, 2]}
        ex = {"theta": lambda s: (s[:, 0], s[:, 1])}
        ex["sigma_y"] = (lambda s: np.zeros(s.shape[0])) if name == "M2a" else (lambda s: s[:, 2])
        return ex


def class_weighted_posterior(
    spec: ModelClassSpec, data: GroupedData, n_samples: int = 10_000, seed=0
) -> tuple[WeightedSamples, _ClassLikelihood]:
    """Prior Monte Carlo over the class's hyperparameters."""
    lik = _ClassLikelihood(spec, data)
    ws = mcs_weighted_posterior(spec.hyper_prior().sample, lik, n_samples, seed)
    return ws, lik


# ---------------------------------------------------------------------------
# Selection reports
# ---------------------------------------------------------------------------


@dataclass
class ModelRow:
    model: str
    E_theta: float
    Std_theta: float
    E_sigma_y: float
    Std_sigma_y: float
    ln_evidence: float
    post_prob: float = 0.0
    ess: float = math.nan


@dataclass
class SelectionReport:
    rows: list[ModelRow]
    failures: dict[str, str] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    posteriors: dict = field(default_factory=dict, repr=False)

    @property
    def flagged(self) -> bool:
        return bool(self.failures)

    def row(self, model: str) -> ModelRow:
        for r in self.rows:
            if r.model == model:
                return r
        raise KeyError(model)

    def prob(self, model: str) -> float:
        return self.row(model).post_prob

    @property
    def winner(self) -> str:
        return max(self.rows, key=lambda r: r.post_prob).model

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r.model] + [format(getattr(r, c), ".17g") for c in REPORT_COLUMNS[1:]])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "columns": list(REPORT_COLUMNS),
            "rows": [{c: getattr(r, c) for c in REPORT_COLUMNS} | {"ess": r.ess} for r in self.rows],
            "failures": self.failures,
            "meta": self.meta,
        }
        return json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n"


def _normalise(rows: list[ModelRow]) -> None:
    if not rows:
        return
    ln = np.array([r.ln_evidence for r in rows])
    p = np.exp(ln - logsumexp(ln))
    p = p / p.sum()
    for r, v in zip(rows, p):
        r.post_prob = float(v)


def run_model_selection(
    data: GroupedData,
    candidates: Sequence[ModelClassSpec] | None = None,
    n_samples: int = 10_000,
    seed: int = 0,
    threads: int = 1,
    m1_data: GroupedData | None = None,
) -> SelectionReport:
    """Evidence and posterior statistics for each candidate, equal model priors.

    M2 candidates use the grouping of ``data``; M1 candidates use
    ``m1_data`` if given (defaults to ``data``, whose points they pool).
    """
    candidates = list(candidates) if candidates is not None else default_candidates()
    if not candidates:
        raise ValueError("no candidate model classes")
    seeds = np.random.SeedSequence(seed).spawn(len(candidates))

    def run(k):
        spec = candidates[k]
        src = m1_data if (m1_data is not None and spec.name.startswith("M1")) else data
        ws, lik = class_weighted_posterior(spec, src, n_samples, np.random.default_rng(seeds[k]))
        st = posterior_stats(ws, lik.extractors())
        row = ModelRow(
            spec.display, st["theta"].mean, st["theta"].std, st["sigma_y"].mean, st["sigma_y"].std,
            float(ws.log_evidence), ess=ws.ess,
        )
        return row, ws

    def guarded(k):
        try:
            return run(k)
        except (ZeroEvidenceError, ValueError, FloatingPointError) as exc:
            return exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(guarded, range(len(candidates))))
    else:
        results = [guarded(k) for k in range(len(candidates))]

    rows, failures, posts = [], {}, {}
    for spec, res in zip(candidates, results):
        if isinstance(res, Exception):
            failures[spec.display] = f"{type(res).__name__}: {res}"
            logger.warning("candidate %s excluded: %s", spec.display, res)
            continue
        rows.append(res[0])
        posts[spec.display] = (spec, res[1])
    _normalise(rows)
    return SelectionReport(rows, failures, {"n_samples": n_samples, "seed": seed}, posts)


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------


def separation_dataset_specs(x_range=(0.0, 1.0), n_points: int = 1000, seed: int = 0) -> dict[str, SyntheticSpec]:
    """The additive, embedded and mixed data sets of the uncertainty-separation study."""
    ss = np.random.SeedSequence(seed).spawn(3)
    seeds = [int(s.generate_state(1, dtype=np.uint64)[0] >> 1) for s in ss]
    common = dict(function="linear", theta_hat=1.0, x_range=tuple(x_range), n_points=n_points)
    return {
        "D1": SyntheticSpec(error_type="additive", sigma_theta_hat=0.0, sigma_y_hat=0.2, seed=seeds[0], **common),
        "D2a": SyntheticSpec(error_type="embedded", sigma_theta_hat=0.5, sigma_y_hat=0.0, seed=seeds[1], **common),
        "D2b": SyntheticSpec(error_type="mixed", sigma_theta_hat=0.5, sigma_y_hat=0.2, seed=seeds[2], **common),
    }


def run_separation_study(
    x_range=(0.0, 1.0), n_points: int = 1000, seed: int = 0, n_samples: int = 10_000, threads: int = 1
) -> dict[str, SelectionReport]:
    """All four classes on D1, D2a and D2b; M2 classes treat each point as a group."""
    out = {}
    for name, spec in separation_dataset_specs(x_range, n_points, seed).items():
        ds = generate_data(spec, name)
        report = run_model_selection(
            single_point_groups(ds), n_samples=n_samples, seed=spec.seed, threads=threads,
            m1_data=GroupedData.single(ds),
        )
        report.meta["spec"] = spec.to_dict()
        out[name] = report
    return out


GROUPING_STUDY_SCHEMES = {
    "M'1": "actual",
    "M'2": "constant_x",
    "M'3": "half_error",
    "M'4": "quarter_error",
    "M'5": "single_point",
    "M'6": "random",
}


def run_grouping_study(
    seed: int = 0, n_samples: int = 10_000, threads: int = 1, hyper=(1.0, 0.5, 0.1)
) -> SelectionReport:
    """Six groupings of a 5 x 11 data set, each scored as an M2b model."""
    ss = np.random.SeedSequence(seed)
    data_seed, group_seed, mcs_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    data = generate_grouped_data(hyper, 5, 11, (0.1, 1.0), data_seed)
    rows, failures, posts = [], {}, {}
    mcs_seeds = np.random.SeedSequence(mcs_seed).spawn(len(GROUPING_STUDY_SCHEMES))

    def run(k, label, kind):
        grouped = apply_grouping(data, GroupingScheme(kind, seed=group_seed))
        spec = ModelClassSpec("M2b", label=label)
        rep = run_model_selection(grouped, [spec], n_samples, int(mcs_seeds[k].generate_state(1)[0]))
        return rep

    items = list(GROUPING_STUDY_SCHEMES.items())
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reps = list(pool.map(lambda a: run(a[0], *a[1]), enumerate(items)))
    else:
        reps = [run(k, label, kind) for k, (label, kind) in enumerate(items)]
    for rep in reps:
        rows.extend(rep.rows)
        failures.update(rep.failures)
        posts.update(rep.posteriors)
    _normalise(rows)
    theta = np.asarray(data.meta["theta"])
    meta = {
        "seed": seed, "n_samples": n_samples, "schemes": GROUPING_STUDY_SCHEMES,
        "realized_theta_mean": float(theta.mean()), "realized_theta_std": float(theta.std(ddof=1)),
    }
    return SelectionReport(rows, failures, meta, posts)


REDUCED_ORDER_CANDIDATES = (
    ModelClassSpec("M1a", label="M1"),
    ModelClassSpec("M2a"),
    ModelClassSpec("M2b"),
)


def reduced_order_spec(function: str, size: int, noise: bool, seed: int) -> SyntheticSpec:
    return SyntheticSpec(
        function=function, error_type="additive" if noise else "none", theta_hat=1.0,
        sigma_theta_hat=0.0, sigma_y_hat=0.1 if noise else 0.0, x_range=(-1.0, 1.0), n_points=size, seed=seed,
    )


def run_reduced_order_study(
    sizes: Sequence[int] = (20, 50, 100, 200),
    noise: bool | None = None,
    seed: int = 0,
    functions: Sequence[str] = ("quadratic", "cubic"),
    n_samples: int = 10_000,
    grid_size: int | None = 100,
    threads: int = 1,
) -> tuple[dict[tuple[str, bool, int], SelectionReport], dict[tuple[str, bool, str], "PredictionGrid"]]:
    """Linear fits (M1, M2a, M2b) to polynomial data; reports plus prediction grids.

    ``noise=None`` runs both the noiseless and the noisy variants. Grids are
    produced for the data sets of size ``grid_size``.
    """
    noises = (False, True) if noise is None else (bool(noise),)
    reports, grids = {}, {}
    ss = np.random.SeedSequence(seed)
    cases = [(f, nz, n) for f in functions for nz in noises for n in sizes]
    case_seeds = ss.spawn(len(cases))
    for (func, nz, n), cs in zip(cases, case_seeds):
        data_seed, mcs_seed = (int(v) for v in cs.generate_state(2))
        spec = reduced_order_spec(func, n, nz, data_seed)
        ds = generate_data(spec, f"{func}-{'noisy' if nz else 'clean'}-{n}")
        rep = run_model_selection(
            single_point_groups(ds), REDUCED_ORDER_CANDIDATES, n_samples, mcs_seed, threads,
            m1_data=GroupedData.single(ds),
        )
        rep.meta["spec"] = spec.to_dict()
        reports[(func, nz, n)] = rep
        if grid_size is not None and n == grid_size:
            for label, (cspec, ws) in rep.posteriors.items():
                grids[(func, nz, label)] = prediction_grid(ds, cspec, ws)
    return reports, grids


# ---------------------------------------------------------------------------
# Robust prediction grids
# ---------------------------------------------------------------------------


@dataclass
class PredictionGrid:
    """Cell-averaged predictive density on an (x, y) grid.

    ``density[k, j]`` is the predictive probability of the y-cell centred at
    ``y[k]`` divided by the cell width, at ``x[j]``.
    """

    model: str
    x: np.ndarray
    y: np.ndarray
    density: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def column_mass(self) -> np.ndarray:
        return np.trapezoid(self.density, self.y, axis=0) if hasattr(np, "trapezoid") else np.trapz(
            self.density, self.y, axis=0
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "density"])
        for j, xv in enumerate(self.x):
            for k, yv in enumerate(self.y):
                w.writerow([format(xv, ".17g"), format(yv, ".17g"), format(self.density[k, j], ".17g")])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "mean", "lower_05", "upper_95"])
        for row in zip(self.x, self.mean, self.lower, self.upper):
            w.writerow([format(v, ".17g") for v in row])
        return buf.getvalue()


def _predictive_components(spec: ModelClassSpec, data: DataSet | GroupedData, s: np.ndarray, x_hat: float):
    """Per-sample Gaussian (mean, std) of y_hat at x_hat."""
    st = linear_stats(data)
    name = spec.name
    if name == "M1a":
        sig = s[:, 0]
        sd_t = sig / math.sqrt(st.xx)
        return np.full(sig.shape, st.theta_ls * x_hat), np.sqrt(sig**2 + (sd_t * x_hat) ** 2)
    if name == "M1b":
        mu, sd, sig = s[:, 0], s[:, 1], s[:, 2]
        denom = st.xx * sd**2 + sig**2
        mu_t = (st.xy * sd**2 + mu * sig**2) / denom
        sd_t = sd * sig / np.sqrt(denom)
        return mu_t * x_hat, np.sqrt(sig**2 + (sd_t * x_hat) ** 2)
    if name == "M2a":
        return s[:, 0] * x_hat, s[:, 1] * abs(x_hat)
    return s[:, 0] * x_hat, np.sqrt(s[:, 2] ** 2 + (s[:, 1] * x_hat) ** 2)


def _mixture_cdf(edges: np.ndarray, w: np.ndarray, m: np.ndarray, sd: np.ndarray) -> np.ndarray:
    z = np.subtract.outer(edges, m)
    with np.errstate(divide="ignore", invalid="ignore"):
        cdf = np.where(sd > 0, ndtr(z / np.where(sd > 0, sd, 1.0)), (z >= 0).astype(float))
    return cdf @ w


def prediction_grid(
    data: DataSet | GroupedData,
    spec: ModelClassSpec,
    ws: WeightedSamples,
    nx: int = 101,
    ny: int = 201,
    x_range: tuple[float, float] | None = None,
    n_std: float = 5.0,
    weight_tail: float = 1e-12,
) -> PredictionGrid:
    """Robust posterior predictive density of a new point on a fine grid.

    The y-range spans the data plus ``n_std`` of the widest predictive
    standard deviation. Cell averages come from differences of the mixture
    CDF, which stay finite where the noise-free predictive collapses to a
    point mass (x_hat = 0).
    """
    x_data = data.x
    y_data = data.y
    lo, hi = x_range if x_range is not None else (float(x_data.min()), float(x_data.max()))
    xs = np.linspace(lo, hi, nx)

    w_all = ws.weights
    order = np.argsort(w_all)[::-1]
    keep = order[: int(np.searchsorted(np.cumsum(w_all[order]), 1.0 - weight_tail)) + 1]
    w = w_all[keep] / w_all[keep].sum()
    s = ws.samples[keep]

    comps = [_predictive_components(spec, data, s, xv) for xv in xs]
    spread = 0.0
    for m, sd in comps:
        mean = w @ m
        var = w @ (sd**2 + m**2) - mean**2
        spread = max(spread, math.sqrt(max(var, 0.0)))
    y_lo = float(y_data.min()) - n_std * spread
    y_hi = float(y_data.max()) + n_std * spread
    ys = np.linspace(y_lo, y_hi, ny)
    dy = ys[1] - ys[0]
    edges = np.concatenate([[ys[0] - dy / 2], ys + dy / 2])

    density = np.empty((ny, nx))
    means = np.empty(nx)
    lower = np.empty(nx)
    upper = np.empty(nx)
    for j, (m, sd) in enumerate(comps):
        cdf = _mixture_cdf(edges, w, m, sd)
        density[:, j] = np.diff(cdf) / dy
        means[j] = w @ m
        lower[j] = _mixture_quantile(0.05, w, m, sd)
        upper[j] = _mixture_quantile(0.95, w, m, sd)
    return PredictionGrid(spec.display, xs, ys, density, means, lower, upper)


def _mixture_quantile(q: float, w, m, sd, tol: float = 1e-10) -> float:
    width = float(np.max(sd)) if np.max(sd) > 0 else 1.0
    a = float(np.min(m)) - 10 * width
    b = float(np.max(m)) + 10 * width
    for _ in range(200):
        mid = 0.5 * (a + b)
        if _mixture_cdf(np.array([mid]), w, m, sd)[0] < q:
            a = mid
        else:
            b = mid
        if b - a < tol * max(1.0, abs(mid)):
            break
    return 0.5 * (a + b)
