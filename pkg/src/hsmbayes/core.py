"""Probability primitives, grouped data containers and forward models.

Every density in the package is carried as a natural logarithm; linear-scale
values only appear at output boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianSpec:
    """Normal distribution N(mean, std**2)."""

    mean: float
    std: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.std)):
            raise ValueError("GaussianSpec parameters must be finite")
        if self.std <= 0:
            raise ValueError(f"GaussianSpec std must be positive, got {self.std}")

    def log_pdf(self, z):
        z = np.asarray(z, dtype=float)
        return -0.5 * LOG_2PI - math.log(self.std) - 0.5 * ((z - self.mean) / self.std) ** 2

    def sample(self, rng: np.random.Generator, size=None):
        return rng.normal(self.mean, self.std, size=size)

    def to_dict(self) -> dict:
        return {"kind": "gaussian", "mean": self.mean, "std": self.std}


@dataclass(frozen=True)
class UniformSpec:
    """Uniform distribution on [lower, upper].

    ``log_pdf`` returns ``-inf`` outside the support so that samplers reject
    rather than fail.
    """

    lower: float
    upper: float

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise ValueError("UniformSpec bounds must be finite")
        if not self.lower < self.upper:
            raise ValueError(f"UniformSpec needs lower < upper, got [{self.lower}, {self.upper}]")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, z):
        z = np.asarray(z, dtype=float)
        return (z >= self.lower) & (z <= self.upper)

    def log_pdf(self, z):
        z = np.asarray(z, dtype=float)
        return np.where(self.contains(z), -math.log(self.width), -np.inf)

    def sample(self, rng: np.random.Generator, size=None):
        return rng.uniform(self.lower, self.upper, size=size)

    def to_dict(self) -> dict:
        return {"kind": "uniform", "lower": self.lower, "upper": self.upper}


@dataclass(frozen=True)
class BoxPrior:
    """Independent uniform priors over named coordinates of a parameter vector."""

    names: tuple[str, ...]
    bounds: tuple[UniformSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "bounds", tuple(self.bounds))
        if len(self.names) != len(self.bounds):
            raise ValueError("BoxPrior needs one bound per name")

    @classmethod
    def from_pairs(cls, **ranges) -> "BoxPrior":
        return cls(tuple(ranges), tuple(UniformSpec(*map(float, r)) for r in ranges.values()))

    @property
    def dim(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.column_stack([b.sample(rng, n) for b in self.bounds]).reshape(n, self.dim)

    def log_pdf(self, samples) -> np.ndarray:
        s = np.asarray(samples, dtype=float).reshape(-1, self.dim)
        out = np.zeros(s.shape[0])
        for k, b in enumerate(self.bounds):
            out = out + b.log_pdf(s[:, k])
        return out

    def to_dict(self) -> dict:
        return {n: [b.lower, b.upper] for n, b in zip(self.names, self.bounds)}


def prior_from_dict(d: dict) -> GaussianSpec | UniformSpec:
    kind = d.get("kind")
    if kind == "gaussian":
        return GaussianSpec(float(d["mean"]), float(d["std"]))
    if kind == "uniform":
        return UniformSpec(float(d["lower"]), float(d["upper"]))
    raise ValueError(f"unknown prior kind {kind!r}")


@dataclass(frozen=True)
class HyperParams:
    """Population parameters (mu_theta, sigma_theta) of the latent theta_i."""

    mu_theta: float
    sigma_theta: float

    def __post_init__(self):
        if self.sigma_theta <= 0:
            raise ValueError(f"sigma_theta must be positive, got {self.sigma_theta}")

    def theta_prior(self) -> GaussianSpec:
        return GaussianSpec(self.mu_theta, self.sigma_theta)


@dataclass(frozen=True)
class NoiseParams:
    """Standard deviation of the additive output error."""

    sigma_y: float

    def __post_init__(self):
        if not self.sigma_y > 0:
            raise ValueError(f"sigma_y must be positive, got {self.sigma_y}")


def _sigma(value) -> float:
    return value.sigma_y if isinstance(value, NoiseParams) else float(value)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataPoint:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("data point coordinates must be finite")


@dataclass(frozen=True, eq=False)
class DataSet:
    """One group of observations sharing a single latent parameter."""

    id: str
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(-1)
        y = np.array(self.y, dtype=float).reshape(-1)
        if x.shape != y.shape:
            raise ValueError("x and y must have the same length")
        if x.size == 0:
            raise ValueError(f"data set {self.id!r} is empty")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError(f"data set {self.id!r} contains non-finite values")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_points(cls, id, points: Iterable[DataPoint]) -> "DataSet":
        pts = list(points)
        return cls(id, [p.x for p in pts], [p.y for p in pts])

    @property
    def points(self) -> list[DataPoint]:
        return [DataPoint(float(a), float(b)) for a, b in zip(self.x, self.y)]

    def __len__(self):
        return self.x.size

    def __eq__(self, other):
        if not isinstance(other, DataSet):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
        )

    def __hash__(self):
        return hash((self.id, self.x.tobytes(), self.y.tobytes()))


@dataclass(frozen=True)
class GroupedData:
    """A partition of the observations into groups with distinct ids."""

    datasets: tuple[DataSet, ...]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ds = tuple(self.datasets)
        ids = [d.id for d in ds]
        if len(set(ids)) != len(ids):
            raise ValueError("group ids must be distinct")
        object.__setattr__(self, "datasets", ds)

    @classmethod
    def single(cls, dataset: DataSet) -> "GroupedData":
        return cls((dataset,))

    def __len__(self):
        return len(self.datasets)

    def __iter__(self):
        return iter(self.datasets)

    def __getitem__(self, key):
        if isinstance(key, str):
            for d in self.datasets:
                if d.id == key:
                    return d
            raise KeyError(key)
        return self.datasets[key]

    @property
    def ids(self) -> list[str]:
        return [d.id for d in self.datasets]

    @property
    def n_points(self) -> int:
        return sum(len(d) for d in self.datasets)

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([d.x for d in self.datasets]) if self.datasets else np.empty(0)

    @property
    def y(self) -> np.ndarray:
        return np.concatenate([d.y for d in self.datasets]) if self.datasets else np.empty(0)

    def pooled(self, id="pooled") -> DataSet:
        return DataSet(id, self.x, self.y)


# ---------------------------------------------------------------------------
# Forward models
# ---------------------------------------------------------------------------


class ForwardModel:
    """Deterministic map f(x, theta) -> predicted y.

    ``theta`` may be a single parameter vector of length ``n_params`` or a
    batch of shape (m, n_params); the result then has shape (m, len(x)).
    """

    n_params: int = 1

    def evaluate(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x, theta):
        return self.evaluate(np.asarray(x, dtype=float), np.asarray(theta, dtype=float))


class PowerModel(ForwardModel):
    """f(x, theta) = theta * x**power (power 1 is the linear model)."""

    n_params = 1

    def __init__(self, power: int = 1):
        self.power = power

    def evaluate(self, x, theta):
        theta = np.asarray(theta, dtype=float)
        basis = x**self.power
        if theta.ndim == 0:
            return theta * basis
        return theta.reshape(-1, 1) * basis

    def __repr__(self):
        return f"PowerModel(power={self.power})"


LinearModel = PowerModel


class CallableModel(ForwardModel):
    """Adapter for a user function ``f(x, theta_batch) -> (m, n)`` array."""

    def __init__(self, func: Callable, n_params: int):
        self.func = func
        self.n_params = n_params

    def evaluate(self, x, theta):
        return np.asarray(self.func(x, theta), dtype=float)


class GaussianNoiseLikelihood:
    """p(D | theta, sigma_y) for y = f(x, theta) + N(0, sigma_y**2) noise.

    The theta-dependence enters only through the residual sum of squares, so
    ``sse`` can be cached once per theta and reused across noise levels.
    """

    def __init__(self, data: DataSet, model: ForwardModel | None = None):
        self.data = data
        self.model = model if model is not None else PowerModel(1)
        self.n_points = len(data)

    def sse(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        p = self.model.n_params
        single = theta.ndim == (0 if p == 1 else 1)
        batch = theta.reshape(-1) if p == 1 else theta.reshape(-1, p)
        pred = self.model(self.data.x, batch)
        out = np.sum((self.data.y - pred) ** 2, axis=-1)
        return float(out[0]) if single else out

    def log_from_sse(self, sse, sigma_y):
        sse = np.asarray(sse, dtype=float)
        sigma_y = np.asarray(sigma_y, dtype=float)
        n = self.n_points
        return -0.5 * n * LOG_2PI - n * np.log(sigma_y) - sse / (2.0 * sigma_y**2)

    def __call__(self, theta, sigma_y):
        return self.log_from_sse(self.sse(theta), sigma_y)


# ---------------------------------------------------------------------------
# Scalar helpers
# ---------------------------------------------------------------------------


def gaussian_log_density(z, spec: GaussianSpec):
    """ln N(z | spec.mean, spec.std**2); raises on non-finite input."""
    z_arr = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z_arr)):
        raise ValueError("gaussian_log_density needs finite input")
    out = spec.log_pdf(z_arr)
    return float(out) if out.ndim == 0 else out


def kl_gaussian(p: GaussianSpec, q: GaussianSpec) -> float:
    """KL(p || q) for two univariate normals."""
    return (
        math.log(q.std / p.std)
        + (p.std**2 + (p.mean - q.mean) ** 2) / (2.0 * q.std**2)
        - 0.5
    )


def log_sum_exp(values: Sequence[float] | np.ndarray) -> float:
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    return float(logsumexp(v))


def log_mean_exp(values, axis=None):
    v = np.asarray(values, dtype=float)
    n = v.size if axis is None else v.shape[axis]
    return logsumexp(v, axis=axis) - math.log(n)


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent child generators derived from one recorded seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
