"""Run configuration: one TOML file per run, validated before any work starts.

Layout::

    schema_version = 1
    seed = 0            # optional; --seed overrides
    threads = 1         # optional; --threads overrides

    [<command>]         # e.g. [hsm], [group_study]
    ...

Only the table for the command being run may appear, and unknown keys are
rejected at every level. Relative paths are resolved against the directory
of the config file.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .core import BoxPrior, GaussianSpec, UniformSpec
from .eim import EimGridSpec
from .experiments import FUNCTION_POWERS, MODEL_NAMES, ModelClassSpec, SyntheticSpec
from .samplers import TmcmcConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1
COMMANDS = ("generate", "select", "group-study", "reduced-order-study", "hsm", "eim", "predict")

_REQUIRED = object()


class ConfigError(ValueError):
    """The configuration is malformed or refers to unusable inputs."""


class _Table:
    """Typed, key-checked view of one TOML table."""

    def __init__(self, data, where: str, allowed):
        if not isinstance(data, dict):
            raise ConfigError(f"{where}: expected a table")
        unknown = sorted(set(data) - set(allowed))
        if unknown:
            raise ConfigError(f"{where}: unknown keys {unknown}; allowed {sorted(allowed)}")
        self.data = data
        self.where = where

    def _key(self, key):
        return f"{self.where}.{key}" if self.where else key

    def has(self, key) -> bool:
        return key in self.data

    def _raw(self, key, default):
        if key in self.data:
            return self.data[key]
        if default is _REQUIRED:
            raise ConfigError(f"{self._key(key)} is required")
        return default

    def int(self, key, default=_REQUIRED, minimum=None):
        v = self._raw(key, default)
        if v is None:
            return None
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{self._key(key)}: expected an integer, got {v!r}")
        if minimum is not None and v < minimum:
            raise ConfigError(f"{self._key(key)}: must be >= {minimum}")
        return v

    def float(self, key, default=_REQUIRED, positive=False):
        v = self._raw(key, default)
        if v is None:
            return None
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ConfigError(f"{self._key(key)}: expected a finite number, got {v!r}")
        if positive and v <= 0:
            raise ConfigError(f"{self._key(key)}: must be positive")
        return float(v)

    def str(self, key, default=_REQUIRED, choices=None):
        v = self._raw(key, default)
        if v is None:
            return None
        if not isinstance(v, str):
            raise ConfigError(f"{self._key(key)}: expected a string, got {v!r}")
        if choices is not None and v not in choices:
            raise ConfigError(f"{self._key(key)}: {v!r} is not one of {list(choices)}")
        return v

    def bool(self, key, default=_REQUIRED):
        v = self._raw(key, default)
        if not isinstance(v, bool):
            raise ConfigError(f"{self._key(key)}: expected true or false, got {v!r}")
        return v

    def pair(self, key, default=_REQUIRED) -> tuple[float, float] | None:
        v = self._raw(key, default)
        if v is None:
            return None
        if (
            not isinstance(v, (list, tuple))
            or len(v) != 2
            or any(isinstance(a, bool) or not isinstance(a, (int, float)) for a in v)
        ):
            raise ConfigError(f"{self._key(key)}: expected [low, high], got {v!r}")
        lo, hi = float(v[0]), float(v[1])
        if not lo < hi:
            raise ConfigError(f"{self._key(key)}: needs low < high")
        return lo, hi

    def int_list(self, key, default=_REQUIRED, minimum=1) -> tuple[int, ...]:
        v = self._raw(key, default)
        if not isinstance(v, (list, tuple)) or not v or any(isinstance(a, bool) or not isinstance(a, int) for a in v):
            raise ConfigError(f"{self._key(key)}: expected a non-empty list of integers")
        if any(a < minimum for a in v):
            raise ConfigError(f"{self._key(key)}: entries must be >= {minimum}")
        return tuple(v)

    def str_list(self, key, default=_REQUIRED, choices=None) -> tuple[str, ...]:
        v = self._raw(key, default)
        if not isinstance(v, (list, tuple)) or not v or any(not isinstance(a, str) for a in v):
            raise ConfigError(f"{self._key(key)}: expected a non-empty list of strings")
        if choices is not None:
            bad = [a for a in v if a not in choices]
            if bad:
                raise ConfigError(f"{self._key(key)}: {bad} not in {list(choices)}")
        if len(set(v)) != len(v):
            raise ConfigError(f"{self._key(key)}: duplicate entries")
        return tuple(v)

    def table(self, key, allowed) -> "_Table":
        return _Table(self.data.get(key, {}), self._key(key), allowed)

    def tables(self, key, allowed) -> list["_Table"]:
        v = self.data.get(key, [])
        if not isinstance(v, list):
            raise ConfigError(f"{self._key(key)}: expected an array of tables")
        return [_Table(t, f"{self._key(key)}[{k}]", allowed) for k, t in enumerate(v)]

    def path(self, key, base: Path, default=_REQUIRED) -> Path | None:
        v = self.str(key, default)
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else base / p


# ---------------------------------------------------------------------------
# Shared sub-tables
# ---------------------------------------------------------------------------

_TMCMC_KEYS = ("population_size", "target_stage_cov", "proposal_scale", "max_stages", "chain_steps")
_PRIOR_KEYS = ("kind", "lower", "upper", "mean", "std")


def _tmcmc(t: _Table, defaults: TmcmcConfig = TmcmcConfig()) -> TmcmcConfig:
    try:
        return TmcmcConfig(
            population_size=t.int("population_size", defaults.population_size, minimum=2),
            target_stage_cov=t.float("target_stage_cov", defaults.target_stage_cov, positive=True),
            proposal_scale=t.float("proposal_scale", defaults.proposal_scale, positive=True),
            max_stages=t.int("max_stages", defaults.max_stages, minimum=1),
            chain_steps=t.int("chain_steps", defaults.chain_steps, minimum=1),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{t.where}: {exc}") from exc


def _prior(t: _Table, default: GaussianSpec | UniformSpec) -> GaussianSpec | UniformSpec:
    if not t.data:
        return default
    kind = t.str("kind", choices=("uniform", "gaussian"))
    try:
        if kind == "uniform":
            if t.has("mean") or t.has("std"):
                raise ConfigError(f"{t.where}: uniform prior takes lower and upper")
            return UniformSpec(t.float("lower"), t.float("upper"))
        if t.has("lower") or t.has("upper"):
            raise ConfigError(f"{t.where}: gaussian prior takes mean and std")
        return GaussianSpec(t.float("mean"), t.float("std", positive=True))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{t.where}: {exc}") from exc


def _box(t: _Table, names: tuple[str, ...], default: BoxPrior) -> BoxPrior:
    ranges = {n: t.pair(n, None) or (default.bounds[default.index(n)].lower, default.bounds[default.index(n)].upper)
              for n in names}
    return BoxPrior.from_pairs(**ranges)


_CLASS_PRIOR_KEYS = ("theta_prior", "mu_prior", "sigma_theta_prior", "sigma_y_prior")


def _candidates(t: _Table, models: tuple[str, ...]) -> list[ModelClassSpec]:
    base = ModelClassSpec("M1a")
    kw = {}
    for key in _CLASS_PRIOR_KEYS:
        pr = t.pair(key, None)
        if pr is not None:
            kw[key] = UniformSpec(*pr)
    return [ModelClassSpec(m, **{k: kw.get(k, getattr(base, k)) for k in _CLASS_PRIOR_KEYS}) for m in models]


# ---------------------------------------------------------------------------
# Per-command sections
# ---------------------------------------------------------------------------

_SYNTH_KEYS = ("name", "function", "error_type", "theta_hat", "sigma_theta_hat", "sigma_y_hat", "x_range",
               "n_points", "seed")
_GROUPED_KEYS = ("name", "mu_theta", "sigma_theta", "sigma_y", "n_groups", "points_per_group", "x_range",
                 "x_design", "seed")


def _check_names(names: list[str], where: str) -> None:
    for n in names:
        if not n or any(c in n for c in "/\\") or n.startswith("."):
            raise ConfigError(f"{where}: {n!r} is not a usable file name")
    if len(set(names)) != len(names):
        raise ConfigError(f"{where}: duplicate dataset names")


def _parse_generate(t: _Table, base: Path) -> dict:
    synth = []
    for d in t.tables("datasets", _SYNTH_KEYS):
        name = d.str("name")
        fields = {k: v for k, v in d.data.items() if k not in ("name",)}
        if "x_range" in fields:
            fields["x_range"] = d.pair("x_range")
        for k in ("theta_hat", "sigma_theta_hat", "sigma_y_hat"):
            if k in fields:
                fields[k] = d.float(k)
        if "n_points" in fields:
            fields["n_points"] = d.int("n_points", minimum=1)
        if "seed" in fields:
            fields["seed"] = d.int("seed", minimum=0)
        for k in ("function", "error_type"):
            if k in fields:
                fields[k] = d.str(k)
        synth.append((name, fields))
    grouped = []
    for d in t.tables("grouped", _GROUPED_KEYS):
        grouped.append(
            (
                d.str("name"),
                dict(
                    hyper=(d.float("mu_theta", 1.0), d.float("sigma_theta", 0.5), d.float("sigma_y", 0.1)),
                    n_groups=d.int("n_groups", 5, minimum=1),
                    points_per_group=d.int("points_per_group", 11, minimum=1),
                    x_range=d.pair("x_range", (0.1, 1.0)),
                    x_design=d.str("x_design", "grid", choices=("grid", "uniform")),
                    seed=d.int("seed", None, minimum=0),
                ),
            )
        )
    if not synth and not grouped:
        raise ConfigError("generate: give at least one [[generate.datasets]] or [[generate.grouped]] entry")
    _check_names([n for n, _ in synth] + [n for n, _ in grouped], "generate")
    for name, fields in synth:
        probe = dict(fields)
        probe.setdefault("seed", 0)
        try:
            SyntheticSpec.from_dict(probe)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"generate.datasets {name!r}: {exc}") from exc
    for name, g in grouped:
        if min(g["hyper"][1:]) < 0:
            raise ConfigError(f"generate.grouped {name!r}: noise levels must be non-negative")
    return {"datasets": synth, "grouped": grouped}


_SELECT_KEYS = ("dataset", "study", "grouping", "models", "n_samples", "x_range", "n_points") + _CLASS_PRIOR_KEYS


def _parse_select(t: _Table, base: Path) -> dict:
    study = t.str("study", None, choices=("separation",))
    if study is None and not t.has("dataset"):
        raise ConfigError("select: give either dataset or study")
    if study is not None and t.has("dataset"):
        raise ConfigError("select: dataset and study are mutually exclusive")
    if study is not None:
        for k in ("grouping", "models") + _CLASS_PRIOR_KEYS:
            if t.has(k):
                raise ConfigError(f"select.{k} does not apply to the separation study")
    elif t.has("x_range") or t.has("n_points"):
        raise ConfigError("select: x_range and n_points only apply to study = \"separation\"")
    return {
        "study": study,
        "dataset": t.path("dataset", base, None),
        "grouping": t.str("grouping", "points", choices=("points", "file")),
        "candidates": _candidates(t, t.str_list("models", MODEL_NAMES, choices=MODEL_NAMES)),
        "n_samples": t.int("n_samples", 10_000, minimum=1),
        "x_range": t.pair("x_range", (0.0, 1.0)),
        "n_points": t.int("n_points", 1000, minimum=1),
    }


def _parse_group_study(t: _Table, base: Path) -> dict:
    return {
        "n_samples": t.int("n_samples", 10_000, minimum=1),
        "hyper": (t.float("mu_theta", 1.0), t.float("sigma_theta", 0.5, positive=True),
                  t.float("sigma_y", 0.1, positive=True)),
    }


_GROUP_STUDY_KEYS = ("n_samples", "mu_theta", "sigma_theta", "sigma_y")


def _parse_reduced_order(t: _Table, base: Path) -> dict:
    noise = t.str("noise", "both", choices=("both", "noisy", "noiseless"))
    sizes = t.int_list("sizes", (20, 50, 100, 200))
    grid_size = t.int("grid_size", 100, minimum=1)
    if grid_size not in sizes:
        raise ConfigError(f"reduced_order_study.grid_size {grid_size} is not one of sizes {list(sizes)}")
    return {
        "sizes": sizes,
        "noise": {"both": None, "noisy": True, "noiseless": False}[noise],
        "functions": t.str_list("functions", ("quadratic", "cubic"), choices=tuple(FUNCTION_POWERS)),
        "n_samples": t.int("n_samples", 10_000, minimum=1),
        "grid_size": grid_size if t.bool("grids", True) else None,
    }


_REDUCED_KEYS = ("sizes", "noise", "functions", "n_samples", "grid_size", "grids")

_HSM_KEYS = ("dataset", "independent_sigma", "sigma_y", "inference", "n_samples", "proposal_prior",
             "sigma_proposal", "hyper_sigma_prior", "tmcmc", "hyper_prior", "hyper_tmcmc", "incremental",
             "min_ess_fraction")

DEFAULT_GROUP_TMCMC = TmcmcConfig(population_size=5000, chain_steps=3)


def _parse_hsm(t: _Table, base: Path) -> dict:
    independent = t.bool("independent_sigma", False)
    inference = t.str("inference", "tmcmc", choices=("tmcmc", "conjugate"))
    if independent:
        if t.has("sigma_y"):
            raise ConfigError("hsm.sigma_y is fixed noise; with independent_sigma = true give sigma_proposal")
        if inference == "conjugate":
            raise ConfigError("hsm: conjugate inference needs a known sigma_y (independent_sigma = false)")
        sig_prop = UniformSpec(*t.pair("sigma_proposal", (0.001, 1.0)))
        hyper_sig = t.pair("hyper_sigma_prior", None)
        hyper_sig = UniformSpec(*hyper_sig) if hyper_sig is not None else sig_prop
        sigma_y = None
    else:
        for k in ("sigma_proposal", "hyper_sigma_prior"):
            if t.has(k):
                raise ConfigError(f"hsm.{k} needs independent_sigma = true")
        sigma_y = t.float("sigma_y", positive=True)
        sig_prop = hyper_sig = None
    if inference == "tmcmc" and t.has("n_samples"):
        raise ConfigError("hsm.n_samples applies to conjugate inference; set hsm.tmcmc.population_size instead")
    if inference == "conjugate" and t.has("tmcmc"):
        raise ConfigError("hsm.tmcmc applies to tmcmc inference")
    frac = t.float("min_ess_fraction", 0.5)
    if not 0 <= frac <= 1:
        raise ConfigError("hsm.min_ess_fraction must lie in [0, 1]")
    from .importance import DEFAULT_HYPER_PRIOR

    return {
        "dataset": t.path("dataset", base),
        "variant": "HS2" if independent else "HS1",
        "sigma_y": sigma_y,
        "inference": inference,
        "n_samples": t.int("n_samples", 10_000, minimum=1),
        "proposal_prior": _prior(t.table("proposal_prior", _PRIOR_KEYS), UniformSpec(-1.0, 3.0)),
        "sigma_proposal": sig_prop,
        "hyper_sigma_prior": hyper_sig,
        "tmcmc": _tmcmc(t.table("tmcmc", _TMCMC_KEYS), DEFAULT_GROUP_TMCMC),
        "hyper_prior": _box(t.table("hyper_prior", ("mu_theta", "sigma_theta")), ("mu_theta", "sigma_theta"),
                            DEFAULT_HYPER_PRIOR),
        "hyper_tmcmc": _tmcmc(t.table("hyper_tmcmc", _TMCMC_KEYS)),
        "incremental": t.bool("incremental", True),
        "min_ess_fraction": frac,
    }


_EIM_KEYS = ("dataset", "groups", "sigma_bounds", "n_sigma", "theta_grid", "n_initial", "n_train_per_basis",
             "growth_delta", "epsilon_lim", "max_bases", "sampler", "n_samples", "proposal_prior", "tmcmc",
             "hs3", "hyper_prior", "hyper_tmcmc")


def _parse_eim(t: _Table, base: Path) -> dict:
    tg = t._raw("theta_grid", [-1.0, 3.0, 64])
    if (
        not isinstance(tg, list) or len(tg) != 3
        or any(isinstance(a, bool) or not isinstance(a, (int, float)) for a in tg)
        or isinstance(tg[2], float) or tg[2] < 0 or not tg[0] < tg[1]
    ):
        raise ConfigError("eim.theta_grid: expected [low, high, count] with low < high and integer count >= 0")
    lo, hi = t.pair("sigma_bounds", (0.001, 1.0))
    if lo <= 0:
        raise ConfigError("eim.sigma_bounds: lower bound must be positive")
    sampler = t.str("sampler", "conjugate", choices=("conjugate", "tmcmc"))
    if sampler == "conjugate" and t.has("tmcmc"):
        raise ConfigError("eim.tmcmc applies to sampler = \"tmcmc\"")
    if sampler == "tmcmc" and t.has("n_samples"):
        raise ConfigError("eim.n_samples applies to the conjugate sampler; set eim.tmcmc.population_size")
    from .eim import DEFAULT_HS3_PRIOR

    names = ("mu_theta", "sigma_theta", "sigma_y")
    groups = t.str_list("groups", None) if t.has("groups") else None
    return {
        "dataset": t.path("dataset", base),
        "groups": groups,
        "grid": EimGridSpec(
            sigma_bounds=(lo, hi),
            n_sigma=t.int("n_sigma", 128, minimum=2),
            theta_grid=(float(tg[0]), float(tg[1]), int(tg[2])),
            n_initial=t.int("n_initial", 2, minimum=1),
            n_train_per_basis=t.int("n_train_per_basis", 500, minimum=1),
            growth_delta=t.float("growth_delta", 1e-3, positive=True),
        ),
        "epsilon_lim": t.float("epsilon_lim", 1e-5, positive=True),
        "max_bases": t.int("max_bases", 60, minimum=1),
        "sampler": sampler,
        "n_samples": t.int("n_samples", 10_000, minimum=1),
        "proposal_prior": _prior(t.table("proposal_prior", _PRIOR_KEYS), UniformSpec(-1.0, 3.0)),
        "tmcmc": _tmcmc(t.table("tmcmc", _TMCMC_KEYS), DEFAULT_GROUP_TMCMC),
        "hs3": t.bool("hs3", True),
        "hyper_prior": _box(t.table("hyper_prior", names), names, DEFAULT_HS3_PRIOR),
        "hyper_tmcmc": _tmcmc(t.table("hyper_tmcmc", _TMCMC_KEYS)),
    }


_PREDICT_KEYS = ("dataset", "grouping", "models", "n_samples", "nx", "ny", "n_std", "x_range") + _CLASS_PRIOR_KEYS


def _parse_predict(t: _Table, base: Path) -> dict:
    return {
        "dataset": t.path("dataset", base),
        "grouping": t.str("grouping", "points", choices=("points", "file")),
        "candidates": _candidates(t, t.str_list("models", MODEL_NAMES, choices=MODEL_NAMES)),
        "n_samples": t.int("n_samples", 10_000, minimum=1),
        "nx": t.int("nx", 101, minimum=2),
        "ny": t.int("ny", 201, minimum=2),
        "n_std": t.float("n_std", 5.0, positive=True),
        "x_range": t.pair("x_range", None),
    }


_PARSERS = {
    "generate": (("datasets", "grouped"), _parse_generate),
    "select": (_SELECT_KEYS, _parse_select),
    "group-study": (_GROUP_STUDY_KEYS, _parse_group_study),
    "reduced-order-study": (_REDUCED_KEYS, _parse_reduced_order),
    "hsm": (_HSM_KEYS, _parse_hsm),
    "eim": (_EIM_KEYS, _parse_eim),
    "predict": (_PREDICT_KEYS, _parse_predict),
}


def section_name(command: str) -> str:
    return command.replace("-", "_")


@dataclass
class RunConfig:
    """Validated settings for one command."""

    command: str
    seed: int = 0
    threads: int = 1
    settings: dict = field(default_factory=dict)
    source: Path | None = None


def parse_config(
    command: str,
    raw: dict,
    base_dir: Path = Path("."),
    seed: int | None = None,
    threads: int | None = None,
    source: Path | None = None,
) -> RunConfig:
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    sec = section_name(command)
    top = _Table(raw, "", ("schema_version", "seed", "threads", sec))
    version = top.int("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {version} is not supported (expected {SCHEMA_VERSION})")
    cfg_seed = top.int("seed", 0, minimum=0)
    cfg_threads = top.int("threads", 1, minimum=1)
    allowed, parser = _PARSERS[command]
    settings = parser(top.table(sec, allowed), base_dir)
    run_seed = cfg_seed if seed is None else seed
    if not 0 <= run_seed < 2**64:
        raise ConfigError("seed must fit in an unsigned 64-bit integer")
    run_threads = cfg_threads if threads is None else threads
    if run_threads < 1:
        raise ConfigError("threads must be >= 1")
    return RunConfig(command, run_seed, run_threads, settings, source)


def load_config(command: str, path: str | Path | None, seed: int | None = None, threads: int | None = None) -> RunConfig:
    """Read and validate ``path``; with no path, every setting takes its default."""
    if path is None:
        raw = {"schema_version": SCHEMA_VERSION}
        base = Path(".")
    else:
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base = path.resolve().parent
    return parse_config(command, raw, base, seed, threads, Path(path) if path is not None else None)
