"""``hsmbayes`` command-line front end.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure,
4 EIM training did not converge.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import re
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import COMMANDS, ConfigError, RunConfig, load_config
from .core import DataSet, GroupedData
from .datafiles import fmt, read_dataset_csv, write_dataset_csv, write_json, write_samples_csv, write_text
from .eim import (
    FlooringStats,
    conjugate_basis_sampler,
    hs3_hyperposterior,
    save_eim_model,
    tmcmc_basis_sampler,
    train_eim,
)
from .experiments import (
    SyntheticSpec,
    generate_data,
    generate_grouped_data,
    prediction_grid,
    run_grouping_study,
    run_model_selection,
    run_reduced_order_study,
    run_separation_study,
    single_point_groups,
)
from .importance import (
    DatasetInference,
    HsmLikelihoodEstimator,
    InvalidArchiveError,
    append_inference,
    conjugate_inference,
    hsm_add_groups,
    hsm_hyperposterior,
    read_inferences,
    tmcmc_inference,
    write_inferences,
)
from .samplers import TmcmcError, WeightedSamples, ZeroEvidenceError, column, posterior_stats

logger = logging.getLogger("hsmbayes")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_NOT_CONVERGED = 4


class NumericalFailure(RuntimeError):
    pass


def derived_seed(seed: int, *labels: str) -> int:
    """A seed for one named task, stable under adding or reordering other tasks."""
    key = tuple(zlib.crc32(label.encode("utf-8")) for label in labels)
    state = np.random.SeedSequence(entropy=seed, spawn_key=key).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) or "_"


def _load_dataset(path: Path) -> GroupedData:
    try:
        return read_dataset_csv(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset {path} not found") from exc
    except (ValueError, StopIteration) as exc:
        raise ConfigError(f"dataset {path}: {exc}") from exc


def _write_report(out: Path, stem: str, report) -> None:
    write_text(out / f"{stem}.csv", report.to_csv())
    write_text(out / f"{stem}.json", report.to_json())
    if not report.rows:
        raise NumericalFailure(f"{stem}: every candidate failed: {report.failures}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig, out: Path) -> int:
    s = cfg.settings
    for name, fields in s["datasets"]:
        fields = dict(fields)
        fields.setdefault("seed", derived_seed(cfg.seed, "generate", name))
        spec = SyntheticSpec.from_dict(fields)
        write_dataset_csv(out / f"{name}.csv", generate_data(spec, name))
        write_json(out / f"{name}.spec.json", {"kind": "synthetic", "name": name, "spec": spec.to_dict()})
    for name, g in s["grouped"]:
        g = dict(g)
        if g["seed"] is None:
            g["seed"] = derived_seed(cfg.seed, "generate", name)
        data = generate_grouped_data(**g)
        write_dataset_csv(out / f"{name}.csv", data)
        doc = {
            "kind": "grouped",
            "name": name,
            "mu_theta": g["hyper"][0],
            "sigma_theta": g["hyper"][1],
            "sigma_y": g["hyper"][2],
            "n_groups": g["n_groups"],
            "points_per_group": g["points_per_group"],
            "x_range": list(g["x_range"]),
            "x_design": g["x_design"],
            "seed": g["seed"],
            "realized_theta": data.meta["theta"],
        }
        write_json(out / f"{name}.spec.json", doc)
    return EXIT_OK


def _selection_inputs(s: dict) -> tuple[GroupedData, GroupedData, GroupedData]:
    data = _load_dataset(s["dataset"])
    pooled = GroupedData.single(data.pooled(id="data"))
    m2 = single_point_groups(pooled) if s["grouping"] == "points" else data
    return data, pooled, m2


def cmd_select(cfg: RunConfig, out: Path) -> int:
    s = cfg.settings
    if s["study"] == "separation":
        reports = run_separation_study(s["x_range"], s["n_points"], cfg.seed, s["n_samples"], cfg.threads)
        for name, rep in reports.items():
            _write_report(out, f"{name}_report", rep)
        return EXIT_OK
    _, pooled, m2 = _selection_inputs(s)
    rep = run_model_selection(m2, s["candidates"], s["n_samples"], cfg.seed, cfg.threads, m1_data=pooled)
    _write_report(out, "report", rep)
    return EXIT_OK


def cmd_group_study(cfg: RunConfig, out: Path) -> int:
    s = cfg.settings
    rep = run_grouping_study(cfg.seed, s["n_samples"], cfg.threads, s["hyper"])
    _write_report(out, "grouping_report", rep)
    return EXIT_OK


def cmd_reduced_order_study(cfg: RunConfig, out: Path) -> int:
    s = cfg.settings
    reports, grids = run_reduced_order_study(
        s["sizes"], s["noise"], cfg.seed, s["functions"], s["n_samples"], s["grid_size"], cfg.threads
    )
    (out / "reports").mkdir(exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["function", "noise", "n_points", "model", "ln_evidence", "post_prob", "winner"])
    for (func, noisy, n), rep in reports.items():
        tag = "noisy" if noisy else "noiseless"
        _write_report(out / "reports", f"{func}_{tag}_{n}", rep)
        for r in rep.rows:
            w.writerow([func, tag, n, r.model, fmt(r.ln_evidence), fmt(r.post_prob), int(r.model == rep.winner)])
    write_text(out / "summary.csv", buf.getvalue())
    if grids:
        (out / "grids").mkdir(exist_ok=True)
        for (func, noisy, label), grid in grids.items():
            stem = _safe_name(f"{func}_{'noisy' if noisy else 'noiseless'}_{label}")
            write_text(out / "grids" / f"{stem}.csv", grid.to_csv())
            write_text(out / "grids" / f"{stem}_summary.csv", grid.summary_csv())
    return EXIT_OK


def cmd_predict(cfg: RunConfig, out: Path) -> int:
    s = cfg.settings
    _, pooled, m2 = _selection_inputs(s)
    rep = run_model_selection(m2, s["candidates"], s["n_samples"], cfg.seed, cfg.threads, m1_data=pooled)
    _write_report(out, "report", rep)
    for label, (spec, ws) in rep.posteriors.items():
        grid = prediction_grid(pooled, spec, ws, s["nx"], s["ny"], s["x_range"], s["n_std"])
        write_text(out / f"prediction_{_safe_name(label)}.csv", grid.to_csv())
        write_text(out / f"prediction_{_safe_name(label)}_summary.csv", grid.summary_csv())
    return EXIT_OK


# --- hsm -------------------------------------------------------------------


def _group_digest(group: DataSet) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(group.x, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(group.y, dtype="<f8").tobytes())
    return h.hexdigest()


def _inference_settings(s: dict) -> dict:
    d = {"variant": s["variant"], "inference": s["inference"], "proposal_prior": s["proposal_prior"].to_dict()}
    if s["variant"] == "HS1":
        d["sigma_y"] = s["sigma_y"]
    else:
        d["sigma_proposal"] = s["sigma_proposal"].to_dict()
    if s["inference"] == "conjugate":
        d["n_samples"] = s["n_samples"]
    else:
        t = s["tmcmc"]
        d["tmcmc"] = {
            "population_size": t.population_size, "target_stage_cov": t.target_stage_cov,
            "proposal_scale": t.proposal_scale, "max_stages": t.max_stages, "chain_steps": t.chain_steps,
        }
    return d


def _infer_group(group: DataSet, s: dict, seed: int) -> DatasetInference:
    if s["inference"] == "conjugate":
        inf = conjugate_inference(group, s["sigma_y"], s["proposal_prior"], s["n_samples"], seed)
    elif s["variant"] == "HS1":
        inf = tmcmc_inference(group, s["proposal_prior"], sigma_y=s["sigma_y"], config=replace(s["tmcmc"], seed=seed))
    else:
        inf = tmcmc_inference(
            group, s["proposal_prior"], sigma_proposal_prior=s["sigma_proposal"], config=replace(s["tmcmc"], seed=seed)
        )
    inf.meta["settings"] = _inference_settings(s)
    inf.meta["data_sha256"] = _group_digest(group)
    inf.meta["seed"] = seed
    return inf


def _read_weighted_csv(path: Path, names: tuple[str, ...]) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != names + ("log_weight",):
            raise InvalidArchiveError(f"{path}: unexpected header {header}")
        return np.array([[float(v) for v in row] for row in r if row])


def cmd_hsm(cfg: RunConfig, out: Path) -> int:
    s = cfg.settings
    data = _load_dataset(s["dataset"])
    archive = out / "archive.jsonl"
    post_path = out / "hyperposterior.csv"
    summary_path = out / "hsm_summary.json"
    settings = _inference_settings(s)
    by_id = {g.id: g for g in data}

    existing: list[DatasetInference] = []
    if s["incremental"] and archive.exists():
        try:
            existing = read_inferences(archive)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"archive/version mismatch in {archive}: {exc}") from exc
        for inf in existing:
            if inf.group_id not in by_id:
                raise ConfigError(f"archive/version mismatch: archived group {inf.group_id!r} is not in the dataset")
            if inf.meta.get("settings") != settings:
                raise ConfigError(
                    f"archive/version mismatch: group {inf.group_id!r} was inferred with different settings; "
                    "use a fresh --out directory or set incremental = false"
                )
            if inf.meta.get("data_sha256") != _group_digest(by_id[inf.group_id]):
                raise ConfigError(f"archive/version mismatch: data for group {inf.group_id!r} changed")
    done = {inf.group_id for inf in existing}
    new_groups = [g for g in data if g.id not in done]

    def infer(g):
        return _infer_group(g, s, derived_seed(cfg.seed, "hsm", g.id))

    if cfg.threads > 1 and len(new_groups) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            new_infs = list(pool.map(infer, new_groups))
    else:
        new_infs = [infer(g) for g in new_groups]
    if existing:
        for inf in new_infs:
            append_inference(archive, inf)
    else:
        write_inferences(archive, new_infs)
    infs = existing + new_infs
    order = {g.id: k for k, g in enumerate(data)}
    infs.sort(key=lambda i: order[i.group_id])

    names = ("mu_theta", "sigma_theta")
    hyper_cfg = replace(s["hyper_tmcmc"], seed=derived_seed(cfg.seed, "hsm", "hyperposterior"))
    sig = s["hyper_sigma_prior"]

    def estimator(group_infs):
        return HsmLikelihoodEstimator(group_infs, s["variant"], sig, cfg.threads)

    prev = None
    if s["incremental"] and existing and summary_path.exists() and post_path.exists():
        prev_doc = json.loads(summary_path.read_text(encoding="utf-8"))
        if (
            prev_doc.get("settings") == settings
            and prev_doc.get("hyper_prior") == s["hyper_prior"].to_dict()
            and prev_doc.get("hyper_sigma_prior") == (sig.to_dict() if sig is not None else None)
            and set(prev_doc.get("groups", [])) == done
        ):
            rows = _read_weighted_csv(post_path, names)
            prev = (prev_doc, WeightedSamples(rows[:, :2], rows[:, 2], float(prev_doc["log_evidence"])))

    if prev is not None and not new_infs:
        logger.info("hyperposterior already covers every group")
        return EXIT_OK

    ws = None
    method = "tmcmc"
    stages = None
    if prev is not None:
        ws = hsm_add_groups(prev[1], estimator(new_infs))
        method = "sequential"
        if ws.ess < s["min_ess_fraction"] * len(ws):
            logger.warning("sequential update ESS %.1f too low; rerunning the hyperposterior", ws.ess)
            ws, method = None, "tmcmc"
    if ws is None:
        res = hsm_hyperposterior(estimator(infs), s["hyper_prior"], hyper_cfg)
        ws, stages = res.as_weighted(), res.stage_count

    write_samples_csv(post_path, names, ws.samples, ws.log_weights)
    st = posterior_stats(ws, {n: column(k) for k, n in enumerate(names)})
    doc = {
        "variant": s["variant"],
        "groups": [i.group_id for i in infs],
        "new_groups": [i.group_id for i in new_infs],
        "method": method,
        "log_evidence": ws.log_evidence,
        "ess": ws.ess,
        "n_samples": len(ws),
        "tmcmc_stages": stages,
        "posterior": {n: {"mean": st[n].mean, "std": st[n].std} for n in names},
        "settings": settings,
        "hyper_prior": s["hyper_prior"].to_dict(),
        "hyper_sigma_prior": sig.to_dict() if sig is not None else None,
        "seed": cfg.seed,
    }
    write_json(summary_path, doc)
    return EXIT_OK


# --- eim -------------------------------------------------------------------


def cmd_eim(cfg: RunConfig, out: Path) -> int:
    s = cfg.settings
    data = _load_dataset(s["dataset"])
    groups = list(data)
    if s["groups"] is not None:
        missing = [g for g in s["groups"] if g not in data.ids]
        if missing:
            raise ConfigError(f"eim.groups: {missing} not in dataset")
        groups = [data[g] for g in s["groups"]]
    if s["sampler"] == "conjugate":
        sampler = conjugate_basis_sampler(s["proposal_prior"], s["n_samples"])
    else:
        sampler = tmcmc_basis_sampler(s["proposal_prior"], s["tmcmc"])

    def train(g):
        return train_eim(
            g, s["grid"], sampler, None, s["epsilon_lim"], s["max_bases"], derived_seed(cfg.seed, "eim", g.id)
        )

    if cfg.threads > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            models = list(pool.map(train, groups))
    else:
        models = [train(g) for g in groups]

    eim_dir = out / "eim"
    eim_dir.mkdir(exist_ok=True)
    files, used = {}, set()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group_id", "n_bases", "max_error"])
    for m in models:
        stem = _safe_name(m.group_id)
        while stem in used:
            stem += "_"
        used.add(stem)
        save_eim_model(m, eim_dir / f"{stem}.json")
        files[m.group_id] = f"eim/{stem}.json"
        for n_bases, err in m.error_trace:
            w.writerow([m.group_id, n_bases, fmt(err)])
    write_text(out / "error_trace.csv", buf.getvalue())

    converged = all(m.converged for m in models)
    summary = {
        "groups": [
            {
                "group_id": m.group_id, "file": files[m.group_id], "status": m.status, "converged": m.converged,
                "n_bases": m.n_bases, "achieved_error": m.achieved_error, "epsilon_lim": m.epsilon_lim,
            }
            for m in models
        ],
        "converged": converged,
        "seed": cfg.seed,
    }
    if not converged:
        bad = [m.group_id for m in models if not m.converged]
        summary["hs3"] = "skipped: training did not converge"
        write_json(out / "eim_summary.json", summary)
        logger.error("EIM training did not converge for groups %s", bad)
        return EXIT_NOT_CONVERGED
    if s["hs3"]:
        stats = FlooringStats()
        hyper_cfg = replace(s["hyper_tmcmc"], seed=derived_seed(cfg.seed, "eim", "hyperposterior"))
        res = hs3_hyperposterior(models, s["hyper_prior"], hyper_cfg, stats)
        names = ("mu_theta", "sigma_theta", "sigma_y")
        write_samples_csv(out / "hs3_posterior.csv", names, res.samples)
        st = posterior_stats(res.as_weighted(), {n: column(k) for k, n in enumerate(names)})
        summary["hs3"] = {
            "log_evidence": res.log_evidence,
            "tmcmc_stages": res.stage_count,
            "posterior": {n: {"mean": st[n].mean, "std": st[n].std} for n in names},
            "floored_fraction": stats.rate,
            "hyper_prior": s["hyper_prior"].to_dict(),
        }
    write_json(out / "eim_summary.json", summary)
    return EXIT_OK


_COMMANDS = {
    "generate": cmd_generate,
    "select": cmd_select,
    "group-study": cmd_group_study,
    "reduced-order-study": cmd_reduced_order_study,
    "hsm": cmd_hsm,
    "eim": cmd_eim,
    "predict": cmd_predict,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hsmbayes", description="Hierarchical Bayesian model calibration experiments.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "generate": "write synthetic data sets",
        "select": "model class selection on a data set, or the separation study",
        "group-study": "compare data groupings",
        "reduced-order-study": "linear model classes on polynomial data",
        "hsm": "importance-sampling hierarchical analysis",
        "eim": "train EIM surrogates and sample the hyperposterior",
        "predict": "robust posterior prediction grids",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", type=Path, help="TOML run configuration")
        sp.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
        sp.add_argument("--seed", type=_u64, help="overrides the config seed")
        sp.add_argument("--threads", type=_positive, help="worker threads (overrides the config)")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = load_config(args.command, args.config, args.seed, args.threads)
        try:
            args.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {args.out}: {exc}") from exc
        return _COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        print(f"hsmbayes: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"hsmbayes: cannot write output: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, ZeroEvidenceError, TmcmcError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"hsmbayes: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"hsmbayes: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
