"""Hierarchical inference from per-group posterior samples, one group at a time.

Each group is analysed on its own, once, with a broad prior on theta. The
posterior samples (and the evidence) are archived. The hierarchical
likelihood of (mu_theta, sigma_theta) is then estimated by reweighting those
archived samples, so no group is ever re-analysed.

When a sixth group arrives, only that group is sampled and the existing
hyperposterior is reweighted by its contribution.
"""

import time
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np

from hsmbayes import (
    HsmLikelihoodEstimator,
    TmcmcConfig,
    UniformSpec,
    generate_grouped_data,
    hsm_add_groups,
    hsm_hyperposterior,
    read_inferences,
    tmcmc_inference,
    write_inferences,
)
from hsmbayes.importance import append_inference

data = generate_grouped_data((1.0, 0.5, 0.1), n_groups=6, points_per_group=11, seed=1)
print("true group thetas:", np.round(data.meta["theta"], 3))


def analyse(k, group):
    cfg = TmcmcConfig(population_size=5000, chain_steps=3, seed=k)
    return tmcmc_inference(group, UniformSpec(-1, 3), sigma_y=0.1, config=cfg)


def summary(ws, label):
    m = ws.weights @ ws.samples
    sd = np.sqrt(ws.weights @ (ws.samples - m) ** 2)
    print(f"{label}: mu_theta {m[0]:.3f} +- {sd[0]:.3f}, sigma_theta {m[1]:.3f} +- {sd[1]:.3f}, "
          f"ln evidence {ws.log_evidence:.2f}")


with TemporaryDirectory() as tmp:
    archive = Path(tmp) / "archive.jsonl"
    write_inferences(archive, [analyse(k, g) for k, g in enumerate(list(data)[:5])])

    five = read_inferences(archive)
    post5 = hsm_hyperposterior(HsmLikelihoodEstimator(five), config=TmcmcConfig(population_size=2000, seed=0))
    summary(post5.as_weighted(), "five groups")

    t0 = time.perf_counter()
    new = analyse(5, data[5])
    append_inference(archive, new)
    post6 = hsm_add_groups(post5.as_weighted(), HsmLikelihoodEstimator([new]))
    print(f"sixth group added in {time.perf_counter() - t0:.2f} s (ESS {post6.ess:.0f} of {len(post6)})")
    summary(post6, "six groups ")
    print("archive now holds", [i.group_id for i in read_inferences(archive)])
