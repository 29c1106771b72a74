import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hsmbayes.core import (
    BoxPrior,
    DataPoint,
    DataSet,
    GaussianNoiseLikelihood,
    GaussianSpec,
    GroupedData,
    HyperParams,
    NoiseParams,
    PowerModel,
    UniformSpec,
    gaussian_log_density,
    kl_gaussian,
    log_sum_exp,
    prior_from_dict,
)

means = st.floats(-50, 50)
stds = st.floats(1e-3, 50)


def test_standard_normal_at_mode():
    assert gaussian_log_density(0.0, GaussianSpec(0, 1)) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)


@given(means, stds)
def test_one_sigma_offset_costs_half(mu, s):
    spec = GaussianSpec(mu, s)
    diff = gaussian_log_density(mu, spec) - gaussian_log_density(mu + s, spec)
    assert diff == pytest.approx(0.5, abs=1e-9)


def test_density_against_trapezoid_normalisation(oracle):
    # the oracle's integral of the unnormalised kernel fixes the normaliser independently
    ref = oracle["gauss_at_1p2"]
    assert gaussian_log_density(1.2, GaussianSpec(1.0, 0.5)) == pytest.approx(ref["value"], abs=1e-8)
    z = np.arange(-9.0, 11.0 + 5e-5, 1e-4)
    p = np.exp(gaussian_log_density(z, GaussianSpec(1.0, 0.5)))
    assert np.sum((p[1:] + p[:-1]) / 2) * 1e-4 == pytest.approx(1.0, abs=1e-8)


@given(means, stds)
def test_density_integrates_to_one(mu, s):
    z = np.linspace(mu - 8 * s, mu + 8 * s, 4001)
    p = np.exp(gaussian_log_density(z, GaussianSpec(mu, s)))
    mass = np.sum((p[1:] + p[:-1]) / 2) * (z[1] - z[0])
    assert mass == pytest.approx(1.0, abs=1e-6)


def test_density_rejects_non_finite():
    with pytest.raises(ValueError):
        gaussian_log_density(math.nan, GaussianSpec(0, 1))
    with pytest.raises(ValueError):
        gaussian_log_density([0.0, math.inf], GaussianSpec(0, 1))


def test_kl_known_values():
    assert kl_gaussian(GaussianSpec(0, 1), GaussianSpec(0, 1)) == 0.0
    assert kl_gaussian(GaussianSpec(0, 1), GaussianSpec(1, 1)) == pytest.approx(0.5)


def test_kl_against_monte_carlo(oracle):
    mc = oracle["kl_mc"]
    kl = kl_gaussian(GaussianSpec(0.3, 0.7), GaussianSpec(-0.2, 1.4))
    assert abs(kl - mc["mean"]) < 3 * mc["se"]


@given(means, stds, means, stds)
def test_kl_non_negative_and_zero_only_on_equal(m1, s1, m2, s2):
    p, q = GaussianSpec(m1, s1), GaussianSpec(m2, s2)
    kl = kl_gaussian(p, q)
    assert kl >= -1e-12
    assert kl_gaussian(p, p) == 0.0
    if abs(m1 - m2) > 1e-3 * max(s1, s2) or abs(math.log(s1 / s2)) > 1e-3:
        assert kl > 0


def test_log_sum_exp_examples(oracle):
    assert log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2))
    assert log_sum_exp([-7.25]) == -7.25
    assert log_sum_exp([-1000.0, -1000.5]) == pytest.approx(oracle["log_sum_exp_pair"], rel=1e-15)
    with pytest.raises(ValueError):
        log_sum_exp([])


@given(st.lists(st.floats(-700, 700), min_size=1, max_size=30), st.floats(-1e3, 1e3))
def test_log_sum_exp_shift(values, c):
    shifted = log_sum_exp(np.asarray(values) + c)
    assert shifted == pytest.approx(log_sum_exp(values) + c, rel=1e-12, abs=1e-9)


def test_spec_validation():
    with pytest.raises(ValueError):
        GaussianSpec(0.0, 0.0)
    with pytest.raises(ValueError):
        UniformSpec(1.0, 1.0)
    with pytest.raises(ValueError):
        HyperParams(1.0, -0.1)
    with pytest.raises(ValueError):
        NoiseParams(0.0)
    with pytest.raises(ValueError):
        DataPoint(math.inf, 0.0)


def test_uniform_outside_support_is_minus_inf():
    u = UniformSpec(-1.0, 3.0)
    lp = u.log_pdf([-1.5, -1.0, 0.0, 3.0, 3.1])
    assert lp[0] == -math.inf and lp[-1] == -math.inf
    assert np.allclose(lp[1:4], -math.log(4))


def test_prior_round_trip():
    for spec in (GaussianSpec(0.2, 1.5), UniformSpec(-1, 3)):
        assert prior_from_dict(spec.to_dict()) == spec


def test_box_prior_samples_inside():
    box = BoxPrior.from_pairs(mu_theta=(-1, 3), sigma_theta=(0.001, 1))
    s = box.sample(np.random.default_rng(0), 500)
    assert s.shape == (500, 2)
    assert np.all(np.isfinite(box.log_pdf(s)))
    assert box.log_pdf([[5.0, 0.5]])[0] == -math.inf


def test_dataset_and_grouping_containers():
    a = DataSet("a", [1, 2], [1, 2.5])
    b = DataSet.from_points("b", [DataPoint(0.5, 0.4)])
    g = GroupedData((a, b))
    assert g.n_points == 3 and g.ids == ["a", "b"]
    assert g["b"] == b and g[0] == a
    assert np.array_equal(g.x, [1, 2, 0.5])
    with pytest.raises(ValueError):
        GroupedData((a, a))
    with pytest.raises(ValueError):
        DataSet("e", [], [])
    with pytest.raises(ValueError):
        a.x[0] = 3.0


def test_forward_model_is_deterministic_and_batched():
    m = PowerModel(2)
    x = np.array([0.5, -1.0, 2.0])
    assert np.array_equal(m(x, 1.5), 1.5 * x**2)
    batch = m(x, np.array([1.0, 2.0]))
    assert batch.shape == (2, 3)
    assert np.array_equal(m(x, np.array([1.0, 2.0])), batch)


def test_gaussian_noise_likelihood_matches_direct_sum():
    d = DataSet("g", [0.1, 0.5, 0.9], [0.2, 0.4, 1.1])
    lik = GaussianNoiseLikelihood(d)
    direct = sum(gaussian_log_density(y, GaussianSpec(1.1 * x, 0.3)) for x, y in zip(d.x, d.y))
    assert lik(1.1, 0.3) == pytest.approx(direct, rel=1e-13)
    assert np.allclose(lik(np.array([1.1, 1.1]), 0.3), direct)
