import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from hsmbayes.core import DataSet, GaussianSpec, GroupedData, HyperParams, NoiseParams, UniformSpec
from hsmbayes.linear import (
    ConditionalPosterior,
    log_cond_evidence_m1a,
    log_cond_evidence_m1b,
    log_cond_evidence_m2a,
    log_cond_evidence_m2b,
    posterior_theta_m1a,
    posterior_theta_m1b,
    posterior_theta_m2b,
    robust_pred_density_hs_family,
    robust_pred_density_m1_family,
)

LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


def grouped(x, y, id="g"):
    return GroupedData.single(DataSet(id, x, y))


# --- M1a --------------------------------------------------------------------


def test_m1a_noiseless_line():
    x = np.linspace(0.1, 1, 7)
    post = posterior_theta_m1a(grouped(x, 1.0 * x), 0.3)
    assert post.mu_tilde == pytest.approx(1.0, abs=1e-14)


def test_m1a_one_point():
    post = posterior_theta_m1a(grouped([2.0], [3.0]), NoiseParams(0.2))
    assert post.mu_tilde == pytest.approx(1.5) and post.sigma_tilde == pytest.approx(0.1)


def test_m1a_posterior_against_quadrature(oracle):
    ref = oracle["m1a_posterior_50"]
    post = posterior_theta_m1a(grouped(ref["x"], ref["y"]), ref["sigma_y"])
    assert post.mu_tilde == pytest.approx(ref["mean"], abs=1e-6)
    assert post.sigma_tilde == pytest.approx(ref["std"], abs=1e-6)


def test_m1a_needs_nonzero_x():
    with pytest.raises(ValueError):
        posterior_theta_m1a(grouped([0.0, 0.0], [1.0, 2.0]), 0.1)
    with pytest.raises(ValueError):
        log_cond_evidence_m1a(grouped([0.0], [1.0]), 0.1)


def test_m1a_plug_in_example():
    d = grouped([1.0], [0.0])
    # the textbook expression, exponent and Gaussian factor both vanish
    assert log_cond_evidence_m1a(d, 1.0, UniformSpec(-1, 3), truncate=False) == pytest.approx(math.log(0.25))
    # with the prior-support mass included
    mass = math.log(0.5 * (math.erf(3 / math.sqrt(2)) - math.erf(-1 / math.sqrt(2))))
    assert log_cond_evidence_m1a(d, 1.0) == pytest.approx(math.log(0.25) + mass, abs=1e-13)


def test_m1a_evidence_against_quadrature(oracle):
    for case in oracle["m1a_evidence"]:
        le = log_cond_evidence_m1a(grouped(case["x"], case["y"]), case["sigma_y"])
        assert math.exp(le - case["log_evidence"]) == pytest.approx(1.0, rel=1e-6), case


def test_m1a_truncation_matters_only_near_bounds(oracle):
    case = oracle["m1a_evidence"][3]  # theta near the upper bound 3
    d = grouped(case["x"], case["y"])
    assert log_cond_evidence_m1a(d, case["sigma_y"], truncate=False) > case["log_evidence"] + 1e-3
    inner = oracle["m1a_evidence"][2]
    d = grouped(inner["x"], inner["y"])
    assert log_cond_evidence_m1a(d, inner["sigma_y"], truncate=False) == pytest.approx(inner["log_evidence"], abs=1e-12)


# --- M1b / M2b ------------------------------------------------------------------


def test_m1b_no_information_returns_prior():
    psi = HyperParams(0.7, 0.4)
    post = posterior_theta_m1b(grouped([0.0, 0.0], [0.3, -0.2]), psi, 0.5)
    assert post.mu_tilde == pytest.approx(0.7) and post.sigma_tilde == pytest.approx(0.4)


def test_m1b_flat_prior_limit(oracle):
    ref = oracle["m1a_posterior_50"]
    d = grouped(ref["x"], ref["y"])
    flat = posterior_theta_m1b(d, HyperParams(0.0, 1e6), ref["sigma_y"])
    m1a = posterior_theta_m1a(d, ref["sigma_y"])
    assert flat.mu_tilde == pytest.approx(m1a.mu_tilde, abs=1e-6)
    assert flat.sigma_tilde == pytest.approx(m1a.sigma_tilde, rel=1e-6)


def test_m1b_against_quadrature(oracle):
    ref = oracle["m1b_fixture"]
    d = grouped(ref["x"], ref["y"])
    psi = HyperParams(ref["mu_theta"], ref["sigma_theta"])
    post = posterior_theta_m1b(d, psi, ref["sigma_y"])
    assert post.mu_tilde == pytest.approx(ref["post_mean"], abs=1e-6)
    assert post.sigma_tilde == pytest.approx(ref["post_std"], abs=1e-6)
    le = log_cond_evidence_m1b(d, psi, ref["sigma_y"])
    assert math.exp(le - ref["log_evidence"]) == pytest.approx(1.0, rel=1e-6)


def test_m1b_empty_data_is_zero():
    assert log_cond_evidence_m1b(GroupedData(()), HyperParams(1, 1), 0.1) == 0.0


def test_m1b_wide_prior_tends_to_m1a_with_prior_correction(oracle):
    ref = oracle["m1b_fixture"]
    d = grouped(ref["x"], ref["y"])
    s = 1e4
    wide = log_cond_evidence_m1b(d, HyperParams(1.0, s), ref["sigma_y"])
    m1a = log_cond_evidence_m1a(d, ref["sigma_y"], UniformSpec(-1, 3))
    assert wide == pytest.approx(m1a + math.log(4.0 / (math.sqrt(2 * math.pi) * s)), abs=1e-3)


def test_m2b_single_group_equals_m1b(oracle):
    ref = oracle["m2b_fixture"]
    g = DataSet("g", ref["x"], ref["y"])
    psi = HyperParams(0.9, 0.3)
    assert log_cond_evidence_m2b(g, psi, 0.1) == log_cond_evidence_m1b(GroupedData.single(g), psi, 0.1)
    assert posterior_theta_m2b(g, psi, 0.1) == posterior_theta_m1b(GroupedData.single(g), psi, 0.1)


def test_m2b_one_point_by_hand():
    post = posterior_theta_m2b(DataSet("p", [1.0], [2.0]), HyperParams(0.0, 1.0), 1.0)
    assert post.mu_tilde == pytest.approx(1.0) and post.sigma_tilde == pytest.approx(math.sqrt(0.5))


def test_m2b_against_quadrature(oracle):
    ref = oracle["m2b_fixture"]
    g = DataSet("g", ref["x"], ref["y"])
    for case in ref["cases"]:
        psi = HyperParams(case["mu_theta"], case["sigma_theta"])
        post = posterior_theta_m2b(g, psi, case["sigma_y"])
        assert post.mu_tilde == pytest.approx(case["post_mean"], abs=1e-6)
        assert post.sigma_tilde == pytest.approx(case["post_std"], abs=1e-6)
        le = log_cond_evidence_m2b(g, psi, case["sigma_y"])
        assert math.exp(le - case["log_evidence"]) == pytest.approx(1.0, rel=1e-6)


@given(st.integers(0, 2**32 - 1), st.integers(2, 30))
def test_m2b_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, n)
    y = 0.8 * x + rng.normal(0, 0.2, n)
    perm = rng.permutation(n)
    psi = HyperParams(rng.uniform(-1, 2), rng.uniform(0.05, 1))
    a = log_cond_evidence_m2b(DataSet("g", x, y), psi, 0.2)
    b = log_cond_evidence_m2b(DataSet("g", x[perm], y[perm]), psi, 0.2)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_gaussian_evidence_random_configurations_against_quad():
    rng = np.random.default_rng(2024)
    for _ in range(25):
        n = int(rng.integers(1, 51))
        x = rng.uniform(-1, 1, n)
        theta = rng.uniform(-0.5, 2.5)
        sig = rng.uniform(0.05, 1.0)
        y = theta * x + rng.normal(0, sig, n)
        psi = HyperParams(rng.uniform(-1, 3), rng.uniform(0.05, 1))
        d = grouped(x, y)
        post = posterior_theta_m1b(d, psi, sig)
        ref_log = log_cond_evidence_m1b(d, psi, sig)

        def f(t):
            r = y - t * x
            ll = -n * (math.log(sig) + LOG_SQRT_2PI) - float(r @ r) / (2 * sig**2)
            lp = -math.log(psi.sigma_theta) - LOG_SQRT_2PI - (t - psi.mu_theta) ** 2 / (2 * psi.sigma_theta**2)
            return math.exp(ll + lp - ref_log)

        c, w = post.mu_tilde, post.sigma_tilde
        val = integrate.quad(f, c - 30 * w, c + 30 * w, points=[c - 3 * w, c, c + 3 * w], epsabs=0, epsrel=1e-11,
                             limit=200)[0]
        assert val == pytest.approx(1.0, rel=1e-6)


# --- M2a ----------------------------------------------------------------------


def test_m2a_single_point_at_mean():
    le = log_cond_evidence_m2a(DataSet("p", [2.0], [2.0]), HyperParams(1.0, 0.5))
    assert le == pytest.approx(-LOG_SQRT_2PI - math.log(0.5) - math.log(2))


def test_m2a_inconsistent_ratios():
    assert log_cond_evidence_m2a(DataSet("p", [1, 2], [1, 2.5]), HyperParams(1.0, 0.5)) == -math.inf


def test_m2a_consistent_group_uses_all_jacobians():
    g = DataSet("p", [0.5, 2.0], [0.6, 2.4])
    expected = GaussianSpec(1.0, 0.5).log_pdf(1.2) - math.log(0.5) - math.log(2.0)
    assert log_cond_evidence_m2a(g, HyperParams(1.0, 0.5)) == pytest.approx(float(expected))


def test_m2a_zero_x_is_an_error():
    with pytest.raises(ValueError):
        log_cond_evidence_m2a(DataSet("p", [0.0], [1.0]), HyperParams(1, 1))


@given(st.floats(0.05, 3.0), st.floats(-2, 2), st.floats(0.05, 1.0))
def test_m2a_singleton_density_integrates_to_one(x_hat, mu, s):
    if abs(x_hat) < 1e-3:
        return
    psi = HyperParams(mu, s)
    c, w = mu * x_hat, s * x_hat
    ys = np.linspace(c - 10 * w, c + 10 * w, 4001)
    p = robust_pred_density_hs_family(x_hat, ys, psi)
    assert np.trapezoid(p, ys) == pytest.approx(1.0, abs=1e-4)
    one = log_cond_evidence_m2a(DataSet("p", [x_hat], [ys[1234]]), psi)
    assert math.exp(one) == pytest.approx(p[1234], rel=1e-12)


# --- robust prediction ----------------------------------------------------------


def test_point_mass_posterior_gives_noise_density():
    cond = ConditionalPosterior(1.3, 1e-9)
    dens = robust_pred_density_m1_family(1.0, 1.1, cond, 0.2)
    assert dens == pytest.approx(math.exp(float(GaussianSpec(1.3, 0.2).log_pdf(1.1))), rel=1e-9)


def test_x_hat_zero_limit():
    cond = ConditionalPosterior(1.3, 0.4)
    dens = robust_pred_density_m1_family(0.0, 0.15, cond, 0.2)
    assert dens == pytest.approx(math.exp(float(GaussianSpec(0.0, 0.2).log_pdf(0.15))))


@pytest.mark.parametrize("x_hat", [-1.5, 0.2, 1.0, 3.0])
def test_m1_family_normalised(x_hat):
    cond = ConditionalPosterior(0.9, 0.3)
    sd = math.sqrt(0.2**2 + (0.3 * x_hat) ** 2)
    ys = np.linspace(0.9 * x_hat - 12 * sd, 0.9 * x_hat + 12 * sd, 6001)
    assert np.trapezoid(robust_pred_density_m1_family(x_hat, ys, cond, 0.2), ys) == pytest.approx(1.0, abs=1e-4)


def test_m1_family_against_kernel_density(oracle):
    ref = oracle["robust_pred_mc"]
    cond = ConditionalPosterior(ref["mu_tilde"], ref["sigma_tilde"])
    dens = robust_pred_density_m1_family(ref["x_hat"], ref["y_hat"], cond, ref["sigma_y"])
    assert abs(dens - ref["mean"]) < 3 * ref["se"]


def test_m1_family_matches_one_over_x_form():
    cond = ConditionalPosterior(0.8, 0.25)
    x_hat, y_hat, s = -0.7, -0.3, 0.15
    v = (s / x_hat) ** 2 + cond.sigma_tilde**2
    textbook = math.exp(-((cond.mu_tilde - y_hat / x_hat) ** 2) / (2 * v)) / (abs(x_hat) * math.sqrt(2 * math.pi * v))
    assert robust_pred_density_m1_family(x_hat, y_hat, cond, s) == pytest.approx(textbook, rel=1e-12)


def test_hs_family_noisy_equals_singleton_evidence():
    psi = HyperParams(1.1, 0.3)
    dens = robust_pred_density_hs_family(0.6, 0.5, psi, 0.1)
    assert math.log(dens) == pytest.approx(log_cond_evidence_m2b(DataSet("p", [0.6], [0.5]), psi, 0.1))


def test_hs_family_delta_peak():
    psi = HyperParams(1.1, 0.3)
    assert robust_pred_density_hs_family(1.0, 1.1, psi) == pytest.approx(1 / (math.sqrt(2 * math.pi) * 0.3))
    with pytest.raises(ValueError):
        robust_pred_density_hs_family(0.0, 1.0, psi)


@pytest.mark.parametrize("x_hat", [0.3, 1.0, 2.5])
def test_hs_family_noisy_normalised(x_hat):
    psi = HyperParams(1.1, 0.3)
    ys = np.linspace(-8, 10, 9001)
    assert np.trapezoid(robust_pred_density_hs_family(x_hat, ys, psi, 0.1), ys) == pytest.approx(1.0, abs=1e-4)


def test_m2b_on_grouped_data_sums_group_evidences():
    a = DataSet("a", [0.2, 0.7], [0.3, 0.6])
    b = DataSet("b", [0.5, 1.0, 0.9], [0.9, 1.8, 1.5])
    psi = HyperParams(1.0, 0.5)
    both = log_cond_evidence_m2b(GroupedData((a, b)), psi, 0.1)
    assert both == pytest.approx(log_cond_evidence_m2b(a, psi, 0.1) + log_cond_evidence_m2b(b, psi, 0.1), rel=1e-14)
    assert both != pytest.approx(log_cond_evidence_m1b(GroupedData((a, b)), psi, 0.1))
