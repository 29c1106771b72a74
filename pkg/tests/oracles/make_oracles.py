"""Regenerate ``values.json``: reference numbers for the test suite.

Everything here is computed from first principles (mpmath or scipy quadrature,
extended-precision linear algebra, large Monte Carlo runs) without
importing ``hsmbayes``, so the tests compare the library against an
independent implementation. Run from the repository root:

    python tests/oracles/make_oracles.py
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import mpmath as mp
import numpy as np
from scipy import integrate

mp.mp.dps = 40
OUT = Path(__file__).with_name("values.json")


def line_data(seed, n, theta, sigma, lo=0.0, hi=1.0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(lo, hi, n)
    y = theta * x + sigma * rng.standard_normal(n)
    return [float(v) for v in x], [float(v) for v in y]


def sums(x, y):
    xx = mp.fsum(mp.mpf(a) ** 2 for a in x)
    xy = mp.fsum(mp.mpf(a) * mp.mpf(b) for a, b in zip(x, y))
    yy = mp.fsum(mp.mpf(b) ** 2 for b in y)
    return xx, xy, yy


def log_lik(theta, x, y, sigma):
    """ln prod_j N(y_j | theta x_j, sigma^2), summed point by point."""
    sigma = mp.mpf(sigma)
    n = len(x)
    sse = mp.fsum((mp.mpf(b) - theta * mp.mpf(a)) ** 2 for a, b in zip(x, y))
    return -n * mp.log(sigma) - n * mp.log(2 * mp.pi) / 2 - sse / (2 * sigma**2)


def log_normal(z, m, s):
    return -mp.log(s) - mp.log(2 * mp.pi) / 2 - (z - m) ** 2 / (2 * s**2)


def peak(x, y, sigma, prior=None):
    xx, xy, _ = sums(x, y)
    sigma = mp.mpf(sigma)
    if prior is None:
        return xy / xx, sigma / mp.sqrt(xx)
    m, s = mp.mpf(prior[0]), mp.mpf(prior[1])
    prec = xx / sigma**2 + 1 / s**2
    return (xy / sigma**2 + m / s**2) / prec, 1 / mp.sqrt(prec)


def log_integral(logf, centre, width, lo=-mp.inf, hi=mp.inf):
    """ln of the integral of exp(logf), split at centre +/- k*width."""
    ref = logf(centre) if lo <= centre <= hi else max(logf(lo), logf(hi))
    pts = [centre + k * width for k in (-60, -20, -8, -3, 0, 3, 8, 20, 60)]
    pts = [lo] + [p for p in pts if lo < p < hi] + [hi]
    val = mp.quad(lambda t: mp.exp(logf(t) - ref), pts)
    return ref + mp.log(val)


def moments(logf, centre, width, lo=-mp.inf, hi=mp.inf):
    ref = logf(centre)
    pts = [lo] + [p for p in (centre + k * width for k in (-60, -20, -8, -3, 0, 3, 8, 20, 60)) if lo < p < hi] + [hi]
    z = mp.quad(lambda t: mp.exp(logf(t) - ref), pts)
    m1 = mp.quad(lambda t: t * mp.exp(logf(t) - ref), pts) / z
    m2 = mp.quad(lambda t: (t - m1) ** 2 * mp.exp(logf(t) - ref), pts) / z
    return m1, mp.sqrt(m2)


def f(v):
    return float(v)


def main():
    out = {}

    # -- scalar helpers -------------------------------------------------------
    out["log_sum_exp_pair"] = f(mp.log(mp.exp(-1000) + mp.exp(mp.mpf("-1000.5"))))
    zs = np.arange(-9.0, 11.0 + 5e-5, 1e-4)
    kernel = np.exp(-((zs - 1.0) ** 2) / (2 * 0.25))
    z_trap = float(np.sum((kernel[1:] + kernel[:-1]) / 2) * 1e-4)
    out["gauss_at_1p2"] = {"value": math.log(math.exp(-0.2**2 / (2 * 0.25)) / z_trap), "trapezoid_mass_scale": z_trap}

    rng = np.random.default_rng(20240601)
    n_mc = 10_000_000
    z = rng.normal(0.3, 0.7, n_mc)
    d = (-math.log(0.7) - (z - 0.3) ** 2 / (2 * 0.49)) - (-math.log(1.4) - (z + 0.2) ** 2 / (2 * 1.96))
    out["kl_mc"] = {"mean": float(d.mean()), "se": float(d.std() / math.sqrt(n_mc)), "n": n_mc}

    # -- M1a ------------------------------------------------------------------
    x50, y50 = line_data(101, 50, 1.0, 0.2)
    m, w = peak(x50, y50, 0.2)
    mean, std = moments(lambda t: log_lik(t, x50, y50, 0.2), m, w, mp.mpf(-1), mp.mpf(3))
    out["m1a_posterior_50"] = {"x": x50, "y": y50, "sigma_y": 0.2, "mean": f(mean), "std": f(std)}

    cases = []
    for k, (seed, n, theta, sigma) in enumerate([(11, 1, 1.0, 0.3), (12, 7, 0.8, 0.2), (13, 40, 1.3, 0.5),
                                                  (14, 5, 2.9, 0.6), (15, 3, -0.9, 0.4)]):
        x, y = line_data(seed, n, theta, sigma)
        m, w = peak(x, y, sigma)
        le = log_integral(lambda t: log_lik(t, x, y, sigma) - mp.log(4), m, w, mp.mpf(-1), mp.mpf(3))
        cases.append({"x": x, "y": y, "sigma_y": sigma, "log_evidence": f(le)})
    out["m1a_evidence"] = cases

    # -- M1b / M2b ------------------------------------------------------------
    x30, y30 = line_data(202, 30, 0.7, 0.3)
    psi = (0.5, 0.8)
    m, w = peak(x30, y30, 0.3, psi)
    logf = lambda t: log_lik(t, x30, y30, 0.3) + log_normal(t, psi[0], psi[1])  # noqa: E731
    mean, std = moments(logf, m, w)
    out["m1b_fixture"] = {
        "x": x30, "y": y30, "mu_theta": psi[0], "sigma_theta": psi[1], "sigma_y": 0.3,
        "post_mean": f(mean), "post_std": f(std), "log_evidence": f(log_integral(logf, m, w)),
    }

    x11 = [float(v) for v in np.linspace(0.1, 1.0, 11)]
    rng = np.random.default_rng(303)
    y11 = [float(1.2 * a + 0.1 * e) for a, e in zip(x11, rng.standard_normal(11))]
    groups = []
    for mu_t, s_t, s_y in [(1.0, 0.5, 0.1), (0.2, 0.3, 0.05), (2.0, 1.5, 0.4), (1.2, 0.01, 0.1)]:
        m, w = peak(x11, y11, s_y, (mu_t, s_t))
        logf = lambda t, s_y=s_y, mu_t=mu_t, s_t=s_t: log_lik(t, x11, y11, s_y) + log_normal(t, mu_t, s_t)  # noqa: E731
        mean, std = moments(logf, m, w)
        groups.append({"mu_theta": mu_t, "sigma_theta": s_t, "sigma_y": s_y,
                       "log_evidence": f(log_integral(logf, m, w)), "post_mean": f(mean), "post_std": f(std)})
    out["m2b_fixture"] = {"x": x11, "y": y11, "cases": groups}

    # -- robust prediction MC (kernel density at one point) ---------------------
    rng = np.random.default_rng(404)
    n_mc = 1_000_000
    mu_t, s_t, s_y, x_hat, y_hat, h = 1.1, 0.05, 0.2, 0.7, 0.9, 0.005
    theta = rng.normal(mu_t, s_t, n_mc)
    yy = theta * x_hat + rng.normal(0.0, s_y, n_mc)
    kde = np.exp(-((y_hat - yy) ** 2) / (2 * h * h)) / (math.sqrt(2 * math.pi) * h)
    out["robust_pred_mc"] = {
        "mu_tilde": mu_t, "sigma_tilde": s_t, "sigma_y": s_y, "x_hat": x_hat, "y_hat": y_hat, "bandwidth": h,
        "mean": float(kde.mean()), "se": float(kde.std() / math.sqrt(n_mc)),
    }

    # -- mixture moments MC -----------------------------------------------------
    rng = np.random.default_rng(505)
    k = 50
    w_mix = rng.dirichlet(np.ones(k))
    m_mix = rng.normal(1.0, 0.4, k)
    s_mix = rng.uniform(0.01, 0.3, k)
    n_mc = 10_000_000
    comp = rng.choice(k, size=n_mc, p=w_mix)
    draws = rng.normal(m_mix[comp], s_mix[comp])
    out["mixture_mc"] = {
        "weights": w_mix.tolist(), "means": m_mix.tolist(), "stds": s_mix.tolist(),
        "mean": float(draws.mean()), "mean_se": float(draws.std() / math.sqrt(n_mc)),
        "std": float(draws.std()),
        "std_se": float(math.sqrt(max(np.mean((draws - draws.mean()) ** 4) - draws.var() ** 2, 0.0) / n_mc)
                        / (2 * draws.std())),
    }

    # -- HS2: two-dimensional quadrature over (theta, sigma_y) ----------------------
    # Double precision is plenty for a 5% comparison and far faster than nested mpmath.
    hs2 = []
    sig_lo, sig_hi = 0.02, 0.5
    xa, ya = np.array(x11), np.array(y11)
    m_ls = float(xa @ ya / (xa @ xa))

    def log_joint(t, s, mu_t, s_t):
        r = ya - t * xa
        return (-xa.size * math.log(s) - 0.5 * xa.size * math.log(2 * math.pi) - float(r @ r) / (2 * s * s)
                - math.log(s_t) - 0.5 * math.log(2 * math.pi) - (t - mu_t) ** 2 / (2 * s_t * s_t))

    for mu_t, s_t in [(1.0, 0.5), (1.3, 0.2), (0.6, 0.8)]:
        ref = max(log_joint(m_ls, s, mu_t, s_t) for s in np.geomspace(sig_lo, sig_hi, 400))

        def inner(s, mu_t=mu_t, s_t=s_t):
            w = s / math.sqrt(float(xa @ xa))
            pts = [m_ls + k * w for k in (-8, -3, 0, 3, 8)]
            return integrate.quad(lambda t: math.exp(log_joint(t, s, mu_t, s_t) - ref), -20.0, 20.0,
                                  points=pts, limit=400, epsabs=0, epsrel=1e-10)[0]

        val = integrate.quad(inner, sig_lo, sig_hi, points=[0.05, 0.08, 0.1, 0.13, 0.2, 0.3],
                             limit=400, epsabs=0, epsrel=1e-9)[0]
        hs2.append({"mu_theta": mu_t, "sigma_theta": s_t,
                    "log_evidence": ref + math.log(val / (sig_hi - sig_lo))})
    out["hs2_quadrature"] = {"x": x11, "y": y11, "hyper_sigma_prior": [sig_lo, sig_hi], "cases": hs2}

    # -- M2b hyperparameter evidence over the study box (3-D) --------------------
    rng = np.random.default_rng(606)
    thetas = 1.0 + 0.5 * rng.standard_normal(5)
    grp = [[float(t * a + 0.1 * e) for a, e in zip(x11, rng.standard_normal(11))] for t in thetas]
    out["m2b_box_evidence"] = {"x": x11, "groups": grp, **box_evidence(np.array(x11), np.array(grp))}

    # a weakly informative fixture (2 groups x 2 points) where 1e5 prior draws resolve the evidence to ~0.5%
    rng = np.random.default_rng(707)
    x2 = [0.4, 0.9]
    grp2 = [[float((1.0 + 0.5 * th) * a + 0.3 * e) for a, e in zip(x2, rng.standard_normal(2))]
            for th in (rng.standard_normal(), rng.standard_normal())]
    out["m2b_box_evidence_small"] = {"x": x2, "groups": grp2, **box_evidence(np.array(x2), np.array(grp2))}

    # -- extended-precision EIM coefficient solve ------------------------------
    sigmas = [0.05, 0.08, 0.12, 0.2, 0.35]
    anchors = [1.05, 1.15, 1.25, 1.35, 0.9]
    g = mp.matrix(5, 5)
    for n_, t in enumerate(anchors):
        for l_, s in enumerate(sigmas):
            g[n_, l_] = mp.exp(log_lik(mp.mpf(t), x11, y11, s))
    target = 0.15
    p = mp.matrix([mp.exp(log_lik(mp.mpf(t), x11, y11, target)) for t in anchors])
    alpha = mp.lu_solve(g, p)
    cond = mp.mnorm(g, 1) * mp.mnorm(mp.inverse(g), 1)
    out["eim_solve_5x5"] = {
        "x": x11, "y": y11, "sigmas": sigmas, "anchors": anchors, "sigma_y": target,
        "alpha": [f(a) for a in alpha], "condition_1norm": f(cond),
    }

    OUT.write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
    print(f"wrote {OUT}")


def box_evidence(x, groups):
    """ln of (1/|box|) * integral of prod_i p(D_i | mu, s, sigma_y) over the study box.

    Per group, p(D_i | mu, s, sigma_y) is the Gaussian marginal of y_i:
    N(y_i | mu x, sigma_y^2 I + s^2 x x^T), evaluated with the
    Sherman-Morrison determinant and inverse. Composite Simpson rules on a
    grid fine enough to resolve the peak; the value at two resolutions is
    stored so the test can see the discretisation error.
    """
    xx = float(x @ x)
    n = x.size

    def log_marg(mu, s, sy):
        c = s**2 / (sy**2 + s**2 * xx)
        total = 0.0
        for y in groups:
            r = y[None, None, None, :] - mu[..., None] * x
            rr = np.sum(r * r, axis=-1)
            rx = r @ x
            quad = (rr - c * rx**2) / sy**2
            logdet = 2 * n * np.log(sy) + np.log1p(s**2 * xx / sy**2)
            total = total - 0.5 * (n * math.log(2 * math.pi) + logdet + quad)
        return total

    def simpson(lo, hi, m):
        t = np.linspace(lo, hi, m)
        w = np.ones(m)
        w[1:-1:2] = 4
        w[2:-1:2] = 2
        return t, w * (hi - lo) / (m - 1) / 3

    results = {}
    for label, (nm, ns, ny) in {"coarse": (201, 201, 401), "fine": (401, 401, 801)}.items():
        mu, wm = simpson(-1.0, 3.0, nm)
        s, ws = simpson(0.001, 1.0, ns)
        sy, wy = simpson(0.001, 1.0, ny)
        slices = [log_marg(np.array([[[m_]]]), s[None, :, None], sy[None, None, :])[0] for m_ in mu]
        ref = max(float(lv.max()) for lv in slices)
        acc = sum(wm[k] * float(np.sum(ws[:, None] * wy[None, :] * np.exp(lv - ref))) for k, lv in enumerate(slices))
        vol = 4.0 * 0.999 * 0.999
        results[label] = ref + math.log(acc / vol)
    return {"log_evidence": results["fine"], "log_evidence_coarse": results["coarse"]}


if __name__ == "__main__":
    main()
