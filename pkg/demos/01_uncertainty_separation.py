"""Can the evidence tell output noise from parameter noise?

Three data sets share the linear model y = theta * x. In the first, the
scatter is added to y. In the second, theta itself wobbles from point to
point. The third has both. Four model classes compete on each, and the
printed tables show which one the evidence prefers and what it infers about
the two noise levels.

    python demos/01_uncertainty_separation.py [--seed N] [--narrow]
"""

import argparse

from hsmbayes.experiments import separation_dataset_specs, run_separation_study


def show(name, spec, report):
    print(f"\n{name}: {spec.error_type} error, sigma_theta={spec.sigma_theta_hat}, sigma_y={spec.sigma_y_hat}")
    print(f"  {'model':5s} {'E[theta]':>9s} {'Std[theta]':>10s} {'E[sig_y]':>9s} {'ln ev':>12s} {'P':>8s}")
    for r in report.rows:
        print(f"  {r.model:5s} {r.E_theta:9.3f} {r.Std_theta:10.3f} {r.E_sigma_y:9.3f} {r.ln_evidence:12.2f} "
              f"{r.post_prob:8.4f}")
    print(f"  -> {report.winner}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--narrow", action="store_true", help="draw x from [0.4, 1] instead of [0, 1]")
    args = ap.parse_args()
    x_range = (0.4, 1.0) if args.narrow else (0.0, 1.0)

    specs = separation_dataset_specs(x_range, seed=args.seed)
    reports = run_separation_study(x_range=x_range, seed=args.seed)
    for name, rep in reports.items():
        show(name, specs[name], rep)

    # With x near zero the two noise types look different (parameter noise
    # scales with x, output noise does not). On [0.4, 1] that lever is
    # shorter, and M2a and M2b often end up sharing the probability.
    if args.narrow:
        d = reports["D2b"]
        print(f"\nD2b on the narrow range: P(M2a)={d.prob('M2a'):.3f}, P(M2b)={d.prob('M2b'):.3f}")


if __name__ == "__main__":
    main()
