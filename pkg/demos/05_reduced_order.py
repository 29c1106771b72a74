"""A straight line fitted to a curve: where should the misfit go?

Quadratic and cubic data are fitted with y = theta * x. M1 blames the misfit
on output noise. M2a lets theta vary from point to point, which can absorb
any curve exactly when there is no noise. M2b does both. The last part
prints a slice of the robust predictive band of each class.
"""

from hsmbayes.experiments import run_reduced_order_study

reports, grids = run_reduced_order_study(sizes=(20, 50, 100, 200), seed=0, grid_size=50)

print(f"{'function':10s} {'noise':6s} {'n':>4s}  {'P(M1)':>7s} {'P(M2a)':>7s} {'P(M2b)':>7s}  winner")
for (func, noisy, n), rep in reports.items():
    p = {r.model: r.post_prob for r in rep.rows}
    print(f"{func:10s} {'yes' if noisy else 'no':6s} {n:4d}  {p.get('M1', 0):7.4f} {p.get('M2a', 0):7.4f} "
          f"{p.get('M2b', 0):7.4f}  {rep.winner}")

print("\n90% predictive band at a few x, noisy cubic data, n = 50")
for label in ("M1", "M2a", "M2b"):
    g = grids[("cubic", True, label)]
    picks = range(0, len(g.x), 25)
    band = "  ".join(f"x={g.x[j]:+.2f}: [{g.lower[j]:+.2f}, {g.upper[j]:+.2f}]" for j in picks)
    print(f"  {label:4s} {band}")
