"""
Work against tolerance
======================

Runs the adaptive loop at a ladder of tolerances and fits the exponent of
total cost against tolerance.  Single runs are noisy because the deepest
level jumps with the bias test, so each cell averages a few seeds.
"""

from nested_mlmc import paper_model
from nested_mlmc.driver import RunConfig, cost_vs_tol_study

spec = paper_model(4)
tols = [2e-2, 1e-2, 5e-3]
table = cost_vs_tol_study(spec, ["SmoothedMLMC", "StdMLMC"], tols, seed=0,
                          base=RunConfig(N_star=100), repeats=3)

print(f"{'method':>14} {'tol':>8} {'mean cost':>12} {'max L':>5}")
for row in table.rows:
    print(f"{row.method.value:>14} {row.tol:8.4f} {row.total_cost:12.3e} {row.L:5d}")
for mk, e in table.exponents.items():
    print(f"{mk.value}: cost ~ tol^{e:.2f}")
