"""
An adaptive multilevel run against the reference value
======================================================

Runs the adaptive level loop for the smoothed estimator at a desk-scale
tolerance and compares the estimate with the cached reference probability
in tests/data/oracle_d4.json.
"""

import json
from pathlib import Path

from nested_mlmc import paper_model
from nested_mlmc.driver import RunConfig, run_mlmc

spec = paper_model(4)
oracle = json.loads((Path(__file__).parent.parent / "tests/data/oracle_d4.json").read_text())

for method in ("SmoothedMLMC", "StdMLMC"):
    cfg = RunConfig.profile("desk", method=method, tol=1e-2, seed=4)
    report = run_mlmc(spec, cfg)
    print(f"\n{method}: estimate {report.estimate:.5f}  L = {report.L}  "
          f"cost {report.total_cost:.3e}  status {report.status}")
    print(f"{'level':>5} {'N_l':>8} {'mean':>12} {'variance':>12} {'cost/sample':>12}")
    for r in report.levels:
        print(f"{r.level:5d} {r.N_l:8d} {r.mean:12.3e} {r.variance:12.3e} "
              f"{r.cost_per_sample:12.1f}")
    err = abs(report.estimate - oracle["estimate"])
    print(f"|estimate - reference| = {err:.5f} against tol {cfg.tol}")
    print(f"statistical error {report.statistical_error:.5f}")

print(f"\nreference {oracle['estimate']:.5f} +- {oracle['std_error']:.1e} "
      f"({oracle['method']}, n = {oracle['n']})")
