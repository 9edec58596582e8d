"""
Preintegration over the first asset
===================================

The event {loss > c} is monotone in the first asset's value, so the
indicator can be integrated against that asset's density.  With the first
asset priced in closed form this is a normal CDF at the Newton root; the
numerical route integrates the same step with a two-sided Gauss-Laguerre
rule.  Both are shown here for a range of loss budgets.
"""

import numpy as np

from nested_mlmc import paper_model
from nested_mlmc.numkit import std_normal_cdf
from nested_mlmc.smoothing import (
    SmoothingParams,
    analytic_smoothed_batch,
    laguerre_rule,
    numerical_smoothed_batch,
    std_normal_pdf,
)

spec = paper_model(4)

# the loss budget is what remains after assets 2..d: V0 - c - mean inner payoff
budgets = np.array([-1.0, 0.5, 2.0, 4.0, 6.0, 8.0, 12.0])
h_a, roots, iters = analytic_smoothed_batch(spec, budgets, SmoothingParams())
h_n, _, _ = numerical_smoothed_batch(spec, budgets, SmoothingParams(mode="numerical"))

print(f"{'budget':>7} {'root omega_1':>13} {'newton it':>9} {'analytic':>10} {'numerical':>10}")
for b, r, it, a, n in zip(budgets, roots, iters, h_a, h_n):
    print(f"{b:7.2f} {r:13.4f} {it:9d} {a:10.6f} {n:10.6f}")
print("max |numerical - analytic| =", float(np.max(np.abs(h_a - h_n))))

# the rule integrates a step at its root side by side
rule = laguerre_rule(std_normal_pdf, 0.7, m_lag=32)
step = rule.apply(lambda x: (x <= 0.7).astype(float))
print(f"\nstep at 0.7: rule {step:.12f}, Phi(0.7) {std_normal_cdf(0.7):.12f}")
for m_lag in (4, 8, 16, 32):
    err = abs(laguerre_rule(std_normal_pdf, 0.3, m_lag).apply(np.cos) - np.exp(-0.5))
    print(f"m_lag {m_lag:2d}: error on E[cos Z] = {err:.2e}")
