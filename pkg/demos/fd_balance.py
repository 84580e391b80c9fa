"""Fluctuation-dissipation balance on a frozen LTV operator.

Exponential steps keep the target covariance C exactly stationary for any
dt; Euler-Maruyama drifts away from it by a dt-dependent amount.
"""

from efdd.cli import balance_entry, frozen_model
from efdd.integrators import StepScheme

model = frozen_model("ltv", {})
for dt in (0.01, 0.1, 1.0):
    for label in ("em", "emfd", "exp", "magnus2"):
        e = balance_entry(model, StepScheme.parse(label), dt)
        print(f"dt={dt:<5} {label:<8} one-step {e['residual']:.2e}  stationary {e['stationary_residual']}")
