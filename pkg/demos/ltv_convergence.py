"""Convergence of EM, order-1 and order-2 EFDD on the LTV oscillator.

Prints a table of relative mean and covariance errors against the
Richardson-extrapolated moment oracle, followed by the fitted slopes.
"""

from efdd.harness import convergence_study, moment_oracle
from efdd.integrators import StepScheme
from efdd.models import ltv_oscillator

tf = 5.0
model = ltv_oscillator()
ref = moment_oracle(model, tf)
dts = [tf / 2**j for j in range(7, 14)]

for label in ("em", "magnus1", "magnus2"):
    rep = convergence_study(model, StepScheme.parse(label), dts, tf, ref)
    print(f"\n{label}")
    print(f"{'dt':>12} {'mean err':>12} {'cov err':>12}")
    for row in rep.rows:
        print(f"{row.dt:12.3e} {row.rel_err_mean:12.3e} {row.rel_err_cov:12.3e}")
    print(f"slope mean {rep.slope_mean}, slope cov {rep.slope_cov}")
