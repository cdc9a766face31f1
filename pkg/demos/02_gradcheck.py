"""
Checking every gradient against an independent oracle
=====================================================

P and R are compared with plain central differences.  PR detaches its
|sin(theta)| and cos(theta) factors, so plain finite differences would
measure the wrong thing; the frozen-coefficient oracle holds those factors
at their base-point values and differentiates the rest.
"""
import numpy as np

from prgrad import verify

w = np.array([1.0, 0.0])
x = np.array([1.0, 1.0])

# the oracle by hand, on one pair
print("frozen oracle d/dw", np.round(verify.frozen_coeff_oracle(w, x, "w"), 5))
print("frozen oracle d/dx", np.round(verify.frozen_coeff_oracle(w, x, "x"), 5))

# the full suite: products in several dimensions, then linear, conv and LSTM layers
reports = verify.gradcheck_suite(seed=0)
failed = [r for r in reports if not r.passed]
print(f"{len(reports) - len(failed)}/{len(reports)} checks pass")

worst = sorted(reports, key=lambda r: r.max_rel_error)[-5:]
for r in worst:
    print(f"  {r.case:<32} {r.parameter:<8} {r.max_rel_error:.2e} (tol {r.tolerance:g})")

verify.write_report(reports, "gradcheck.csv")
