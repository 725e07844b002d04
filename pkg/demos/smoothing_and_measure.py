"""Smoothing rates for finitely differentiable data and the measure of resonant frequencies."""

from kamtori.frequencies import resonant_measure
from kamtori.smoothing import smoothing_benchmark

rows = smoothing_benchmark()
for name in ("abs_sin_7_2", "analytic_inv_cos"):
    sub = [r for r in rows if r["function"] == name]
    errs = "  ".join(f"{r['c0_error']:.1e}" for r in sub)
    print(f"{name:<18} slope {sub[0]['fitted_slope']:6.3f}   errors {errs}")

# The complement of the Diophantine set shrinks linearly in alpha
tab = resonant_measure([[1.0, 2.0], [1.0, 2.0]], [1e-3, 2e-3, 4e-3, 8e-3, 1.6e-2], 1.2, 200,
                       100_000, seed=0)
for r in tab.rows:
    print(f"alpha {r['alpha']:.1e}: resonant fraction {r['complement_measure']:.4f} "
          f"+- {r['stderr']:.4f}")
print(f"slope {tab.slope:.3f}")
