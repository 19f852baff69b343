"""Truncated problems and their monotone limit in the constant case.

With eta = 1, gamma = 0 and q = 2 the truncated solution started from n is
1/(T - t + 1/n), and the levels increase to the singular solution 1/(T - t).
The script solves a few levels on the grid and prints how far each one is
from its closed form, then how close the top level gets to the limit.
"""

import numpy as np

from singbsde.grid import GridSpec
from singbsde.model import constant_model
from singbsde.truncated import monotone_limit, solve_Yn

spec = constant_model(q=2)

print("level   sup |u^n - 1/(T-t+1/n)|   u^n(0)")
for n in (1, 10, 100, 1000):
    u = solve_Yn(spec, n, with_bound=False).u_n
    tau = spec.T - u.time_grid
    col = u.column(spec.x0)
    print(f"{n:5d}   {np.max(np.abs(col - 1 / (tau + 1 / n))):.3e}               {col[0]:.6f}")

ml = monotone_limit(spec, [4.0**k for k in range(1, 11)], grid=GridSpec(nt=800, ratio=0.95))
print("\nlevel      sup increment   blow-up slope")
for n, inc, _, slope in ml.table:
    print(f"{n:9.0f}  {inc:13.3e}   {slope:.4f}")

tau = spec.T - ml.field.time_grid
sel = tau >= 1e-3
gap = np.max(np.abs(ml.field.column(spec.x0)[sel] - 1 / tau[sel]) * tau[sel])
print(f"\nrelative distance of the top level to 1/(T-t) on tau >= 1e-3: {gap:.2e}")
