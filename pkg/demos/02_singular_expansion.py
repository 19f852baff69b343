"""The singular solution from its expansion, checked against the truncations.

Y = eta/(T-t)^(p-1) + H/(T-t)^p, where H solves a regular equation that is
found by Picard iteration.  For an arctan-shaped impact coefficient this
script prints the Picard report, the blow-up slope of Y, and compares Y
with the monotone limit of the truncated problems in the middle of the
state grid.
"""

import numpy as np

from singbsde.expansion import assemble_Y, solve_H
from singbsde.grid import GridSpec, interior_mask
from singbsde.model import arctan_model
from singbsde.truncated import blowup_slope, monotone_limit

spec = arctan_model(q=2, eta_lower=1.0, eta_upper=2.0, gamma=0.5, gamma_family="arctan")
grid = GridSpec(nt=400, nx=201)

sol = solve_H(spec, grid=grid)
c = sol.constants
print(f"R = {c.R:.4f}  L = {c.L:.4f}  delta = {c.delta:.4f}")
print("iter   weighted norm   ratio")
for it, wn, ratio, _ in sol.report.rows():
    print(f"{int(it):4d}   {wn:.3e}       {ratio:.3e}")

Y = assemble_Y(spec, sol.h_field)
slope, _ = blowup_slope(Y, spec.x0, spec.T)
print(f"\nblow-up slope of Y at x0: {slope:.4f} (expected {-(spec.p - 1):.1f})")

ml = monotone_limit(spec, [4.0**k for k in range(1, 9)], grid=grid)
U = ml.field.interpolate(Y.time_grid[:, None], Y.space_grid[None, :])
mid = interior_mask(Y.space_grid, spec.x0)
rel = np.abs(Y.values - U) / U
print(f"expansion vs truncated limit, interior relative sup: {rel[:, mid].max():.2e}")
for t in (0.0, 0.5, 0.9, 0.99):
    k = Y.time_index(Y.time_grid[np.argmin(np.abs(Y.time_grid - t))])
    print(f"  t = {Y.time_grid[k]:.3f}   Y(t, 0) = {Y.column(0.0)[k]:9.4f}   "
          f"u^n(t, 0) = {ml.field.column(0.0)[np.argmin(np.abs(ml.field.time_grid - Y.time_grid[k]))]:9.4f}")
