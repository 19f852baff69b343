"""Truncated problems: terminal value n instead of +infinity.

u^n solves  d_t u + L u - (p-1)|u|^(q-1) u / eta^(q-1) + gamma = 0,  u(T) = n,
and increases to the minimal solution as n grows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, InvariantViolation
from .grid import GridSpec, TimeSpaceField, solve_linear_parabolic, solve_semilinear
from .model import ModelSpec

DEFAULT_LEVELS = (4, 16, 64, 256, 1024)
EPS_CUTOFF = 1e-3  # fraction of T excluded near maturity in limit comparisons


@dataclass
class TruncatedSolution:
    n: float
    u_n: TimeSpaceField
    bound_field: Optional[TimeSpaceField]


def level_tau_min(spec: ModelSpec, n: float, grid: GridSpec | None = None) -> float:
    """Smallest positive distance to T, resolving the scale (eta_*/n)^(q-1)."""
    base = (grid.tau_min if grid and grid.tau_min else 1e-7 * spec.T)
    if n <= 0:
        return base
    return min(base, 1e-2 * (spec.eta_lower / n) ** (spec.q - 1.0))


def truncated_generator(spec: ModelSpec):
    """The generator and its w-derivative, vectorised over the space grid."""
    p, q = spec.p, spec.q

    def gen(t, x, w):
        eta = spec.eta_at(t, x)
        return -(p - 1.0) * np.abs(w) ** (q - 1.0) * w / eta ** (q - 1.0) + spec.gamma_at(t, x)

    def gen_dw(t, x, w):
        eta = spec.eta_at(t, x)
        return -p * np.abs(w) ** (q - 1.0) / eta ** (q - 1.0)

    return gen, gen_dw


def solve_Yn(spec: ModelSpec, n: float, *, grid: GridSpec | None = None, time_grid=None,
             space_grid=None, with_bound: bool = True) -> TruncatedSolution:
    if n < 0:
        raise DomainError("truncation level must be nonnegative")
    grid = grid or GridSpec()
    if time_grid is None:
        time_grid = grid.time_grid(spec, tau_min=level_tau_min(spec, n, grid))
    gen, gen_dw = truncated_generator(spec)
    u = solve_semilinear(spec, float(n), gen, gen_dw, grid=grid, time_grid=time_grid,
                         space_grid=space_grid, x_independent=spec.deterministic,
                         label=f"u^{n:g}")
    u.values[-1] = float(n)  # exact terminal value
    u.meta["n"] = float(n)
    bound = None
    if with_bound and n >= 1:
        bound = a_priori_bound_field(spec, n, grid=grid, time_grid=u.time_grid,
                                     space_grid=u.space_grid)
    return TruncatedSolution(float(n), u, bound)


def _expectation_field(spec, source, grid, time_grid, space_grid, label):
    return solve_linear_parabolic(spec, 0.0, source, None, grid=grid, time_grid=time_grid,
                                  space_grid=space_grid, label=label)


def a_priori_bound_field(spec: ModelSpec, n: float, *, grid: GridSpec | None = None,
                         time_grid=None, space_grid=None, variant: str = "eta") -> TimeSpaceField:
    """(T-t+n^(1-q))^(-p) [n^(1-q) + E_t int_t^T (eta_s + (T-s+1)^p gamma_s) ds].

    ``variant="power"`` replaces eta_s by ((p-1)/eta_s)^(p-1), the form that
    appears in the weighted-convergence argument; it is kept as a diagnostic.
    """
    p, q, T = spec.p, spec.q, spec.T
    if variant == "eta":
        def first(t, x):
            return spec.eta_at(t, x)
    elif variant == "power":
        def first(t, x):
            return ((p - 1.0) / spec.eta_at(t, x)) ** (p - 1.0)
    else:
        raise DomainError(f"unknown bound variant {variant!r}")

    def source(t, x):
        return first(t, x) + (T - t + 1.0) ** p * spec.gamma_at(t, x)

    integral = _expectation_field(spec, source, grid, time_grid, space_grid, "bound-integral")
    small = float(n) ** (1.0 - q)
    tau = (T - integral.time_grid)[:, None]
    vals = (tau + small) ** (-p) * (small + integral.values)
    return TimeSpaceField(integral.time_grid, integral.space_grid, vals,
                          {"label": f"upper-bound[{variant}] n={n:g}"})


def a_priori_bound(spec: ModelSpec, n: float, t: float, *, grid: GridSpec | None = None,
                   variant: str = "eta") -> np.ndarray:
    """The upper bound at time t, one value per node of the space grid."""
    if t > spec.T:
        raise DomainError("bound needs t <= T")
    fld = a_priori_bound_field(spec, n, grid=grid, variant=variant)
    return fld.interpolate(np.full(fld.space_grid.size, t), fld.space_grid)


def lower_bound_field(spec: ModelSpec, *, grid: GridSpec | None = None, time_grid=None,
                      space_grid=None, eps: float = EPS_CUTOFF) -> TimeSpaceField:
    """[E_t int_t^T eta_s^(1-q) ds]^(1-p) on [0, T - eps T]."""
    q, p = spec.q, spec.p

    def source(t, x):
        return spec.eta_at(t, x) ** (1.0 - q)

    integral = _expectation_field(spec, source, grid, time_grid, space_grid, "lower-integral")
    integral = integral.restrict_time(spec.T * (1.0 - eps))
    return TimeSpaceField(integral.time_grid, integral.space_grid,
                          integral.values ** (1.0 - p), {"label": "lower-bound"})


def blowup_slope(fld: TimeSpaceField, x: float, T: float,
                 window: tuple[float, float] = (1e-3, 1e-1)) -> tuple[float, float]:
    """Least-squares slope and intercept of log|v(t, x)| against log(T - t)."""
    tau = T - fld.time_grid
    sel = (tau >= window[0] * (1 - 1e-12)) & (tau <= window[1] * (1 + 1e-12))
    if np.count_nonzero(sel) < 3:
        raise DomainError("fewer than three grid nodes inside the fit window")
    col = fld.column(x)[sel]
    slope, intercept = np.polyfit(np.log(tau[sel]), np.log(np.abs(col)), 1)
    return float(slope), float(intercept)


@dataclass
class MonotoneLimit:
    field: TimeSpaceField
    levels: list
    table: list = field(default_factory=list)   # rows: n, sup_increment, bound_violation, slope
    min_increment: float = 0.0
    monotone: bool = True
    increments_decreasing: bool = True
    solutions: list = field(default_factory=list)

    def rows(self) -> np.ndarray:
        return np.array(self.table, dtype=float)


def monotone_limit(spec: ModelSpec, levels: Sequence[float] = DEFAULT_LEVELS, *,
                   grid: GridSpec | None = None, eps: float = EPS_CUTOFF,
                   keep_solutions: bool = False, strict: bool = True) -> MonotoneLimit:
    """Solve every level on one common grid and tabulate the convergence.

    Row k holds the sup over [0, T - eps T] of u^{n_k} - u^{n_{k-1}} (NaN
    for the first level), the largest relative excess over the upper
    bound, and the blow-up slope at x0.  A decrease in n beyond 1e-6
    (relative to max(1, |u|)) raises InvariantViolation when ``strict``.
    """
    levels = [float(n) for n in levels]
    if any(b <= a for a, b in zip(levels, levels[1:])) or not levels:
        raise DomainError("levels must be strictly increasing")
    grid = grid or GridSpec()
    tg = grid.time_grid(spec, tau_min=level_tau_min(spec, levels[-1], grid))
    xg = grid.space_grid(spec)
    cut = spec.T * (1.0 - eps)
    inner = tg <= cut * (1 + 1e-14)
    prev = None
    out = MonotoneLimit(field=None, levels=levels)
    min_inc = math.inf
    for n in levels:
        sol = solve_Yn(spec, n, grid=grid, time_grid=tg, space_grid=xg)
        u = sol.u_n.values
        viol = float(np.max((u - sol.bound_field.values) / sol.bound_field.values))
        try:
            slope = blowup_slope(sol.u_n, spec.x0, spec.T)[0]
        except DomainError:
            slope = math.nan
        if prev is None:
            inc = math.nan
        else:
            diff = u - prev
            min_inc = min(min_inc, float(np.min(diff / np.maximum(1.0, np.abs(u)))))
            inc = float(np.max(diff[inner]))
        out.table.append([n, inc, viol, slope])
        if keep_solutions:
            out.solutions.append(sol)
        prev = u
        last = sol
    out.field = last.u_n
    out.min_increment = 0.0 if min_inc is math.inf else min_inc
    out.monotone = out.min_increment >= -1e-6
    incs = [row[1] for row in out.table[1:]]
    out.increments_decreasing = all(b <= a for a, b in zip(incs, incs[1:]))
    if strict and not out.monotone:
        raise InvariantViolation("truncated solutions are not monotone in n",
                                 {"min_relative_increment": out.min_increment})
    return out
