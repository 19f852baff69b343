"""Singular expansion Y = eta/(T-t)^(p-1) + H/(T-t)^p.

The remainder H solves a BSDE with zero terminal value and generator F;
it is built by Picard iteration H^{k+1} = Gamma(H^k), where Gamma(H) is
the conditional expectation of int_t^T F(s, H_s) ds, i.e. one linear
parabolic solve with a source term.  On the window [T - delta, T] the map
is a contraction in the norm sup (T-t)^-2 |H|.

The shifted process Hn = (T-t+e_n)^p Y^n - (T-t+e_n) eta, with
e_n = (eta*/n)^(q-1), solves the same equation with T-t replaced by
T-t+e_n and a small nonnegative terminal value.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid
from scipy.optimize import brentq

from .errors import DomainError, KernelGuardError, KernelGuardWarning, NumericalError
from .grid import (GridSpec, TimeSpaceField, interior_mask, refine_time_grid,
                   richardson_combine,
                   solve_linear_parabolic, solve_semilinear)
from .model import (GUARD, GUARD_SLACK, ModelSpec, PicardConstants, kernel_dG_dh, kernel_G,
                    picard_constants)
from .truncated import EPS_CUTOFF, level_tau_min, solve_Yn

log = logging.getLogger(__name__)


@dataclass
class PicardReport:
    iterations: int = 0
    weighted_norms: list = field(default_factory=list)
    contraction_ratios: list = field(default_factory=list)
    outer_norms: list = field(default_factory=list)
    delta_used: float = 0.0
    R_used: float = 0.0
    ball_violation: float = 0.0
    guard_max: float = 0.0
    converged: bool = False

    def rows(self) -> np.ndarray:
        return np.column_stack([np.arange(1, self.iterations + 1), self.weighted_norms,
                                self.contraction_ratios, self.outer_norms])


@dataclass
class ExpansionSolution:
    h_field: TimeSpaceField
    constants: PicardConstants
    report: PicardReport
    sup_bound: float = 0.0


def _grid_arrays(spec: ModelSpec, tg: np.ndarray, xg: np.ndarray):
    tt, xx = tg[:, None], xg[None, :]
    return (spec.eta_at(tt, xx), spec.gamma_at(tt, xx), spec.b_eta_at(tt, xx))


def generator_on_grid(spec: ModelSpec, h: np.ndarray, tg: np.ndarray, xg: np.ndarray,
                      delta: float, shift: float = 0.0, coeffs=None) -> tuple[np.ndarray, float]:
    """F(t, x, h(t, x)) on the grid, with T - t replaced by T - t + shift.

    The guard |w| <= 1/2 is enforced on rows with T - t <= delta.
    Returns the source array and the largest |w| seen on the window.
    """
    eta, gam, beta = coeffs if coeffs is not None else _grid_arrays(spec, tg, xg)
    tau = (spec.T - tg)[:, None] + shift
    out = np.zeros_like(h)
    live = tau[:, 0] > 0
    if np.any(~live) and np.any(h[~live] != 0):
        raise DomainError("remainder must vanish where T - t = 0")
    ta = tau[live]
    out[live] = ta * beta[live] + ta**spec.p * gam[live] - kernel_G(ta, h[live], eta[live],
                                                                     spec.p, spec.q)
    window = live & ((spec.T - tg) <= delta * (1 + 1e-12))
    guard = 0.0
    if np.any(window):
        w = np.abs(h[window]) / (eta[window] * tau[window])
        guard = float(w.max())
        if guard > GUARD + GUARD_SLACK:
            msg = f"remainder leaves the guard: |w| = {guard:.6g} on the window"
            if spec.q < 2:
                raise KernelGuardError(msg)
            warnings.warn(msg, KernelGuardWarning, stacklevel=2)
    return out, guard


def picard_step(spec: ModelSpec, h_prev: TimeSpaceField, *, grid: GridSpec | None = None,
                delta: float | None = None, coeffs=None) -> TimeSpaceField:
    """Gamma(h_prev): linear solve with source F(s, x, h_prev(s, x)), zero terminal."""
    grid = replace(grid or GridSpec(), richardson=False)
    if delta is None:
        delta = picard_constants(spec).delta
    tg, xg = h_prev.time_grid, h_prev.space_grid
    src, _ = generator_on_grid(spec, h_prev.values, tg, xg, delta, coeffs=coeffs)
    return solve_linear_parabolic(spec, 0.0, src, None, grid=grid, time_grid=tg,
                                  space_grid=xg, label="H")


def _picard_run(spec, tg, xg, grid, tol, max_iter, consts: PicardConstants):
    delta, R = consts.delta, consts.R
    tau = spec.T - tg
    window = (tau <= delta * (1 + 1e-12)) & (tau > 0)
    outer = tau > delta * (1 + 1e-12)
    weight = np.where(window, tau, 1.0)[:, None] ** 2
    coeffs = _grid_arrays(spec, tg, xg)
    rep = PicardReport(delta_used=delta, R_used=R)
    h = TimeSpaceField(tg, xg, np.zeros((tg.size, xg.size)), {"label": "H^0"})
    ball_room = R * tau[window][:, None] ** 2
    prev_norm = None
    for k in range(1, max_iter + 1):
        src, guard = generator_on_grid(spec, h.values, tg, xg, delta, coeffs=coeffs)
        rep.guard_max = max(rep.guard_max, guard)
        lin_grid = replace(grid, richardson=False)
        new = solve_linear_parabolic(spec, 0.0, src, None, grid=lin_grid, time_grid=tg,
                                     space_grid=xg, label=f"H^{k}")
        diff = new.values - h.values
        wnorm = float(np.max(np.abs(diff[window]) / weight[window])) if np.any(window) else 0.0
        onorm = float(np.max(np.abs(diff[outer]))) if np.any(outer) else 0.0
        if np.any(window):
            rep.ball_violation = max(rep.ball_violation,
                                     float(np.max(np.abs(new.values[window]) - ball_room)))
        scale = float(np.max(np.abs(new.values[window]) / weight[window])) if np.any(window) else 0.0
        floor = 1e-12 * max(scale, 1e-300)
        if prev_norm is not None and prev_norm > floor and wnorm > floor:
            ratio = wnorm / prev_norm
        else:
            ratio = math.nan
        rep.weighted_norms.append(wnorm)
        rep.outer_norms.append(onorm)
        rep.contraction_ratios.append(ratio)
        rep.iterations = k
        prev_norm = wnorm
        h = new
        if wnorm < tol and onorm < tol:
            rep.converged = True
            break
    h.meta.update(label="H", iterations=rep.iterations)
    return h, rep


def solve_H(spec: ModelSpec, tol: float = 1e-10, max_iter: int = 200, *,
            grid: GridSpec | None = None, time_grid=None, space_grid=None,
            raise_on_failure: bool = True) -> ExpansionSolution:
    """Picard iteration from H^0 = 0 until both increment norms are below tol.

    With ``grid.richardson`` the iteration runs on the grid and on its
    bisection and the fixed points are extrapolated; the report is the
    one of the fine run.
    """
    if tol <= 0:
        raise DomainError("tol must be positive")
    grid = grid or GridSpec()
    consts = picard_constants(spec)
    tg = np.asarray(time_grid, float) if time_grid is not None else grid.time_grid(spec)
    xg = np.asarray(space_grid, float) if space_grid is not None else grid.space_grid(spec)
    h, rep = _picard_run(spec, tg, xg, grid, tol, max_iter, consts)
    if grid.richardson:
        fine, rep_f = _picard_run(spec, refine_time_grid(tg), xg, grid, tol, max_iter, consts)
        rep_f.ball_violation = max(rep.ball_violation, rep_f.ball_violation)
        rep_f.converged = rep.converged and rep_f.converged
        h = richardson_combine(h, fine)
        h.values[-1] = 0.0
        rep = rep_f
    if not rep.converged and raise_on_failure:
        raise NumericalError(f"Picard iteration did not converge in {max_iter} steps",
                             {"report": rep})
    log.info("H solved in %d iterations (delta=%.4g, R=%.4g)", rep.iterations,
             consts.delta, consts.R)
    return ExpansionSolution(h, consts, rep, float(np.max(np.abs(h.values))))


def picard_residual(spec: ModelSpec, sol: ExpansionSolution,
                    grid: GridSpec | None = None) -> float:
    """Weighted norm of Gamma(H) - H on the window, sup norm outside it."""
    h = sol.h_field
    new = picard_step(spec, h, grid=grid, delta=sol.constants.delta)
    tau = spec.T - h.time_grid
    win = (tau <= sol.constants.delta) & (tau > 0)
    d = np.abs(new.values - h.values)
    wn = float(np.max(d[win] / tau[win][:, None] ** 2)) if np.any(win) else 0.0
    on = float(np.max(d[~win & (tau > 0)])) if np.any(~win & (tau > 0)) else 0.0
    return max(wn, on)


def assemble_Y(spec: ModelSpec, h_field: TimeSpaceField,
               eps: float = EPS_CUTOFF) -> TimeSpaceField:
    """Y = eta/(T-t)^(p-1) + h/(T-t)^p on [0, T - eps T]."""
    h = h_field.restrict_time(spec.T * (1.0 - eps))
    tau = (spec.T - h.time_grid)[:, None]
    eta = spec.eta_at(h.time_grid[:, None], h.space_grid[None, :])
    vals = eta / tau ** (spec.p - 1.0) + h.values / tau**spec.p
    return TimeSpaceField(h.time_grid, h.space_grid, vals, {"label": "Y", "eps": eps})


def Y_value(spec: ModelSpec, h_field: TimeSpaceField, t, x, eps: float = EPS_CUTOFF):
    """Pointwise assembly; refuses t > T - eps T."""
    t = np.asarray(t, dtype=float)
    if np.any(t > spec.T * (1.0 - eps) * (1 + 1e-14)):
        raise DomainError("Y is only assembled on [0, T - eps T]")
    tau = spec.T - t
    return spec.eta_at(t, x) / tau ** (spec.p - 1) + h_field.interpolate(t, x) / tau**spec.p


def remainder_ratio(spec: ModelSpec, h_field: TimeSpaceField) -> TimeSpaceField:
    """kappa = h/(eta (T-t)), with its limit 0 at t = T."""
    tau = (spec.T - h_field.time_grid)[:, None]
    eta = spec.eta_at(h_field.time_grid[:, None], h_field.space_grid[None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.where(tau > 0, h_field.values / (eta * np.where(tau > 0, tau, 1.0)), 0.0)
    return TimeSpaceField(h_field.time_grid, h_field.space_grid, vals, {"label": "kappa"})


# ---------------------------------------------------------------------------
# shifted process and its bounds


def shift_eps(spec: ModelSpec, n: float) -> float:
    return (spec.eta_upper / n) ** (spec.q - 1.0)


def psi(x, q: float):
    return (1.0 + x) ** q - 1.0 - x


def psi_inverse(y: float, q: float) -> float:
    """Inverse of psi(x) = (1+x)^q - 1 - x on [0, inf), by bisection to 1e-12."""
    if y < 0:
        raise DomainError("psi is only inverted on [0, inf)")
    if y == 0:
        return 0.0
    hi = y + 1.0
    while psi(hi, q) < y:
        hi *= 2.0
    lo = 0.0
    while hi - lo > 1e-12 * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if psi(mid, q) < y:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class HnBounds:
    c1: float
    c2: float
    n0: int
    delta: float
    K: float
    K2: float
    zeta_star: float
    kappa1: float


def hn_bounds(spec: ModelSpec, delta_H: float | None = None) -> HnBounds:
    """Constants of the two-sided estimate -C1 (tau+e_n)^2 <= Hn <= C2 (tau+e_n).

    C2 = eta* max(1, psi^-1(K2)).  For the lower side the window delta and
    the first level n0 (a power of 2) are searched so that the quadratic
    barrier conditions hold; C1 is the larger of the closed-form
    expression and the supremum of the admissible lower root, when defined.
    """
    p, q, T = spec.p, spec.q, spec.T
    el, eu, gs, bs = spec.eta_lower, spec.eta_upper, spec.gamma_upper, spec.b_eta_sup
    K = bs + (T + eu**q) ** (p - 1.0) * gs
    reach = T + eu ** (q - 1.0)
    K2 = (q - 1.0) / el * reach * (bs + reach**p * gs)
    c2 = eu * max(1.0, psi_inverse(K2, q))
    zeta = 0.5 * q * max(2.0 ** (2.0 - q), 1.0)
    d_h = picard_constants(spec).delta if delta_H is None else float(delta_H)
    if K == 0.0:
        return HnBounds(0.0, c2, 1, d_h, K, K2, zeta, 0.0)
    delta = min(d_h, el / (2.0 * K))
    for _ in range(41):
        for j in range(0, 200):
            n0 = 2**j
            s = delta + (eu / n0) ** (q - 1.0)
            x = zeta * K * s / el
            if x > 1.0:
                continue
            root = 1.0 + math.sqrt(1.0 - x)
            c1 = K / root
            y = eu * s / el
            if y <= 1.0:
                c1 = max(c1, K / (1.0 + math.sqrt(1.0 - y)))
            upper_root = el / (zeta * s) * root
            if c1 * s <= el / 2.0 and c1 <= upper_root:
                return HnBounds(c1, c2, n0, delta, K, K2, zeta, c1 * zeta / el)
        delta *= 0.5
    raise NumericalError("no feasible (C1, delta, n0) found", {"K": K, "zeta": zeta})


@dataclass
class ShiftedSolution:
    n: float
    hn_field: TimeSpaceField
    c1: float
    c2: float
    n0: int
    delta: float
    eps_n: float
    consistency_error: float = math.nan
    consistency_error_full: float = math.nan
    un_field: Optional[TimeSpaceField] = None

    def sandwich_violation(self, spec: ModelSpec) -> tuple[float, float]:
        """Largest excess below the lower and above the upper barrier on the window."""
        tau = spec.T - self.hn_field.time_grid
        win = tau <= self.delta * (1 + 1e-12)
        s = (tau[win] + self.eps_n)[:, None]
        v = self.hn_field.values[win]
        low = float(np.max(-self.c1 * s**2 - v))
        high = float(np.max(v - self.c2 * s))
        return low, high


def shifted_generator(spec: ModelSpec, eps_n: float):
    p, q, T = spec.p, spec.q, spec.T

    def gen(t, x, h):
        s = T - t + eps_n
        eta = spec.eta_at(t, x)
        return (s * spec.b_eta_at(t, x) + s**p * spec.gamma_at(t, x)
                - kernel_G(s, h, eta, p, q))

    def gen_dh(t, x, h):
        return -kernel_dG_dh(T - t + eps_n, h, spec.eta_at(t, x), p, q)

    return gen, gen_dh


def solve_Hn(spec: ModelSpec, n: float, *, grid: GridSpec | None = None, time_grid=None,
             space_grid=None, bounds: HnBounds | None = None,
             check: bool = True) -> ShiftedSolution:
    """Grid solution of the shifted equation; optionally compared with u^n."""
    if n < 1:
        raise DomainError("shifted process needs n >= 1")
    grid = grid or GridSpec()
    bounds = bounds or hn_bounds(spec)
    eps_n = shift_eps(spec, n)
    if time_grid is None:
        time_grid = grid.time_grid(spec, tau_min=level_tau_min(spec, n, grid))
    gen, gen_dh = shifted_generator(spec, eps_n)
    eu, q = spec.eta_upper, spec.q

    def terminal(x):
        return eu**q * (1.0 - spec.eta_at(spec.T, x) / eu) * float(n) ** (1.0 - q)

    hn = solve_semilinear(spec, terminal, gen, gen_dh, grid=grid, time_grid=time_grid,
                          space_grid=space_grid, x_independent=spec.deterministic,
                          label=f"Hn n={n:g}")
    hn.values[-1] = terminal(hn.space_grid)
    out = ShiftedSolution(float(n), hn, bounds.c1, bounds.c2, bounds.n0, bounds.delta, eps_n)
    if check:
        un = solve_Yn(spec, n, grid=grid, time_grid=hn.time_grid, space_grid=hn.space_grid,
                      with_bound=False).u_n
        rebuilt = un_from_hn(spec, hn, eps_n)
        rel = np.abs(rebuilt.values - un.values) / np.maximum(1.0, np.abs(un.values))
        # the two boundary problems differ when eta_x != 0 at the edges
        out.consistency_error = float(np.max(rel[:, interior_mask(hn.space_grid, spec.x0)]))
        out.consistency_error_full = float(np.max(rel))
        out.un_field = un
    return out


def un_from_hn(spec: ModelSpec, hn: TimeSpaceField, eps_n: float) -> TimeSpaceField:
    """u^n = eta/(tau+e_n)^(p-1) + Hn/(tau+e_n)^p."""
    s = (spec.T - hn.time_grid)[:, None] + eps_n
    eta = spec.eta_at(hn.time_grid[:, None], hn.space_grid[None, :])
    vals = eta / s ** (spec.p - 1.0) + hn.values / s**spec.p
    return TimeSpaceField(hn.time_grid, hn.space_grid, vals, {"label": "u^n from Hn"})


def weighted_gap(spec: ModelSpec, h_field: TimeSpaceField, hn: ShiftedSolution) -> dict:
    """Distance between h/(T-t) and Hn/(T-t+e_n).

    ``integral`` is the worst over x of the time integral of the absolute
    gap (the mode in which it tends to zero); ``sup`` is the worst nodal
    value, which stays of order eta* - eta_T at t = T.
    """
    tg = hn.hn_field.time_grid
    hv = h_field.interpolate(tg[:, None], hn.hn_field.space_grid[None, :])
    tau = (spec.T - tg)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(tau > 0, hv / np.where(tau > 0, tau, 1.0), 0.0)
    b = hn.hn_field.values / (tau + hn.eps_n)
    gap = np.abs(a - b)
    integral = trapezoid(gap, tg, axis=0)
    return {"integral": float(np.max(integral)), "sup": float(np.max(gap))}
