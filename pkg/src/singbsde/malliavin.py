"""Malliavin derivatives of the singular solution and of its truncations.

In the Markovian setting every derivative factors as a spatial gradient
times D_theta X.  The gradients come from two independent routes: finite
differences of a solved field, and the linear variational equation the
gradient satisfies (flow drift b + sigma sigma_x, potential b_x plus the
linearised generator).  The Gamma-weighted conditional expectation is
kept as a nested Monte Carlo cross-check.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from .errors import DomainError, KernelGuardError, KernelGuardWarning
from .expansion import ExpansionSolution, ShiftedSolution, shift_eps
from .grid import (GridSpec, TimeSpaceField, build_time_grid, gradient_x, interpolate,
                   refine_time_grid, richardson_combine, solve_linear_parabolic)
from .model import GUARD, GUARD_SLACK, ModelSpec, kernel_dG_deta, kernel_dG_dh, picard_constants
from .paths import PathEnsemble, malliavin_X, simulate
from .truncated import EPS_CUTOFF

KINDS = ("D_eta", "D_H", "D_Hn", "D_Y", "D_Yn", "D_X")


@dataclass
class MalliavinField:
    """D_theta of a process on the nodes ``times``; zero strictly before theta.

    ``values`` has the time axis last, so it holds one path, a batch of
    paths, or a grid line.
    """

    theta: float
    times: np.ndarray
    values: np.ndarray
    kind: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown derivative kind {self.kind!r}")
        self.values = np.asarray(self.values, dtype=float)
        before = self.times < self.theta - 1e-12 * max(1.0, abs(self.theta))
        self.values[..., before] = 0.0


def _clip_to(fld: TimeSpaceField, x: np.ndarray) -> np.ndarray:
    return np.clip(x, fld.space_grid[0], fld.space_grid[-1])


def _on_paths(fld: TimeSpaceField, times: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Field values along paths x of shape (n, len(times)), clamped to the grid."""
    return interpolate(fld, np.broadcast_to(times, x.shape), _clip_to(fld, x))


# ---------------------------------------------------------------------------
# linearised kernel along H


def _kernel_rows(spec: ModelSpec, H: np.ndarray, tg: np.ndarray, xg: np.ndarray,
                 shift: float = 0.0, window: float | None = None):
    """dG/dh and dG/deta on the grid, with their limits on the row tau = 0."""
    tau = (spec.T - tg)[:, None] + shift
    eta = spec.eta_at(tg[:, None], xg[None, :])
    live = tau[:, 0] > 0
    dh = np.zeros_like(H)
    de = np.zeros_like(H)
    ta = tau[live]
    dh[live] = kernel_dG_dh(ta, H[live], eta[live], spec.p, spec.q)
    de[live] = kernel_dG_deta(ta, H[live], eta[live], spec.p, spec.q)
    if window is not None and np.any(live):
        win = live & ((spec.T - tg) <= window * (1 + 1e-12))
        if np.any(win):
            worst = float(np.max(np.abs(H[win]) / (eta[win] * tau[win])))
            if worst > GUARD + GUARD_SLACK:
                msg = f"remainder leaves the guard: |w| = {worst:.6g}"
                if spec.q < 2:
                    raise KernelGuardError(msg)
                warnings.warn(msg, KernelGuardWarning, stacklevel=3)
    if not np.all(live):
        last = np.flatnonzero(live)[-1]
        dh[~live] = dh[last]  # dG/dh tends to q lim H/(eta tau^2), kept bounded
    return dh, de


@dataclass
class GammaWeight:
    base_time: float
    s_grid: np.ndarray
    values: np.ndarray


def gamma_weight(spec: ModelSpec, h_field: TimeSpaceField, t: float, s_grid,
                 x=None) -> GammaWeight:
    """Gamma_{t,s} = exp(-int_t^s dG/dh(u, H_u, eta_u) du) by the trapezoidal rule.

    ``x`` is a state (grid line, default x0) or an array of states on
    ``s_grid`` (a path).
    """
    s = np.asarray(s_grid, dtype=float)
    if s.ndim != 1 or s.size == 0 or s[0] < t - 1e-14 or np.any(np.diff(s) < 0):
        raise DomainError("s_grid must be increasing and start at or after t")
    if s[0] > t + 1e-14:
        s = np.r_[t, s]
        pad = True
    else:
        pad = False
    xs = np.broadcast_to(np.asarray(spec.x0 if x is None else x, dtype=float),
                         s.shape if not pad else (s.size - 1,))
    if pad:
        xs = np.r_[xs[0], xs]
    H = interpolate(h_field, s, _clip_to(h_field, xs))
    tau = spec.T - s
    eta = spec.eta_at(s, xs)
    dh = np.zeros_like(s)
    live = tau > 0
    delta = picard_constants(spec).delta
    win = live & (tau <= delta)
    if np.any(win):
        worst = float(np.max(np.abs(H[win]) / (eta[win] * tau[win])))
        if worst > GUARD + GUARD_SLACK and spec.q < 2:
            raise KernelGuardError(f"remainder leaves the guard: |w| = {worst:.6g}")
    dh[live] = kernel_dG_dh(tau[live], H[live], eta[live], spec.p, spec.q)
    if not np.all(live) and np.any(live):
        dh[~live] = dh[live][-1]
    integral = cumulative_trapezoid(dh, s, initial=0.0)
    vals = np.exp(-integral)
    if pad:
        vals = vals[1:]
        s = s[1:]
    return GammaWeight(float(t), s, vals)


# ---------------------------------------------------------------------------
# D H via the variational equation


def variational_H(spec: ModelSpec, sol: ExpansionSolution, *,
                  grid: GridSpec | None = None) -> TimeSpaceField:
    """w = d_x H from its linear equation, zero terminal value."""
    grid = grid or GridSpec()
    h = sol.h_field
    tg, xg = h.time_grid, h.space_grid
    tt, xx = tg[:, None], xg[None, :]
    dh, de = _kernel_rows(spec, h.values, tg, xg, window=sol.constants.delta)
    tau = (spec.T - tg)[:, None]
    src = (tau * spec.b_eta_dx(tt, xx) + tau**spec.p * spec.gamma_dx(tt, xx)
           - de * spec.eta_dx(tt, xx))
    pot = spec.b_dx(tt, xx) - dh
    return solve_linear_parabolic(spec.with_flow_drift(), 0.0, src, pot, grid=grid,
                                  time_grid=tg, space_grid=xg, label="d_x H")


def solve_DH(spec: ModelSpec, sol: ExpansionSolution, theta: float, ensemble: PathEnsemble,
             *, w_field: TimeSpaceField | None = None,
             grid: GridSpec | None = None) -> MalliavinField:
    """D_theta H_t = w(t, X_t) D_theta X_t along every path.

    The meta entry ``gradient_gap`` is the interior sup distance between
    w and centred differences of H.
    """
    w = w_field if w_field is not None else variational_H(spec, sol, grid=grid)
    dx = malliavin_X(ensemble, theta, spec)
    vals = _on_paths(w, ensemble.time_grid, ensemble.x) * dx
    return MalliavinField(theta, ensemble.time_grid, vals, "D_H",
                          {"gradient_gap": gradient_gap(w, gradient_x(sol.h_field))})


def gradient_gap(a: TimeSpaceField, b: TimeSpaceField, frac: float = 0.5) -> float:
    """sup |a - b| over the central part of the space grid."""
    xg = a.space_grid
    mid = np.abs(xg - 0.5 * (xg[0] + xg[-1])) <= frac * 0.5 * (xg[-1] - xg[0]) * (1 + 1e-12)
    return float(np.max(np.abs(a.values[:, mid] - b.values[:, mid])))


def D_eta(spec: ModelSpec, theta: float, ensemble: PathEnsemble) -> MalliavinField:
    dx = malliavin_X(ensemble, theta, spec)
    vals = spec.eta_dx(ensemble.time_grid[None, :], ensemble.x) * dx
    return MalliavinField(theta, ensemble.time_grid, vals, "D_eta")


def representation_DH(spec: ModelSpec, sol: ExpansionSolution, t: float, x: float, *,
                      n_inner: int = 2000, n_steps: int = 400, seed: int = 0):
    """Nested Monte Carlo for w(t, x) = d_x H(t, x):

    E int_t^T [ (T-s) b_eta_x + (T-s)^p gamma_x - dG/deta eta_x ](s, X_s)
      * (nabla X_s / nabla X_t) * Gamma_{t,s} ds,

    the Gamma-weighted representation read in the Markovian setting.
    Returns (mean, standard error).
    """
    if t >= spec.T:
        raise DomainError("representation needs t < T")
    tg = build_time_grid(spec.T, n_steps, ratio=None, t0=t)
    ens = simulate(spec, n_inner, tg, seed, x0=x)
    h = sol.h_field
    H = _on_paths(h, tg, ens.x)
    tau = spec.T - tg
    eta = spec.eta_at(tg[None, :], ens.x)
    live = tau > 0
    dh = np.zeros_like(H)
    de = np.zeros_like(H)
    dh[:, live] = kernel_dG_dh(tau[live], H[:, live], eta[:, live], spec.p, spec.q)
    de[:, live] = kernel_dG_deta(tau[live], H[:, live], eta[:, live], spec.p, spec.q)
    dh[:, ~live] = dh[:, live][:, -1:]
    gam = np.exp(-cumulative_trapezoid(dh, tg, axis=1, initial=0.0))
    tt = tg[None, :]
    integrand = ((tau * spec.b_eta_dx(tt, ens.x) + tau**spec.p * spec.gamma_dx(tt, ens.x)
                  - de * spec.eta_dx(tt, ens.x)) * ens.nabla_x * gam)
    samples = trapezoid(integrand, tg, axis=1)
    return float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(n_inner))


# ---------------------------------------------------------------------------
# D Y^n


def variational_Yn(spec: ModelSpec, u_n: TimeSpaceField, *,
                   grid: GridSpec | None = None) -> TimeSpaceField:
    """v = d_x u^n from its linear equation:

    d_t v + L' v + [b_x - p (u/eta)^(q-1)] v + (u/eta)^q eta_x + gamma_x = 0,
    v(T) = 0, where L' has drift b + sigma sigma_x.  The Feynman-Kac form of
    this equation is the exponential representation with weight
    exp(-p int (u/eta)^(q-1)).
    """
    tg, xg = u_n.time_grid, u_n.space_grid
    tt, xx = tg[:, None], xg[None, :]
    ratio = np.abs(u_n.values) / spec.eta_at(tt, xx)
    pot = spec.b_dx(tt, xx) - spec.p * ratio ** (spec.q - 1.0)
    src = ratio**spec.q * np.sign(u_n.values) * spec.eta_dx(tt, xx) + spec.gamma_dx(tt, xx)
    return solve_linear_parabolic(spec.with_flow_drift(), 0.0, src, pot, grid=grid,
                                  time_grid=tg, space_grid=xg, label="d_x u^n")


def solve_DYn(spec: ModelSpec, u_n: TimeSpaceField, theta: float, ensemble: PathEnsemble,
              *, grad: TimeSpaceField | None = None) -> MalliavinField:
    """D_theta Y^n_t = d_x u^n(t, X_t) D_theta X_t, gradient by centred differences."""
    g = grad if grad is not None else gradient_x(u_n)
    dx = malliavin_X(ensemble, theta, spec)
    vals = _on_paths(g, ensemble.time_grid, ensemble.x) * dx
    return MalliavinField(theta, ensemble.time_grid, vals, "D_Yn",
                          {"n": u_n.meta.get("n", math.nan)})


def truncated_with_gradient(spec: ModelSpec, n: float, *, grid: GridSpec | None = None,
                            time_grid=None, space_grid=None):
    """u^n and v = d_x u^n from the variational equation, both extrapolated in time.

    v is solved with u^n frozen on the coarse grid and on its bisection,
    then the two are combined, so the Richardson step cancels the time
    error of u^n inside the coefficients as well.
    """
    from .truncated import level_tau_min, solve_Yn
    grid = grid or GridSpec()
    plain = replace(grid, richardson=False)
    tg = (np.asarray(time_grid, float) if time_grid is not None
          else grid.time_grid(spec, tau_min=level_tau_min(spec, n, grid)))
    u_c = solve_Yn(spec, n, grid=plain, time_grid=tg, space_grid=space_grid,
                   with_bound=False).u_n
    v_c = variational_Yn(spec, u_c, grid=plain)
    if not grid.richardson:
        return u_c, v_c
    u_f = solve_Yn(spec, n, grid=plain, time_grid=refine_time_grid(tg), space_grid=space_grid,
                   with_bound=False).u_n
    v_f = variational_Yn(spec, u_f, grid=plain)
    u = richardson_combine(u_c, u_f)
    u.values[-1] = float(n)
    u.meta["n"] = float(n)
    return u, richardson_combine(v_c, v_f)


@dataclass
class ChainRuleCheck:
    max_relative: float
    triples: np.ndarray      # rows: theta, t, path, chain, representation
    scale: float


def chain_rule_check(spec: ModelSpec, n: float, ensemble: PathEnsemble,
                     n_triples: int = 100, seed: int = 0, *,
                     grid: GridSpec | None = None) -> ChainRuleCheck:
    """Compare d_x u^n(t, X_t) D_theta X_t with the variational route on random triples.

    Differences are relative to max(|representation|, 1e-3 * largest value),
    so that near-zero derivatives are not compared in relative terms.
    """
    rng = np.random.default_rng(seed)
    u_n, var = truncated_with_gradient(spec, n, grid=grid)
    grad = gradient_x(u_n)
    tg = ensemble.time_grid
    m = tg.size - 1
    rows = []
    for _ in range(n_triples):
        i, k = sorted(rng.integers(0, m, size=2))
        path = int(rng.integers(0, ensemble.n_paths))
        dx = malliavin_X(ensemble, tg[i], spec)[path, k]
        xk = np.clip(ensemble.x[path, k], u_n.space_grid[0], u_n.space_grid[-1])
        a = float(interpolate(grad, tg[k], xk)) * dx
        b = float(interpolate(var, tg[k], xk)) * dx
        rows.append([tg[i], tg[k], path, a, b])
    rows = np.array(rows)
    scale = float(np.max(np.abs(rows[:, 4]))) if rows.size else 0.0
    denom = np.maximum(np.abs(rows[:, 4]), 1e-3 * max(scale, 1e-300))
    rel = float(np.max(np.abs(rows[:, 3] - rows[:, 4]) / denom)) if rows.size else 0.0
    return ChainRuleCheck(rel, rows, scale)


# ---------------------------------------------------------------------------
# assembly


def assemble_DY(spec: ModelSpec, d_eta: MalliavinField, d_H: MalliavinField,
                eps: float = EPS_CUTOFF) -> MalliavinField:
    """D_theta Y = D_theta eta/(T-t)^(p-1) + D_theta H/(T-t)^p on t <= T - eps T."""
    if not np.array_equal(d_eta.times, d_H.times) or d_eta.theta != d_H.theta:
        raise DomainError("components must share theta and times")
    if np.any(d_eta.times > spec.T * (1.0 - eps) * (1 + 1e-14)):
        raise DomainError("D Y is only assembled on [0, T - eps T]")
    tau = spec.T - d_eta.times
    vals = d_eta.values / tau ** (spec.p - 1.0) + d_H.values / tau**spec.p
    return MalliavinField(d_eta.theta, d_eta.times, vals, "D_Y")


def assemble_DYn(spec: ModelSpec, n: float, d_eta: MalliavinField,
                 d_Hn: MalliavinField) -> MalliavinField:
    """D_theta Y^n = D_theta eta/(T-t+e_n)^(p-1) + D_theta Hn/(T-t+e_n)^p."""
    if not np.array_equal(d_eta.times, d_Hn.times) or d_eta.theta != d_Hn.theta:
        raise DomainError("components must share theta and times")
    s = spec.T - d_eta.times + shift_eps(spec, n)
    vals = d_eta.values / s ** (spec.p - 1.0) + d_Hn.values / s**spec.p
    return MalliavinField(d_eta.theta, d_eta.times, vals, "D_Yn", {"n": float(n)})


def solve_DHn(spec: ModelSpec, shifted: ShiftedSolution, theta: float,
              ensemble: PathEnsemble) -> MalliavinField:
    g = gradient_x(shifted.hn_field)
    vals = _on_paths(g, ensemble.time_grid, ensemble.x) * malliavin_X(ensemble, theta, spec)
    return MalliavinField(theta, ensemble.time_grid, vals, "D_Hn", {"n": shifted.n})


# ---------------------------------------------------------------------------
# blow-up diagnostics


def loglog_slope(tau, values, window: tuple[float, float] = (1e-3, 1e-1)):
    """Least-squares slope and intercept of log|values| against log tau on the window."""
    tau = np.asarray(tau, dtype=float)
    v = np.abs(np.asarray(values, dtype=float))
    sel = (tau >= window[0] * (1 - 1e-12)) & (tau <= window[1] * (1 + 1e-12)) & (v > 0)
    if np.count_nonzero(sel) < 3:
        raise DomainError("fewer than three usable nodes inside the fit window")
    slope, intercept = np.polyfit(np.log(tau[sel]), np.log(v[sel]), 1)
    return float(slope), float(intercept)


def blowup_time_grid(spec: ModelSpec, nt: int = 200, tau_min: float = 5e-4) -> np.ndarray:
    """Path grid with geometric refinement reaching below the fit window."""
    return build_time_grid(spec.T, nt, ratio=0.9, tau_min=tau_min)


def theta_path_grid(T: float, steps: int, tau_min: float = 1e-4,
                    ratio: float = 0.8) -> np.ndarray:
    """Uniform nodes k T/steps plus a geometric cluster inside the last step."""
    uniform = np.linspace(0.0, T, steps + 1)
    taus = []
    tau = tau_min
    while tau < T / steps * ratio:
        taus.append(tau)
        tau /= ratio
    return np.union1d(uniform, T - np.asarray(taus, dtype=float))


@dataclass
class BlowupFit:
    slope: float
    intercept: float
    window: tuple
    tau: np.ndarray
    mean_abs: np.ndarray


def blowup_DY(spec: ModelSpec, sol: ExpansionSolution, ensemble: PathEnsemble, theta: float,
              *, w_field: TimeSpaceField | None = None, window=(1e-3, 1e-1),
              eps: float = EPS_CUTOFF) -> BlowupFit:
    """Fit of E|D_theta Y_t| against T - t on the window."""
    w = w_field if w_field is not None else variational_H(spec, sol)
    tg = ensemble.time_grid
    keep = tg <= spec.T * (1.0 - eps) * (1 + 1e-14)
    dX = malliavin_X(ensemble, theta, spec)[:, keep]
    x = ensemble.x[:, keep]
    t = tg[keep]
    tau = spec.T - t
    lead = spec.eta_dx(t[None, :], x) * tau + _on_paths(w, t, x)
    mean_abs = np.mean(np.abs(lead * dX), axis=0) / tau**spec.p
    if not np.any(mean_abs > 0):
        return BlowupFit(math.nan, math.nan, tuple(window), tau, mean_abs)  # identically zero
    slope, icpt = loglog_slope(tau, mean_abs, window)
    return BlowupFit(slope, icpt, tuple(window), tau, mean_abs)


# ---------------------------------------------------------------------------
# bound checks


@dataclass
class SensitivityBound:
    constant: float
    gamma_max: float
    violation: float
    zeta: TimeSpaceField
    power: float


def _adjoint_sup(spec: ModelSpec, sol: ExpansionSolution) -> float:
    """exp of int_0^T max_x (-dG/dh)^+ : bounds every Gamma_{t,s} on the run."""
    h = sol.h_field
    dh, _ = _kernel_rows(spec, h.values, h.time_grid, h.space_grid)
    neg = np.max(np.maximum(-dh, 0.0), axis=1)
    return float(np.exp(np.sum(0.5 * (neg[1:] + neg[:-1]) * np.diff(h.time_grid))))


def sensitivity_bound(spec: ModelSpec, sol: ExpansionSolution, w_field: TimeSpaceField, *,
                      grid: GridSpec | None = None) -> SensitivityBound:
    """|d_x H| <= C (T-t) zeta with zeta = E int_t^T (|b_eta_x| + |gamma_x| + |eta_x|) flow ds.

    Along a path this is |D H_t| <= C (T-t) E_t int (|D b_eta| + |D gamma| + |D eta|),
    since every D(.)_s is (.)_x(s, X_s) D X_s.  When eta is deterministic the
    sharper power (T-t)^p with zeta built from |gamma_x| alone is used.
    C = sup Gamma * max(1, T^(p-1), sup |dG/deta|/(T-t)).
    """
    h = sol.h_field
    tg, xg = h.time_grid, h.space_grid
    gmax = _adjoint_sup(spec, sol)
    _, de = _kernel_rows(spec, h.values, tg, xg)
    tau = (spec.T - tg)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(tau > 0, np.abs(de) / np.where(tau > 0, tau, 1.0), 0.0)
    flow = spec.with_flow_drift()

    def pot(t, x):
        return spec.b_dx(t, x)

    if spec.deterministic_eta:
        power = spec.p

        def src(t, x):
            return np.abs(spec.gamma_dx(t, x))

        const = gmax
    else:
        power = 1.0

        def src(t, x):
            return (np.abs(spec.b_eta_dx(t, x)) + np.abs(spec.gamma_dx(t, x))
                    + np.abs(spec.eta_dx(t, x)))

        const = gmax * max(1.0, spec.T ** (spec.p - 1.0), float(np.max(ratio)))
    zeta = solve_linear_parabolic(flow, 0.0, src, pot, grid=grid, time_grid=tg, space_grid=xg,
                                  label="zeta")
    bound = const * tau**power * zeta.values
    viol = float(np.max(np.abs(w_field.values) - bound))
    return SensitivityBound(const, gmax, viol, zeta, power)


def kappa_check(spec: ModelSpec, shifted: ShiftedSolution) -> dict:
    """Lower bounds on dG/dh along the shifted process.

    On the window: >= -kappa1 = -C1 zeta*/eta_*.  Before it:
    >= -(p/delta) ((1 + C/(eta_* delta))^(q-1) + 1) with C = sup |Hn|.
    """
    from .expansion import hn_bounds
    b = hn_bounds(spec)
    hn = shifted.hn_field
    tg, xg = hn.time_grid, hn.space_grid
    dh, _ = _kernel_rows(spec, hn.values, tg, xg, shift=shifted.eps_n)
    tau = spec.T - tg
    win = tau <= shifted.delta * (1 + 1e-12)
    C = float(np.max(np.abs(hn.values)))
    outer_bound = spec.p / shifted.delta * ((1.0 + C / (spec.eta_lower * shifted.delta))
                                            ** (spec.q - 1.0) + 1.0)
    min_win = float(np.min(dh[win])) if np.any(win) else math.inf
    min_out = float(np.min(dh[~win])) if np.any(~win) else math.inf
    return {"kappa1": b.kappa1, "min_window": min_win, "outer_bound": outer_bound,
            "min_outer": min_out,
            "ok": min_win >= -b.kappa1 - 1e-12 and min_out >= -outer_bound - 1e-12}


# ---------------------------------------------------------------------------
# weighted convergence experiment


@dataclass
class ConvergenceReport:
    levels: list
    thetas: np.ndarray
    weighted: np.ndarray          # (levels, thetas): E sup_t (T-t)^(ell p) |DY - DYn|^ell
    unweighted: np.ndarray        # (levels, thetas): E sup_{t <= tau_cut} |DY - DYn|^ell
    ell: float
    rho: float
    n_paths: int
    standard_errors: np.ndarray = None

    @property
    def sup_weighted(self) -> np.ndarray:
        return self.weighted.max(axis=1)

    @property
    def sup_unweighted(self) -> np.ndarray:
        return self.unweighted.max(axis=1)

    def nonincreasing(self, slack: float = 0.05) -> bool:
        s = self.sup_weighted
        return bool(all(b <= a * (1 + slack) + 1e-300 for a, b in zip(s, s[1:])))

    def decay_ratio(self) -> float:
        s = self.sup_weighted
        return float(s[-1] / s[0]) if s[0] > 0 else 0.0


def convergence_experiment(spec: ModelSpec, levels: Sequence[float] = (4, 16, 64, 256), *,
                           ell: float = 2.0, rho: float = 4.0, n_paths: int = 10_000,
                           seed: int = 0, n_theta: int = 16, path_steps: int = 320,
                           tau_cut: float = 0.9, grid: GridSpec | None = None,
                           sol: ExpansionSolution | None = None,
                           chunk: int = 2_000) -> ConvergenceReport:
    """Monte Carlo estimate of sup_theta E[sup_t (T-t)^(ell p) |D Y_t - D Y^n_t|^ell].

    With W = (T-t) eta_x + d_x H and W^n = (T-t)^p d_x u^n,
    (T-t)^p (D Y - D Y^n) = (W - W^n) D_theta X.  The unweighted variant
    takes the sup over t <= tau_cut * T.
    """
    from .expansion import solve_H
    from .truncated import solve_Yn

    if not 1.0 < ell < rho:
        raise DomainError("need 1 < ell < rho")
    if path_steps % n_theta:
        raise DomainError("path_steps must be a multiple of n_theta")
    grid = grid or GridSpec()
    sol = sol or solve_H(spec, grid=grid)
    w = variational_H(spec, sol, grid=grid)
    tgh = w.time_grid
    W = TimeSpaceField(tgh, w.space_grid,
                       (spec.T - tgh)[:, None] * spec.eta_dx(tgh[:, None], w.space_grid[None, :])
                       + w.values, {"label": "W"})
    Wn = []
    for n in levels:
        u = solve_Yn(spec, n, grid=grid, with_bound=False).u_n
        g = gradient_x(u)
        tau_u = (spec.T - u.time_grid)[:, None]
        Wn.append(TimeSpaceField(u.time_grid, u.space_grid, tau_u**spec.p * g.values,
                                 {"label": f"W^{n:g}"}))
    tg = theta_path_grid(spec.T, path_steps)
    thetas = np.arange(n_theta) * spec.T / n_theta
    L = len(levels)
    acc_w = np.zeros((L, n_theta))
    acc_w2 = np.zeros((L, n_theta))
    acc_u = np.zeros((L, n_theta))
    for start in range(0, n_paths, chunk):
        m = min(chunk, n_paths - start)
        ens = simulate(spec, m, tg, seed, path_offset=start)
        base = _on_paths(W, tg, ens.x)
        diffs = [base - _on_paths(f, tg, ens.x) for f in Wn]
        tau = spec.T - tg
        cut = tg <= tau_cut * spec.T * (1 + 1e-14)
        with np.errstate(divide="ignore", invalid="ignore"):
            unw_scale = np.where(cut, 1.0 / np.where(tau > 0, tau, 1.0) ** spec.p, 0.0)
        for j, th in enumerate(thetas):
            dX = malliavin_X(ens, th, spec)
            for i, d in enumerate(diffs):
                e = np.abs(d * dX)
                sw = np.max(e, axis=1) ** ell
                su = np.max(e * unw_scale, axis=1) ** ell
                acc_w[i, j] += sw.sum()
                acc_w2[i, j] += (sw**2).sum()
                acc_u[i, j] += su.sum()
    mean_w = acc_w / n_paths
    var = np.maximum(acc_w2 / n_paths - mean_w**2, 0.0)
    se = np.sqrt(var / max(n_paths - 1, 1))
    return ConvergenceReport(list(levels), thetas, mean_w, acc_u / n_paths, ell, rho, n_paths,
                             se)
