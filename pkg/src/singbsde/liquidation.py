"""Optimal liquidation: minimise E int (eta |alpha|^p + gamma |Xi|^p) with Xi_T = 0.

The optimal inventory decays at rate (Y/eta)^(q-1).  Writing
Y = eta (T-t)^(1-p) (1 + kappa) with kappa = H/(eta (T-t)) gives
(Y/eta)^(q-1) = (1+kappa)^(q-1)/(T-t), so

    Xi_s = x0 (T-s)/(T-t0) exp(-int_t0^s ((1+kappa)^(q-1) - 1)/(T-u) du),

whose integrand stays bounded up to T because kappa = O(T-u).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from .errors import DomainError
from .grid import TimeSpaceField, interpolate
from .model import ModelSpec
from .paths import PathEnsemble, malliavin_X


@dataclass
class LiquidationPath:
    x0: float
    start_t: float
    times: np.ndarray
    xi: np.ndarray        # (n_paths, len(times))
    alpha: np.ndarray     # (n_paths, len(times))
    name: str = "optimal"
    cost_terms: dict = field(default_factory=dict)

    @property
    def terminal_inventory(self) -> float:
        return float(np.max(np.abs(self.xi[:, -1])))


def _window(ensemble: PathEnsemble, start_t: float):
    i = ensemble.node(start_t)
    return i, ensemble.time_grid[i:], ensemble.x[:, i:]


def _kappa_on_paths(spec: ModelSpec, h_field: TimeSpaceField, times, x):
    """kappa = H/(eta (T-t)) along paths; the row T - t = 0 takes the limit 0."""
    xc = np.clip(x, h_field.space_grid[0], h_field.space_grid[-1])
    H = interpolate(h_field, np.broadcast_to(times, x.shape), xc)
    tau = spec.T - times
    eta = spec.eta_at(times[None, :], x)
    kappa = np.zeros_like(H)
    live = tau > 0
    kappa[:, live] = H[:, live] / (eta[:, live] * tau[live])
    return kappa, eta, tau


def optimal_state(spec: ModelSpec, h_field: TimeSpaceField, ensemble: PathEnsemble,
                  x0: float, start_t: float = 0.0) -> LiquidationPath:
    """Optimal inventory along every path, in the factored form above.

    ``h_field`` is the remainder H of the singular expansion; Y itself is
    never formed, so the quadrature is regular up to T.
    """
    if start_t >= spec.T:
        raise DomainError("start time must precede T")
    i, t, x = _window(ensemble, start_t)
    kappa, _, tau = _kappa_on_paths(spec, h_field, t, x)
    if np.any(1.0 + kappa <= 0):
        raise DomainError("negative Y encountered along a path")
    ratio = (1.0 + kappa) ** (spec.q - 1.0)
    corr = np.zeros_like(kappa)
    live = tau > 0
    corr[:, live] = (ratio[:, live] - 1.0) / tau[live]
    if not np.all(live):
        corr[:, ~live] = corr[:, live][:, -1:]  # bounded limit at T
    expo = np.exp(-cumulative_trapezoid(corr, t, axis=1, initial=0.0))
    tau0 = spec.T - start_t
    xi = float(x0) * (tau / tau0)[None, :] * expo
    alpha = -float(x0) / tau0 * ratio * expo
    return LiquidationPath(float(x0), float(start_t), t, xi, alpha)


def twap_baseline(x0: float, start_t: float, T: float, times=None,
                  n_paths: int = 1) -> LiquidationPath:
    """Constant-rate liquidation to zero."""
    if start_t >= T:
        raise DomainError("start time must precede T")
    t = np.linspace(start_t, T, 201) if times is None else np.asarray(times, dtype=float)
    xi = float(x0) * (T - t) / (T - start_t)
    alpha = np.full_like(t, -float(x0) / (T - start_t))
    return LiquidationPath(float(x0), float(start_t), t,
                           np.repeat(xi[None, :], n_paths, axis=0),
                           np.repeat(alpha[None, :], n_paths, axis=0), name="twap")


def cost(spec: ModelSpec, path: LiquidationPath, ensemble: PathEnsemble,
         terminal_tol: float = 1e-3):
    """Monte Carlo estimate and standard error of int eta |alpha|^p + gamma |Xi|^p.

    Controls that do not end at zero inventory are refused.
    """
    if path.terminal_inventory > terminal_tol * max(abs(path.x0), 1e-300) and path.x0 != 0:
        raise DomainError("control does not liquidate the position")
    i, t, x = _window(ensemble, path.start_t)
    if t.size != path.times.size or not np.allclose(t, path.times, rtol=0, atol=1e-12):
        raise DomainError("control and ensemble use different time grids")
    n = ensemble.n_paths
    xi = np.broadcast_to(path.xi, (n, t.size))
    alpha = np.broadcast_to(path.alpha, (n, t.size))
    tt = t[None, :]
    running = spec.eta_at(tt, x) * np.abs(alpha) ** spec.p
    penalty = spec.gamma_at(tt, x) * np.abs(xi) ** spec.p
    a = trapezoid(running, t, axis=1)
    b = trapezoid(penalty, t, axis=1)
    samples = a + b
    path.cost_terms = {"running": float(a.mean()), "penalty": float(b.mean())}
    se = float(samples.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(samples.mean()), se


def value_function(spec: ModelSpec, h_field: TimeSpaceField, x0: float, t: float, x):
    """|x0|^p Y(t, x) from the expansion."""
    tau = spec.T - t
    H = interpolate(h_field, t, np.clip(x, h_field.space_grid[0], h_field.space_grid[-1]))
    Y = spec.eta_at(t, x) / tau ** (spec.p - 1.0) + H / tau**spec.p
    return abs(x0) ** spec.p * Y


@dataclass
class ValueIdentity:
    cost: float
    standard_error: float
    value: float
    gap: float
    allowance: float
    ok: bool


def value_identity_check(spec: ModelSpec, h_field: TimeSpaceField, x0: float,
                         start_t: float, ensemble: PathEnsemble,
                         rel_allowance: float = 1e-3) -> ValueIdentity:
    """|J(alpha*) - |x0|^p Y(start_t, X_start)| <= 2 SE + rel_allowance * value."""
    path = optimal_state(spec, h_field, ensemble, x0, start_t)
    j, se = cost(spec, path, ensemble)
    i = ensemble.node(start_t)
    v = float(np.mean(value_function(spec, h_field, x0, start_t, ensemble.x[:, i])))
    gap = abs(j - v)
    allowance = 2.0 * se + rel_allowance * abs(v)
    return ValueIdentity(j, se, v, gap, allowance, gap <= allowance + 1e-300)


def perturbations(path: LiquidationPath, count: int = 5, seed: int = 0,
                  scale: float = 0.2) -> list[LiquidationPath]:
    """Admissible controls Xi* + phi with phi(t0) = phi(T) = 0, phi a random sine mix."""
    rng = np.random.default_rng(seed)
    t = path.times
    span = t[-1] - t[0]
    r = (t - t[0]) / span
    out = []
    for k in range(count):
        modes = np.arange(1, 4)
        amps = rng.normal(size=modes.size) * scale * path.x0 / modes
        phi = np.sum(amps[:, None] * np.sin(np.pi * modes[:, None] * r[None, :]), axis=0)
        dphi = np.sum(amps[:, None] * np.pi * modes[:, None] / span
                      * np.cos(np.pi * modes[:, None] * r[None, :]), axis=0)
        out.append(LiquidationPath(path.x0, path.start_t, t, path.xi + phi[None, :],
                                   path.alpha + dphi[None, :], name=f"perturbed-{k}"))
    return out


def sensitivity_Xi(spec: ModelSpec, ensemble: PathEnsemble, h_field: TimeSpaceField,
                   w_field: TimeSpaceField, theta: float, x0: float,
                   start_t: float = 0.0, path: Optional[LiquidationPath] = None) -> np.ndarray:
    """D_theta Xi_s = -(q-1) Xi_s int_{theta v t0}^s (1+kappa)^(q-2) d_x kappa D_theta X / (T-u) du.

    With Y/eta = (1+kappa)(T-u)^(1-p) this is the quadrature of
    |Y/eta|^(q-2) D_theta(Y/eta); d_x kappa = (w eta - H eta_x)/(eta^2 (T-u))
    uses w = d_x H.  Returns an array (n_paths, len(times)), zero before theta.
    """
    path = path or optimal_state(spec, h_field, ensemble, x0, start_t)
    i, t, x = _window(ensemble, start_t)
    kappa, eta, tau = _kappa_on_paths(spec, h_field, t, x)
    if np.any(1.0 + kappa <= 0):
        raise DomainError("negative Y encountered along a path")
    xc = np.clip(x, w_field.space_grid[0], w_field.space_grid[-1])
    tt = np.broadcast_to(t, x.shape)
    w = interpolate(w_field, tt, xc)
    H = interpolate(h_field, tt, xc)
    dX = malliavin_X(ensemble, theta, spec)[:, i:]
    live = tau > 0
    integrand = np.zeros_like(kappa)
    num = w * eta - H * spec.eta_dx(t[None, :], x)
    integrand[:, live] = ((1.0 + kappa[:, live]) ** (spec.q - 2.0) * num[:, live]
                          / (eta[:, live] ** 2 * tau[live] ** 2))
    if not np.all(live):
        integrand[:, ~live] = integrand[:, live][:, -1:]
    integrand *= dX
    before = t < theta - 1e-12
    integrand[:, before] = 0.0
    out = -(spec.q - 1.0) * path.xi * cumulative_trapezoid(integrand, t, axis=1, initial=0.0)
    out[:, before] = 0.0
    return out


def malliavin_covariance(spec: ModelSpec, ensemble: PathEnsemble, h_field: TimeSpaceField,
                         w_field: TimeSpaceField, x0: float, s: float, start_t: float = 0.0,
                         n_theta: int = 16) -> np.ndarray:
    """Per-path int_{start_t}^s (D_theta Xi_s)^2 d theta on ensemble nodes.

    Only reported: positivity holds in special cases but is not guaranteed.
    """
    k = ensemble.node(s)
    nodes = ensemble.time_grid[ensemble.node(start_t):k + 1]
    if nodes.size < 2:
        return np.zeros(ensemble.n_paths)
    pick = np.unique(np.linspace(0, nodes.size - 1, min(n_theta, nodes.size)).round().astype(int))
    thetas = nodes[pick]
    path = optimal_state(spec, h_field, ensemble, x0, start_t)
    col = k - ensemble.node(start_t)
    sq = np.stack([sensitivity_Xi(spec, ensemble, h_field, w_field, th, x0, start_t,
                                  path)[:, col] ** 2 for th in thetas], axis=1)
    return trapezoid(sq, thetas, axis=1)


@dataclass
class StrategyCost:
    name: str
    mean: float
    standard_error: float
    terminal_inventory: float


@dataclass
class LiquidationReport:
    strategies: list
    value: float
    value_gap: float
    value_allowance: float
    n_paths: int

    def by_name(self, name: str) -> StrategyCost:
        for s in self.strategies:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def value_ok(self) -> bool:
        return self.value_gap <= self.value_allowance

    def optimal_beats(self, name: str) -> bool:
        """J(optimal) <= J(other) + 2 pooled standard errors."""
        a, b = self.by_name("optimal"), self.by_name(name)
        pooled = math.hypot(a.standard_error, b.standard_error)
        return a.mean <= b.mean + 2.0 * pooled


def liquidation_study(spec: ModelSpec, h_field: TimeSpaceField, x0: float, time_grid, *,
                      n_paths: int = 100_000, seed: int = 0, chunk: int = 10_000,
                      start_t: float = 0.0, n_perturbations: int = 5,
                      rel_allowance: float = 1e-3) -> LiquidationReport:
    """Costs of the optimal, TWAP and perturbed strategies, pooled over chunks of paths.

    Chunks reuse the per-path random streams, so the result does not depend
    on the chunk size.
    """
    from .paths import simulate

    sums: dict = {}
    vsum = 0.0
    for start in range(0, n_paths, chunk):
        m = min(chunk, n_paths - start)
        ens = simulate(spec, m, time_grid, seed, path_offset=start)
        opt = optimal_state(spec, h_field, ens, x0, start_t)
        t = opt.times
        twap = twap_baseline(x0, start_t, spec.T, t, 1)
        strategies = [opt, twap] + perturbations(opt, n_perturbations, seed=seed)
        for s in strategies:
            j, se = cost(spec, s, ens)
            acc = sums.setdefault(s.name, [0.0, 0.0, 0.0])
            # pooled first and second moments from per-chunk mean and SE
            acc[0] += m * j
            acc[1] += (se * se * m * (m - 1) + m * j * j) if m > 1 else m * j * j
            acc[2] = max(acc[2], s.terminal_inventory)
        i = ens.node(start_t)
        vsum += float(np.sum(value_function(spec, h_field, x0, start_t, ens.x[:, i])))
    out = []
    for name, (s1, s2, term) in sums.items():
        mean = s1 / n_paths
        var = max(s2 / n_paths - mean * mean, 0.0) * n_paths / max(n_paths - 1, 1)
        out.append(StrategyCost(name, mean, math.sqrt(var / n_paths), term))
    value = vsum / n_paths
    opt = [s for s in out if s.name == "optimal"][0]
    gap = abs(opt.mean - value)
    allowance = 2.0 * opt.standard_error + rel_allowance * abs(value)
    return LiquidationReport(out, value, gap, allowance, n_paths)
