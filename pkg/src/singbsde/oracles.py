"""Independent ground truth used to validate the solvers.

* the multiplicative-increment family (b_eta = g(t) eta, gamma = 0), for
  which Y/eta is deterministic and h, Y have quadrature formulas;
* constant-coefficient truncated solutions in closed form, and an ODE
  integrator for x-independent problems without one;
* the integral representations of the kernel G and its derivatives;
* the sensitivity envelope when eta is deterministic.

Nothing here calls the grid solvers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .errors import DomainError, NumericalError
from .model import ModelSpec, holder_conjugate

QUAD_TOL = 1e-12


@dataclass(frozen=True)
class UmiSpec:
    """b_eta_t = g(t) eta_t with gamma = 0."""

    g: Callable[[float], float]
    q: float
    T: float
    g_integral: Optional[Callable[[float, float], float]] = None  # int_t^s g, if known

    @property
    def p(self) -> float:
        return holder_conjugate(self.q)

    @classmethod
    def constant(cls, g0: float, q: float, T: float) -> "UmiSpec":
        g0 = float(g0)
        return cls(lambda t: g0, float(q), float(T), lambda t, s: g0 * (s - t))

    def integral(self, t: float, s: float) -> float:
        if self.g_integral is not None:
            return self.g_integral(t, s)
        val, _ = integrate.quad(self.g, t, s, epsabs=QUAD_TOL, epsrel=QUAD_TOL)
        return val


def umi_spec_from_model(spec: ModelSpec) -> UmiSpec:
    if spec.params.get("family") != "umi":
        raise DomainError("spec is not from the umi family")
    return UmiSpec.constant(spec.params["g0"], spec.q, spec.T)


def _average_minus_one(t: float, umi: UmiSpec, tol: float) -> float:
    """(1/tau) int_t^T exp(-(q-1) int_t^s g) ds - 1, written on [0, 1] to avoid 0/0."""
    tau = umi.T - t

    def integrand(r):
        return math.expm1(-(umi.q - 1.0) * umi.integral(t, t + r * tau))

    val, _ = integrate.quad(integrand, 0.0, 1.0, epsabs=tol, epsrel=tol, limit=200)
    return val


def umi_h(t: float, umi: UmiSpec, *, tol: float = QUAD_TOL, check: bool = True) -> float:
    """h(t) = -1 + (average of exp(-(q-1) int_t^s g) over [t, T])^(1-p).

    With ``check`` the function also verifies the first-order equation
    (T-t)(i G)' = (p-1) G (i|i|^(q-1) - i), i = 1 + h, G' = g G, by central
    differences, and raises if it fails.
    """
    if t >= umi.T:
        raise DomainError("umi_h needs t < T")
    am1 = _average_minus_one(t, umi, tol)
    h = math.expm1((1.0 - umi.p) * math.log1p(am1))
    if check:
        _check_ode(t, h, umi, tol)
    return h


def _check_ode(t: float, h: float, umi: UmiSpec, tol: float) -> None:
    p, q = umi.p, umi.q
    tau = umi.T - t
    step = 1e-3 * tau

    def iG(s):
        hs = math.expm1((1.0 - p) * math.log1p(_average_minus_one(s, umi, tol)))
        return (1.0 + hs) * math.exp(umi.integral(0.0, s))

    lhs = tau * (iG(t + step) - iG(t - step)) / (2 * step)
    i = 1.0 + h
    rhs = (p - 1.0) * math.exp(umi.integral(0.0, t)) * (i * abs(i) ** (q - 1.0) - i)
    scale = abs(rhs) + tau * abs(umi.g(t)) * math.exp(umi.integral(0.0, t))
    if abs(lhs - rhs) > 1e-4 * scale + 1e-9:
        raise NumericalError("multiplicative-increment oracle failed its ODE check",
                             {"t": t, "lhs": lhs, "rhs": rhs})


def umi_Y(t: float, eta_t: float, umi: UmiSpec, *, tol: float = QUAD_TOL) -> float:
    """Y_t = eta_t (int_t^T exp(-(q-1) int_t^s g) ds)^(1-p)."""
    if t >= umi.T:
        raise DomainError("umi_Y needs t < T")
    tau = umi.T - t
    am1 = _average_minus_one(t, umi, tol)
    return eta_t * (tau * (1.0 + am1)) ** (1.0 - umi.p)


@dataclass
class UmiCheck:
    is_umi: bool
    times: np.ndarray
    g: np.ndarray
    variation: float


def umi_check(spec: ModelSpec, time_grid=None, space_grid=None, tol: float = 1e-8) -> UmiCheck:
    """Is b_eta/eta a function of t alone on the sampled grid?"""
    tg = np.linspace(0.0, spec.T, 41) if time_grid is None else np.asarray(time_grid, float)
    if space_grid is None:
        half = max(6.0 * spec.sigma_sup() * math.sqrt(spec.T), 1.0)
        space_grid = np.linspace(spec.x0 - half, spec.x0 + half, 121)
    xg = np.asarray(space_grid, float)
    ratio = spec.b_eta_at(tg[:, None], xg[None, :]) / spec.eta_at(tg[:, None], xg[None, :])
    var = float(np.max(ratio.max(axis=1) - ratio.min(axis=1)))
    return UmiCheck(var <= tol, tg, ratio.mean(axis=1), var)


# ---------------------------------------------------------------------------
# constant coefficients and ODE references


def constant_truncated(tau, n: float, q: float, eta: float = 1.0) -> np.ndarray:
    """u^n for constant eta, gamma = 0: (n^(1-q) + tau eta^(1-q))^(-(p-1))."""
    p = holder_conjugate(q)
    tau = np.asarray(tau, dtype=float)
    if n == 0:
        return np.zeros_like(tau)
    return (float(n) ** (1.0 - q) + tau * eta ** (1.0 - q)) ** (-(p - 1.0))


def truncated_ode(times, n: float, q: float, eta: float = 1.0, gamma: float = 0.0) -> np.ndarray:
    """x-independent truncated problem integrated backwards with DOP853."""
    p = holder_conjugate(q)
    times = np.asarray(times, dtype=float)
    T = float(times[-1])

    def rhs(tau, u):
        return -(p - 1.0) * np.abs(u) ** (q - 1.0) * u / eta ** (q - 1.0) + gamma

    taus = (T - times)[::-1]
    sol = integrate.solve_ivp(rhs, (0.0, taus[-1]), [float(n)], method="DOP853",
                              t_eval=taus, rtol=1e-12, atol=1e-14)
    if not sol.success:
        raise NumericalError("reference ODE integration failed", {"message": sol.message})
    return sol.y[0][::-1]


def singular_constant(tau, q: float, eta: float = 1.0) -> np.ndarray:
    """Minimal solution for constant eta, gamma = 0: eta (T-t)^(1-p)."""
    p = holder_conjugate(q)
    return eta * np.asarray(tau, dtype=float) ** (1.0 - p)


# ---------------------------------------------------------------------------
# kernel integral representations


def _rep_integral(w: float, q: float, weight: Callable[[float], float]) -> float:
    def f(a):
        v = 1.0 + a * w
        return weight(a) * abs(v) ** (q - 2.0) * math.copysign(1.0, v) if v != 0 else 0.0

    val, _ = integrate.quad(f, 0.0, 1.0, epsabs=1e-15, epsrel=1e-13, limit=200)
    return val


def G_integral(tau: float, h: float, eta: float, q: float) -> float:
    """G = q h^2/(eta tau^2) int_0^1 (1-a)|1+a w|^(q-2) sign(1+a w) da."""
    w = h / (eta * tau)
    return q * h * h / (eta * tau * tau) * _rep_integral(w, q, lambda a: 1.0 - a)


def dG_dh_integral(tau: float, h: float, eta: float, q: float) -> float:
    """dG/dh = q h/(eta tau^2) int_0^1 |1+a w|^(q-2) sign(1+a w) da."""
    w = h / (eta * tau)
    return q * h / (eta * tau * tau) * _rep_integral(w, q, lambda a: 1.0)


def dG_deta_integral(tau: float, h: float, eta: float, q: float) -> float:
    """dG/deta = -q h^2/(eta^2 tau^2) int_0^1 a |1+a w|^(q-2) sign(1+a w) da."""
    w = h / (eta * tau)
    return -q * h * h / (eta * eta * tau * tau) * _rep_integral(w, q, lambda a: a)


# ---------------------------------------------------------------------------
# deterministic eta: sensitivity envelope


def deterministic_eta_sensitivity_bound(spec: ModelSpec, theta: float, d_gamma_integral,
                                        constant: float, times) -> np.ndarray:
    """C (T-t)^p E_t int_t^T |D_theta gamma_s| ds on t >= theta, zero before.

    ``d_gamma_integral`` holds the conditional integrals on ``times``
    (per path, shape (..., len(times))) and ``constant`` bounds the
    adjoint weight over the run.
    """
    if not spec.deterministic_eta:
        raise DomainError("the envelope requires a deterministic eta")
    times = np.asarray(times, dtype=float)
    vals = constant * (spec.T - times) ** spec.p * np.abs(np.asarray(d_gamma_integral, float))
    return np.where(times >= theta - 1e-14, vals, 0.0)
