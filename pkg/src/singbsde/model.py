"""Problem specification and the generator kernels.

The liquidation problem is described by a cost exponent p (with Hölder
conjugate q), a horizon T, an impact coefficient eta(t, x), a running
penalty gamma(t, x) and a scalar forward diffusion dX = b dt + sigma dW.
In the Markovian setting every coefficient process is a function of
(t, X_t), and the drift of eta_t = eta(t, X_t) is

    b_eta = d_t eta + b d_x eta + 0.5 sigma^2 d_xx eta.

The kernel G and the generator F below drive the equation for the
remainder H in the expansion Y = eta/(T-t)^(p-1) + H/(T-t)^p.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, KernelGuardError, KernelGuardWarning

Coefficient = Callable[[np.ndarray, np.ndarray], np.ndarray]

GUARD = 0.5
GUARD_SLACK = 1e-9
_SERIES_CUTOFF = 1e-2
_SERIES_TERMS = 9


def holder_conjugate(p: float) -> float:
    """Return q = p/(p-1), the conjugate exponent of p > 1."""
    p = float(p)
    if not p > 1.0 or not math.isfinite(p):
        raise DomainError(f"conjugate exponent needs p > 1, got {p}")
    return p / (p - 1.0)


def _broadcast_eval(f: Coefficient, t, x) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    shape = np.broadcast_shapes(t.shape, x.shape)
    out = np.asarray(f(t, x), dtype=float)
    return np.array(np.broadcast_to(out, shape), dtype=float)


def _const(value: float) -> Coefficient:
    value = float(value)

    def f(t, x):
        return np.full(np.broadcast_shapes(np.shape(t), np.shape(x)), value)

    return f


@dataclass(frozen=True)
class ModelSpec:
    """A complete problem instance.

    Coefficient callables take numpy arrays ``(t, x)`` and must broadcast.
    Optional analytic derivatives replace finite differences when given.
    """

    p: float
    q: float
    T: float
    eta: Coefficient
    gamma: Coefficient
    drift_b: Coefficient
    vol_sigma: Coefficient
    eta_lower: float
    eta_upper: float
    gamma_upper: float
    b_eta_sup: float
    x0: float = 0.0
    name: str = "custom"
    b_eta: Optional[Coefficient] = None
    eta_x: Optional[Coefficient] = None
    gamma_x: Optional[Coefficient] = None
    b_eta_x: Optional[Coefficient] = None
    drift_b_x: Optional[Coefficient] = None
    vol_sigma_x: Optional[Coefficient] = None
    sigma_bar: Optional[float] = None
    deterministic_eta: bool = False
    deterministic_gamma: bool = False
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not (self.p > 1 and self.q > 1):
            raise DomainError(f"exponents must exceed 1 (p={self.p}, q={self.q})")
        if abs((self.p - 1.0) * (self.q - 1.0) - 1.0) > 1e-12:
            raise DomainError(f"p={self.p} and q={self.q} are not conjugate")
        if not self.T > 0:
            raise DomainError(f"horizon must be positive, got {self.T}")
        if not 0 < self.eta_lower <= self.eta_upper:
            raise DomainError("need 0 < eta_lower <= eta_upper")
        if self.gamma_upper < 0 or self.b_eta_sup < 0:
            raise DomainError("gamma_upper and b_eta_sup must be nonnegative")

    @classmethod
    def create(cls, *, T: float, p: float | None = None, q: float | None = None,
               **kwargs) -> "ModelSpec":
        """Build a spec from either exponent (both allowed if consistent)."""
        if p is None and q is None:
            raise DomainError("one of p, q is required")
        if p is None:
            p = holder_conjugate(q)
        elif q is None:
            q = holder_conjugate(p)
        elif abs((p - 1) * (q - 1) - 1) > 1e-9:
            raise DomainError(f"inconsistent exponents p={p}, q={q}")
        else:
            q = holder_conjugate(p)
        return cls(p=float(p), q=float(q), T=float(T), **kwargs)

    # coefficient evaluation -------------------------------------------------

    def eta_at(self, t, x) -> np.ndarray:
        return _broadcast_eval(self.eta, t, x)

    def gamma_at(self, t, x) -> np.ndarray:
        return _broadcast_eval(self.gamma, t, x)

    def b_at(self, t, x) -> np.ndarray:
        return _broadcast_eval(self.drift_b, t, x)

    def sigma_at(self, t, x) -> np.ndarray:
        return _broadcast_eval(self.vol_sigma, t, x)

    def _dx(self, f: Coefficient, t, x) -> np.ndarray:
        hx = 1e-5 * max(1.0, float(np.max(np.abs(x))) if np.size(x) else 1.0)
        x = np.asarray(x, dtype=float)
        return (_broadcast_eval(f, t, x + hx) - _broadcast_eval(f, t, x - hx)) / (2 * hx)

    def _dxx(self, f: Coefficient, t, x) -> np.ndarray:
        hx = 1e-4 * max(1.0, float(np.max(np.abs(x))) if np.size(x) else 1.0)
        x = np.asarray(x, dtype=float)
        return (_broadcast_eval(f, t, x + hx) - 2 * _broadcast_eval(f, t, x)
                + _broadcast_eval(f, t, x - hx)) / hx**2

    def _dt(self, f: Coefficient, t, x) -> np.ndarray:
        ht = 1e-6 * self.T
        t = np.asarray(t, dtype=float)
        return (_broadcast_eval(f, t + ht, x) - _broadcast_eval(f, t - ht, x)) / (2 * ht)

    def eta_dx(self, t, x) -> np.ndarray:
        if self.deterministic_eta:
            return np.zeros(np.broadcast_shapes(np.shape(t), np.shape(x)))
        if self.eta_x is not None:
            return _broadcast_eval(self.eta_x, t, x)
        return self._dx(self.eta, t, x)

    def gamma_dx(self, t, x) -> np.ndarray:
        if self.deterministic_gamma:
            return np.zeros(np.broadcast_shapes(np.shape(t), np.shape(x)))
        if self.gamma_x is not None:
            return _broadcast_eval(self.gamma_x, t, x)
        return self._dx(self.gamma, t, x)

    def b_dx(self, t, x) -> np.ndarray:
        if self.drift_b_x is not None:
            return _broadcast_eval(self.drift_b_x, t, x)
        return self._dx(self.drift_b, t, x)

    def sigma_dx(self, t, x) -> np.ndarray:
        if self.vol_sigma_x is not None:
            return _broadcast_eval(self.vol_sigma_x, t, x)
        return self._dx(self.vol_sigma, t, x)

    def b_eta_at(self, t, x) -> np.ndarray:
        """Drift of eta(t, X_t): closed form if supplied, else finite differences."""
        if self.b_eta is not None:
            return _broadcast_eval(self.b_eta, t, x)
        out = self._dt(self.eta, t, x)
        if not self.deterministic_eta:
            b = self.b_at(t, x)
            s = self.sigma_at(t, x)
            out = out + b * self.eta_dx(t, x) + 0.5 * s**2 * self._dxx(self.eta, t, x)
        return out

    def b_eta_dx(self, t, x) -> np.ndarray:
        if self.deterministic_eta:
            return np.zeros(np.broadcast_shapes(np.shape(t), np.shape(x)))
        if self.b_eta_x is not None:
            return _broadcast_eval(self.b_eta_x, t, x)
        return self._dx(self.b_eta_at, t, x)

    @property
    def deterministic(self) -> bool:
        """True when eta and gamma (hence b_eta) do not depend on the state."""
        return self.deterministic_eta and self.deterministic_gamma

    def sigma_sup(self, x_probe: np.ndarray | None = None) -> float:
        if self.sigma_bar is not None:
            return float(self.sigma_bar)
        if x_probe is None:
            x_probe = self.x0 + np.linspace(-10.0, 10.0, 401)
        t_probe = np.linspace(0.0, self.T, 21)[:, None]
        return float(np.max(np.abs(self.sigma_at(t_probe, x_probe[None, :]))))

    def with_flow_drift(self) -> "ModelSpec":
        """Spec whose forward drift is b + sigma sigma_x.

        x-derivatives of Feynman-Kac solutions solve linear equations driven
        by this modified generator, plus a potential b_x.
        """
        b, s, sx = self.drift_b, self.vol_sigma, self.sigma_dx

        def drift(t, x):
            return _broadcast_eval(b, t, x) + _broadcast_eval(s, t, x) * sx(t, x)

        return replace(self, drift_b=drift, drift_b_x=None, name=self.name + "+flow")

    def check_bounds(self, t, x, tol: float = 1e-12) -> None:
        """Verify the coefficient bounds on sampled points."""
        eta = self.eta_at(t, x)
        if np.min(eta) < self.eta_lower * (1 - tol) or np.max(eta) > self.eta_upper * (1 + tol):
            raise DomainError(
                f"eta range [{np.min(eta):.6g}, {np.max(eta):.6g}] leaves "
                f"[{self.eta_lower}, {self.eta_upper}]")
        gam = self.gamma_at(t, x)
        if np.min(gam) < -tol or np.max(gam) > self.gamma_upper * (1 + tol) + tol:
            raise DomainError(
                f"gamma range [{np.min(gam):.6g}, {np.max(gam):.6g}] leaves [0, {self.gamma_upper}]")


# ---------------------------------------------------------------------------
# kernel G and its partial derivatives


def _phi(w: np.ndarray, q: float) -> np.ndarray:
    """(1+w)|1+w|^(q-1) - 1 - q w, with a series near w = 0."""
    w = np.asarray(w, dtype=float)
    out = np.empty_like(w)
    small = np.abs(w) < _SERIES_CUTOFF
    if np.any(small):
        ws = w[small]
        coef = q * (q - 1.0) / 2.0
        term = coef * ws**2
        acc = term.copy()
        for k in range(3, _SERIES_TERMS + 1):
            coef *= (q - k + 1.0) / k
            acc += coef * ws**k
        out[small] = acc
    big = ~small
    if np.any(big):
        wb = w[big]
        one = 1.0 + wb
        out[big] = one * np.abs(one) ** (q - 1.0) - 1.0 - q * wb
    return out


def _power_minus_one(w: np.ndarray, q: float) -> np.ndarray:
    """|1+w|^(q-1) - 1 computed without cancellation for 1+w > 0."""
    w = np.asarray(w, dtype=float)
    out = np.empty_like(w)
    pos = w > -1.0
    out[pos] = np.expm1((q - 1.0) * np.log1p(w[pos]))
    out[~pos] = np.abs(1.0 + w[~pos]) ** (q - 1.0) - 1.0
    return out


def kernel_G(tau, h, eta, p: float, q: float) -> np.ndarray:
    """G as a function of time to maturity tau > 0, without guard checks."""
    w = np.asarray(h, dtype=float) / (np.asarray(eta, dtype=float) * tau)
    return (p - 1.0) * np.asarray(eta, dtype=float) * _phi(w, q)


def kernel_dG_dh(tau, h, eta, p: float, q: float) -> np.ndarray:
    w = np.asarray(h, dtype=float) / (np.asarray(eta, dtype=float) * tau)
    return p / np.asarray(tau, dtype=float) * _power_minus_one(w, q)


def kernel_dG_deta(tau, h, eta, p: float, q: float) -> np.ndarray:
    w = np.asarray(h, dtype=float) / (np.asarray(eta, dtype=float) * tau)
    return (p - 1.0) * _phi(w, q) - p * w * _power_minus_one(w, q)


def _guarded_args(t, h, eta, spec: ModelSpec, guard: bool):
    t = np.asarray(t, dtype=float)
    h = np.asarray(h, dtype=float)
    eta = np.asarray(eta, dtype=float)
    tau = spec.T - t
    if np.any(tau <= 0):
        raise DomainError("kernel evaluated at t >= T")
    if np.any(eta <= 0):
        raise DomainError("kernel needs eta > 0")
    if guard:
        w = np.abs(h) / (eta * tau)
        worst = float(np.max(w)) if w.size else 0.0
        if worst > GUARD + GUARD_SLACK:
            msg = f"|h|/(eta (T-t)) = {worst:.6g} exceeds {GUARD}"
            if spec.q < 2:
                raise KernelGuardError(msg + f" with q = {spec.q} < 2")
            warnings.warn(msg, KernelGuardWarning, stacklevel=3)
    return tau, h, eta


def eval_G(t, h, eta, spec: ModelSpec, guard: bool = True):
    """G(t, h, eta) = (p-1) eta [(1+w)|1+w|^(q-1) - 1 - q w], w = h/(eta (T-t))."""
    tau, h, eta = _guarded_args(t, h, eta, spec, guard)
    out = kernel_G(tau, h, eta, spec.p, spec.q)
    return out if out.ndim else float(out)


def eval_dG_dh(t, h, eta, spec: ModelSpec, guard: bool = True):
    """p/(T-t) (|1+w|^(q-1) - 1)."""
    tau, h, eta = _guarded_args(t, h, eta, spec, guard)
    out = kernel_dG_dh(tau, h, eta, spec.p, spec.q)
    return out if out.ndim else float(out)


def eval_dG_deta(t, h, eta, spec: ModelSpec, guard: bool = True):
    """(p-1) phi(w) - p w (|1+w|^(q-1) - 1)."""
    tau, h, eta = _guarded_args(t, h, eta, spec, guard)
    out = kernel_dG_deta(tau, h, eta, spec.p, spec.q)
    return out if out.ndim else float(out)


def eval_F(t, h, x, spec: ModelSpec, guard: bool = True):
    """Generator of the remainder equation.

    F = (T-t) b_eta + (T-t)^p gamma - G(t, h, eta), coefficients at (t, x).
    """
    t = np.asarray(t, dtype=float)
    eta = spec.eta_at(t, x)
    tau, h, eta = _guarded_args(t, h, eta, spec, guard)
    out = (tau * spec.b_eta_at(t, x) + tau**spec.p * spec.gamma_at(t, x)
           - kernel_G(tau, h, eta, spec.p, spec.q))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Picard constants


@dataclass(frozen=True)
class PicardConstants:
    R: float
    L: float
    delta: float


def picard_constants(spec: ModelSpec) -> PicardConstants:
    """Ball radius, Lipschitz bound and contraction window.

    R = |b_eta|_inf + 2 gamma*/(p+1), L = q R 2^|q-2| / eta_lower,
    delta = min(1, T, 1/(2L), eta_lower/(2R)), with the last two terms
    read as +inf when R = 0.
    """
    p, q = spec.p, spec.q
    R = spec.b_eta_sup + 2.0 * spec.gamma_upper / (p + 1.0)
    L = q * R * 2.0 ** abs(q - 2.0) / spec.eta_lower
    delta = min(1.0, spec.T)
    if R > 0:
        delta = min(delta, 1.0 / (2.0 * L), spec.eta_lower / (2.0 * R))
    return PicardConstants(R=R, L=L, delta=delta)


# ---------------------------------------------------------------------------
# built-in coefficient families

_ARCTAN_BUMP = 3.0 * math.sqrt(3.0) / 16.0  # max of x/(1+x^2)^2


def _exponents(p, q):
    if p is None and q is None:
        raise DomainError("one of p, q is required")
    if q is None:
        q = holder_conjugate(p)
    if p is None:
        p = holder_conjugate(q)
    if abs((p - 1) * (q - 1) - 1) > 1e-9:
        raise DomainError(f"inconsistent exponents p={p}, q={q}")
    return float(holder_conjugate(q)), float(q)


def _arctan_pieces(lower: float, upper: float):
    c = (upper - lower) / math.pi
    mid = 0.5 * (upper + lower)

    def f(t, x):
        return c * np.arctan(x) + mid + 0.0 * t

    def fx(t, x):
        return c / (1.0 + x**2) + 0.0 * t

    def fxx(t, x):
        return -2.0 * c * x / (1.0 + x**2) ** 2 + 0.0 * t

    def fxxx(t, x):
        return c * (6.0 * x**2 - 2.0) / (1.0 + x**2) ** 3 + 0.0 * t

    return f, fx, fxx, fxxx


def _gamma_family(gamma, gamma_family: str):
    """Constant penalty, or gamma* (1/2 + arctan(x)/pi) in (0, gamma*)."""
    gamma = float(gamma)
    if gamma < 0:
        raise DomainError("gamma must be nonnegative")
    if gamma_family == "constant":
        return _const(gamma), _const(0.0), True
    if gamma_family == "arctan":
        f, fx, _, _ = _arctan_pieces(0.0, gamma)
        return f, fx, gamma == 0.0
    raise DomainError(f"unknown gamma family {gamma_family!r}")


def constant_model(*, q: float | None = None, p: float | None = None, T: float = 1.0,
                   eta: float = 1.0, gamma: float = 0.0, gamma_family: str = "constant",
                   b: float = 0.0, sigma: float = 0.0, x0: float = 0.0) -> ModelSpec:
    """eta constant; gamma constant or arctan-shaped; constant forward coefficients."""
    p, q = _exponents(p, q)
    g, gx, g_det = _gamma_family(gamma, gamma_family)
    return ModelSpec(
        p=p, q=q, T=float(T), eta=_const(eta), gamma=g, drift_b=_const(b),
        vol_sigma=_const(sigma), eta_lower=float(eta), eta_upper=float(eta),
        gamma_upper=float(gamma), b_eta_sup=0.0, x0=float(x0), name="constant",
        b_eta=_const(0.0), eta_x=_const(0.0), gamma_x=gx, b_eta_x=_const(0.0),
        drift_b_x=_const(0.0), vol_sigma_x=_const(0.0), sigma_bar=abs(float(sigma)),
        deterministic_eta=True, deterministic_gamma=g_det,
        params=dict(family="constant", eta=eta, gamma=gamma, gamma_family=gamma_family,
                    b=b, sigma=sigma))


def arctan_model(*, q: float | None = None, p: float | None = None, T: float = 1.0,
                 eta_lower: float = 1.0, eta_upper: float = 2.0, gamma: float = 0.0,
                 gamma_family: str = "constant", b: float = 0.0, sigma: float = 1.0,
                 x0: float = 0.0) -> ModelSpec:
    """eta(x) = (eta* - eta_*)/pi arctan(x) + (eta* + eta_*)/2."""
    p, q = _exponents(p, q)
    b, sigma = float(b), float(sigma)
    f, fx, fxx, fxxx = _arctan_pieces(eta_lower, eta_upper)
    a = 0.5 * sigma**2

    def b_eta(t, x):
        return b * fx(t, x) + a * fxx(t, x)

    def b_eta_x(t, x):
        return b * fxx(t, x) + a * fxxx(t, x)

    c = (eta_upper - eta_lower) / math.pi
    if b == 0.0:
        sup = c * sigma**2 * _ARCTAN_BUMP
    else:
        xs = np.linspace(-60.0, 60.0, 240001)
        sup = float(np.max(np.abs(b_eta(0.0, xs))))
    g, gx, g_det = _gamma_family(gamma, gamma_family)
    return ModelSpec(
        p=p, q=q, T=float(T), eta=f, gamma=g, drift_b=_const(b), vol_sigma=_const(sigma),
        eta_lower=float(eta_lower), eta_upper=float(eta_upper), gamma_upper=float(gamma),
        b_eta_sup=float(sup), x0=float(x0), name="arctan", b_eta=b_eta, eta_x=fx,
        gamma_x=gx, b_eta_x=b_eta_x, drift_b_x=_const(0.0), vol_sigma_x=_const(0.0),
        sigma_bar=abs(sigma), deterministic_eta=eta_lower == eta_upper,
        deterministic_gamma=g_det,
        params=dict(family="arctan", eta_lower=eta_lower, eta_upper=eta_upper, gamma=gamma,
                    gamma_family=gamma_family, b=b, sigma=sigma))


def umi_model(*, q: float | None = None, p: float | None = None, T: float = 1.0,
              g0: float = 0.5, level: float = 1.0, wave: float = 0.0, k: float = 1.0,
              sigma: float = 1.0, x0: float = 0.0) -> ModelSpec:
    """Multiplicative-increment family with gamma = 0 and b = 0.

    eta(t, x) = e^(g0 t) (level + wave cos(k x) e^(sigma^2 k^2 t / 2)), so that
    d_t eta + 0.5 sigma^2 d_xx eta = g0 eta. wave = 0 gives a deterministic eta.
    """
    p, q = _exponents(p, q)
    sigma = float(sigma)
    beta = 0.5 * sigma**2 * k**2
    swing = abs(wave) * math.exp(beta * T)
    if swing >= level:
        raise DomainError("umi family needs |wave| e^(sigma^2 k^2 T/2) < level")

    def eta(t, x):
        return np.exp(g0 * t) * (level + wave * np.cos(k * x) * np.exp(beta * t))

    def eta_x(t, x):
        return -np.exp(g0 * t) * wave * k * np.sin(k * x) * np.exp(beta * t)

    def b_eta(t, x):
        return g0 * eta(t, x)

    def b_eta_x(t, x):
        return g0 * eta_x(t, x)

    growth = [math.exp(g0 * 0.0), math.exp(g0 * T)]
    lower = min(growth) * (level - swing) if wave else min(growth) * level
    upper = max(growth) * (level + swing) if wave else max(growth) * level
    return ModelSpec(
        p=p, q=q, T=float(T), eta=eta, gamma=_const(0.0), drift_b=_const(0.0),
        vol_sigma=_const(sigma), eta_lower=lower, eta_upper=upper, gamma_upper=0.0,
        b_eta_sup=abs(g0) * upper, x0=float(x0), name="umi", b_eta=b_eta, eta_x=eta_x,
        gamma_x=_const(0.0), b_eta_x=b_eta_x, drift_b_x=_const(0.0), vol_sigma_x=_const(0.0),
        sigma_bar=abs(sigma), deterministic_eta=wave == 0.0, deterministic_gamma=True,
        params=dict(family="umi", g0=g0, level=level, wave=wave, k=k, sigma=sigma))


FAMILIES = {"constant": constant_model, "arctan": arctan_model, "umi": umi_model}
