"""Finite-difference engine for 1-d parabolic terminal-value problems.

Solves  d_t w + L w + c w + f = 0  on [t0, T] x [x_lo, x_hi], w(T) given,
with L = b d_x + 0.5 sigma^2 d_xx, homogeneous Neumann boundaries and a
theta-scheme in time (Crank-Nicolson by default).  Semilinear problems
d_t w + L w + g(t, x, w) = 0 are advanced slab by slab with Newton.

Time grids are uniform away from T and geometrically refined towards it,
because every field of interest varies on the scale T - t there.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import lapack

from .errors import DomainError, NumericalError
from .model import ModelSpec

ArrayOrFn = Union[np.ndarray, Callable, float, None]

_FIELD_MAGIC = b"SBTF"
_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# grids


def build_time_grid(T: float, nt: int = 400, ratio: Optional[float] = 0.9,
                    tau_min: Optional[float] = None, t0: float = 0.0) -> np.ndarray:
    """Nodes t0 = t_0 < ... < t_M = T.

    Spacing is (T - t0)/nt away from T.  With ``ratio`` set, the distances
    to maturity tau_k = T - t_k form a geometric sequence tau_min, tau_min/ratio, ...
    until the geometric step reaches the uniform one.  ``ratio=None`` gives
    a uniform grid.
    """
    span = float(T) - float(t0)
    if span <= 0:
        raise DomainError("time grid needs t0 < T")
    if nt < 1:
        raise DomainError("nt must be positive")
    if ratio is None:
        return np.linspace(t0, T, nt + 1)
    if not 0 < ratio < 1:
        raise DomainError("refinement ratio must lie in (0, 1)")
    dt = span / nt
    tau = min(1e-7 * span if tau_min is None else float(tau_min), dt)
    taus = [0.0]
    while tau < span:
        taus.append(tau)
        if tau * (1.0 / ratio - 1.0) >= dt:
            break
        tau /= ratio
    last = taus[-1]
    if last < span:
        m = max(1, math.ceil((span - last) / dt - 1e-9))
        taus.extend(last + (span - last) * np.arange(1, m + 1) / m)
    taus = np.asarray(taus)
    times = T - taus[::-1]
    times[0], times[-1] = t0, T
    return times


@dataclass(frozen=True)
class GridSpec:
    """Discretisation parameters shared by all grid solves."""

    nt: int = 400
    nx: int = 201
    ratio: Optional[float] = 0.9
    tau_min: Optional[float] = None
    half_width: Optional[float] = None
    theta: float = 0.5
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    richardson: bool = True

    def time_grid(self, spec: ModelSpec, tau_min: Optional[float] = None) -> np.ndarray:
        return build_time_grid(spec.T, self.nt, self.ratio,
                               tau_min if tau_min is not None else self.tau_min)

    def space_grid(self, spec: ModelSpec) -> np.ndarray:
        half = self.half_width
        if half is None:
            half = 6.0 * spec.sigma_sup() * math.sqrt(spec.T)
            if half <= 0:
                half = 1.0
        return np.linspace(spec.x0 - half, spec.x0 + half, self.nx)


# ---------------------------------------------------------------------------
# fields


@dataclass
class TimeSpaceField:
    """Values of a function of (t, x) on a tensor grid."""

    time_grid: np.ndarray
    space_grid: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.time_grid = np.asarray(self.time_grid, dtype=float)
        self.space_grid = np.asarray(self.space_grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.time_grid.size, self.space_grid.size):
            raise DomainError(f"values shape {self.values.shape} does not match grid "
                              f"({self.time_grid.size}, {self.space_grid.size})")
        if np.any(np.diff(self.time_grid) <= 0) or np.any(np.diff(self.space_grid) <= 0):
            raise DomainError("grids must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise NumericalError("field contains non-finite values", {"label": self.label})

    @property
    def label(self) -> str:
        return str(self.meta.get("label", ""))

    @property
    def dx(self) -> float:
        return float(self.space_grid[1] - self.space_grid[0])

    def time_index(self, t: float) -> int:
        """Index of the node equal to t (to rounding)."""
        i = int(np.argmin(np.abs(self.time_grid - t)))
        scale = max(1.0, abs(float(self.time_grid[-1])))
        if abs(self.time_grid[i] - t) > 1e-12 * scale:
            raise DomainError(f"t = {t} is not a node of the time grid")
        return i

    def restrict_time(self, t_max: float) -> "TimeSpaceField":
        keep = self.time_grid <= t_max * (1 + 1e-14) + 1e-300
        meta = dict(self.meta, restricted_to=float(t_max))
        return TimeSpaceField(self.time_grid[keep], self.space_grid,
                              self.values[keep].copy(), meta)

    def interpolate(self, t, x) -> np.ndarray:
        return interpolate(self, t, x)

    def column(self, x: float) -> np.ndarray:
        """Values along the time grid at state x (linear in x)."""
        tt = self.time_grid
        return interpolate(self, tt, np.full_like(tt, float(x)))

    # persistence ---------------------------------------------------------

    def to_csv(self, path: Union[str, Path]) -> None:
        tt, xx = np.meshgrid(self.time_grid, self.space_grid, indexing="ij")
        table = np.column_stack([tt.ravel(), xx.ravel(), self.values.ravel()])
        write_csv(path, ["t", "x", "value"], table)

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "wb") as fh:
            fh.write(_FIELD_MAGIC)
            fh.write(struct.pack("<IQQ", _FORMAT_VERSION, self.time_grid.size,
                                 self.space_grid.size))
            for arr in (self.time_grid, self.space_grid, self.values):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TimeSpaceField":
        raw = Path(path).read_bytes()
        if raw[:4] != _FIELD_MAGIC:
            raise DomainError(f"{path} is not a field file")
        version, nt, nx = struct.unpack_from("<IQQ", raw, 4)
        if version != _FORMAT_VERSION:
            raise DomainError(f"unsupported field format version {version}")
        body = np.frombuffer(raw, dtype="<f8", offset=4 + struct.calcsize("<IQQ"))
        t, x, v = body[:nt], body[nt:nt + nx], body[nt + nx:]
        return cls(t.copy(), x.copy(), v.reshape(nt, nx).copy(), {"label": Path(path).stem})


def interior_mask(space_grid, center: float, frac: float = 0.5) -> np.ndarray:
    """Nodes within frac of the half-width of center, away from the Neumann layers."""
    xg = np.asarray(space_grid, dtype=float)
    half = max(center - xg[0], xg[-1] - center)
    return np.abs(xg - center) <= frac * half * (1 + 1e-12)


def write_csv(path: Union[str, Path], header: list[str], rows) -> None:
    """CSV with full 17-significant-digit floats (byte-stable output)."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float)) if len(rows) else np.empty((0, len(header)))
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format(float(v), ".17g") for v in row) + "\n")


def interpolate(fld: TimeSpaceField, t, x) -> np.ndarray:
    """Bilinear interpolation; exact at nodes, refuses points outside the grid."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    t, x = np.broadcast_arrays(t, x)
    tg, xg = fld.time_grid, fld.space_grid
    tol_t = 1e-12 * max(1.0, abs(tg[-1]))
    tol_x = 1e-12 * max(1.0, abs(xg[0]), abs(xg[-1]))
    if t.size and (t.min() < tg[0] - tol_t or t.max() > tg[-1] + tol_t):
        raise DomainError("interpolation time outside the grid")
    if x.size and (x.min() < xg[0] - tol_x or x.max() > xg[-1] + tol_x):
        raise DomainError("interpolation state outside the grid")
    i = np.clip(np.searchsorted(tg, t, side="right") - 1, 0, max(tg.size - 2, 0))
    j = np.clip(np.searchsorted(xg, x, side="right") - 1, 0, max(xg.size - 2, 0))
    if tg.size > 1:
        at = np.clip((t - tg[i]) / (tg[i + 1] - tg[i]), 0.0, 1.0)
        i1 = i + 1
    else:
        at, i1 = np.zeros_like(t), i
    if xg.size > 1:
        ax = np.clip((x - xg[j]) / (xg[j + 1] - xg[j]), 0.0, 1.0)
        j1 = j + 1
    else:
        ax, j1 = np.zeros_like(x), j
    v = fld.values
    out = ((1 - at) * ((1 - ax) * v[i, j] + ax * v[i, j1])
           + at * ((1 - ax) * v[i1, j] + ax * v[i1, j1]))
    return out if out.ndim else float(out)


def gradient_x(fld: TimeSpaceField) -> TimeSpaceField:
    """Centered differences inside, one-sided second order at the boundary."""
    x = fld.space_grid
    if x.size < 3:
        raise DomainError("gradient needs at least 3 space nodes")
    dx = x[1] - x[0]
    if not np.allclose(np.diff(x), dx, rtol=1e-10, atol=0):
        raise DomainError("gradient_x expects a uniform space grid")
    v = fld.values
    g = np.empty_like(v)
    g[:, 1:-1] = (v[:, 2:] - v[:, :-2]) / (2 * dx)
    g[:, 0] = (4 * (v[:, 1] - v[:, 0]) - (v[:, 2] - v[:, 0])) / (2 * dx)
    g[:, -1] = (4 * (v[:, -1] - v[:, -2]) - (v[:, -1] - v[:, -3])) / (2 * dx)
    meta = dict(fld.meta, label=f"d_x[{fld.label}]")
    return TimeSpaceField(fld.time_grid, x, g, meta)


# ---------------------------------------------------------------------------
# discrete generator


def _bands(b: np.ndarray, a: np.ndarray, dx: float):
    """Tridiagonal coefficients of L with Neumann rows at both ends.

    Central differences where the cell Peclet number allows it, upwind
    otherwise, so the off-diagonals stay nonnegative (monotone scheme).
    """
    lo = a / dx**2 - b / (2 * dx)
    up = a / dx**2 + b / (2 * dx)
    upwind = (lo < 0) | (up < 0)
    if np.any(upwind):
        lo = np.where(upwind, a / dx**2 + np.maximum(-b, 0.0) / dx, lo)
        up = np.where(upwind, a / dx**2 + np.maximum(b, 0.0) / dx, up)
    lo = np.array(lo, dtype=float)
    up = np.array(up, dtype=float)
    lo[..., 0] = 0.0
    up[..., 0] = 2 * a[..., 0] / dx**2
    up[..., -1] = 0.0
    lo[..., -1] = 2 * a[..., -1] / dx**2
    di = -(lo + up)
    return lo, di, up


def _apply(lo, di, up, w):
    out = di * w
    out[1:] += lo[1:] * w[:-1]
    out[:-1] += up[:-1] * w[1:]
    return out


def _tridiag_solve(lo, di, up, rhs, context: dict):
    n = di.size
    if n == 1:
        if di[0] == 0:
            raise NumericalError("singular 1x1 system", context)
        return rhs / di
    dl, d, du, sol, info = lapack.dgtsv(lo[1:].copy(), di.copy(), up[:-1].copy(), rhs.copy())
    if info != 0 or not np.all(np.isfinite(sol)):
        margin = np.abs(di) - np.abs(np.r_[0.0, lo[1:]]) - np.abs(np.r_[up[:-1], 0.0])
        diag = dict(context, lapack_info=int(info), min_dominance_margin=float(margin.min()),
                    min_abs_diag=float(np.abs(di).min()))
        raise NumericalError("tridiagonal system is singular or ill-conditioned", diag)
    return sol


def _resolve_grids(spec, grid, time_grid, space_grid):
    grid = grid or GridSpec()
    tg = np.asarray(time_grid, dtype=float) if time_grid is not None else grid.time_grid(spec)
    xg = np.asarray(space_grid, dtype=float) if space_grid is not None else grid.space_grid(spec)
    if np.any(np.diff(tg) <= 0):
        raise DomainError("time grid must be strictly increasing")
    if abs(tg[-1] - spec.T) > 1e-12 * spec.T:
        raise DomainError("time grid must end at T")
    return grid, tg, xg


def _on_grid(data: ArrayOrFn, tg, xg, default=0.0) -> np.ndarray:
    if data is None:
        return np.full((tg.size, xg.size), float(default))
    if callable(data):
        out = np.asarray(data(tg[:, None], xg[None, :]), dtype=float)
        return np.array(np.broadcast_to(out, (tg.size, xg.size)))
    arr = np.asarray(data, dtype=float)
    return np.array(np.broadcast_to(arr, (tg.size, xg.size)))


def _terminal(data, xg) -> np.ndarray:
    if callable(data):
        return np.array(np.broadcast_to(np.asarray(data(xg), dtype=float), xg.shape))
    return np.array(np.broadcast_to(np.asarray(data, dtype=float), xg.shape))


def _flat_in_x(arr: np.ndarray) -> bool:
    return bool(np.all(arr == arr[..., :1]))


def _coefficients(spec: ModelSpec, tg, xg):
    b = spec.b_at(tg[:, None], xg[None, :])
    s = spec.sigma_at(tg[:, None], xg[None, :])
    return b, 0.5 * s**2


def refine_time_grid(tg: np.ndarray) -> np.ndarray:
    """Insert the midpoint of every step."""
    out = np.empty(2 * tg.size - 1)
    out[::2] = tg
    out[1::2] = 0.5 * (tg[1:] + tg[:-1])
    return out


def richardson_combine(coarse: TimeSpaceField, fine: TimeSpaceField) -> TimeSpaceField:
    """(4 fine - coarse)/3 on the coarse nodes; fine must be the bisected grid."""
    if fine.time_grid.size != 2 * coarse.time_grid.size - 1 or not np.array_equal(
            fine.time_grid[::2], coarse.time_grid):
        raise DomainError("fine grid is not the bisection of the coarse grid")
    vals = (4.0 * fine.values[::2] - coarse.values) / 3.0
    meta = dict(coarse.meta, richardson=True,
                richardson_gap=float(np.max(np.abs(fine.values[::2] - coarse.values))))
    return TimeSpaceField(coarse.time_grid, coarse.space_grid, vals, meta)


def solve_linear_parabolic(spec: ModelSpec, terminal, source: ArrayOrFn = None,
                           zeroth_order: ArrayOrFn = None, *, grid: GridSpec | None = None,
                           time_grid=None, space_grid=None, label: str = "linear") -> TimeSpaceField:
    """Theta-scheme solution of d_t w + L w + c w + f = 0, w(T) = terminal.

    ``terminal`` is a function of x or an array on the space grid;
    ``source`` and ``zeroth_order`` are functions of (t, x) or arrays on
    the (time, space) grid.  Data that do not vary in x are solved on a
    single node and broadcast, which is exact under Neumann boundaries.
    With ``grid.richardson`` and callable data, the solve is repeated on
    the bisected time grid and the two are extrapolated.
    """
    grid, tg, xg = _resolve_grids(spec, grid, time_grid, space_grid)
    arrays = isinstance(source, np.ndarray) or isinstance(zeroth_order, np.ndarray)
    coarse = _linear_core(spec, terminal, source, zeroth_order, grid, tg, xg, label)
    if not grid.richardson or arrays:
        return coarse
    fine = _linear_core(spec, terminal, source, zeroth_order, grid, refine_time_grid(tg), xg, label)
    return richardson_combine(coarse, fine)


def _linear_core(spec, terminal, source, zeroth_order, grid, tg, xg, label):
    theta = grid.theta
    w_T = _terminal(terminal, xg)
    f = _on_grid(source, tg, xg)
    c = _on_grid(zeroth_order, tg, xg)
    meta = {"label": label, "solver": "theta-scheme", "theta": theta}
    if _flat_in_x(w_T) and _flat_in_x(f) and _flat_in_x(c):
        vals = _march_linear_scalar(tg, w_T[0], f[:, 0], c[:, 0], theta)
        return TimeSpaceField(tg, xg, np.repeat(vals[:, None], xg.size, axis=1),
                              dict(meta, x_independent=True))
    b, a = _coefficients(spec, tg, xg)
    lo, di, up = _bands(b, a, xg[1] - xg[0])
    vals = np.empty((tg.size, xg.size))
    vals[-1] = w_T
    for k in range(tg.size - 2, -1, -1):
        dt = tg[k + 1] - tg[k]
        w1 = vals[k + 1]
        rhs = (w1 + (1 - theta) * dt * (_apply(lo[k + 1], di[k + 1], up[k + 1], w1) + c[k + 1] * w1)
               + dt * (theta * f[k] + (1 - theta) * f[k + 1]))
        vals[k] = _tridiag_solve(-theta * dt * lo[k], 1.0 - theta * dt * (di[k] + c[k]),
                                 -theta * dt * up[k], rhs, {"t": float(tg[k]), "label": label})
    return TimeSpaceField(tg, xg, vals, meta)


def _march_linear_scalar(tg, w_T, f, c, theta):
    vals = np.empty(tg.size)
    vals[-1] = w_T
    for k in range(tg.size - 2, -1, -1):
        dt = tg[k + 1] - tg[k]
        rhs = vals[k + 1] * (1 + (1 - theta) * dt * c[k + 1]) + dt * (theta * f[k] + (1 - theta) * f[k + 1])
        denom = 1.0 - theta * dt * c[k]
        if denom == 0:
            raise NumericalError("singular scalar step", {"t": float(tg[k])})
        vals[k] = rhs / denom
    return vals


Generator = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


def solve_semilinear(spec: ModelSpec, terminal, generator: Generator,
                     generator_dw: Optional[Generator] = None, *, grid: GridSpec | None = None,
                     time_grid=None, space_grid=None, x_independent: bool = False,
                     label: str = "semilinear") -> TimeSpaceField:
    """Theta-scheme for d_t w + L w + g(t, x, w) = 0 with Newton on each slab.

    ``generator(t, x, w)`` is called with a scalar t and arrays x, w.  Its
    w-derivative is taken from ``generator_dw`` or by finite differences.
    Newton stops when the slab residual is below newton_tol * max(1, |w|).
    ``x_independent=True`` asserts that terminal and generator ignore x.
    """
    grid, tg, xg = _resolve_grids(spec, grid, time_grid, space_grid)
    args = (spec, terminal, generator, generator_dw, grid, xg, x_independent, label)
    coarse = _semilinear_core(*args, tg)
    if not grid.richardson:
        return coarse
    fine = _semilinear_core(*args, refine_time_grid(tg))
    out = richardson_combine(coarse, fine)
    out.meta["max_newton_iterations"] = max(coarse.meta["max_newton_iterations"],
                                            fine.meta["max_newton_iterations"])
    return out


def _semilinear_core(spec, terminal, generator, generator_dw, grid, xg, x_independent, label, tg):
    theta, tol, max_it = grid.theta, grid.newton_tol, grid.newton_max_iter
    w_T = _terminal(terminal, xg)
    meta = {"label": label, "solver": "theta-scheme+newton", "theta": theta}

    if generator_dw is None:
        def generator_dw(t, x, w):
            h = 1e-7 * np.maximum(1.0, np.abs(w))
            return (generator(t, x, w + h) - generator(t, x, w - h)) / (2 * h)

    if x_independent:
        xs = xg[:1]
        lo = di = up = np.zeros((tg.size, 1))
        w_T = w_T[:1]
    else:
        xs = xg
        b, a = _coefficients(spec, tg, xg)
        lo, di, up = _bands(b, a, xg[1] - xg[0])

    vals = np.empty((tg.size, xs.size))
    vals[-1] = w_T
    g_next = np.asarray(generator(tg[-1], xs, vals[-1]), dtype=float)
    max_iters_used = 0
    for k in range(tg.size - 2, -1, -1):
        dt = tg[k + 1] - tg[k]
        w1 = vals[k + 1]
        rhs = w1 + (1 - theta) * dt * (_apply(lo[k + 1], di[k + 1], up[k + 1], w1) + g_next)
        w = w1.copy()
        t = tg[k]
        for it in range(1, max_it + 1):
            g = np.asarray(generator(t, xs, w), dtype=float)
            res = w - theta * dt * (_apply(lo[k], di[k], up[k], w) + g) - rhs
            if np.max(np.abs(res)) <= tol * max(1.0, float(np.max(np.abs(w)))):
                break
            dg = np.asarray(generator_dw(t, xs, w), dtype=float)
            step = _tridiag_solve(-theta * dt * lo[k], 1.0 - theta * dt * (di[k] + dg),
                                  -theta * dt * up[k], res, {"t": float(t), "label": label})
            w = w - step
            if not np.all(np.isfinite(w)):
                raise NumericalError("Newton iterate is not finite", {"t": float(t), "label": label})
        else:
            raise NumericalError(f"Newton did not converge in {max_it} iterations",
                                 {"t": float(t), "residual": float(np.max(np.abs(res))),
                                  "label": label})
        max_iters_used = max(max_iters_used, it)
        vals[k] = w
        g_next = g
    meta["max_newton_iterations"] = max_iters_used
    if x_independent:
        vals = np.repeat(vals, xg.size, axis=1)
        meta["x_independent"] = True
    return TimeSpaceField(tg, xg, vals, meta)
