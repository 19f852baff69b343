"""Euler-Maruyama paths of the forward state with its first-variation flow.

Each path draws its Gaussian increments from its own Philox stream keyed
by (seed, global path index), so an ensemble simulated in chunks, or in a
different order, is bit-identical to one simulated in a single call.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import DomainError, NumericalError
from .model import ModelSpec

_MAGIC = b"SBPE"
_VERSION = 1
_HEADER = "<IQQQQ"  # version, n_paths, n_times, seed, path_offset


@dataclass(frozen=True)
class PathEnsemble:
    n_paths: int
    time_grid: np.ndarray
    x: np.ndarray              # (n_paths, M + 1)
    nabla_x: np.ndarray        # (n_paths, M + 1)
    brownian_increments: np.ndarray  # (n_paths, M)
    seed: int
    path_offset: int = 0

    def node(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.time_grid - t)))
        if abs(self.time_grid[i] - t) > 1e-12 * max(1.0, abs(self.time_grid[-1])):
            raise DomainError(f"t = {t} is not a node of the path grid")
        return i

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack(_HEADER, _VERSION, self.n_paths, self.time_grid.size,
                                 self.seed, self.path_offset))
            for arr in (self.time_grid, self.x, self.nabla_x, self.brownian_increments):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PathEnsemble":
        raw = Path(path).read_bytes()
        if raw[:4] != _MAGIC:
            raise DomainError(f"{path} is not a path-ensemble file")
        version, n, m1, seed, offset = struct.unpack_from(_HEADER, raw, 4)
        if version != _VERSION:
            raise DomainError(f"unsupported ensemble format version {version}")
        body = np.frombuffer(raw, dtype="<f8", offset=4 + struct.calcsize(_HEADER))
        tg = body[:m1].copy()
        pos = m1
        x = body[pos:pos + n * m1].reshape(n, m1).copy()
        pos += n * m1
        nx = body[pos:pos + n * m1].reshape(n, m1).copy()
        pos += n * m1
        dw = body[pos:pos + n * (m1 - 1)].reshape(n, m1 - 1).copy()
        return cls(n, tg, x, nx, dw, seed, offset)


def path_normals(seed: int, path_index: np.ndarray, n_steps: int) -> np.ndarray:
    """Standard normals, one Philox stream per (seed, path index)."""
    out = np.empty((len(path_index), n_steps))
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    for row, idx in enumerate(path_index):
        bitgen = np.random.Philox(key=np.array([seed, int(idx)], dtype=np.uint64))
        out[row] = np.random.Generator(bitgen).standard_normal(n_steps)
    return out


def simulate(spec: ModelSpec, n_paths: int, time_grid, seed: int,
             x0: Optional[float] = None, path_offset: int = 0) -> PathEnsemble:
    """Euler-Maruyama for X and, on the same noise, for the flow nabla X.

    d nabla X = b_x nabla X dt + sigma_x nabla X dW, nabla X_0 = 1.
    """
    tg = np.asarray(time_grid, dtype=float)
    if tg.ndim != 1 or tg.size < 2 or np.any(np.diff(tg) <= 0):
        raise DomainError("path time grid must be strictly increasing")
    if n_paths < 1:
        raise DomainError("need at least one path")
    x0 = spec.x0 if x0 is None else float(x0)
    m = tg.size - 1
    dt = np.diff(tg)
    dw = path_normals(seed, np.arange(path_offset, path_offset + n_paths), m) * np.sqrt(dt)
    x = np.empty((n_paths, m + 1))
    fl = np.empty((n_paths, m + 1))
    x[:, 0] = x0
    fl[:, 0] = 1.0
    for k in range(m):
        t, xk = tg[k], x[:, k]
        b, s = spec.b_at(t, xk), spec.sigma_at(t, xk)
        bx, sx = spec.b_dx(t, xk), spec.sigma_dx(t, xk)
        x[:, k + 1] = xk + b * dt[k] + s * dw[:, k]
        fl[:, k + 1] = fl[:, k] * (1.0 + bx * dt[k] + sx * dw[:, k])
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(fl))):
        bad = np.argwhere(~np.isfinite(x) | ~np.isfinite(fl))[0]
        raise NumericalError("non-finite path values", {"path": int(bad[0]),
                                                         "time_index": int(bad[1])})
    return PathEnsemble(n_paths, tg, x, fl, dw, int(seed), int(path_offset))


def malliavin_X(ensemble: PathEnsemble, theta: float, spec: ModelSpec) -> np.ndarray:
    """D_theta X_t = nabla X_t (nabla X_theta)^-1 sigma(theta, X_theta), zero before theta."""
    i = ensemble.node(theta)
    sig = spec.sigma_at(ensemble.time_grid[i], ensemble.x[:, i])
    out = np.zeros_like(ensemble.x)
    out[:, i:] = ensemble.nabla_x[:, i:] / ensemble.nabla_x[:, i:i + 1] * sig[:, None]
    return out


def malliavin_X_direct(ensemble: PathEnsemble, theta: float, spec: ModelSpec) -> np.ndarray:
    """The same derivative from its own linear SDE started at theta."""
    i = ensemble.node(theta)
    tg = ensemble.time_grid
    out = np.zeros_like(ensemble.x)
    out[:, i] = spec.sigma_at(tg[i], ensemble.x[:, i])
    for k in range(i, tg.size - 1):
        xk = ensemble.x[:, k]
        step = (1.0 + spec.b_dx(tg[k], xk) * (tg[k + 1] - tg[k])
                + spec.sigma_dx(tg[k], xk) * ensemble.brownian_increments[:, k])
        out[:, k + 1] = out[:, k] * step
    return out
