"""Command-line entry point: one subcommand per experiment.

    singbsde <subcommand> --config run.json [--out DIR] [--seed N] [--threads N]

Every run writes the resolved configuration, CSV artifacts and a
summary.json with one pass/fail entry per checked invariant.  Exit codes:
0 success, 2 configuration error, 3 invariant failure, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from . import expansion, liquidation, malliavin, oracles, truncated
from .errors import (ConfigError, DomainError, InvariantViolation, KernelGuardError,
                     NumericalError)
from .grid import GridSpec, gradient_x, interior_mask, write_csv
from .model import FAMILIES, ModelSpec, eval_dG_deta, eval_dG_dh, eval_G
from .paths import malliavin_X, malliavin_X_direct, simulate

log = logging.getLogger("singbsde")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_NUMERICAL = 0, 2, 3, 4

FAMILY_KEYS = {
    "constant": {"eta", "gamma", "gamma_family", "b", "sigma"},
    "arctan": {"eta_lower", "eta_upper", "gamma", "gamma_family", "b", "sigma"},
    "umi": {"g0", "level", "wave", "k", "sigma"},
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int = {"type": "integer", "minimum": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["family"],
            "properties": {
                "family": {"enum": sorted(FAMILIES)},
                "p": {"type": "number", "exclusiveMinimum": 1},
                "q": {"type": "number", "exclusiveMinimum": 1},
                "T": _pos, "x0": _num,
                "eta": _pos, "eta_lower": _pos, "eta_upper": _pos,
                "gamma": {"type": "number", "minimum": 0},
                "gamma_family": {"enum": ["constant", "arctan"]},
                "b": _num, "sigma": _num,
                "g0": _num, "level": _pos, "wave": _num, "k": _num,
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "nt": _int, "nx": {"type": "integer", "minimum": 3},
                "ratio": {"type": ["number", "null"], "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "tau_min": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "half_width": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "eps": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "richardson": {"type": "boolean"},
            },
        },
        "mc": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_paths": _int, "seed": {"type": "integer", "minimum": 0},
                "n_theta": _int, "path_steps": _int, "chunk": _int,
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": _pos, "max_iter": _int,
                "levels": {"type": "array", "items": _pos, "minItems": 1},
                "ell": _pos, "rho": _pos,
            },
        },
        "liquidation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"x0": _num, "start_t": {"type": "number", "minimum": 0},
                           "thetas": {"type": "array", "items": {"type": "number"}}},
        },
        "outputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"directory": {"type": "string"},
                           "formats": {"type": "array", "items": {"enum": ["csv", "json"]}}},
        },
    },
}

DEFAULTS = {
    "grid": {"nt": 400, "nx": 201, "ratio": 0.9, "tau_min": None, "half_width": None,
             "eps": truncated.EPS_CUTOFF, "richardson": True},
    "mc": {"n_paths": 10_000, "seed": 0, "n_theta": 16, "path_steps": 320, "chunk": 10_000},
    "solver": {"tol": 1e-10, "max_iter": 200, "levels": [4, 16, 64, 256], "ell": 2.0,
               "rho": 4.0},
    "liquidation": {"x0": 1.0, "start_t": 0.0, "thetas": [0.0, 0.25, 0.5, 0.75]},
    "outputs": {"directory": "runs", "formats": ["csv", "json"]},
}

SUBCOMMANDS = ("solve-y", "truncated", "picard", "malliavin", "converge", "liquidate",
               "sensitivity", "verify-oracle", "verify-bounds")


# ---------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return resolve_config(raw)


def resolve_config(raw: dict) -> dict:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from exc
    cfg = copy.deepcopy(DEFAULTS)
    for block, vals in raw.items():
        if block == "model":
            cfg["model"] = dict(vals)
        else:
            cfg[block].update(vals)
    model = cfg["model"]
    extra = set(model) - {"family", "p", "q", "T", "x0"} - FAMILY_KEYS[model["family"]]
    if extra:
        raise ConfigError(f"keys {sorted(extra)} do not belong to family {model['family']!r}")
    if "p" not in model and "q" not in model:
        raise ConfigError("model needs p or q")
    if "p" in model and "q" in model and abs((model["p"] - 1) * (model["q"] - 1) - 1) > 1e-9:
        raise ConfigError(f"p={model['p']} and q={model['q']} are not conjugate")
    s = cfg["solver"]
    if not 1 < s["ell"] < s["rho"]:
        raise ConfigError("need 1 < ell < rho")
    if sorted(s["levels"]) != list(s["levels"]) or len(set(s["levels"])) != len(s["levels"]):
        raise ConfigError("levels must be strictly increasing")
    return cfg


def build_model(cfg: dict) -> ModelSpec:
    m = dict(cfg["model"])
    family = m.pop("family")
    try:
        return FAMILIES[family](**m)
    except DomainError as exc:
        raise ConfigError(f"invalid model parameters: {exc}") from exc


def build_grid(cfg: dict) -> GridSpec:
    g = cfg["grid"]
    return GridSpec(nt=g["nt"], nx=g["nx"], ratio=g["ratio"], tau_min=g["tau_min"],
                    half_width=g["half_width"], richardson=g["richardson"])


# ---------------------------------------------------------------------------
# run bookkeeping


class Run:
    def __init__(self, name: str, cfg: dict, out: Path):
        self.name = name
        self.cfg = cfg
        self.out = out
        self.checks: list[dict] = []
        self.values: dict = {}
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")

    def check(self, name: str, ok: bool, value=None, limit=None) -> bool:
        entry = {"name": name, "pass": bool(ok)}
        if value is not None:
            entry["value"] = _jsonable(value)
        if limit is not None:
            entry["limit"] = _jsonable(limit)
        self.checks.append(entry)
        return bool(ok)

    def csv(self, filename: str, header, rows) -> None:
        """Numeric rows via write_csv; rows led by a label are written field by field."""
        if "csv" not in self.cfg["outputs"]["formats"]:
            return
        rows = list(rows) if not isinstance(rows, np.ndarray) else rows
        if len(rows) and isinstance(rows[0][0], str):
            with open(self.out / filename, "w", newline="\n") as fh:
                fh.write(",".join(header) + "\n")
                for row in rows:
                    fh.write(",".join(v if isinstance(v, str) else format(float(v), ".17g")
                                      for v in row) + "\n")
        else:
            write_csv(self.out / filename, list(header), rows)

    @property
    def ok(self) -> bool:
        return all(c["pass"] for c in self.checks)

    def finish(self) -> None:
        summary = {"subcommand": self.name, "pass": self.ok, "checks": self.checks,
                   "values": {k: _jsonable(v) for k, v in self.values.items()}}
        (self.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True)
                                               + "\n")


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return repr(v) if not math.isfinite(v) else float(format(v, ".17g"))
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    return v


# ---------------------------------------------------------------------------
# subcommands


def cmd_solve_y(run: Run, spec: ModelSpec, grid: GridSpec) -> None:
    cfg = run.cfg
    eps = cfg["grid"]["eps"]
    sol = expansion.solve_H(spec, cfg["solver"]["tol"], cfg["solver"]["max_iter"], grid=grid)
    Y = expansion.assemble_Y(spec, sol.h_field, eps)
    col_h = sol.h_field.restrict_time(spec.T * (1 - eps)).column(spec.x0)
    col_y = Y.column(spec.x0)
    run.csv("y_column.csv", ["t", "Y", "H"], np.column_stack([Y.time_grid, col_y, col_h]))
    sol.h_field.to_csv(run.out / "h_field.csv")
    run.check("picard_converged", sol.report.converged, sol.report.iterations)
    run.check("positive_Y", float(np.min(Y.values)) > 0, float(np.min(Y.values)), 0.0)
    slope = truncated.blowup_slope(Y, spec.x0, spec.T)[0]
    run.values["blowup_slope"] = slope
    run.check("blowup_slope", abs(slope + (spec.p - 1)) <= 0.02 * (spec.p - 1), slope,
              -(spec.p - 1))
    if spec.params.get("family") == "umi":
        umi = oracles.umi_spec_from_model(spec)
        err = _umi_error(spec, sol.h_field, umi, eps)
        run.check("umi_oracle_rel_error", err <= 1e-3, err, 1e-3)


def _umi_error(spec, h_field, umi, eps, stride: int = 1) -> float:
    tg = h_field.time_grid
    sel = np.flatnonzero(tg <= spec.T * (1 - eps) * (1 + 1e-14))[::stride]
    mid = interior_mask(h_field.space_grid, spec.x0)
    xs = h_field.space_grid[mid]
    worst = 0.0
    for k in sel:
        t = tg[k]
        ref = oracles.umi_h(t, umi, check=False)
        num = h_field.values[k, mid] / (spec.eta_at(t, xs) * (spec.T - t))
        worst = max(worst, float(np.max(np.abs(num - ref))) / max(abs(ref), 1e-300))
    return worst


def cmd_truncated(run: Run, spec: ModelSpec, grid: GridSpec) -> None:
    cfg = run.cfg
    eps = cfg["grid"]["eps"]
    levels = cfg["solver"]["levels"]
    ml = truncated.monotone_limit(spec, levels, grid=grid, eps=eps, strict=False)
    run.csv("convergence.csv", ["n", "sup_increment", "bound_violation_rel", "blowup_slope"],
            ml.table)
    run.check("monotone_in_n", ml.monotone, ml.min_increment, -1e-6)
    worst = max(r[2] for r in ml.table)
    run.check("a_priori_upper_bound", worst <= 1e-6, worst, 1e-6)
    run.values["increments_decreasing"] = ml.increments_decreasing
    # the lower bound concerns the minimal solution, taken from the expansion;
    # compared away from the Neumann layers
    sol = expansion.solve_H(spec, cfg["solver"]["tol"], cfg["solver"]["max_iter"], grid=grid)
    Y = expansion.assemble_Y(spec, sol.h_field, eps)
    low = truncated.lower_bound_field(spec, grid=grid, time_grid=sol.h_field.time_grid,
                                      space_grid=sol.h_field.space_grid, eps=eps)
    mid = interior_mask(Y.space_grid, spec.x0)
    lviol = float(np.max((low.values[:, mid] - Y.values[:, mid]) / low.values[:, mid]))
    run.check("lower_bound", lviol <= 1e-3, lviol, 1e-3)
    if spec.params.get("family") == "constant" and spec.gamma_upper == 0:
        tau = spec.T - ml.field.time_grid
        err = 0.0
        for sol_n in [truncated.solve_Yn(spec, n, grid=grid, with_bound=False) for n in levels]:
            ref = oracles.constant_truncated(spec.T - sol_n.u_n.time_grid, sol_n.n, spec.q,
                                             spec.eta_lower)
            err = max(err, float(np.max(np.abs(sol_n.u_n.column(spec.x0) - ref))))
        run.check("closed_form_levels", err <= 1e-4, err, 1e-4)


def cmd_picard(run: Run, spec: ModelSpec, grid: GridSpec) -> None:
    cfg = run.cfg
    sol = expansion.solve_H(spec, cfg["solver"]["tol"], cfg["solver"]["max_iter"], grid=grid,
                            raise_on_failure=False)
    rep = sol.report
    run.csv("picard_report.csv", ["iteration", "weighted_norm", "contraction_ratio",
                                  "outer_norm"], rep.rows())
    run.values.update(R=sol.constants.R, L=sol.constants.L, delta=sol.constants.delta,
                      iterations=rep.iterations)
    run.check("converged", rep.converged, rep.iterations)
    run.check("ball", rep.ball_violation <= 1e-9, rep.ball_violation, 1e-9)
    ratios = [r for r in rep.contraction_ratios[1:] if not math.isnan(r)]
    worst = max(ratios) if ratios else 0.0
    run.check("contraction_ratio", worst <= 0.6, worst, 0.6)
    _sandwich(run, spec, grid)


def _sandwich(run: Run, spec: ModelSpec, grid: GridSpec) -> None:
    b = expansion.hn_bounds(spec)
    run.values.update(C1=b.c1, C2=b.c2, n0=b.n0, delta_n=b.delta)
    rows = []
    for n in (b.n0, 4 * b.n0):
        hs = expansion.solve_Hn(spec, n, grid=grid, bounds=b, check=False)
        low, high = hs.sandwich_violation(spec)
        k = malliavin.kappa_check(spec, hs)
        rows.append([n, low, high, k["min_window"], -k["kappa1"]])
        run.check(f"sandwich_n{n}", low <= 1e-8 and high <= 1e-8, max(low, high), 1e-8)
        run.check(f"kappa1_n{n}", k["ok"], k["min_window"], -k["kappa1"])
    run.csv("sandwich.csv", ["n", "lower_excess", "upper_excess", "min_dGdh_window",
                             "minus_kappa1"], rows)


def cmd_malliavin(run: Run, spec: ModelSpec, grid: GridSpec) -> None:
    cfg = run.cfg
    mc = cfg["mc"]
    eps = cfg["grid"]["eps"]
    sol = expansion.solve_H(spec, cfg["solver"]["tol"], cfg["solver"]["max_iter"], grid=grid)
    w = malliavin.variational_H(spec, sol, grid=grid)
    gap = malliavin.gradient_gap(w, gradient_x(sol.h_field))
    run.check("variational_vs_differences", gap <= 1e-3, gap, 1e-3)
    n_paths = min(mc["n_paths"], 2000)
    tg = malliavin.blowup_time_grid(spec)
    ens = simulate(spec, n_paths, tg, mc["seed"])
    theta = 0.0
    fit = malliavin.blowup_DY(spec, sol, ens, theta, w_field=w, eps=eps)
    run.csv("blowup_fit.csv", ["slope", "intercept", "window_lo", "window_hi"],
            [[fit.slope, fit.intercept, fit.window[0], fit.window[1]]])
    if spec.deterministic_eta:
        tau, v = fit.tau, fit.mean_abs * fit.tau ** (spec.p - 1)
        sel = (tau >= 1e-3 * (1 - 1e-12)) & (tau <= 1e-1 * (1 + 1e-12))
        first, last = float(v[sel][0]), float(v[sel][-1])
        run.check("deterministic_eta_decay", last <= 0.05 * first or first == 0.0,
                  last / first if first else 0.0, 0.05)
    else:
        run.check("D_Y_blowup_slope", abs(fit.slope + (spec.p - 1)) <= 0.05 * (spec.p - 1),
                  fit.slope, -(spec.p - 1))
    # D Y and D Y^n along paths, averaged
    keep = tg <= spec.T * (1 - eps) * (1 + 1e-14)
    d_eta = malliavin.D_eta(spec, theta, ens)
    d_h = malliavin.solve_DH(spec, sol, theta, ens, w_field=w)
    dY = malliavin.assemble_DY(spec, _cut(d_eta, keep), _cut(d_h, keep), eps)
    cols = [tg[keep] * 0 + theta, tg[keep], np.mean(np.abs(dY.values), axis=0)]
    header = ["theta", "t", "D_Y"]
    tau = spec.T - tg[keep]
    for n in cfg["solver"]["levels"]:
        u = truncated.solve_Yn(spec, n, grid=grid, with_bound=False).u_n
        dYn = malliavin.solve_DYn(spec, u, theta, ens)
        dn = dYn.values[:, keep]
        cols.append(np.mean(np.abs(dn), axis=0))
        cols.append(np.mean((tau**spec.p * np.abs(dY.values - dn)) ** cfg["solver"]["ell"],
                            axis=0))
        header += [f"D_Yn_{n:g}", f"weighted_error_{n:g}"]
    run.csv("malliavin_report.csv", header, np.column_stack(cols))
    chain = malliavin.chain_rule_check(spec, cfg["solver"]["levels"][-1], ens, 100,
                                       seed=mc["seed"], grid=grid)
    run.check("chain_rule", chain.max_relative <= 1e-3, chain.max_relative, 1e-3)
    mid_t = float(tg[tg.size // 2])
    direct = np.max(np.abs(malliavin_X(ens, mid_t, spec) - malliavin_X_direct(ens, mid_t, spec)))
    run.check("flow_vs_direct_D_X", direct <= 1e-9, float(direct), 1e-9)
    sb = malliavin.sensitivity_bound(spec, sol, w, grid=grid)
    run.check("sensitivity_bound", sb.violation <= 1e-9, sb.violation, 1e-9)
    run.values["sensitivity_constant"] = sb.constant


def _cut(f: malliavin.MalliavinField, keep) -> malliavin.MalliavinField:
    return malliavin.MalliavinField(f.theta, f.times[keep], f.values[:, keep], f.kind)


def cmd_converge(run: Run, spec: ModelSpec, grid: GridSpec) -> None:
    cfg = run.cfg
    mc, s = cfg["mc"], cfg["solver"]
    rep = malliavin.convergence_experiment(
        spec, s["levels"], ell=s["ell"], rho=s["rho"], n_paths=mc["n_paths"], seed=mc["seed"],
        n_theta=mc["n_theta"], path_steps=mc["path_steps"], grid=grid,
        chunk=min(mc["chunk"], 2000))
    rows = [[n, a, b, se] for n, a, b, se in zip(rep.levels, rep.sup_weighted,
                                                  rep.sup_unweighted,
                                                  rep.standard_errors.max(axis=1))]
    run.csv("converge.csv", ["n", "sup_theta_weighted", "sup_theta_unweighted", "max_se"], rows)
    table = [[n, th, rep.weighted[i, j], rep.unweighted[i, j]]
             for i, n in enumerate(rep.levels) for j, th in enumerate(rep.thetas)]
    run.csv("converge_by_theta.csv", ["n", "theta", "weighted", "unweighted"], table)
    run.check("nonincreasing", rep.nonincreasing(0.05), list(rep.sup_weighted))
    if rep.sup_weighted[0] > 0:
        run.check("decay_ratio", rep.decay_ratio() <= 0.1, rep.decay_ratio(), 0.1)
    else:
        run.check("all_zero", bool(np.all(rep.weighted == 0)), 0.0)


def cmd_liquidate(run: Run, spec: ModelSpec, grid: GridSpec) -> None:
    cfg = run.cfg
    mc, lq = cfg["mc"], cfg["liquidation"]
    sol = expansion.solve_H(spec, cfg["solver"]["tol"], cfg["solver"]["max_iter"], grid=grid)
    tg = np.linspace(lq["start_t"], spec.T, mc["path_steps"] + 1)
    rep = liquidation.liquidation_study(spec, sol.h_field, lq["x0"], tg,
                                        n_paths=mc["n_paths"], seed=mc["seed"],
                                        chunk=mc["chunk"], start_t=lq["start_t"])
    run.csv("liquidation_report.csv", ["strategy", "mean_cost", "standard_error",
                                       "terminal_inventory"],
            [[s.name, s.mean, s.standard_error, s.terminal_inventory]
             for s in rep.strategies])
    scale = max(abs(lq["x0"]), 1e-300)
    term = max(s.terminal_inventory for s in rep.strategies if s.name == "optimal")
    run.check("terminal_inventory", term <= 1e-3 * scale, term, 1e-3 * scale)
    run.check("value_identity", rep.value_ok, rep.value_gap, rep.value_allowance)
    run.values["value"] = rep.value
    for s in rep.strategies:
        if s.name != "optimal":
            run.check(f"optimal_vs_{s.name}", rep.optimal_beats(s.name), s.mean)


def cmd_sensitivity(run: Run, spec: ModelSpec, grid: GridSpec) -> None:
    cfg = run.cfg
    mc, lq = cfg["mc"], cfg["liquidation"]
    sol = expansion.solve_H(spec, cfg["solver"]["tol"], cfg["solver"]["max_iter"], grid=grid)
    w = malliavin.variational_H(spec, sol, grid=grid)
    thetas = sorted(set(float(t) for t in lq["thetas"]) | {lq["start_t"]})
    steps = mc["path_steps"]
    tg = np.union1d(np.linspace(0.0, spec.T, steps + 1), thetas)
    ens = simulate(spec, min(mc["n_paths"], 5000), tg, mc["seed"])
    rows = []
    worst = 0.0
    for th in thetas:
        d = liquidation.sensitivity_Xi(spec, ens, sol.h_field, w, th, lq["x0"], lq["start_t"])
        t = tg[ens.node(lq["start_t"]):]
        for k in range(t.size):
            rows.append([th, t[k], float(np.mean(d[:, k])), float(np.max(np.abs(d[:, k])))])
        worst = max(worst, float(np.max(np.abs(d))))
    run.csv("sensitivity.csv", ["theta", "s", "mean_D_Xi", "max_abs_D_Xi"], rows)
    # empirical Malliavin covariance of Xi_s: reported, positivity not asserted
    cov_rows = []
    for s_ in (0.25, 0.5, 0.75):
        s_t = tg[np.argmin(np.abs(tg - (lq["start_t"] + s_ * (spec.T - lq["start_t"]))))]
        c = liquidation.malliavin_covariance(spec, ens, sol.h_field, w, lq["x0"], s_t,
                                             lq["start_t"])
        cov_rows.append([s_t, float(np.mean(c)), float(np.min(c)), float(np.max(c))])
    run.csv("malliavin_covariance.csv", ["s", "mean", "min", "max"], cov_rows)
    run.values["min_malliavin_covariance"] = min(r[2] for r in cov_rows)
    run.values["max_abs_D_Xi"] = worst
    scale = abs(lq["x0"])
    if spec.params.get("family") == "umi" or (spec.deterministic_eta and spec.deterministic_gamma):
        run.check("deterministic_Xi", worst <= 1e-3 * scale, worst, 1e-3 * scale)
    sc = [abs(liquidation.sensitivity_Xi(spec, ens, sol.h_field, w, thetas[0], 2 * lq["x0"],
                                         lq["start_t"])).max(), 2 * worst]
    run.check("homogeneous_in_x0", abs(sc[0] - sc[1]) <= 1e-12 * max(1.0, sc[1]),
              abs(sc[0] - sc[1]))


def cmd_verify_oracle(run: Run, spec: ModelSpec, grid: GridSpec) -> None:
    rng = np.random.default_rng(run.cfg["mc"]["seed"])
    # kernel against its integral representations
    worst = 0.0
    for _ in range(200):
        tau = rng.uniform(0.01, 1.0)
        eta = rng.uniform(0.5, 2.0)
        h = rng.uniform(-0.5, 0.5) * eta * tau
        t = spec.T - tau
        pairs = [(eval_G(t, h, eta, spec), oracles.G_integral(tau, h, eta, spec.q)),
                 (eval_dG_dh(t, h, eta, spec), oracles.dG_dh_integral(tau, h, eta, spec.q)),
                 (eval_dG_deta(t, h, eta, spec), oracles.dG_deta_integral(tau, h, eta, spec.q))]
        for a, b in pairs:
            worst = max(worst, abs(float(a) - b) / max(abs(b), 1e-12))
    run.check("kernel_vs_integral_representation", worst <= 1e-8, worst, 1e-8)
    run.check("kernel_derivatives_vs_differences", *_kernel_fd_gap(spec, rng), 1e-5)
    # constant truncated solutions against the closed form and the ODE integrator
    q = spec.q
    tg = grid.time_grid(spec)
    err_ode = 0.0
    for n in (10.0, 100.0):
        closed = oracles.constant_truncated(spec.T - tg, n, q)
        ode = oracles.truncated_ode(tg, n, q)
        err_ode = max(err_ode, float(np.max(np.abs(closed - ode) / closed)))
    run.check("closed_form_vs_ode", err_ode <= 1e-8, err_ode, 1e-8)
    chk = oracles.umi_check(spec)
    run.values["umi_variation"] = chk.variation
    if spec.params.get("family") in ("umi", "constant"):
        run.check("umi_structure", chk.is_umi, chk.variation, 1e-8)
    if spec.params.get("family") == "constant" and spec.gamma_upper == 0:
        err = 0.0
        for n in (10.0, 100.0):
            u = truncated.solve_Yn(spec, n, grid=grid, with_bound=False).u_n
            ref = oracles.constant_truncated(spec.T - u.time_grid, n, q, spec.eta_lower)
            err = max(err, float(np.max(np.abs(u.column(spec.x0) - ref) / ref)))
        run.check("truncated_vs_closed_form", err <= 1e-4, err, 1e-4)
        sol = expansion.solve_H(spec, grid=grid)
        run.check("H_zero_for_constant_case", float(np.max(np.abs(sol.h_field.values))) <= 1e-12,
                  float(np.max(np.abs(sol.h_field.values))), 1e-12)
    if spec.params.get("family") == "umi":
        umi = oracles.umi_spec_from_model(spec)
        ts = np.linspace(0.0, spec.T * 0.999, 7)
        drift = max(abs(oracles.umi_h(t, umi) - oracles.umi_h(t, umi, tol=5e-13, check=False))
                    for t in ts)
        run.check("quadrature_self_consistency", drift <= 1e-10, drift, 1e-10)
        sol = expansion.solve_H(spec, grid=grid)
        err = _umi_error(spec, sol.h_field, umi, run.cfg["grid"]["eps"], stride=5)
        run.check("umi_oracle_rel_error", err <= 1e-3, err, 1e-3)


def _kernel_fd_gap(spec: ModelSpec, rng) -> tuple[bool, float]:
    """Analytic dG/dh, dG/deta against central differences of G."""
    worst = 0.0
    for _ in range(200):
        tau = rng.uniform(0.01, 1.0)
        eta = rng.uniform(0.5, 2.0)
        h = rng.uniform(-0.5, 0.5) * eta * tau
        t = spec.T - tau
        dh = 1e-5 * eta * tau
        de = 1e-5 * eta
        fd_h = (eval_G(t, h + dh, eta, spec) - eval_G(t, h - dh, eta, spec)) / (2 * dh)
        fd_e = (eval_G(t, h, eta + de, spec) - eval_G(t, h, eta - de, spec)) / (2 * de)
        for a, b, scale in ((eval_dG_dh(t, h, eta, spec), fd_h, 1.0 / tau),
                            (eval_dG_deta(t, h, eta, spec), fd_e, 1.0)):
            worst = max(worst, abs(float(a) - float(b)) / max(abs(float(a)), scale))
    return worst <= 1e-5, worst


def cmd_verify_bounds(run: Run, spec: ModelSpec, grid: GridSpec) -> None:
    cmd_truncated(run, spec, grid)
    cfg = run.cfg
    sol = expansion.solve_H(spec, cfg["solver"]["tol"], cfg["solver"]["max_iter"], grid=grid)
    run.check("ball", sol.report.ball_violation <= 1e-9, sol.report.ball_violation, 1e-9)
    _sandwich(run, spec, grid)
    w = malliavin.variational_H(spec, sol, grid=grid)
    sb = malliavin.sensitivity_bound(spec, sol, w, grid=grid)
    run.check("sensitivity_bound", sb.violation <= 1e-9, sb.violation, 1e-9)


COMMANDS = {
    "solve-y": cmd_solve_y, "truncated": cmd_truncated, "picard": cmd_picard,
    "malliavin": cmd_malliavin, "converge": cmd_converge, "liquidate": cmd_liquidate,
    "sensitivity": cmd_sensitivity, "verify-oracle": cmd_verify_oracle,
    "verify-bounds": cmd_verify_bounds,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="singbsde", description=__doc__.split("\n")[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="JSON experiment configuration")
    ap.add_argument("--out", help="artifact directory (default: outputs.directory/<subcommand>)")
    ap.add_argument("--seed", type=int, help="overrides mc.seed")
    ap.add_argument("--threads", type=int, default=1,
                    help="worker threads (computations are sequential; kept for interface)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(subcommand: str, config, out=None, seed=None) -> tuple[int, Run | None]:
    """Run one subcommand; ``config`` is a path or an already parsed dict."""
    try:
        cfg = load_config(config) if not isinstance(config, dict) else resolve_config(config)
        if seed is not None:
            if not 0 <= seed < 2**64:
                raise ConfigError("seed must be an unsigned 64-bit integer")
            cfg["mc"]["seed"] = int(seed)
        spec = build_model(cfg)
        grid = build_grid(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG, None
    out = Path(out) if out else Path(cfg["outputs"]["directory"]) / subcommand
    r = Run(subcommand, cfg, out)
    try:
        COMMANDS[subcommand](r, spec, grid)
    except (NumericalError, KernelGuardError, DomainError) as exc:
        r.check("numerical", False, str(exc))
        r.finish()
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL, r
    except InvariantViolation as exc:
        r.check("invariant", False, str(exc))
        r.finish()
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT, r
    r.finish()
    return (EXIT_OK if r.ok else EXIT_INVARIANT), r


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("config error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    start = time.perf_counter()
    code, r = run(args.subcommand, args.config, args.out, args.seed)
    if r is not None:
        for c in r.checks:
            print(f"{'PASS' if c['pass'] else 'FAIL'}  {c['name']}"
                  + (f"  value={c['value']}" if "value" in c else "")
                  + (f"  limit={c['limit']}" if "limit" in c else ""))
        print(f"{args.subcommand}: {'ok' if code == 0 else 'failed'} "
              f"({time.perf_counter() - start:.1f}s) -> {r.out}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
