import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from singbsde import oracles
from singbsde.errors import DomainError
from singbsde.expansion import (assemble_Y, hn_bounds, picard_residual, psi, psi_inverse,
                                remainder_ratio, solve_H, solve_Hn, weighted_gap)
from singbsde.grid import GridSpec, interior_mask
from singbsde.model import arctan_model, constant_model, umi_model
from singbsde.truncated import lower_bound_field

GRID = GridSpec(nt=200, nx=101)


@pytest.fixture(scope="module")
def arctan_solution():
    spec = arctan_model(q=2, gamma=0.5, gamma_family="arctan")
    return spec, solve_H(spec, grid=GRID)


def test_constant_case_has_no_remainder():
    sol = solve_H(constant_model(q=3, eta=1.4), grid=GRID)
    assert np.max(np.abs(sol.h_field.values)) == 0.0
    assert sol.report.converged


@pytest.mark.parametrize("q", [1.5, 2.0, 3.0])
def test_umi_remainder_matches_oracle(q):
    spec = umi_model(q=q, g0=0.5)
    sol = solve_H(spec, grid=GridSpec(nt=200))
    umi = oracles.umi_spec_from_model(spec)
    tg = sol.h_field.time_grid
    for t in tg[(tg < 0.99)][::20]:
        num = float(sol.h_field.interpolate(t, 0.0)) / (spec.eta_at(t, 0.0) * (1 - t))
        ref = oracles.umi_h(t, umi, check=False)
        assert abs(num - ref) <= 1e-3 * abs(ref)


def test_picard_iterates_stay_in_ball_and_contract(arctan_solution):
    spec, sol = arctan_solution
    rep = sol.report
    assert rep.converged and rep.ball_violation <= 1e-9
    assert max(rep.contraction_ratios[1:]) <= 0.6


def test_single_grid_solution_is_a_fixed_point(arctan_solution):
    spec, _ = arctan_solution
    plain = GridSpec(nt=200, nx=101, richardson=False)
    sol = solve_H(spec, grid=plain)
    assert picard_residual(spec, sol, plain) <= 1e-8


def test_remainder_is_quadratic_near_maturity(arctan_solution):
    spec, sol = arctan_solution
    tau = spec.T - sol.h_field.time_grid
    win = (tau <= sol.constants.delta) & (tau > 0)
    ratio = np.abs(sol.h_field.values[win]) / tau[win][:, None] ** 2
    assert np.all(ratio <= sol.constants.R * (1 + 1e-9))


def test_Y_is_positive_and_above_lower_bound(arctan_solution):
    spec, sol = arctan_solution
    Y = assemble_Y(spec, sol.h_field)
    assert np.all(Y.values > 0)
    low = lower_bound_field(spec, grid=GRID, time_grid=sol.h_field.time_grid,
                            space_grid=sol.h_field.space_grid)
    mid = interior_mask(Y.space_grid, spec.x0)
    assert np.all(low.values[:, mid] <= Y.values[:, mid] * (1 + 1e-3))


def test_kappa_vanishes_at_maturity(arctan_solution):
    spec, sol = arctan_solution
    k = remainder_ratio(spec, sol.h_field)
    assert np.all(k.values[-1] == 0)
    assert np.max(np.abs(k.values)) < 0.5


@settings(max_examples=50, deadline=None)
@given(y=st.floats(0, 1e3), q=st.floats(1.2, 4.0))
def test_psi_inverse(y, q):
    x = psi_inverse(y, q)
    assert x >= 0
    assert math.isclose(psi(x, q), y, rel_tol=1e-9, abs_tol=1e-9)


def test_psi_inverse_domain():
    with pytest.raises(DomainError):
        psi_inverse(-1.0, 2.0)


def test_shifted_solution_sandwich_and_consistency(arctan_solution):
    spec, sol = arctan_solution
    b = hn_bounds(spec)
    for n in (b.n0, 4 * b.n0):
        hs = solve_Hn(spec, n, grid=GRID, bounds=b)
        low, high = hs.sandwich_violation(spec)
        assert low <= 1e-8 and high <= 1e-8
        assert hs.consistency_error <= 1e-3


def test_shifted_solution_approaches_remainder(arctan_solution):
    spec, sol = arctan_solution
    gaps = [weighted_gap(spec, sol.h_field, solve_Hn(spec, n, grid=GRID, check=False))["integral"]
            for n in (16, 64, 256)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_bounds_without_forcing():
    b = hn_bounds(constant_model(q=2))
    assert b.c1 == 0.0 and b.K == 0.0
