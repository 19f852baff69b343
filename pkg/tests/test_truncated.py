import numpy as np
import pytest

from singbsde import oracles
from singbsde.errors import DomainError
from singbsde.grid import GridSpec, TimeSpaceField
from singbsde.model import arctan_model, constant_model
from singbsde.truncated import (a_priori_bound_field, blowup_slope, level_tau_min,
                                lower_bound_field, monotone_limit, solve_Yn)


@pytest.mark.parametrize("q", [1.5, 2.0, 3.0])
@pytest.mark.parametrize("n", [1.0, 10.0, 100.0])
def test_constant_case_closed_form(q, n):
    spec = constant_model(q=q, eta=1.5)
    u = solve_Yn(spec, n, with_bound=False).u_n
    ref = oracles.constant_truncated(spec.T - u.time_grid, n, q, 1.5)
    assert np.max(np.abs(u.column(spec.x0) - ref) / ref) <= 1e-5


def test_constant_penalty_matches_ode():
    spec = constant_model(q=2, gamma=0.7)
    u = solve_Yn(spec, 20.0, with_bound=False).u_n
    ref = oracles.truncated_ode(u.time_grid, 20.0, 2.0, 1.0, 0.7)
    assert np.max(np.abs(u.column(0.0) - ref) / ref) <= 1e-5


def test_zero_level():
    spec = constant_model(q=2)
    u = solve_Yn(spec, 0.0, with_bound=False).u_n
    assert np.all(u.values == 0)
    with pytest.raises(DomainError):
        solve_Yn(spec, -1.0)


def test_level_scale_is_resolved():
    spec = constant_model(q=2)
    assert level_tau_min(spec, 1e6) <= 1e-8
    assert level_tau_min(spec, 0) == 1e-7


@pytest.fixture(scope="module")
def arctan_limit():
    spec = arctan_model(q=2, gamma=0.5, gamma_family="arctan")
    grid = GridSpec(nt=200, nx=101)
    return spec, grid, monotone_limit(spec, [4, 16, 64], grid=grid, keep_solutions=True)


def test_monotone_in_level_and_below_upper_bound(arctan_limit):
    spec, grid, ml = arctan_limit
    assert ml.monotone
    for sol in ml.solutions:
        assert np.all(sol.u_n.values <= sol.bound_field.values * (1 + 1e-6))
    rows = ml.rows()
    assert np.all(rows[:, 2] <= 1e-6)


def test_upper_bound_is_exact_without_noise():
    spec = constant_model(q=2, eta=1.0)
    b = a_priori_bound_field(spec, 10.0, grid=GridSpec(nt=50))
    tau = spec.T - b.time_grid
    # (tau + 1/n)^(-2) (1/n + tau)
    assert np.allclose(b.column(0.0), 1.0 / (tau + 0.1), rtol=1e-10)


def test_constant_lower_bound_is_the_singular_solution():
    spec = constant_model(q=2, eta=2.0)
    low = lower_bound_field(spec, grid=GridSpec(nt=50))
    tau = spec.T - low.time_grid
    assert np.allclose(low.column(0.0), oracles.singular_constant(tau, 2.0, 2.0), rtol=1e-10)


def test_blowup_slope_of_power_law():
    t = 1.0 - np.geomspace(1e-4, 1.0, 60)[::-1]
    t[0] = 0.0
    t = np.r_[t, 1.0]
    x = np.linspace(-1, 1, 3)
    vals = np.ones_like(t)
    vals[:-1] = (1.0 - t[:-1]) ** -1.5
    fld = TimeSpaceField(t, x, np.repeat(vals[:, None], 3, axis=1))
    slope, _ = blowup_slope(fld, 0.0, 1.0)
    assert abs(slope + 1.5) < 1e-10


def test_monotone_limit_validates_levels():
    with pytest.raises(DomainError):
        monotone_limit(constant_model(q=2), [16, 4])
