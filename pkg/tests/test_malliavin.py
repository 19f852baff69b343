import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from singbsde import malliavin as M
from singbsde.errors import DomainError
from singbsde.expansion import solve_H
from singbsde.grid import GridSpec, gradient_x
from singbsde.model import arctan_model, constant_model
from singbsde.paths import simulate

GRID = GridSpec(nt=200, nx=201)


@pytest.fixture(scope="module")
def arctan():
    spec = arctan_model(q=2, gamma=0.5, gamma_family="arctan")
    sol = solve_H(spec, grid=GRID)
    return spec, sol, M.variational_H(spec, sol, grid=GRID)


@settings(max_examples=50)
@given(theta=st.floats(0.0, 1.0), width=st.integers(1, 4))
def test_malliavin_field_is_adapted(theta, width):
    times = np.linspace(0, 1, 21)
    f = M.MalliavinField(theta, times, np.ones((width, 21)), "D_Y")
    assert np.all(f.values[:, times < theta - 1e-12] == 0)
    assert np.all(f.values[:, times >= theta] == 1)


def test_malliavin_field_kind():
    with pytest.raises(DomainError):
        M.MalliavinField(0.0, np.linspace(0, 1, 3), np.ones(3), "D_Z")


def test_gamma_weight_composes(arctan):
    spec, sol, _ = arctan
    s = np.linspace(0.2, 1.0, 81)
    whole = M.gamma_weight(spec, sol.h_field, 0.2, s, x=0.3)
    tail = M.gamma_weight(spec, sol.h_field, 0.6, s[40:], x=0.3)
    head = whole.values[40]
    assert np.allclose(whole.values[40:], head * tail.values, rtol=1e-12)
    assert whole.values[0] == 1.0


def test_gamma_weight_is_one_without_remainder():
    spec = constant_model(q=2)
    sol = solve_H(spec, grid=GridSpec(nt=50))
    g = M.gamma_weight(spec, sol.h_field, 0.0, np.linspace(0, 1, 11))
    assert np.all(g.values == 1.0)


def test_variational_gradient_matches_differences(arctan):
    spec, sol, w = arctan
    assert M.gradient_gap(w, gradient_x(sol.h_field)) <= 1e-3


def test_variational_gradient_matches_weighted_representation(arctan):
    spec, sol, w = arctan
    for t, x in ((0.0, 0.0), (0.5, 0.4)):
        mean, se = M.representation_DH(spec, sol, t, x, n_inner=4000, n_steps=400, seed=2)
        ref = float(w.interpolate(t, x))
        assert abs(mean - ref) <= 3 * se + 2e-3 * abs(ref)


def test_D_eta_vanishes_for_deterministic_eta():
    spec = constant_model(q=2, sigma=1.0, gamma=0.5, gamma_family="arctan")
    ens = simulate(spec, 20, np.linspace(0, 1, 11), 0)
    assert np.all(M.D_eta(spec, 0.2, ens).values == 0)


def test_D_Y_assembly_checks_inputs(arctan):
    spec, sol, w = arctan
    ens = simulate(spec, 10, np.linspace(0, 0.9, 10), 1)
    d_eta = M.D_eta(spec, 0.0, ens)
    d_h = M.solve_DH(spec, sol, 0.0, ens, w_field=w)
    dy = M.assemble_DY(spec, d_eta, d_h)
    tau = spec.T - ens.time_grid
    assert np.allclose(dy.values, d_eta.values / tau + d_h.values / tau**2)
    other = M.D_eta(spec, 0.1, ens)
    with pytest.raises(DomainError):
        M.assemble_DY(spec, other, d_h)


def test_chain_rule_small(arctan):
    spec, _, _ = arctan
    ens = simulate(spec, 200, np.linspace(0, 1, 41), 4)
    chk = M.chain_rule_check(spec, 64, ens, n_triples=30, seed=1, grid=GridSpec(nt=200, nx=401))
    assert chk.max_relative <= 1e-3


def test_loglog_slope():
    tau = np.geomspace(1e-4, 1.0, 50)
    slope, icpt = M.loglog_slope(tau, 3.0 * tau**-0.7)
    assert abs(slope + 0.7) < 1e-12 and abs(icpt - np.log(3.0)) < 1e-10
    with pytest.raises(DomainError):
        M.loglog_slope(tau, np.zeros_like(tau))


def test_theta_grid_contains_uniform_nodes():
    g = M.theta_path_grid(1.0, 16)
    assert np.all(np.isin(np.linspace(0, 1, 17), g))
    assert 1.0 - g[-2] <= 1e-4 * 1.0001


def test_sensitivity_bound_holds(arctan):
    spec, sol, w = arctan
    sb = M.sensitivity_bound(spec, sol, w, grid=GRID)
    assert sb.violation <= 1e-9 and sb.power == 1.0


def test_kappa_bounds(arctan):
    from singbsde.expansion import hn_bounds, solve_Hn
    spec, _, _ = arctan
    hs = solve_Hn(spec, hn_bounds(spec).n0, grid=GRID, check=False)
    assert M.kappa_check(spec, hs)["ok"]


def test_convergence_vanishes_for_deterministic_data():
    spec = constant_model(q=2, sigma=1.0, gamma=0.5)
    rep = M.convergence_experiment(spec, (4, 16), n_paths=100, n_theta=4, path_steps=16,
                                   grid=GridSpec(nt=100, nx=51))
    assert np.all(rep.weighted == 0) and rep.nonincreasing(0.0)


def test_convergence_experiment_decreases(arctan):
    spec, sol, _ = arctan
    rep = M.convergence_experiment(spec, (4, 16, 64), n_paths=400, n_theta=4, path_steps=64,
                                   grid=GRID, sol=sol, seed=3)
    assert rep.nonincreasing(0.05) and rep.decay_ratio() < 0.1
    with pytest.raises(DomainError):
        M.convergence_experiment(spec, (4,), ell=3.0, rho=2.0)
