from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from singbsde import liquidation as L
from singbsde.errors import DomainError
from singbsde.expansion import solve_H
from singbsde.grid import GridSpec
from singbsde.malliavin import variational_H
from singbsde.model import arctan_model, constant_model, umi_model
from singbsde.paths import simulate

GRID = GridSpec(nt=200, nx=201)
TIMES = np.linspace(0.0, 1.0, 201)


@pytest.fixture(scope="module")
def arctan():
    spec = arctan_model(q=2, gamma=0.5, gamma_family="arctan")
    sol = solve_H(spec, grid=GRID)
    return spec, sol.h_field, variational_H(spec, sol, grid=GRID)


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_constant_case_optimum_is_twap(p):
    spec = constant_model(p=p, eta=1.3)
    h = solve_H(spec, grid=GridSpec(nt=50)).h_field
    ens = simulate(spec, 4, TIMES, 0)
    opt = L.optimal_state(spec, h, ens, 2.0)
    twap = L.twap_baseline(2.0, 0.0, 1.0, TIMES, 4)
    assert np.allclose(opt.xi, twap.xi, atol=1e-14)
    j, _ = L.cost(spec, opt, ens)
    # eta |x0|^p T^(1-p)
    assert np.isclose(j, 1.3 * 2.0**p, rtol=1e-12)
    assert np.isclose(float(L.value_function(spec, h, 2.0, 0.0, 0.0)), j, rtol=1e-12)


@settings(max_examples=15, deadline=None)
@given(x0=st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3))
def test_optimal_state_is_homogeneous(arctan, x0):
    spec, h, _ = arctan
    ens = simulate(spec, 20, TIMES, 1)
    one = L.optimal_state(spec, h, ens, 1.0)
    scaled = L.optimal_state(spec, h, ens, x0)
    assert np.allclose(scaled.xi, x0 * one.xi, rtol=1e-13, atol=1e-15)
    j1, _ = L.cost(spec, one, ens)
    jx, _ = L.cost(spec, scaled, ens)
    assert np.isclose(jx, abs(x0) ** spec.p * j1, rtol=1e-12)


def test_optimal_state_liquidates_monotonically(arctan):
    spec, h, _ = arctan
    ens = simulate(spec, 200, TIMES, 2)
    opt = L.optimal_state(spec, h, ens, 1.0)
    assert opt.terminal_inventory == 0.0
    assert np.all(np.diff(opt.xi, axis=1) <= 0)


def test_cost_refuses_partial_liquidation(arctan):
    spec, h, _ = arctan
    ens = simulate(spec, 5, TIMES, 0)
    half = L.twap_baseline(1.0, 0.0, 1.0, TIMES, 5)
    half = replace(half, xi=half.xi + 0.5)
    with pytest.raises(DomainError):
        L.cost(spec, half, ens)


def test_perturbations_are_admissible_and_worse(arctan):
    spec, h, _ = arctan
    ens = simulate(spec, 2000, TIMES, 3)
    opt = L.optimal_state(spec, h, ens, 1.0)
    j, se = L.cost(spec, opt, ens)
    for alt in L.perturbations(opt, 3, seed=1):
        assert np.allclose(alt.xi[:, 0], 1.0) and alt.terminal_inventory < 1e-12
        ja, _ = L.cost(spec, alt, ens)
        assert ja > j


def test_value_identity_small(arctan):
    spec, h, _ = arctan
    ens = simulate(spec, 4000, TIMES, 5)
    chk = L.value_identity_check(spec, h, 1.0, 0.0, ens)
    assert chk.ok, chk


def test_umi_trajectory_is_deterministic():
    spec = umi_model(q=2, g0=0.5, wave=0.3)
    sol = solve_H(spec, grid=GRID)
    ens = simulate(spec, 200, TIMES, 7)
    opt = L.optimal_state(spec, sol.h_field, ens, 1.0)
    assert np.max(np.ptp(opt.xi, axis=0)) <= 1e-3
    w = variational_H(spec, sol, grid=GRID)
    d = L.sensitivity_Xi(spec, ens, sol.h_field, w, 0.0, 1.0)
    assert np.max(np.abs(d)) <= 1e-3


def _bump_gap(spec, grid, theta):
    # with constant sigma, D_theta shifts X by sigma on [theta, T]
    sol = solve_H(spec, grid=grid)
    h, w = sol.h_field, variational_H(spec, sol, grid=grid)
    ens = simulate(spec, 50, TIMES, 9)
    d = L.sensitivity_Xi(spec, ens, h, w, theta, 1.0)
    assert np.all(d[:, TIMES < theta - 1e-12] == 0)
    e = 1e-5
    shift = e * spec.sigma_at(0.0, 0.0) * (TIMES >= theta - 1e-12)
    up = L.optimal_state(spec, h, replace(ens, x=ens.x + shift), 1.0).xi
    dn = L.optimal_state(spec, h, replace(ens, x=ens.x - shift), 1.0).xi
    fd = (up - dn) / (2 * e)
    return np.max(np.abs(d - fd)) / np.max(np.abs(fd))


@pytest.mark.parametrize("theta", [0.0, 0.4])
def test_sensitivity_matches_bumped_paths(arctan, theta):
    # the bumped route differentiates the bilinear interpolant of H, first order in dx
    spec = arctan[0]
    coarse = _bump_gap(spec, GridSpec(nt=200, nx=201), theta)
    fine = _bump_gap(spec, GridSpec(nt=200, nx=401), theta)
    assert fine <= 0.7 * coarse
    assert fine <= 1e-2


def test_study_is_chunk_invariant(arctan):
    spec, h, _ = arctan
    a = L.liquidation_study(spec, h, 1.0, TIMES, n_paths=600, chunk=600, seed=4)
    b = L.liquidation_study(spec, h, 1.0, TIMES, n_paths=600, chunk=250, seed=4)
    for s in a.strategies:
        t = b.by_name(s.name)
        assert np.isclose(s.mean, t.mean, rtol=1e-12)
        assert np.isclose(s.standard_error, t.standard_error, rtol=1e-8)
    assert a.optimal_beats("twap")


def test_malliavin_covariance(arctan):
    spec, h, w = arctan
    ens = simulate(spec, 100, TIMES, 11)
    c = L.malliavin_covariance(spec, ens, h, w, 1.0, 0.5)
    assert c.shape == (100,) and np.all(c >= 0) and np.mean(c) > 0
    assert np.all(L.malliavin_covariance(spec, ens, h, w, 1.0, 0.0) == 0)
    # quadratic in x0
    assert np.allclose(L.malliavin_covariance(spec, ens, h, w, -2.0, 0.5), 4 * c, rtol=1e-12)
    umi = umi_model(q=2, g0=0.5, wave=0.3)
    sol = solve_H(umi, grid=GRID)
    cu = L.malliavin_covariance(umi, ens, sol.h_field, variational_H(umi, sol, grid=GRID), 1.0, 0.5)
    assert np.max(cu) <= 1e-6
