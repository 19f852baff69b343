import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from singbsde.errors import DomainError, NumericalError
from singbsde.grid import (GridSpec, TimeSpaceField, build_time_grid, gradient_x, interior_mask,
                           interpolate, refine_time_grid, richardson_combine,
                           solve_linear_parabolic, solve_semilinear, write_csv)
from singbsde.model import arctan_model, constant_model


@settings(max_examples=50, deadline=None)
@given(T=st.floats(0.1, 5.0), nt=st.integers(5, 400), ratio=st.floats(0.5, 0.99),
       tau_min=st.floats(1e-9, 1e-3))
def test_time_grid_shape(T, nt, ratio, tau_min):
    tg = build_time_grid(T, nt, ratio, tau_min)
    assert tg[0] == 0.0 and tg[-1] == T
    steps = np.diff(tg)
    assert np.all(steps > 0)
    assert steps.max() <= T / nt * (1 + 1e-9)
    assert T - tg[-2] <= max(tau_min, 0.0) * (1 + 1e-12) or T - tg[-2] <= T / nt


def test_uniform_time_grid():
    assert np.allclose(build_time_grid(2.0, 4, None), [0, 0.5, 1, 1.5, 2])
    with pytest.raises(DomainError):
        build_time_grid(1.0, 10, 1.5)


def test_refined_grid_bisects():
    tg = build_time_grid(1.0, 10, 0.8, 1e-4)
    fine = refine_time_grid(tg)
    assert fine.size == 2 * tg.size - 1
    assert np.allclose(fine[::2], tg)


def test_field_validation():
    with pytest.raises(DomainError):
        TimeSpaceField([0, 1], [0, 1, 2], np.zeros((2, 2)))
    with pytest.raises(NumericalError):
        TimeSpaceField([0, 1], [0, 1], np.array([[0, np.nan], [0, 0]]))


def _field(f, nt=11, nx=21):
    t = np.linspace(0, 1, nt)
    x = np.linspace(-1, 1, nx)
    return TimeSpaceField(t, x, f(t[:, None], x[None, :]))


@given(st.floats(0, 1), st.floats(-1, 1))
def test_interpolation_is_exact_for_bilinear_functions(t, x):
    fld = _field(lambda t, x: 2 + 3 * t - x + 0.5 * t * x)
    assert np.isclose(float(interpolate(fld, t, x)), 2 + 3 * t - x + 0.5 * t * x, atol=1e-12)


def test_interpolation_refuses_outside_points():
    fld = _field(lambda t, x: t + x)
    with pytest.raises(DomainError):
        interpolate(fld, 0.5, 1.5)


def test_gradient_is_exact_for_quadratics():
    fld = _field(lambda t, x: t * x**2 + x)
    g = gradient_x(fld)
    assert np.allclose(g.values, 2 * fld.time_grid[:, None] * fld.space_grid[None, :] + 1,
                       atol=1e-12)


def test_richardson_removes_the_leading_error():
    # an error c dt^2 is 4c on the coarse grid and c on the bisected one
    t = np.linspace(0, 1, 6)
    x = np.linspace(-1, 1, 3)
    coarse = TimeSpaceField(t, x, np.full((6, 3), 1.0 + 4e-3))
    fine = TimeSpaceField(refine_time_grid(t), x, np.full((11, 3), 1.0 + 1e-3))
    out = richardson_combine(coarse, fine)
    assert np.allclose(out.values, 1.0, atol=1e-15)
    with pytest.raises(DomainError):
        richardson_combine(coarse, coarse)


def test_field_roundtrip(tmp_path):
    fld = _field(lambda t, x: np.sin(t + x))
    fld.save(tmp_path / "f.bin")
    back = TimeSpaceField.load(tmp_path / "f.bin")
    assert np.array_equal(back.values, fld.values)
    assert np.array_equal(back.time_grid, fld.time_grid)


def test_csv_is_byte_stable(tmp_path):
    rows = np.array([[0.1, 1 / 3], [2.0, 1e-300]])
    write_csv(tmp_path / "a.csv", ["a", "b"], rows)
    write_csv(tmp_path / "b.csv", ["a", "b"], rows.copy())
    text = (tmp_path / "a.csv").read_bytes()
    assert text == (tmp_path / "b.csv").read_bytes()
    back = np.loadtxt(tmp_path / "a.csv", delimiter=",", skiprows=1)
    assert np.array_equal(back, rows)


def test_interior_mask():
    xs = np.linspace(-4, 4, 9)
    assert list(xs[interior_mask(xs, 0.0)]) == [-2, -1, 0, 1, 2]


@pytest.mark.parametrize("richardson", [True, False])
def test_heat_equation_oracle(richardson):
    # w(T, x) = cos x under dX = sigma dW gives w = exp(-sigma^2 tau / 2) cos x
    sigma = 0.8
    spec = constant_model(q=2, sigma=sigma)
    grid = GridSpec(nt=200, nx=401, ratio=None, half_width=3 * np.pi, richardson=richardson)
    w = solve_linear_parabolic(spec, np.cos, grid=grid)
    tau = spec.T - w.time_grid
    exact = np.exp(-0.5 * sigma**2 * tau)[:, None] * np.cos(w.space_grid)[None, :]
    mid = interior_mask(w.space_grid, 0.0)
    err = np.max(np.abs(w.values[:, mid] - exact[:, mid]))
    assert err <= (1e-4 if richardson else 1e-3)


def test_feynman_kac_source_and_potential():
    # d_t w + 0.5 w_xx - c w + 1 = 0, w(T) = 0: w = (1 - e^(-c tau))/c
    spec = constant_model(q=2, sigma=1.0)
    c = 0.7
    w = solve_linear_parabolic(spec, 0.0, lambda t, x: 1.0 + 0 * x, lambda t, x: -c + 0 * x,
                               grid=GridSpec(nt=100))
    tau = spec.T - w.time_grid
    assert np.allclose(w.column(0.0), -np.expm1(-c * tau) / c, atol=1e-7)


def test_semilinear_riccati():
    # d_t w - w^2 = 0, w(T) = 2: w = 2/(1 + 2 tau)
    spec = constant_model(q=2)
    w = solve_semilinear(spec, 2.0, lambda t, x, v: -v * v, lambda t, x, v: -2 * v,
                         grid=GridSpec(nt=400), x_independent=True)
    tau = spec.T - w.time_grid
    assert np.allclose(w.column(0.0), 2 / (1 + 2 * tau), rtol=1e-6)


def test_x_independent_solve_matches_full_solve():
    spec = arctan_model(q=2)
    gen = lambda t, x, v: -v * v  # noqa: E731
    grid = GridSpec(nt=50, nx=41)
    a = solve_semilinear(spec, 1.0, gen, grid=grid, x_independent=True)
    b = solve_semilinear(spec, 1.0, gen, grid=grid, x_independent=False)
    assert np.allclose(a.values, b.values, atol=1e-9)
