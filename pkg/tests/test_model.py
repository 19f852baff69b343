import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from singbsde.errors import DomainError
from singbsde.model import (ModelSpec, arctan_model, constant_model, eval_dG_deta, eval_dG_dh,
                            eval_G, holder_conjugate, kernel_dG_deta, kernel_dG_dh, kernel_G,
                            picard_constants, umi_model)
from singbsde.oracles import G_integral, dG_deta_integral, dG_dh_integral

exponent = st.floats(1.05, 6.0)
small_w = st.floats(-0.5, 0.5)


@given(exponent)
def test_holder_conjugate_is_an_involution(p):
    q = holder_conjugate(p)
    assert math.isclose((p - 1) * (q - 1), 1.0, rel_tol=1e-12)
    assert math.isclose(holder_conjugate(q), p, rel_tol=1e-10)


def test_holder_conjugate_rejects_nonsense():
    with pytest.raises(DomainError):
        holder_conjugate(1.0)


def test_spec_rejects_inconsistent_exponents():
    with pytest.raises(DomainError):
        ModelSpec.create(T=1.0, p=2.0, q=3.0, eta=None, gamma=None, drift_b=None,
                         vol_sigma=None, eta_lower=1, eta_upper=1, gamma_upper=0, b_eta_sup=0)
    with pytest.raises(DomainError):
        constant_model(q=2, p=3)


@settings(max_examples=200, deadline=None)
@given(q=st.floats(1.2, 4.0), w=small_w, tau=st.floats(0.01, 1.0), eta=st.floats(0.5, 2.0))
def test_kernel_matches_integral_representation(q, w, tau, eta):
    p = holder_conjugate(q)
    h = w * eta * tau
    for closed, integral in ((kernel_G, G_integral), (kernel_dG_dh, dG_dh_integral),
                             (kernel_dG_deta, dG_deta_integral)):
        a = float(closed(tau, h, eta, p, q))
        b = integral(tau, h, eta, q)
        assert abs(a - b) <= 1e-9 * max(abs(b), 1e-10)


@settings(max_examples=100, deadline=None)
@given(q=st.floats(1.2, 4.0), w=st.floats(-0.45, 0.45), tau=st.floats(0.05, 1.0),
       eta=st.floats(0.5, 2.0))
def test_kernel_derivatives_match_differences(q, w, tau, eta):
    p = holder_conjugate(q)
    h = w * eta * tau
    dh, de = 1e-5 * eta * tau, 1e-5 * eta
    fd_h = (kernel_G(tau, h + dh, eta, p, q) - kernel_G(tau, h - dh, eta, p, q)) / (2 * dh)
    fd_e = (kernel_G(tau, h, eta + de, p, q) - kernel_G(tau, h, eta - de, p, q)) / (2 * de)
    assert abs(kernel_dG_dh(tau, h, eta, p, q) - fd_h) <= 1e-5 * max(1.0 / tau, 1.0)
    assert abs(kernel_dG_deta(tau, h, eta, p, q) - fd_e) <= 1e-5


@pytest.mark.parametrize("q", [1.5, 2.0, 3.0])
def test_kernel_is_accurate_across_series_switch(q):
    p = holder_conjugate(q)
    for w in (0.0099999, 0.01, 0.0100001, -0.0099999, -0.0100001, 1e-7):
        a = float(kernel_G(1.0, w, 1.0, p, q))
        b = G_integral(1.0, w, 1.0, q)
        assert abs(a - b) <= 1e-10 * abs(b)


def test_kernel_vanishes_at_zero_and_is_quadratic():
    q = 2.0
    p = holder_conjugate(q)
    assert kernel_G(0.5, 0.0, 1.0, p, q) == 0.0
    # for q = 2: G = q h^2 / (2 eta tau^2)
    h, tau, eta = 0.1, 0.5, 1.3
    assert math.isclose(float(kernel_G(tau, h, eta, p, q)), h * h / (eta * tau * tau),
                        rel_tol=1e-12)


def test_guarded_evaluation_agrees_inside_guard():
    spec = arctan_model(q=2)
    t, h, eta = 0.7, 0.05, 1.5
    tau = spec.T - t
    assert math.isclose(float(eval_G(t, h, eta, spec)),
                        float(kernel_G(tau, h, eta, spec.p, spec.q)), rel_tol=1e-14)
    assert math.isclose(float(eval_dG_dh(t, h, eta, spec)),
                        float(kernel_dG_dh(tau, h, eta, spec.p, spec.q)), rel_tol=1e-14)
    assert math.isclose(float(eval_dG_deta(t, h, eta, spec)),
                        float(kernel_dG_deta(tau, h, eta, spec.p, spec.q)), rel_tol=1e-14)


def test_picard_constants_without_forcing():
    c = picard_constants(constant_model(q=2, T=3.0))
    assert c.R == 0.0 and c.L == 0.0 and c.delta == 1.0


def test_picard_window_contracts():
    spec = arctan_model(q=2, gamma=0.5, gamma_family="arctan")
    c = picard_constants(spec)
    assert c.delta * c.L <= 0.5 + 1e-15
    assert 2 * c.R * c.delta <= spec.eta_lower + 1e-15


@pytest.mark.parametrize("factory", [
    lambda: arctan_model(q=2, b=0.3, sigma=0.8),
    lambda: umi_model(q=2, g0=0.5, wave=0.3),
])
def test_b_eta_is_the_ito_drift_of_eta(factory):
    spec = factory()
    t, x, e = 0.4, np.linspace(-2, 2, 9), 1e-4
    dt = (spec.eta_at(t + e, x) - spec.eta_at(t - e, x)) / (2 * e)
    dx = (spec.eta_at(t, x + e) - spec.eta_at(t, x - e)) / (2 * e)
    dxx = (spec.eta_at(t, x + e) - 2 * spec.eta_at(t, x) + spec.eta_at(t, x - e)) / e**2
    ito = dt + spec.b_at(t, x) * dx + 0.5 * spec.sigma_at(t, x) ** 2 * dxx
    assert np.allclose(spec.b_eta_at(t, x), ito, atol=1e-6)


@given(st.floats(-50, 50), st.floats(0, 1))
def test_arctan_eta_stays_in_bounds(x, t):
    spec = arctan_model(q=2, eta_lower=1.0, eta_upper=2.0)
    v = float(spec.eta_at(t, x))
    assert spec.eta_lower <= v <= spec.eta_upper


def test_arctan_b_eta_bound_is_attained():
    spec = arctan_model(q=2, sigma=1.3)
    xs = np.linspace(-5, 5, 200001)
    sup = float(np.max(np.abs(spec.b_eta_at(0.0, xs))))
    assert math.isclose(sup, spec.b_eta_sup, rel_tol=1e-6)


def test_umi_rejects_sign_change():
    with pytest.raises(DomainError):
        umi_model(q=2, wave=0.9, sigma=1.0)
