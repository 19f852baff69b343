import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from singbsde import oracles
from singbsde.errors import DomainError
from singbsde.model import arctan_model, constant_model, umi_model


def test_umi_h_without_growth_is_zero():
    umi = oracles.UmiSpec.constant(0.0, 2.0, 1.0)
    assert oracles.umi_h(0.3, umi) == 0.0
    assert math.isclose(oracles.umi_Y(0.3, 1.5, umi), 1.5 / 0.7, rel_tol=1e-13)


@settings(max_examples=30, deadline=None)
@given(g0=st.floats(-1.0, 1.0), q=st.floats(1.3, 4.0), t=st.floats(0.0, 0.99))
def test_umi_h_constant_growth_closed_form(g0, q, t):
    umi = oracles.UmiSpec.constant(g0, q, 1.0)
    tau = 1.0 - t
    a = (q - 1.0) * g0 * tau
    avg = 1.0 if a == 0 else -math.expm1(-a) / a
    p = umi.p
    assert math.isclose(oracles.umi_h(t, umi), avg ** (1.0 - p) - 1.0, rel_tol=1e-9,
                        abs_tol=1e-13)


def test_umi_h_with_time_dependent_growth_passes_its_ode_check():
    umi = oracles.UmiSpec(lambda s: 0.3 + 0.5 * math.sin(3 * s), 2.5, 1.0)
    for t in (0.0, 0.4, 0.9):
        oracles.umi_h(t, umi, check=True)


def test_umi_h_rejects_maturity():
    with pytest.raises(DomainError):
        oracles.umi_h(1.0, oracles.UmiSpec.constant(0.5, 2.0, 1.0))


def test_umi_spec_requires_umi_model():
    with pytest.raises(DomainError):
        oracles.umi_spec_from_model(arctan_model(q=2))


def test_umi_check_classifies_families():
    assert oracles.umi_check(umi_model(q=2, wave=0.3)).is_umi
    assert oracles.umi_check(constant_model(q=2)).is_umi
    assert not oracles.umi_check(arctan_model(q=2)).is_umi


@pytest.mark.parametrize("q", [1.5, 2.0, 3.0])
@pytest.mark.parametrize("n", [1.0, 10.0, 1000.0])
def test_constant_truncated_closed_form_solves_the_ode(q, n):
    times = np.linspace(0.0, 1.0, 51)
    closed = oracles.constant_truncated(1.0 - times, n, q, eta=1.7)
    ode = oracles.truncated_ode(times, n, q, eta=1.7)
    assert np.allclose(closed, ode, rtol=1e-9)


def test_truncated_solutions_increase_to_the_singular_one():
    tau = np.linspace(1e-3, 1.0, 200)
    prev = np.zeros_like(tau)
    for n in (1, 10, 100, 1e4, 1e8):
        cur = oracles.constant_truncated(tau, n, 2.0)
        assert np.all(cur >= prev)
        prev = cur
    assert np.allclose(prev, oracles.singular_constant(tau, 2.0), rtol=1e-4)


def test_deterministic_envelope_is_adapted():
    spec = constant_model(q=2, gamma=0.5, gamma_family="arctan", sigma=1.0)
    times = np.linspace(0, 1, 11)
    env = oracles.deterministic_eta_sensitivity_bound(spec, 0.5, np.ones(11), 2.0, times)
    assert np.all(env[times < 0.5] == 0)
    assert np.allclose(env[times >= 0.5], 2.0 * (1 - times[times >= 0.5]) ** spec.p)
    with pytest.raises(DomainError):
        oracles.deterministic_eta_sensitivity_bound(arctan_model(q=2), 0.5, np.ones(11), 1.0,
                                                    times)
