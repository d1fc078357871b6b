import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from eqcontrol.errors import DomainError, EvaluationError, UnsupportedKernelError
from eqcontrol.model_core import (ControlledDynamics, ControlSet, CostSpec, DiscountKernel,
                                  ProblemSpec, eval_discount, eval_hamiltonian, factorize_kernel,
                                  hamiltonian_1d, minimize_hamiltonian, minimize_hamiltonian_1d,
                                  validate_problem)
from eqcontrol.scenarios import get_scenario, lq_problem

rates = st.floats(0.0, 3.0)
pos_rates = st.floats(0.05, 3.0)


def test_exponential_kernel_values():
    k = DiscountKernel.exponential(0.7)
    assert k.mu(0.25, 1.0) == pytest.approx(math.exp(-0.7 * 0.75), abs=1e-15)
    assert k.nu(0.5, 0.5) == 1.0


def test_kernel_kind_values():
    lag = 0.6
    h = DiscountKernel.hyperbolic(0.5, 2.0)
    assert h.mu(0.0, lag) == pytest.approx(1 / 1.3)
    assert h.nu(0.0, lag) == pytest.approx(1 / 2.2)
    q = DiscountKernel.quasi_exponential(0.5, 1.0)
    assert q.nu(0.1, 0.1 + lag) == pytest.approx(1.3 * math.exp(-0.6))
    c = DiscountKernel.convex_combination(0.25, 0.2, 2.0)
    assert c.mu(0.0, lag) == pytest.approx(0.25 * math.exp(-0.12) + 0.75 * math.exp(-1.2))


def test_kernel_rejects_bad_parameters():
    with pytest.raises(DomainError):
        DiscountKernel("power", 1.0)
    with pytest.raises(DomainError):
        DiscountKernel.exponential(-1.0)
    with pytest.raises(DomainError):
        DiscountKernel.convex_combination(1.5, 0.1, 0.2)
    with pytest.raises(DomainError):
        DiscountKernel.quasi_exponential(-0.1, 1.0)
    with pytest.raises(DomainError):
        eval_discount(DiscountKernel.exponential(1.0), "mu", 0.8, 0.2)
    with pytest.raises(DomainError):
        eval_discount(DiscountKernel.exponential(1.0), "xi", 0.0, 0.2)


@given(a=rates, b=rates)
def test_heterogeneous_factorization_identities(a, b):
    fac = factorize_kernel(DiscountKernel.heterogeneous(a, b), 1.0)
    assert max(fac.identity_residuals(np.linspace(0, 1, 50))) < 1e-12


@given(alpha=st.floats(0.01, 0.99), a=rates, b=rates)
def test_convex_factorization_identities(alpha, a, b):
    fac = factorize_kernel(DiscountKernel.convex_combination(alpha, a, b), 1.0)
    assert max(fac.identity_residuals(np.linspace(0, 1, 50))) < 1e-12


@given(alpha=st.floats(0.0, 3.0), lam=rates)
def test_quasi_factorization_identities(alpha, lam):
    fac = factorize_kernel(DiscountKernel.quasi_exponential(alpha, lam), 1.0)
    assert max(fac.identity_residuals(np.linspace(0, 1, 50))) < 1e-12


def test_exponential_factorization_has_no_mixing():
    fac = factorize_kernel(DiscountKernel.exponential(0.5), 1.0)
    t = np.linspace(0, 1, 11)
    assert np.all(fac.mixing(t[:, None], t[None, :]) == 0.0)
    assert max(fac.identity_residuals(t)) < 1e-15


def test_hyperbolic_has_no_factorization():
    with pytest.raises(UnsupportedKernelError):
        factorize_kernel(DiscountKernel.hyperbolic(0.5, 2.0), 1.0)


def test_control_set_finite_and_box():
    fin = ControlSet.finite([1.0, -1.0, 0.0])
    assert fin.candidates()[:, 0].tolist() == [-1.0, 0.0, 1.0]
    assert fin.contains(np.array([0.0, 0.5])).tolist() == [True, False]
    box = ControlSet.box(-2, 2, resolution=5)
    assert box.candidates()[:, 0].tolist() == [-2, -1, 0, 1, 2]
    assert box.contains(np.array([1.5, 2.5])).tolist() == [True, False]
    with pytest.raises(DomainError):
        ControlSet.finite([])
    with pytest.raises(DomainError):
        ControlSet.box(1, 0)


@given(x=st.floats(-3, 3), p=st.floats(-4, 4), t=st.floats(0, 0.9))
def test_lq_closed_form_minimizer_matches_scan(x, p, t):
    spec = get_scenario("lq-heterogeneous").build()
    scan = get_scenario("lq-heterogeneous").build(finite_controls=True)
    u, val, _ = minimize_hamiltonian_1d(spec, t, t + 0.1, x, 0.3, p, 1.0)
    us, vals, _ = minimize_hamiltonian_1d(scan, t, t + 0.1, x, 0.3, p, 1.0)
    w = spec.kernel.nu(t, t + 0.1)
    assert float(u) == pytest.approx(np.clip(-p / w, -5, 5), abs=1e-12)
    # scan grid spacing 0.01, quadratic in u: value error <= w*(0.005)^2/2
    assert float(vals) - float(val) <= 0.5 * w * 0.005 ** 2 + 1e-12
    assert float(vals) >= float(val) - 1e-12


def test_finite_scan_ties_go_to_smallest_control():
    spec = lq_problem(None, recursive_discount=0.0, finite_controls=True, resolution=3, u_bound=1.0)
    # at x = 0, p = 0.5 the Hamiltonian u^2/2 + u/2 ties between u = -1 and u = 0
    u, _, _ = minimize_hamiltonian_1d(spec, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0)
    assert float(u) == -1.0


def test_pointwise_hamiltonian_agrees_with_vectorized():
    spec = get_scenario("lq-hyperbolic").build()
    v = eval_hamiltonian(spec, 0.1, 0.4, 0.7, 0.3, 0.2, 1.1, 0.5)
    w = hamiltonian_1d(spec, 0.1, 0.4, 0.7, 0.3, 0.2, 1.1, 0.5)
    assert v == pytest.approx(float(w), abs=1e-14)
    u, val = minimize_hamiltonian(spec, 0.1, 0.4, 0.7, 0.2, 1.1, 0.5)
    assert val <= eval_hamiltonian(spec, 0.1, 0.4, 0.7, 0.0, 0.2, 1.1, 0.5)
    with pytest.raises(DomainError):
        eval_hamiltonian(spec, 0.5, 0.4, 0.7, 0.3, 0.2, 1.1, 0.5)


def test_validate_problem_reports_moduli():
    spec = get_scenario("lq-heterogeneous").build()
    rep = validate_problem(spec, -4, 4)
    assert rep["diffusion_max_sq"] == pytest.approx(0.16)
    assert rep["drift_x"] == pytest.approx(0.0)


def _spec_with(generator=None, free=None, homogeneous=False, diffusion=None):
    base = get_scenario("lq-heterogeneous").build()
    cost = CostSpec(generator or base.cost.generator, free or base.cost.free_term,
                    time_homogeneous_in_t=homogeneous)
    dyn = base.dynamics if diffusion is None else ControlledDynamics(base.dynamics.drift, diffusion)
    return ProblemSpec(dyn, cost, base.controls, base.horizon, kernel=base.kernel)


def test_validate_problem_catches_bad_flags():
    with pytest.raises(DomainError):
        validate_problem(_spec_with(homogeneous=True), -4, 4)
    with pytest.raises(DomainError):
        validate_problem(_spec_with(diffusion=lambda s, x, u: 0.4 + 0.1 * u), -4, 4)
    with pytest.raises(EvaluationError):
        validate_problem(_spec_with(free=lambda t, x: np.full(np.shape(x), np.nan)), -4, 4)
    with pytest.raises(DomainError):
        validate_problem(_spec_with(free=lambda t, x: 1e6 * x ** 3), -4, 4)
