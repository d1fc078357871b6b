import math

import numpy as np
import pytest
from scipy.integrate import quad

from eqcontrol.errors import BlowUpError, DomainError, NonConvergenceError
from eqcontrol.model_core import ControlledDynamics, ProblemSpec
from eqcontrol.pde_solvers import PdeGrid, solve_equilibrium_hjb, solve_representation_pde, FeedbackStrategy
from eqcontrol.scenarios import get_scenario, heat_problem
from eqcontrol.stochastic import (BLOCK_SIZE, RegressionBasis, RegressionPlan, brownian_increments,
                                  check_feynman_kac, epsilon_gap_study, evaluate_cost,
                                  local_optimality_probe, noise_budget, simulate_sde, solve_bsde_lsmc,
                                  solve_bsvie, solve_modified_bsvie)
from eqcontrol.grids import uniform_times


def _lq_zero_control_value(x0, lam=0.5, sigma=0.4, T=1.0):
    # u = 0: X_r = x0 + sigma W_r, E X_r^2 = x0^2 + sigma^2 r, generator l - lam y
    run, _ = quad(lambda r: math.exp(-lam * r) * 0.5 * (x0 ** 2 + sigma ** 2 * r), 0, T)
    return run + math.exp(-lam * T) * 0.5 * (x0 ** 2 + sigma ** 2 * T)


# ---------------------------------------------------------------------------
# noise and simulation
# ---------------------------------------------------------------------------

def test_increments_are_prefix_stable_and_worker_free():
    dt = np.full(7, 0.1)
    big = brownian_increments(11, BLOCK_SIZE + 500, dt)
    small = brownian_increments(11, 300, dt)
    assert np.array_equal(big[:300], small)
    assert np.array_equal(big, brownian_increments(11, BLOCK_SIZE + 500, dt, workers=4))
    assert not np.array_equal(small, brownian_increments(12, 300, dt))


def test_increment_statistics():
    spec = heat_problem()
    paths = simulate_sde(spec, None, 0.0, 0.0, 20, 20_000, seed=1)
    mean, bound = paths.increment_check()
    assert mean < bound
    var = np.var(paths.dW / np.sqrt(paths.dt), axis=0)
    assert np.all(np.abs(var - 1) < 0.05)


def test_control_forms():
    spec = get_scenario("lq-exponential").build()
    times = uniform_times(0, 1, 4)
    a = simulate_sde(spec, 0.5, 0.0, 1.0, times, 10, seed=2)
    b = simulate_sde(spec, np.full(4, 0.5), 0.0, 1.0, times, 10, seed=2)
    c = simulate_sde(spec, lambda s, x: 0.5, 0.0, 1.0, times, 10, seed=2)
    d = simulate_sde(spec, np.full((10, 4), 0.5), 0.0, 1.0, times, 10, seed=2)
    for p in (b, c, d):
        assert np.array_equal(a.X, p.X)
    # drift u, diffusion sigma: X_T = 1 + 0.5 + sigma W_T
    np.testing.assert_allclose(a.X[:, -1], 1.5 + 0.4 * a.dW.sum(axis=1), atol=1e-14)
    with pytest.raises(DomainError):
        simulate_sde(spec, 9.0, 0.0, 1.0, times, 10, seed=2)
    with pytest.raises(DomainError):
        simulate_sde(spec, np.zeros(3), 0.0, 1.0, times, 10, seed=2)
    with pytest.raises(DomainError):
        simulate_sde(spec, None, 0.5, 1.0, times, 10, seed=2)


def test_random_initial_states_are_keyed():
    spec = heat_problem()
    draw = lambda rng, n: rng.normal(size=n)
    a = simulate_sde(spec, None, 0.0, draw, 3, 100, seed=4)
    b = simulate_sde(spec, None, 0.0, draw, 3, 60, seed=4)
    assert np.array_equal(a.X[:60, 0], b.X[:, 0])


def test_explosive_drift_reports_path_and_time():
    base = heat_problem()
    dyn = ControlledDynamics(lambda s, x, u: 1e300 * x * x + 1e300, base.dynamics.diffusion)
    spec = ProblemSpec(dyn, base.cost, base.controls, 1.0)
    with pytest.raises(BlowUpError) as info, np.errstate(over="ignore", invalid="ignore"):
        simulate_sde(spec, None, 0.0, 1.0, 10, 50, seed=0)
    assert info.value.time_index >= 1


# ---------------------------------------------------------------------------
# regression
# ---------------------------------------------------------------------------

def test_regression_reproduces_polynomials():
    spec = heat_problem()
    paths = simulate_sde(spec, None, 0.0, 0.3, 5, 5000, seed=5)
    plan = RegressionPlan(paths, RegressionBasis(3))
    x = paths.X[:, 3]
    B = plan.design(3)
    V = 1 - 2 * x + 0.5 * x ** 3
    np.testing.assert_allclose(B @ plan.project(3, B, V), V, atol=1e-9)
    # deterministic start: only the constant survives
    assert plan.proj[0].active == 1
    B0 = plan.design(0)
    assert float((B0 @ plan.project(0, B0, paths.X[:, 1]))[0]) == pytest.approx(paths.X[:, 1].mean())


def test_regression_degrades_on_rank_deficient_states():
    spec = heat_problem()
    paths = simulate_sde(spec, None, 0.0, 0.0, 2, 1000, seed=6)
    paths.X[:, 1] = np.where(paths.X[:, 1] > 0, 1.0, -1.0)
    with pytest.warns(RuntimeWarning, match="degree lowered"):
        plan = RegressionPlan(paths, RegressionBasis(3))
    assert plan.proj[1].active == 2
    with pytest.raises(DomainError):
        RegressionBasis(0)


def test_bsde_heat_moment():
    # Y_s = E[X_T^2 | X_s] = X_s^2 + T - s, Z = 2 X sigma
    spec = heat_problem()
    paths = simulate_sde(spec, None, 0.0, 0.5, 20, 20_000, seed=7)
    Y, Z = solve_bsde_lsmc(paths, lambda r, x, u, y, z: 0.0 * x, lambda x: x * x, RegressionBasis(2))
    assert Y[0, 0] == pytest.approx(np.mean(paths.X[:, -1] ** 2), abs=1e-10)
    exact = paths.X[:, :-1] ** 2 + 1 - paths.times[:-1]
    assert np.sqrt(np.mean((Y[:, :-1] - exact) ** 2)) < 0.03
    assert np.sqrt(np.mean((Z[:, 5:] - 2 * paths.X[:, 5:-1]) ** 2)) < 0.1


# ---------------------------------------------------------------------------
# BSVIE
# ---------------------------------------------------------------------------

def test_bsvie_matches_closed_form_cost():
    spec = get_scenario("lq-exponential").build()
    est = evaluate_cost(spec, 0.0, 1.0, None, n_steps=100, n_paths=20_000, seed=8)
    exact = _lq_zero_control_value(1.0)
    # Euler bias of the generator sum is O(dt) ~ 3e-3
    assert abs(est.value - exact) < 3 * est.std_error + 5e-3
    assert np.mean(est.realized) == pytest.approx(est.value, abs=1e-12)


def test_picard_converges_to_the_march():
    spec = get_scenario("lq-heterogeneous").build()
    paths = simulate_sde(spec, None, 0.0, 1.0, 20, 4000, seed=9)
    march = solve_bsvie(paths, spec.cost, method="march")
    picard = solve_bsvie(paths, spec.cost, method="picard", tol=1e-12)
    assert picard.sweeps > 1
    assert np.max(np.abs(march.Y - picard.Y)) < 1e-10
    with pytest.raises(NonConvergenceError):
        solve_bsvie(paths, spec.cost, method="picard", picard_max=2, tol=0.0)
    with pytest.raises(DomainError):
        solve_bsvie(paths, spec.cost, method="newton")


def test_generic_generator_path_matches_separable():
    spec = get_scenario("lq-heterogeneous").build()
    paths = simulate_sde(spec, None, 0.0, 1.0, 12, 3000, seed=10)
    sep = solve_bsvie(paths, spec.cost, method="march")
    plain = type(spec.cost)(spec.cost.generator, spec.cost.free_term)
    gen = solve_bsvie(paths, plain, method="march")
    assert np.max(np.abs(sep.Y - gen.Y)) < 1e-10


def test_bsvie_matches_pde_field():
    spec = heat_problem()
    grid = PdeGrid.uniform(0, 1, 40, -8, 8, 81)
    st = FeedbackStrategy(grid.times, grid.space, np.zeros((40, 81)))
    theta = solve_representation_pde(spec, st, grid)
    res = check_feynman_kac(theta, st, spec, 0.5, n_paths=20_000, seed=11)
    budget = noise_budget(1 / 40, grid.space.dx, 20_000)
    assert res.y_residual <= 2 * budget
    assert res.z_residual <= 4 * budget


def test_modified_equation_fast_path_equals_full_solve():
    spec = get_scenario("lq-heterogeneous").build()
    paths = simulate_sde(spec, None, 0.0, 1.0, 20, 3000, seed=12)
    base = solve_bsvie(paths, spec.cost, method="march")
    for eps in (0.25, 0.5, 1.0):
        fast = solve_modified_bsvie(paths, spec.cost, 0.0, eps, base=base)
        full = solve_modified_bsvie(paths, spec.cost, 0.0, eps, base=base, full=True)
        assert fast.value() == pytest.approx(full.value(), abs=1e-10)
    with pytest.raises(DomainError):
        solve_modified_bsvie(paths, spec.cost, 0.0, 1.5, base=base)


def test_epsilon_study_on_homogeneous_cost_is_vacuous():
    spec = get_scenario("lq-exponential").build()
    study = epsilon_gap_study(spec, None, 0.0, 1.0, [0.2, 0.1], n_steps=20, n_paths=2000, seed=13)
    assert study.slope == "vacuous"
    assert max(study.gaps) == 0.0


def test_epsilon_study_gaps_shrink_faster_than_eps():
    spec = get_scenario("lq-heterogeneous").build()
    study = epsilon_gap_study(spec, None, 0.0, 1.0, [0.2, 0.1, 0.05], n_steps=40, n_paths=5000,
                              seed=14)
    assert study.monotone
    assert study.slope > 1.5


def test_epsilon_study_rejects_bad_lists():
    spec = get_scenario("lq-heterogeneous").build()
    for bad in ([], [0.1, 0.2], [2.0, 1.0], [0.1, -0.1]):
        with pytest.raises(DomainError):
            epsilon_gap_study(spec, None, 0.0, 1.0, bad, n_steps=10, n_paths=100)


def test_costs_are_worker_independent():
    spec = get_scenario("lq-heterogeneous").build()
    a = evaluate_cost(spec, 0.0, 1.0, None, 10, BLOCK_SIZE + 100, seed=15, workers=1)
    b = evaluate_cost(spec, 0.0, 1.0, None, 10, BLOCK_SIZE + 100, seed=15, workers=4)
    assert a.value == b.value and np.array_equal(a.realized, b.realized)


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------

def test_probe_on_time_consistent_problem():
    spec = get_scenario("lq-exponential").build()
    grid = PdeGrid.uniform(0, 1, 40, -4, 4, 41)
    eq = solve_equilibrium_hjb(spec, grid)
    u0 = float(eq.strategy.control(0.0, np.array([1.0]), "linear")[0])
    tab = local_optimality_probe(spec, eq.strategy, 0.0, 1.0, [0.2, 0.1], [u0 - 0.5, u0 + 0.5, "psi"],
                                 n_steps=40, n_paths=5000, seed=16)
    assert len(tab.rows) == 6
    for r in tab.rows:
        assert r["diff"] >= -3 * r["std_error"]
    # optimal feedback: playing a wrong constant is strictly worse
    assert all(r["diff"] > 0 for r in tab.rows if r["control"] != "psi")
    assert tab.exponent == math.inf
    with pytest.raises(DomainError):
        local_optimality_probe(spec, eq.strategy, 0.0, 1.0, [0.2], [50.0], n_steps=40, n_paths=100)


def test_probe_csv(tmp_path):
    spec = get_scenario("lq-exponential").build()
    grid = PdeGrid.uniform(0, 1, 20, -4, 4, 21)
    eq = solve_equilibrium_hjb(spec, grid)
    tab = local_optimality_probe(spec, eq.strategy, 0.0, 1.0, [0.1], [0.0], n_steps=20, n_paths=500,
                                 seed=17)
    tab.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "eps,control,diff,std_error" and len(lines) == 2
