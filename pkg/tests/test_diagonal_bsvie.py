import json

import numpy as np
import pytest

from eqcontrol.diagonal_bsvie import (DiagonalProblem, cross_validate_diagonal, h6_problem,
                                      solve_coupled_fsde_bsvie, solve_decoupling_pde,
                                      solve_h6_fbsde_reduction, trivial_problem, validate_diagonal)
from eqcontrol.errors import ConfigError, DomainError, UnsupportedKernelError
from eqcontrol.model_core import DiscountKernel
from eqcontrol.pde_solvers import PdeGrid
from eqcontrol.stochastic import noise_budget

KINDS = ["heterogeneous", "exponential", "quasi_exponential", "convex_combination"]


@pytest.fixture(scope="module")
def small_pair():
    pr = h6_problem("heterogeneous")
    grid = PdeGrid.uniform(0, 1, 50, -4, 4, 50)
    theta = solve_decoupling_pde(pr, grid)
    a = solve_coupled_fsde_bsvie(pr, theta, 1.0, 5000, seed=3)
    b = solve_h6_fbsde_reduction(pr, 1.0, 0.0, 50, 5000, seed=3)
    return pr, grid, theta, a, b


@pytest.mark.parametrize("kind", KINDS)
def test_structure_and_identities(kind):
    rep = validate_diagonal(h6_problem(kind), -4, 4)
    assert rep["structure_error"] == 0.0
    assert max(rep["identity_residuals"]) < 1e-12
    assert rep["sigma_min"] == pytest.approx(0.4)


def test_validation_rejects_degenerate_or_inconsistent_data():
    pr = h6_problem("heterogeneous")
    flat = DiagonalProblem(pr.drift, lambda r, x: 0.0 * x, pr.generator, pr.free_term, 1.0,
                           pr.structure)
    with pytest.raises(DomainError):
        validate_diagonal(flat, -1, 1)
    wrong = DiagonalProblem(pr.drift, pr.diffusion, pr.generator, lambda t, x: x * x, 1.0,
                            pr.structure)
    with pytest.raises(DomainError):
        validate_diagonal(wrong, -1, 1)
    with pytest.raises(ConfigError):
        h6_problem("power")
    with pytest.raises(ConfigError):
        h6_problem("heterogeneous", beta=1.0)
    with pytest.raises(UnsupportedKernelError):
        DiagonalProblem.separable(pr.drift, pr.diffusion, DiscountKernel.hyperbolic(1, 1),
                                  pr.structure.g0, pr.structure.h0, pr.structure.alpha, 1.0)


def test_trivial_problem_routes():
    pr = trivial_problem()
    grid = PdeGrid.uniform(0, 1, 20, -6, 6, 31)
    theta = solve_decoupling_pde(pr, grid)
    m = theta.triangle_mask()
    x = np.broadcast_to(grid.space.nodes, theta.data.shape)
    assert np.max(np.abs(theta.data[m] - x[m])) < 1e-12
    sol = solve_coupled_fsde_bsvie(pr, theta, 0.5, 500, seed=1)
    assert np.max(np.abs(sol.Y - sol.X)) < 1e-12
    assert np.max(np.abs(sol.Z_diag - 1.0)) < 1e-12
    assert not pr.uniqueness_guaranteed
    with pytest.raises(UnsupportedKernelError):
        solve_h6_fbsde_reduction(pr, 0.5, 0.0, 20, 500, seed=1)


def test_exponential_rows_are_rescaled_copies():
    # nu(t, r) = exp(-lam (r - t)): every row is exp(lam t) times one function of (s, x)
    pr = h6_problem("exponential")
    grid = PdeGrid.uniform(0, 1, 30, -4, 4, 31)
    theta = solve_decoupling_pde(pr, grid)
    t = grid.times
    for j in range(0, 31, 6):
        scaled = theta.data[: j + 1, j] * np.exp(-0.5 * t[: j + 1])[:, None]
        assert np.max(np.abs(scaled - scaled[-1])) < 1e-12 * (1 + np.max(np.abs(scaled)))


def test_routes_agree_within_budget(small_pair):
    pr, grid, theta, a, b = small_pair
    gaps = cross_validate_diagonal(a, b)
    budget = noise_budget(1 / 50, grid.space.dx, 5000)
    assert max(gaps) <= 3 * budget
    assert a.residuals["bsvie_weak"] < budget
    assert b.residuals["bsvie_weak"] < budget
    assert b.residuals["relationship"] < 1e-12
    assert b.info["uniqueness_guaranteed"]


def test_two_time_z_field(small_pair):
    pr, grid, theta, a, b = small_pair
    for i, r in ((0, 10), (5, 30)):
        za, zb = a.z_field(i, r), b.z_field(i, r)
        assert np.sqrt(np.mean((za - zb) ** 2)) < 0.05
    assert np.array_equal(b.z_field(7, 7), b.z_field(7, 7))
    with pytest.raises(DomainError):
        a.z_field(10, 5)
    with pytest.raises(DomainError):
        b.z_field(10, 5)


def test_cross_validation_needs_shared_noise(small_pair):
    pr, grid, theta, a, b = small_pair
    c = solve_h6_fbsde_reduction(pr, 1.0, 0.0, 50, 5000, seed=4)
    with pytest.raises(DomainError):
        cross_validate_diagonal(a, c)
    d = solve_h6_fbsde_reduction(pr, 1.0, 0.0, 25, 5000, seed=3)
    with pytest.raises(DomainError):
        cross_validate_diagonal(a, d)


def test_auxiliary_pair_collapse():
    pr = h6_problem("exponential")
    b = solve_h6_fbsde_reduction(pr, 1.0, 0.0, 30, 3000, seed=5)
    c = solve_h6_fbsde_reduction(pr, 1.0, 0.0, 30, 3000, seed=5, zero_auxiliary=True)
    assert np.array_equal(b.Y, c.Y) and np.array_equal(b.Z_diag, c.Z_diag)
    het = h6_problem("heterogeneous")
    d = solve_h6_fbsde_reduction(het, 1.0, 0.0, 30, 3000, seed=5)
    e = solve_h6_fbsde_reduction(het, 1.0, 0.0, 30, 3000, seed=5, zero_auxiliary=True)
    assert not np.array_equal(d.Y, e.Y)


def test_fbsde_route_is_deterministic_across_workers():
    pr = h6_problem("convex_combination")
    a = solve_h6_fbsde_reduction(pr, 1.0, 0.0, 20, 5000, seed=6, workers=1)
    b = solve_h6_fbsde_reduction(pr, 1.0, 0.0, 20, 5000, seed=6, workers=4)
    assert np.array_equal(a.Y, b.Y) and np.array_equal(a.X, b.X)
    with pytest.raises(ConfigError):
        solve_h6_fbsde_reduction(pr, 1.0, 0.0, 20, 100, seed=6, damping=0.0)


def test_solution_output(tmp_path, small_pair):
    pr, grid, theta, a, b = small_pair
    b.to_csv(tmp_path / "d.csv", max_paths=3)
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "path,time,X,Y,Z_diag"
    assert len(lines) == 1 + 3 * 51
    assert lines[51].endswith(",")          # no Z at the terminal time
    b.write_json(tmp_path / "s.json", {"extra": 1})
    data = json.loads((tmp_path / "s.json").read_text())
    assert data["route"] == "fbsde" and data["extra"] == 1 and data["n_steps"] == 50
