"""Backward-induction construction of approximate equilibria over a time partition.

Player k owns [t_{k-1}, t_k).  Going from the last interval to the first, each
player takes the strategy already fixed on [t_k, T] as given, evaluates its own
terminal payoff through the frozen-outer-time equation, and solves a classical
HJB on its interval.  The two-time field of the spliced strategy is extended
leftward one block of rows per stage and never recomputed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError, EqControlError
from .grids import (Partition, ScalarField, ThetaField, build_partition, loglog_slope,
                    time_index, write_rows)
from .model_core import ProblemSpec, hamiltonian_1d, validate_problem
from .pde_solvers import (FeedbackStrategy, PdeConfig, PdeGrid, check_cfl, march_two_time,
                          solve_classical_hjb, solve_equilibrium_hjb, solve_frozen_pde)


class StageError(EqControlError):
    """A sub-solver failed inside one extension step."""


@dataclass
class ApproximateEquilibrium:
    partition: Partition
    grid: PdeGrid
    strategy: FeedbackStrategy
    theta: ThetaField
    frozen: dict = field(default_factory=dict)   # owner k -> field on [t_k, T]
    values: dict = field(default_factory=dict)   # owner k -> HJB value on [t_{k-1}, t_k]


class _Construction:
    def __init__(self, spec: ProblemSpec, grid: PdeGrid, partition: Partition, config: PdeConfig):
        self.spec, self.grid, self.partition, self.config = spec, grid, partition, config
        if abs(partition.start - grid.times[0]) > 1e-12 or abs(partition.end - grid.times[-1]) > 1e-12:
            raise DomainError("partition must cover the solver window exactly")
        self.idx = [time_index(grid.times, p, "partition point") for p in partition.points]
        n, K = grid.times.size, grid.space.n_nodes
        self.psi = np.full((n - 1, K), np.nan)
        self.theta = ThetaField(grid.times, grid.space)
        self.theta.data[:, n - 1] = np.broadcast_to(
            spec.cost.free_term(grid.times[:, None], grid.space.nodes[None, :]), (n, K))
        self.frozen, self.values = {}, {}

    def _rows(self, lo, hi):
        """Representation PDE for outer rows [lo, hi) using the strategy fixed so far."""
        spec, times, nodes = self.spec, self.grid.times, self.grid.space.nodes
        psi, dyn = self.psi, self.spec.dynamics

        def layer(j, D, rows_idx, R, Rx, Rxx):
            s = times[j + 1]
            u = psi[j]
            sig = dyn.diffusion(s, nodes, u)
            return 0.5 * sig * sig, hamiltonian_1d(spec, times[rows_idx][:, None], s, nodes, u, D, Rx, Rxx)

        march_two_time(self.theta, layer, self.config, row_lo=lo, row_hi=hi,
                       what=f"representation rows [{lo}, {hi})")

    def _window_hjb(self, k, terminal):
        lo, hi = self.idx[k - 1], self.idx[k]
        window = PdeGrid(self.grid.times[lo:hi + 1], self.grid.space)
        value, feedback = solve_classical_hjb(self.spec, window, terminal,
                                              float(self.grid.times[lo]), self.config)
        self.psi[lo:hi] = feedback.values
        self.values[k] = value

    def base_case(self):
        N = self.partition.n_intervals
        t_last = self.grid.times[self.idx[N - 1]]
        top = np.broadcast_to(self.spec.cost.free_term(t_last, self.grid.space.nodes),
                              self.grid.space.nodes.shape).astype(float)
        try:
            self._window_hjb(N, top)
        except EqControlError as exc:
            raise StageError(f"stage {N} (base HJB): {exc}") from exc

    def extend(self, k):
        """Fix the strategy on [t_{k-1}, t_k) given it on [t_k, T]."""
        lo_k, hi_k = self.idx[k], self.idx[k + 1]
        before = self.psi[lo_k:].copy()
        try:
            # step 1a: rows of the representation field that became computable
            self._rows(lo_k, hi_k)
        except EqControlError as exc:
            raise StageError(f"stage {k} step 1 (representation): {exc}") from exc
        try:
            # step 1b: player k's view of the future with its own outer time
            window = PdeGrid(self.grid.times[lo_k:], self.grid.space)
            diag_idx = np.arange(lo_k, self.grid.times.size)
            diag = ScalarField(window.times, self.grid.space, self.theta.data[diag_idx, diag_idx])
            strat = FeedbackStrategy(self.grid.times[lo_k:], self.grid.space, self.psi[lo_k:])
            tau = float(self.grid.times[self.idx[k - 1]])
            frozen = solve_frozen_pde(self.spec, strat, window, tau, diag, self.config)
            self.frozen[k] = frozen
        except EqControlError as exc:
            raise StageError(f"stage {k} step 1 (frozen field): {exc}") from exc
        try:
            # steps 2 and 3: window HJB and splice its feedback
            self._window_hjb(k, frozen.values[0])
        except EqControlError as exc:
            raise StageError(f"stage {k} step 2 (window HJB): {exc}") from exc
        if not np.array_equal(before, self.psi[lo_k:]):
            raise StageError(f"stage {k} modified the strategy on a later interval")

    def finish(self):
        self._rows(self.idx[0], self.idx[1])


def build_approximate_equilibrium(spec: ProblemSpec, grid: PdeGrid, partition: Partition,
                                  config: Optional[PdeConfig] = None, recheck: bool = False,
                                  validate: bool = True) -> ApproximateEquilibrium:
    """Fold the extension step from the last interval down to the first."""
    config = config or PdeConfig()
    check_cfl(spec, grid, config)
    if validate:
        validate_problem(spec, grid.space.x_lo, grid.space.x_hi)
    c = _Construction(spec, grid, partition, config)
    c.base_case()
    for k in range(partition.n_intervals - 1, 0, -1):
        c.extend(k)
    c.finish()
    strategy = FeedbackStrategy(grid.times, grid.space, c.psi, spec.controls)
    eq = ApproximateEquilibrium(partition, grid, strategy, c.theta, c.frozen, c.values)
    if recheck:
        from .pde_solvers import solve_representation_pde
        again = solve_representation_pde(spec, strategy, grid, config=config)
        if not np.array_equal(np.nan_to_num(again.data, nan=0.0), np.nan_to_num(c.theta.data, nan=0.0)):
            raise StageError("incrementally built field differs from a one-shot solve")
    return eq


def extend_strategy(spec: ProblemSpec, grid: PdeGrid, partition: Partition, strategy_tail,
                    k: int, config: Optional[PdeConfig] = None):
    """One extension step on [t_{k-1}, t_k] from a strategy fixed on [t_k, T].

    ``strategy_tail`` is a FeedbackStrategy on [t_k, T] (or None when k = N).
    Returns (strategy on [t_{k-1}, T], representation field on [t_k, T],
    frozen field, window value).
    """
    config = config or PdeConfig()
    c = _Construction(spec, grid, partition, config)
    N = partition.n_intervals
    if k == N:
        c.base_case()
        lo = c.idx[N - 1]
        strat = FeedbackStrategy(grid.times[lo:], grid.space, c.psi[lo:], spec.controls)
        return strat, None, None, c.values[N]
    lo_k = c.idx[k]
    if strategy_tail is None:
        raise DomainError("a strategy on [t_k, T] is required for k < N")
    off = time_index(strategy_tail.times, grid.times[lo_k], "tail start")
    c.psi[lo_k:] = strategy_tail.values[off:]
    c._rows(lo_k, grid.times.size)
    c.extend(k)
    lo = c.idx[k - 1]
    strat = FeedbackStrategy(grid.times[lo:], grid.space, c.psi[lo:], spec.controls)
    rows = np.arange(lo_k, grid.times.size)
    sub = ThetaField(grid.times[lo_k:], grid.space, c.theta.data[np.ix_(rows, rows)])
    return strat, sub, c.frozen[k], c.values[k]


def _sup_gap(a: ThetaField, b: ThetaField) -> float:
    return a.max_abs_diff(b)


@dataclass
class ConvergenceTable:
    rows: list
    fitted_rate: float

    def to_csv(self, path):
        def cell(v):
            return "" if v is None or (isinstance(v, float) and math.isnan(v)) else v
        write_rows(path, ["N", "mesh", "gap_self", "gap_limit", "rate"],
                   ([r["N"], r["mesh"]] + [cell(r[k]) for k in ("gap_self", "gap_limit", "rate")]
                    for r in self.rows))


def convergence_study(spec: ProblemSpec, grid: PdeGrid, N_list, config: Optional[PdeConfig] = None,
                      kind: str = "uniform") -> ConvergenceTable:
    """Refinement table of the partition construction against the equilibrium HJB.

    gap_self is the sup-norm change from the previous (coarser) entry of
    N_list, gap_limit the distance to the equilibrium HJB field on the same
    grid, rate the local observed order between consecutive gap_self values.
    The fitted rate uses the last three gap_self values.
    """
    config = config or PdeConfig()
    N_list = [int(n) for n in N_list]
    if not N_list:
        raise DomainError("N_list is empty")
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise DomainError("N_list must be strictly ascending")
    limit = solve_equilibrium_hjb(spec, grid, config).theta
    rows, prev, prev_mesh, prev_gap = [], None, None, None
    validate_problem(spec, grid.space.x_lo, grid.space.x_hi)
    for N in N_list:
        part = build_partition(float(grid.times[0]), float(grid.times[-1]), N, kind)
        eq = build_approximate_equilibrium(spec, grid, part, config, validate=False)
        gap_self = float("nan") if prev is None else _sup_gap(eq.theta, prev)
        rate = float("nan")
        if prev_gap is not None and prev_gap > 0 and gap_self > 0:
            rate = math.log(prev_gap / gap_self) / math.log(prev_mesh / part.mesh)
        rows.append({"N": N, "mesh": part.mesh, "gap_self": gap_self,
                     "gap_limit": _sup_gap(eq.theta, limit), "rate": rate})
        prev, prev_gap, prev_mesh = eq.theta, (None if math.isnan(gap_self) else gap_self), part.mesh
    tail = [r for r in rows if not math.isnan(r["gap_self"])][-3:]
    fitted = loglog_slope([r["mesh"] for r in tail], [r["gap_self"] for r in tail])
    return ConvergenceTable(rows, fitted)
