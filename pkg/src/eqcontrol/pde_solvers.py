"""Finite-difference solvers for the representation, frozen, classical and
equilibrium HJB equations.

All solvers march the inner time s backward from the horizon.  Diagonal data
Theta(s, s, .) enters every layer explicitly: the step from s_{j+1} to s_j uses
the diagonal at s_{j+1}.  Feedback strategies follow the same convention, so
``strategy.values[j]`` is computed from layer j+1 and governs [s_j, s_{j+1}).
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded

from .errors import ConfigError, DivergenceError, DomainError
from .grids import (ScalarField, SpatialGrid, ThetaField, derivatives,
                    diagonal_trace, time_index, uniform_times)
from .model_core import (ProblemSpec, hamiltonian_1d, max_diffusion_sq,
                         minimize_hamiltonian_1d)

SCHEMES = ("explicit", "implicit_diffusion")
REGIME_OK = "thm-4.2"
REGIME_OUTSIDE = "outside-thm-4.2"
VARIANT_FLAG = "WYY-variant"


@dataclass
class PdeConfig:
    scheme: str = "explicit"
    safety: float = 1.0
    tol: float = 1e-10
    refine: bool = False
    log: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not self.safety > 0:
            raise ConfigError("safety factor must be positive")


@dataclass(eq=False)
class PdeGrid:
    times: np.ndarray
    space: SpatialGrid

    @classmethod
    def uniform(cls, start, end, n_steps, x_lo, x_hi, n_nodes):
        return cls(uniform_times(start, end, n_steps), SpatialGrid(x_lo, x_hi, n_nodes))

    @property
    def n_steps(self):
        return self.times.size - 1

    def window(self, start_index):
        return PdeGrid(self.times[start_index:], self.space)


class FeedbackStrategy:
    """Control field on (interval, node); row j acts on [s_j, s_{j+1})."""

    def __init__(self, times, space: SpatialGrid, values, controls=None):
        self.times = np.asarray(times, dtype=float)
        self.space = space
        self.values = np.asarray(values, dtype=float)
        if self.values.shape != (self.times.size - 1, space.n_nodes):
            raise DomainError("strategy shape does not match its grids")
        if controls is not None and not np.all(controls.contains(self.values, atol=1e-9)):
            raise DomainError("strategy holds controls outside the control set")
        self.controls = controls

    def interval_index(self, s: float) -> int:
        j = int(np.searchsorted(self.times, s + 1e-12, side="right")) - 1
        return min(max(j, 0), self.times.size - 2)

    def control(self, s: float, x, interp="nearest"):
        """Control at time s for states x (nearest node or linear in space)."""
        row = self.values[self.interval_index(s)]
        if interp == "nearest":
            return row[self.space.nearest_index(x)]
        if interp == "linear":
            return self.space.interpolate(row, x)
        raise DomainError(f"unknown interpolation {interp!r}")

    def as_field(self):
        return ScalarField(self.times[:-1], self.space, self.values)


@dataclass
class MarchLog:
    rows: list = field(default_factory=list)

    def add(self, layer, update, values):
        self.rows.append((int(layer), float(np.max(np.abs(update))) if update.size else 0.0,
                          float(np.min(values)), float(np.max(values))))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "max_update", "min_theta", "max_theta"])
            for layer, upd, lo, hi in self.rows:
                w.writerow([layer, repr(upd), repr(lo), repr(hi)])


@dataclass
class EquilibriumResult:
    theta: ThetaField
    value: ScalarField
    strategy: FeedbackStrategy
    regime_flag: str
    variant: Optional[str] = None
    log: Optional[MarchLog] = None
    boundary_hits: int = 0

    def __iter__(self):
        return iter((self.theta, self.value, self.strategy))


# ---------------------------------------------------------------------------
# shared stepping
# ---------------------------------------------------------------------------

def check_cfl(spec_or_sigma_sq, grid: PdeGrid, config: PdeConfig):
    """Raise ConfigError when the explicit scheme violates ds <= dx^2 / (lam1 * safety)."""
    if config.scheme != "explicit":
        return
    if isinstance(spec_or_sigma_sq, ProblemSpec):
        lam1 = max_diffusion_sq(spec_or_sigma_sq, grid.times, grid.space.nodes)
    else:
        lam1 = float(spec_or_sigma_sq)
    ds = float(np.max(np.diff(grid.times)))
    bound = grid.space.dx ** 2 / (max(lam1, 1e-300) * config.safety)
    if ds > bound * (1 + 1e-12):
        raise ConfigError(f"explicit scheme unstable: ds={ds:.4g} exceeds dx^2/(lam1*safety)={bound:.4g}; "
                          "refine time, coarsen space or use implicit_diffusion")


def _implicit_solve(rhs, half_a, dt, dx):
    """Solve (I - dt * half_a * D2) v = rhs along the last axis (boundary rows identity)."""
    K = rhs.shape[-1]
    c = dt * np.broadcast_to(half_a, (K,)) / (dx * dx)
    ab = np.zeros((3, K))
    ab[1] = 1.0
    ab[1, 1:-1] += 2.0 * c[1:-1]
    ab[0, 2:] = -c[1:-1]
    ab[2, :-2] = -c[1:-1]
    sol = solve_banded((1, 1), ab, np.atleast_2d(rhs).T)
    return sol.T.reshape(rhs.shape)


def _advance(values, rate, half_a, vxx, dt, dx, scheme):
    if scheme == "explicit":
        return values + dt * rate
    return _implicit_solve(values + dt * (rate - half_a * vxx), half_a, dt, dx)


def _check_finite(arr, layer, what):
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"{what}: non-finite update at layer {layer}", layer=layer)


def march_two_time(theta: ThetaField, layer_fn, config: PdeConfig, row_lo=0, row_hi=None,
                   j_top=None, j_bottom=0, diag_source=None, log=None, what="solver"):
    """Backward march of the rows [row_lo, row_hi) of a two-time field.

    ``layer_fn(j, D, rows, R, Rx, Rxx)`` returns (half_a, rate) for the step
    from layer j+1 to j, where D is the diagonal at j+1 (self-generated unless
    ``diag_source`` is given) and R holds rows at layer j+1.
    """
    n = theta.n_times
    row_hi = n if row_hi is None else row_hi
    j_top = n - 1 if j_top is None else j_top
    dx = theta.space.dx
    times = theta.times
    for j in range(j_top - 1, j_bottom - 1, -1):
        hi = min(row_hi, j + 1)
        if hi <= row_lo:
            continue
        D = diag_source[j + 1] if diag_source is not None else theta.data[j + 1, j + 1]
        R = theta.data[row_lo:hi, j + 1]
        Rx, Rxx = derivatives(R, dx)
        half_a, rate = layer_fn(j, D, np.arange(row_lo, hi), R, Rx, Rxx)
        new = _advance(R, rate, half_a, Rxx, times[j + 1] - times[j], dx, config.scheme)
        _check_finite(new, j, what)
        theta.data[row_lo:hi, j] = new
        if log is not None:
            log.add(j, new - R, new)
    return theta


def march_one_time(values_top, times, dx, layer_fn, config: PdeConfig, log=None, what="solver"):
    """Backward march of a single field; returns an array (len(times), K)."""
    n = times.size
    out = np.empty((n, values_top.size))
    out[-1] = values_top
    for j in range(n - 2, -1, -1):
        V = out[j + 1]
        Vx, Vxx = derivatives(V, dx)
        half_a, rate = layer_fn(j, V, Vx, Vxx)
        new = _advance(V, rate, half_a, Vxx, times[j + 1] - times[j], dx, config.scheme)
        _check_finite(new, j, what)
        out[j] = new
        if log is not None:
            log.add(j, new - V, new)
    return out


def _terminal_rows(spec, times, nodes, rows):
    h = spec.cost.free_term
    return np.broadcast_to(h(times[rows][:, None], nodes[None, :]), (rows.size, nodes.size)).astype(float)


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------

def solve_representation_pde(spec: ProblemSpec, strategy: FeedbackStrategy, grid: PdeGrid,
                             diagonal_source: Optional[ScalarField] = None,
                             config: Optional[PdeConfig] = None, theta: Optional[ThetaField] = None,
                             row_range=None, log=None) -> ThetaField:
    """Theta on the triangle of ``grid.times`` for a fixed feedback strategy.

    When ``theta`` and ``row_range`` are given only those rows are (re)computed,
    reading diagonal values of other rows from ``theta``; this is how the
    partition construction extends the triangle leftward without re-solving.
    """
    config = config or PdeConfig()
    check_cfl(spec, grid, config)
    times, nodes = grid.times, grid.space.nodes
    n = times.size
    if strategy.values.shape[0] < n - 1:
        raise DomainError("strategy does not cover the window")
    offset = time_index(strategy.times, times[0], "window start")
    psi = strategy.values[offset:offset + n - 1]
    if theta is None:
        theta = ThetaField(times, grid.space)
    lo, hi = (0, n) if row_range is None else row_range
    rows = np.arange(lo, hi)
    theta.data[lo:hi, n - 1] = _terminal_rows(spec, times, nodes, rows)
    diag = None if diagonal_source is None else diagonal_source.values
    dyn = spec.dynamics

    def layer(j, D, rows_idx, R, Rx, Rxx):
        s = times[j + 1]
        u = psi[j]
        sig = dyn.diffusion(s, nodes, u)
        rate = hamiltonian_1d(spec, times[rows_idx][:, None], s, nodes, u, D, Rx, Rxx)
        return 0.5 * sig * sig, rate

    march_two_time(theta, layer, config, row_lo=lo, row_hi=hi, diag_source=diag, log=log,
                   what="representation PDE")
    return theta


def solve_frozen_pde(spec: ProblemSpec, strategy: FeedbackStrategy, grid: PdeGrid, outer_time: float,
                     diagonal_source: ScalarField, config: Optional[PdeConfig] = None) -> ScalarField:
    """Single-parameter field with the outer time frozen at ``outer_time``."""
    config = config or PdeConfig()
    check_cfl(spec, grid, config)
    times, nodes, dx = grid.times, grid.space.nodes, grid.space.dx
    offset = time_index(strategy.times, times[0], "window start")
    psi = strategy.values[offset:offset + times.size - 1]
    d_off = time_index(diagonal_source.times, times[0], "window start")
    diag = diagonal_source.values[d_off:d_off + times.size]
    if diag.shape[0] != times.size:
        raise DomainError("diagonal source does not cover the window")
    dyn = spec.dynamics
    top = np.broadcast_to(spec.cost.free_term(outer_time, nodes), nodes.shape).astype(float)

    def layer(j, V, Vx, Vxx):
        s = times[j + 1]
        u = psi[j]
        sig = dyn.diffusion(s, nodes, u)
        return 0.5 * sig * sig, hamiltonian_1d(spec, outer_time, s, nodes, u, diag[j + 1], Vx, Vxx)

    vals = march_one_time(top, times, dx, layer, config, what="frozen PDE")
    return ScalarField(times, grid.space, vals)


def solve_classical_hjb(spec: ProblemSpec, grid: PdeGrid, terminal, outer_time: float,
                        config: Optional[PdeConfig] = None, log=None):
    """Value and argmin feedback of the HJB with outer time frozen at ``outer_time``."""
    config = config or PdeConfig()
    check_cfl(spec, grid, config)
    times, nodes, dx = grid.times, grid.space.nodes, grid.space.dx
    top = terminal.values[-1] if isinstance(terminal, ScalarField) else np.asarray(terminal, dtype=float)
    if top.shape != nodes.shape:
        raise DomainError("terminal data does not match the spatial grid")
    psi = np.empty((times.size - 1, nodes.size))
    dyn = spec.dynamics
    hits = [0]

    def layer(j, V, Vx, Vxx):
        s = times[j + 1]
        u, val, nb = minimize_hamiltonian_1d(spec, outer_time, s, nodes, V, Vx, Vxx,
                                             refine=config.refine)
        hits[0] += nb
        psi[j] = u
        sig = dyn.diffusion(s, nodes, u)
        return 0.5 * sig * sig, val

    vals = march_one_time(top, times, dx, layer, config, log=log, what="classical HJB")
    value = ScalarField(times, grid.space, vals)
    feedback = FeedbackStrategy(times, grid.space, psi, spec.controls)
    feedback.boundary_hits = hits[0]
    return value, feedback


def _equilibrium(spec, grid, config, y_slot):
    config = config or PdeConfig()
    check_cfl(spec, grid, config)
    regime = REGIME_OK if spec.dynamics.sigma_control_free else REGIME_OUTSIDE
    if regime == REGIME_OUTSIDE:
        if y_slot == "row":
            raise DomainError("the variant solver needs a control-free diffusion")
        warnings.warn("diffusion depends on the control: result lies outside the "
                      "regime with a classical-solution guarantee", RuntimeWarning)
    times, nodes = grid.times, grid.space.nodes
    n = times.size
    theta = ThetaField(times, grid.space)
    theta.data[:, n - 1] = _terminal_rows(spec, times, nodes, np.arange(n))
    psi = np.empty((n - 1, nodes.size))
    dx = grid.space.dx
    dyn = spec.dynamics
    hits = [0]

    def layer(j, D, rows_idx, R, Rx, Rxx):
        s = times[j + 1]
        Dx, Dxx = derivatives(D, dx)
        u, _, nb = minimize_hamiltonian_1d(spec, s, s, nodes, D, Dx, Dxx, refine=config.refine)
        hits[0] += nb
        psi[j] = u
        sig = dyn.diffusion(s, nodes, u)
        slot = D if y_slot == "diag" else R
        rate = hamiltonian_1d(spec, times[rows_idx][:, None], s, nodes, u, slot, Rx, Rxx)
        return 0.5 * sig * sig, rate

    log = MarchLog() if config.log else None
    march_two_time(theta, layer, config, log=log, what="equilibrium HJB")
    strategy = FeedbackStrategy(times, grid.space, psi, spec.controls)
    return EquilibriumResult(theta, diagonal_trace(theta), strategy, regime,
                             VARIANT_FLAG if y_slot == "row" else None, log, hits[0])


def solve_equilibrium_hjb(spec: ProblemSpec, grid: PdeGrid,
                          config: Optional[PdeConfig] = None) -> EquilibriumResult:
    """Equilibrium field: controls come from the diagonal, every row is advanced with them."""
    return _equilibrium(spec, grid, config, "diag")


def solve_equilibrium_hjb_variant(spec: ProblemSpec, grid: PdeGrid,
                                  config: Optional[PdeConfig] = None) -> EquilibriumResult:
    """Same march, but the generator's y-slot reads the row's own value Theta(t, s, x)."""
    return _equilibrium(spec, grid, config, "row")


def fixed_point_residual(spec: ProblemSpec, result: EquilibriumResult, grid: PdeGrid,
                         config: Optional[PdeConfig] = None) -> float:
    """Re-solve the representation PDE with the equilibrium strategy and diagonal."""
    again = solve_representation_pde(spec, result.strategy, grid, diagonal_source=result.value,
                                     config=config)
    return result.theta.max_abs_diff(again)


def degeneracy_gap(theta: ThetaField) -> float:
    """Largest spread across outer-time rows at a common inner layer."""
    worst = 0.0
    for j in range(theta.n_times):
        rows = theta.data[: j + 1, j]
        worst = max(worst, float(np.max(rows.max(axis=0) - rows.min(axis=0))))
    return worst
