"""Monte Carlo machinery: path simulation, least-squares BSDE/BSVIE solvers and studies.

Conditional expectations are global polynomial regressions on the current
state, one per time step.  The BSVIE solver works in coefficient space: every
outer time s owns a coefficient vector per inner time r, and the projection of
a future-time basis onto the current one is a small P x P matrix, so all outer
times advance together.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import BlowUpError, DomainError, NonConvergenceError
from .grids import ThetaField, derivatives, loglog_slope, time_index, uniform_times, write_rows
from .model_core import CostSpec, ProblemSpec, SeparableGenerator
from .pde_solvers import FeedbackStrategy

BLOCK_SIZE = 4096
COND_LIMIT = 1e12


def noise_budget(ds: float, dx: float, n_paths: int) -> float:
    """Error budget ds + dx^2 + 5/sqrt(n_paths) used by the residual checks."""
    return ds + dx * dx + 5.0 / math.sqrt(n_paths)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

@dataclass
class SamplePaths:
    times: np.ndarray
    X: np.ndarray    # (n_paths, n_steps + 1)
    dW: np.ndarray   # (n_paths, n_steps)
    U: np.ndarray    # (n_paths, n_steps), control used on [s_k, s_{k+1})
    seed: int

    @property
    def n_paths(self):
        return self.X.shape[0]

    @property
    def n_steps(self):
        return self.times.size - 1

    @property
    def dt(self):
        return np.diff(self.times)

    def increment_check(self):
        """(largest |mean| of normalized increments, 4/sqrt(paths*steps) bound)."""
        normed = self.dW / np.sqrt(self.dt)[None, :]
        return float(abs(normed.mean())), 4.0 / math.sqrt(normed.size)


def _block_rng(seed, block, stream=0):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(block, stream))))


def brownian_increments(seed: int, n_paths: int, dt, workers: int = 1) -> np.ndarray:
    """Increments keyed by (seed, block of 4096 paths); a path's noise does not
    depend on n_paths or on the number of worker threads."""
    dt = np.asarray(dt, dtype=float)
    n_blocks = -(-int(n_paths) // BLOCK_SIZE)

    def draw(b):
        count = min(BLOCK_SIZE, n_paths - b * BLOCK_SIZE)
        return _block_rng(seed, b).standard_normal((BLOCK_SIZE, dt.size))[:count]

    if workers > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=int(workers)) as pool:
            parts = list(pool.map(draw, range(n_blocks)))
    else:
        parts = [draw(b) for b in range(n_blocks)]
    z = np.concatenate(parts, axis=0)
    z *= np.sqrt(dt)[None, :]
    return z


def _initial_states(xi, seed, n_paths):
    if callable(xi):
        n_blocks = -(-int(n_paths) // BLOCK_SIZE)
        parts = []
        for b in range(n_blocks):
            count = min(BLOCK_SIZE, n_paths - b * BLOCK_SIZE)
            parts.append(np.asarray(xi(_block_rng(seed, b, 1), BLOCK_SIZE), dtype=float)[:count])
        return np.concatenate(parts)
    x0 = np.asarray(xi, dtype=float)
    if x0.ndim == 0:
        return np.full(n_paths, float(x0))
    if x0.shape != (n_paths,):
        raise DomainError("initial states must be a scalar or one value per path")
    return x0.copy()


def _control_rule(spec, control, n_paths, n_steps, interp):
    if control is None:
        return lambda k, s, x: np.zeros_like(x)
    if isinstance(control, FeedbackStrategy):
        mode = interp or ("nearest" if spec.controls.kind == "finite" else "linear")
        return lambda k, s, x: control.control(s, x, mode)
    if callable(control):
        return lambda k, s, x: np.broadcast_to(np.asarray(control(s, x), dtype=float), x.shape)
    arr = np.asarray(control, dtype=float)
    if arr.ndim == 0:
        return lambda k, s, x: np.full(x.shape, float(arr))
    if arr.shape == (n_steps,):
        return lambda k, s, x: np.full(x.shape, arr[k])
    if arr.shape == (n_paths, n_steps):
        return lambda k, s, x: arr[:, k]
    raise DomainError("open-loop controls must have shape (n_steps,) or (n_paths, n_steps)")


def simulate_sde(spec: ProblemSpec, control, t0: float, xi, times, n_paths: int, seed: int,
                 workers: int = 1, interp: Optional[str] = None) -> SamplePaths:
    """Euler-Maruyama paths of the controlled state on ``times`` (or n steps to the horizon).

    ``control`` may be None (zero), a constant, an open-loop array, a
    FeedbackStrategy or a callable (s, x) -> u.  Feedback strategies are read
    with linear interpolation on box control sets and nearest node on finite ones.
    """
    if np.ndim(times) == 0:
        times = uniform_times(t0, spec.horizon, int(times))
    times = np.asarray(times, dtype=float)
    if abs(times[0] - t0) > 1e-12:
        raise DomainError("time grid must start at t0")
    n_paths = int(n_paths)
    if n_paths < 1:
        raise DomainError("n_paths must be positive")
    n = times.size - 1
    dt = np.diff(times)
    dW = brownian_increments(seed, n_paths, dt, workers)
    X = np.empty((n_paths, n + 1))
    U = np.empty((n_paths, n))
    X[:, 0] = _initial_states(xi, seed, n_paths)
    rule = _control_rule(spec, control, n_paths, n, interp)
    check_box = spec.controls.kind == "box"
    drift, diffusion = spec.dynamics.drift, spec.dynamics.diffusion
    for k in range(n):
        s, x = times[k], X[:, k]
        u = np.asarray(rule(k, s, x), dtype=float)
        if check_box and not np.all(spec.controls.contains(u, atol=1e-9)):
            raise DomainError(f"control outside the control set at time index {k}")
        U[:, k] = u
        nxt = x + drift(s, x, u) * dt[k] + diffusion(s, x, u) * dW[:, k]
        bad = ~np.isfinite(nxt)
        if np.any(bad):
            p = int(np.argmax(bad))
            raise BlowUpError(f"path {p} became non-finite at time index {k + 1}", path=p, time_index=k + 1)
        X[:, k + 1] = nxt
    return SamplePaths(times, X, dW, U, int(seed))


# ---------------------------------------------------------------------------
# regression
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegressionBasis:
    """Monomials of the (optionally standardized) state up to ``degree``."""
    degree: int = 3
    standardize: bool = True

    def __post_init__(self):
        if int(self.degree) < 1:
            raise DomainError("regression degree must be at least 1")

    @property
    def size(self):
        return int(self.degree) + 1


class _Projector:
    """Least-squares projection onto the basis evaluated at one time's states."""

    def __init__(self, x, basis: RegressionBasis, where="", fixed=None):
        P = basis.size
        self.size = P
        mean = float(np.mean(x))
        sd = float(np.std(x))
        if sd <= 1e-12 * (1.0 + abs(mean)):
            # constant regressor (deterministic start): the mean is the projection
            self.mean, self.scale, self.active = mean, 1.0, 1
        else:
            if fixed is not None:
                self.mean, self.scale = fixed
            else:
                self.mean, self.scale = (mean, sd) if basis.standardize else (0.0, 1.0)
            self.active = P
        n = x.size
        while True:
            B = self.design(x)[:, :self.active]
            G = B.T @ B / n
            try:
                ok = np.linalg.cond(G) < COND_LIMIT
                if ok:
                    self.cho = cho_factor(G)
            except LinAlgError:
                ok = False
            if ok:
                break
            if self.active == 1:
                raise DomainError(f"regression at {where} is singular")
            self.active -= 1
            warnings.warn(f"rank-deficient regression at {where}: degree lowered to {self.active - 1}",
                          RuntimeWarning)
        self.n = n

    def design(self, x):
        z = (np.asarray(x, dtype=float) - self.mean) / self.scale
        B = np.zeros((z.size, self.size))
        B[:, 0] = 1.0
        for k in range(1, self.active):
            B[:, k] = B[:, k - 1] * z
        return B

    def solve(self, moments):
        """G^{-1} applied to sample moments B^T V / n (shape (P,) or (P, m))."""
        m = np.asarray(moments, dtype=float)
        out = np.zeros_like(m)
        out[:self.active] = cho_solve(self.cho, m[:self.active])
        return out


class RegressionPlan:
    """Per-time projectors and the P x P operators moving coefficients one step back.

    ``A[r]`` projects a function expressed in the basis at r+1 onto the basis
    at r; ``Zop[r]`` estimates E_r[(V_{r+1} - E_r V_{r+1}) dW_r] / dt for the
    same function.  Only the state at r is used as regressor.
    """

    def __init__(self, paths: SamplePaths, basis: RegressionBasis, standardization=None):
        self.paths, self.basis = paths, basis
        N, P, n = paths.n_steps, basis.size, paths.n_paths
        self.proj = [None] * (N + 1)
        self.A = np.zeros((N, P, P))
        self.Zop = np.zeros((N, P, P))
        dt = paths.dt
        B_next = None
        for r in range(N, -1, -1):
            fixed = None if standardization is None else standardization[r]
            pj = _Projector(paths.X[:, r], basis, f"time index {r}", fixed)
            self.proj[r] = pj
            B = pj.design(paths.X[:, r])
            if r < N:
                A = pj.solve(B.T @ B_next / n)
                resid = B_next - B @ A
                w = paths.dW[:, r] / dt[r]
                self.A[r] = A
                self.Zop[r] = pj.solve(B.T @ (resid * w[:, None]) / n)
            B_next = B

    @property
    def size(self):
        return self.basis.size

    def standardization(self):
        return [(pj.mean, pj.scale) for pj in self.proj]

    def design(self, r):
        return self.proj[r].design(self.paths.X[:, r])

    def project(self, r, B, V):
        return self.proj[r].solve(B.T @ V / self.paths.n_paths)

    def z_project(self, r, B, V, coef=None):
        """Coefficients of E_r[(V - E_r V) dW_r]/dt for pathwise V."""
        coef = self.project(r, B, V) if coef is None else coef
        w = self.paths.dW[:, r] / self.paths.dt[r]
        resid = V - B @ coef
        resid = resid * (w[:, None] if resid.ndim == 2 else w)
        return self.proj[r].solve(B.T @ resid / self.paths.n_paths)


# ---------------------------------------------------------------------------
# backward solvers
# ---------------------------------------------------------------------------

def _as2d(v):
    v = np.asarray(v, dtype=float)
    return v[:, None] if v.ndim == 1 else v


def _step(plan: RegressionPlan, r, B, prev, pathwise, outer, cost: CostSpec, slot, with_generator=True):
    """One backward step for a set of outer times.

    ``prev`` holds pathwise values (n, m) when ``pathwise`` else coefficients
    (P, m) at r+1.  Returns (coefficients at r, z coefficients, pathwise
    generator of the first outer time).
    """
    paths = plan.paths
    n = paths.n_paths
    if pathwise:
        V = _as2d(prev)
        proj = plan.project(r, B, V)
        zc = plan.z_project(r, B, V, proj)
    else:
        proj = plan.A[r] @ prev
        zc = plan.Zop[r] @ prev
    if not with_generator:
        return proj, zc, np.zeros(n)
    dt = paths.dt[r]
    s = paths.times[r]
    x, u = paths.X[:, r], paths.U[:, r]
    sep = cost.separable
    if sep is not None:
        phi = np.asarray(sep.features(s, x, u, slot), dtype=float)        # (K, n)
        wts = np.asarray(sep.weights(outer, s), dtype=float)              # (K, m)
        F = plan.proj[r].solve(B.T @ phi.T / n)                           # (P, K)
        gc = F @ wts
        g_first = wts[:, 0] @ phi
        if sep.z_coefficient is not None:
            beta = np.asarray(sep.z_coefficient(s, x, u), dtype=float) * np.ones(n)
            Mz = plan.proj[r].solve(B.T @ (B * beta[:, None]) / n)
            gc = gc + Mz @ zc
            g_first = g_first + beta * (B @ zc[:, 0])
    else:
        m = outer.size
        gc = np.empty((plan.size, m))
        g_first = None
        for lo in range(0, m, 16):
            hi = min(m, lo + 16)
            Z = B @ zc[:, lo:hi]
            G = cost.generator(outer[None, lo:hi], s, x[:, None], u[:, None], slot[:, None], Z)
            G = np.broadcast_to(np.asarray(G, dtype=float), Z.shape)
            gc[:, lo:hi] = plan.proj[r].solve(B.T @ G / n)
            if lo == 0:
                g_first = G[:, 0].copy()
    return proj + dt * gc, zc, g_first


@dataclass
class AdaptedPair:
    """Solution of a BSVIE on simulated paths.

    Y holds the diagonal value pathwise.  The two-time families y(s, r) and
    Z(s, r) are stored as regression coefficients (outer row, inner time, P);
    ``row_of[i]`` maps outer grid index i to its stored row.
    """
    paths: SamplePaths
    plan: RegressionPlan
    cost: CostSpec
    Y: np.ndarray
    y_coef: np.ndarray
    z_coef: np.ndarray
    row_of: np.ndarray
    realized: np.ndarray
    sweeps: int = 1
    history: list = field(default_factory=list)

    @property
    def times(self):
        return self.paths.times

    def value(self) -> float:
        return float(np.mean(self.Y[:, 0]))

    def y(self, i, r):
        if r == self.paths.n_steps:
            return np.broadcast_to(self.cost.free_term(self.times[i], self.paths.X[:, r]),
                                   (self.paths.n_paths,)).astype(float)
        return self.plan.design(r) @ self.y_coef[self.row_of[i], r]

    def Z(self, i, r):
        if r < i or r >= self.paths.n_steps:
            raise DomainError("Z(s, r) is defined for s <= r < T")
        return self.plan.design(r) @ self.z_coef[self.row_of[i], r]

    def Z_diag(self):
        N = self.paths.n_steps
        out = np.empty((self.paths.n_paths, N))
        for r in range(N):
            out[:, r] = self.Z(r, r)
        return out


def _outer_rows(cost: CostSpec, times):
    N = times.size - 1
    if cost.time_homogeneous_in_t:
        return times[:1].copy(), np.zeros(N + 1, dtype=int)
    return times.copy(), np.arange(N + 1)


def _sweep(plan: RegressionPlan, cost: CostSpec, slot_source=None, with_generator=True):
    """Backward pass over all outer times.  ``slot_source`` None uses the
    freshly computed diagonal (exact fixed point of the explicit scheme)."""
    paths = plan.paths
    times, X = paths.times, paths.X
    N, n, P = paths.n_steps, paths.n_paths, plan.size
    outer, row_of = _outer_rows(cost, times)
    m_rows = outer.size
    y_coef = np.full((m_rows, N + 1, P), np.nan)
    z_coef = np.full((m_rows, N, P), np.nan)
    H = np.broadcast_to(cost.free_term(outer[None, :], X[:, N][:, None]), (n, m_rows)).astype(float)
    Y = np.empty((n, N + 1))
    Y[:, N] = H[:, row_of[N]]
    realized = H[:, 0].copy()
    homogeneous = m_rows == 1
    prev = None
    for r in range(N - 1, -1, -1):
        B = plan.design(r)
        count = 1 if homogeneous else r + 1
        slot = Y[:, r + 1] if slot_source is None else slot_source[:, r + 1]
        if r == N - 1:
            C, zc, g0 = _step(plan, r, B, H[:, :count], True, outer[:count], cost, slot, with_generator)
        else:
            C, zc, g0 = _step(plan, r, B, prev[:, :count], False, outer[:count], cost, slot, with_generator)
        y_coef[:count, r] = C.T
        z_coef[:count, r] = zc.T
        realized += paths.dt[r] * g0
        Y[:, r] = B @ C[:, row_of[r]]
        prev = C
    return Y, y_coef, z_coef, row_of, realized


def solve_bsvie(paths: SamplePaths, cost: CostSpec, basis: Optional[RegressionBasis] = None,
                picard_max: int = 50, tol: float = 1e-8, method: str = "picard",
                plan: Optional[RegressionPlan] = None) -> AdaptedPair:
    """BSVIE along the paths, one parameterized BSDE per outer grid time.

    method "picard" iterates on the diagonal y-slot starting from the chained
    regression of h(r, X_T); method "march" plugs the freshly computed diagonal
    into the slot during a single backward pass, which is the fixed point the
    Picard iteration converges to.
    """
    plan = plan or RegressionPlan(paths, basis or RegressionBasis())
    if method == "march":
        Y, yc, zc, row_of, realized = _sweep(plan, cost)
        return AdaptedPair(paths, plan, cost, Y, yc, zc, row_of, realized, 1, [])
    if method != "picard":
        raise DomainError(f"unknown BSVIE method {method!r}")
    Yk = _sweep(plan, cost, with_generator=False)[0]
    history = []
    for k in range(1, int(picard_max) + 1):
        Y, yc, zc, row_of, realized = _sweep(plan, cost, slot_source=Yk)
        change = float(np.max(np.abs(Y - Yk)))
        history.append(change)
        if change < tol:
            return AdaptedPair(paths, plan, cost, Y, yc, zc, row_of, realized, k, history)
        Yk = Y
    raise NonConvergenceError(f"Picard iteration did not reach tol={tol} in {picard_max} sweeps",
                              history)


def solve_bsde_lsmc(paths: SamplePaths, generator: Callable, terminal: Callable,
                    basis: Optional[RegressionBasis] = None, plan: Optional[RegressionPlan] = None):
    """Backward regression for a BSDE; returns pathwise (Y, Z).

    ``generator(r, x, u, y, z)`` sees the value at the next time in its y-slot;
    ``terminal(x)`` is applied exactly at the last time.
    """
    plan = plan or RegressionPlan(paths, basis or RegressionBasis())
    N, n = paths.n_steps, paths.n_paths
    cost = CostSpec(lambda t, r, x, u, y, z: generator(r, x, u, y, z), lambda t, x: terminal(x))
    Y = np.empty((n, N + 1))
    Z = np.empty((n, N))
    V = np.broadcast_to(np.asarray(terminal(paths.X[:, N]), dtype=float), (n,)).astype(float)
    Y[:, N] = V
    outer = np.zeros(1)
    for r in range(N - 1, -1, -1):
        B = plan.design(r)
        C, zc, _ = _step(plan, r, B, V, True, outer, cost, V)
        V = B @ C[:, 0]
        Y[:, r] = V
        Z[:, r] = B @ zc[:, 0]
    return Y, Z


def _frozen_cost(cost: CostSpec, t: float, until: float) -> CostSpec:
    """Cost whose outer argument is frozen to t for outer times in [t, until]."""
    lim = until + 1e-12

    def remap(s):
        s = np.asarray(s, dtype=float)
        return np.where((s >= t - 1e-12) & (s <= lim), t, s)

    sep = None
    if cost.separable is not None:
        base = cost.separable
        sep = SeparableGenerator(lambda s, r: base.weights(remap(s), r), base.features, base.z_coefficient)
    return CostSpec(lambda s, r, x, u, y, z: cost.generator(remap(s), r, x, u, y, z),
                    lambda s, x: cost.free_term(remap(s), x),
                    cost.time_homogeneous_in_t, sep)


def solve_modified_bsvie(paths: SamplePaths, cost: CostSpec, t: float, eps: float,
                         basis: Optional[RegressionBasis] = None, base: Optional[AdaptedPair] = None,
                         full: bool = False, plan: Optional[RegressionPlan] = None) -> AdaptedPair:
    """BSVIE with the outer argument frozen to t for outer times in [t, t + eps].

    The default fast path copies the unmodified solution beyond t + eps and
    solves one BSDE on [t, t + eps] (outer time t, y-slot its own value).
    ``full=True`` solves the whole modified equation instead.
    """
    times = paths.times
    if t + eps > times[-1] + 1e-12 or eps <= 0:
        raise DomainError("need 0 < eps and t + eps <= T")
    i0 = time_index(times, t, "t")
    ie = time_index(times, t + eps, "t + eps")
    if base is not None:
        plan = base.plan
    plan = plan or RegressionPlan(paths, basis or RegressionBasis())
    if full:
        return solve_bsvie(paths, _frozen_cost(cost, t, t + eps), method="march", plan=plan)
    base = base or solve_bsvie(paths, cost, method="march", plan=plan)
    if cost.time_homogeneous_in_t:
        return base
    N = paths.n_steps
    Y = base.Y.copy()
    yc, zc = base.y_coef.copy(), base.z_coef.copy()
    outer = np.array([times[i0]])
    if ie == N:
        prev = np.broadcast_to(cost.free_term(times[i0], paths.X[:, N]), (paths.n_paths,)).astype(float)
        pathwise = True
    else:
        prev = base.y_coef[base.row_of[i0], ie][:, None]
        pathwise = False
    # outer time frozen at t for every row in [i0, ie]; beyond ie row t equals the base row
    for i in range(i0, ie + 1):
        yc[i, ie:] = base.y_coef[base.row_of[i0], ie:]
        zc[i, ie:] = base.z_coef[base.row_of[i0], ie:]
    if ie < N:
        Y[:, ie] = plan.design(ie) @ prev[:, 0]
    else:
        Y[:, ie] = prev
    realized = None
    for r in range(ie - 1, i0 - 1, -1):
        B = plan.design(r)
        C, z, _ = _step(plan, r, B, prev, pathwise, outer, cost, Y[:, r + 1])
        pathwise = False
        prev = C
        Y[:, r] = B @ C[:, 0]
        for i in range(i0, r + 1):
            yc[i, r] = C[:, 0]
            zc[i, r] = z[:, 0]
    if i0 == 0:
        realized = _realized_cost(paths, cost, Y, yc, zc, base.row_of, plan)
    return AdaptedPair(paths, plan, cost, Y, yc, zc, base.row_of, realized, 1, [])


def _realized_cost(paths, cost, Y, yc, zc, row_of, plan):
    """h(t0, X_T) + sum g(t0, r, ...) dt along each path for the first outer time."""
    N = paths.n_steps
    t0 = paths.times[0]
    out = np.broadcast_to(cost.free_term(t0, paths.X[:, N]), (paths.n_paths,)).astype(float).copy()
    for r in range(N):
        z = plan.design(r) @ zc[row_of[0], r]
        g = cost.generator(t0, paths.times[r], paths.X[:, r], paths.U[:, r], Y[:, r + 1], z)
        out += paths.dt[r] * np.broadcast_to(g, out.shape)
    return out


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------

@dataclass
class EpsilonStudy:
    eps: list
    gaps: list
    slope: object          # float, or "vacuous" when every gap vanishes
    value: float
    monotone: bool

    def to_csv(self, path):
        write_rows(path, ["eps", "gap"], zip(self.eps, self.gaps))


def epsilon_gap_study(spec: ProblemSpec, policy, t: float, xi, eps_list: Sequence[float],
                      n_steps: int = 80, n_paths: int = 100_000, seed: int = 0,
                      basis: Optional[RegressionBasis] = None, workers: int = 1,
                      full: bool = False, vacuous_tol: float = 1e-12) -> EpsilonStudy:
    """|Y_eps(t) - Y(t)| for each eps on one shared set of paths."""
    eps_list = [float(e) for e in eps_list]
    if not eps_list:
        raise DomainError("eps list is empty")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise DomainError("eps list must be strictly decreasing")
    if eps_list[-1] <= 0 or t + eps_list[0] > spec.horizon + 1e-12:
        raise DomainError("each eps must lie in (0, T - t]")
    times = uniform_times(t, spec.horizon, n_steps)
    paths = simulate_sde(spec, policy, t, xi, times, n_paths, seed, workers)
    plan = RegressionPlan(paths, basis or RegressionBasis())
    base = solve_bsvie(paths, spec.cost, method="march", plan=plan)
    y0 = base.value()
    gaps = []
    for e in eps_list:
        mod = solve_modified_bsvie(paths, spec.cost, t, e, base=base, full=full)
        gaps.append(abs(mod.value() - y0))
    scale = vacuous_tol * (1.0 + abs(y0))
    if max(gaps) <= scale:
        slope = "vacuous"
    else:
        slope = loglog_slope(eps_list, gaps)
    monotone = all(gaps[k] * 1.5 >= gaps[k + 1] for k in range(len(gaps) - 1))
    return EpsilonStudy(eps_list, gaps, slope, y0, monotone)


@dataclass
class CostEstimate:
    value: float
    std_error: float
    realized: np.ndarray
    pair: AdaptedPair

    @property
    def paths(self):
        return self.pair.paths


def evaluate_cost(spec: ProblemSpec, t: float, xi, policy, n_steps: int = 100,
                  n_paths: int = 100_000, seed: int = 0, basis: Optional[RegressionBasis] = None,
                  workers: int = 1, interp: Optional[str] = None, method: str = "march") -> CostEstimate:
    """Recursive cost J(t, xi; policy) = Y(t) with a Monte Carlo standard error.

    The pathwise realized cost h + sum g dt has the regression value as its
    sample mean (the basis contains constants), so its spread gives the error.
    """
    times = uniform_times(t, spec.horizon, n_steps) if np.ndim(n_steps) == 0 else np.asarray(n_steps)
    paths = simulate_sde(spec, policy, t, xi, times, n_paths, seed, workers, interp)
    pair = solve_bsvie(paths, spec.cost, basis, method=method)
    realized = pair.realized
    se = float(np.std(realized, ddof=1) / math.sqrt(paths.n_paths)) if paths.n_paths > 1 else float("nan")
    return CostEstimate(pair.value(), se, realized, pair)


@dataclass
class FeynmanKacResiduals:
    y_residual: float
    z_residual: float
    pair: AdaptedPair


def check_feynman_kac(theta: ThetaField, strategy, spec: ProblemSpec, xi, n_paths: int = 100_000,
                      seed: int = 0, basis: Optional[RegressionBasis] = None, workers: int = 1,
                      n_pairs: int = 64, interp: Optional[str] = None,
                      method: str = "march") -> FeynmanKacResiduals:
    """Compare the Monte Carlo BSVIE solution with the decoupling field along paths.

    y_residual is the RMS over paths and grid times of Y(s) - Theta(s, s, X(s));
    z_residual the RMS over sampled (s, r) pairs of Z(s, r) - Theta_x(s, r, X(r)) sigma.
    """
    times = theta.times
    paths = simulate_sde(spec, strategy, times[0], xi, times, n_paths, seed, workers, interp)
    pair = solve_bsvie(paths, spec.cost, basis, method=method)
    space = theta.space
    N = paths.n_steps
    sq = 0.0
    for j in range(N + 1):
        d = pair.Y[:, j] - space.interpolate(theta.data[j, j], paths.X[:, j])
        sq += float(np.mean(d * d))
    y_res = math.sqrt(sq / (N + 1))
    tri = [(i, r) for r in range(N) for i in range(r + 1)]
    if len(tri) > n_pairs:
        rng = _block_rng(seed, 0, 2)
        pick = np.sort(rng.choice(len(tri), size=n_pairs, replace=False))
        tri = [tri[k] for k in pick]
    sq = 0.0
    for i, r in tri:
        x = paths.X[:, r]
        tx, _ = derivatives(theta.data[i, r], space.dx)
        sig = spec.dynamics.diffusion(times[r], x, paths.U[:, r])
        d = pair.Z(i, r) - space.interpolate(tx, x) * sig
        sq += float(np.mean(d * d))
    z_res = math.sqrt(sq / len(tri))
    return FeynmanKacResiduals(y_res, z_res, pair)


@dataclass
class ProbeTable:
    rows: list            # dicts: eps, control, diff, std_error
    negative_parts: dict  # eps -> max(0, -min over controls of diff)
    exponent: float       # fitted exponent of the negative parts; inf if all vanish, nan if one does not
    base_value: float
    base_std_error: float

    def to_csv(self, path):
        write_rows(path, ["eps", "control", "diff", "std_error"],
                   ([r["eps"], r["control"], r["diff"], r["std_error"]] for r in self.rows))


class _Switched:
    """Constant control on [t, t + eps), then the feedback strategy."""

    def __init__(self, u, until, strategy, mode):
        self.u, self.until, self.strategy, self.mode = u, until, strategy, mode

    def __call__(self, s, x):
        if s < self.until - 1e-12:
            if self.u == "psi":
                return self.strategy.control(s, x, "nearest")
            return np.full(np.shape(x), float(self.u))
        return self.strategy.control(s, x, self.mode)


def local_optimality_probe(spec: ProblemSpec, strategy: FeedbackStrategy, t: float, xi,
                           eps_list: Sequence[float], perturbations: Sequence,
                           n_steps: int = 80, n_paths: int = 100_000, seed: int = 0,
                           basis: Optional[RegressionBasis] = None, workers: int = 1,
                           interp: Optional[str] = None) -> ProbeTable:
    """Cost change from playing a constant control on [t, t + eps) before the strategy.

    Every run shares the Brownian increments of the baseline (common random
    numbers).  A perturbation given as "psi" plays the strategy itself read at
    the nearest node on the initial window.
    """
    mode = interp or ("nearest" if spec.controls.kind == "finite" else "linear")
    times = uniform_times(t, spec.horizon, n_steps)
    base = evaluate_cost(spec, t, xi, _Switched("psi", t, strategy, mode), times, n_paths, seed,
                         basis, workers)
    rows = []
    neg = {}
    for e in eps_list:
        e = float(e)
        time_index(times, t + e, "t + eps")
        worst = 0.0
        for u in perturbations:
            if u != "psi" and not np.all(spec.controls.contains(np.asarray([float(u)]), atol=1e-9)):
                raise DomainError(f"perturbation {u} is not in the control set")
            est = evaluate_cost(spec, t, xi, _Switched(u, t + e, strategy, mode), times, n_paths, seed,
                                basis, workers)
            diff = est.value - base.value
            se = float(np.std(est.realized - base.realized, ddof=1) / math.sqrt(n_paths))
            rows.append({"eps": e, "control": u if u == "psi" else float(u), "diff": diff, "std_error": se})
            worst = min(worst, diff)
        neg[e] = max(0.0, -worst)
    eps_sorted = sorted(neg)
    if all(neg[e] == 0.0 for e in eps_sorted):
        # no perturbation improved on the strategy: the bound holds for every exponent
        exponent = math.inf
    else:
        exponent = loglog_slope(eps_sorted, [neg[e] for e in eps_sorted])
    return ProbeTable(rows, neg, exponent, base.value, base.std_error)
