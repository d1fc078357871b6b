"""Coupled forward SDE and BSVIE whose generator reads the diagonal Z(r, r).

Two routes are provided.  The decoupling route solves a two-time PDE for
Theta and reads (Y, Z) off it along simulated paths.  Under the separable
kernel structure the scaling route rescales the equation by S(t), splits off
an auxiliary BSDE (Yhat, Zhat) and solves the resulting forward-backward
system by damped Picard iteration with least-squares regression.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (BlowUpError, ConfigError, DomainError, NonConvergenceError,
                     UnsupportedKernelError)
from .grids import ThetaField, derivatives, uniform_times, write_rows
from .model_core import DiscountKernel, KernelFactorization, factorize_kernel
from .pde_solvers import PdeConfig, PdeGrid, check_cfl, march_two_time
from .stochastic import RegressionBasis, RegressionPlan, SamplePaths, brownian_increments

SIGMA_COND_LIMIT = 1e6


@dataclass(frozen=True)
class SeparableStructure:
    """h(t, x) = mu(t, T) h0(x) and gbar = nu(t, s) g0(s, x, y, zeta) + z alpha(s)."""
    kernel: DiscountKernel
    g0: Callable        # (r, x, y, zeta)
    h0: Callable        # (x)
    alpha: Callable     # (r) -> float
    factorization: KernelFactorization


@dataclass(frozen=True)
class DiagonalProblem:
    drift: Callable          # (r, x, y, zeta)
    diffusion: Callable      # (r, x)
    generator: Callable      # (t, r, x, y, z, zeta)
    free_term: Callable      # (t, x)
    horizon: float
    structure: Optional[SeparableStructure] = None
    name: str = ""
    params: dict = field(default_factory=dict)

    @classmethod
    def separable(cls, drift, diffusion, kernel: DiscountKernel, g0, h0, alpha, horizon,
                  name="", params=None):
        fac = factorize_kernel(kernel, horizon)
        T = float(horizon)

        def generator(t, r, x, y, z, zeta):
            return kernel.nu(t, r) * g0(r, x, y, zeta) + z * alpha(r)

        def free_term(t, x):
            return kernel.mu(t, T) * h0(x)

        return cls(drift, diffusion, generator, free_term, T,
                   SeparableStructure(kernel, g0, h0, alpha, fac), name, dict(params or {}))

    @property
    def uniqueness_guaranteed(self):
        return self.structure is not None


def validate_diagonal(problem: DiagonalProblem, x_lo, x_hi, n_samples=200, seed=0):
    """Sampled checks: sigma invertible and well conditioned, the separable
    identities reproduce the generator and free term to 1e-10."""
    rng = np.random.default_rng(seed)
    T = problem.horizon
    r = rng.uniform(0, T, n_samples)
    t = r * rng.uniform(0, 1, n_samples)
    x = rng.uniform(x_lo, x_hi, n_samples)
    sig = np.broadcast_to(np.asarray(problem.diffusion(r, x), dtype=float), x.shape)
    smallest = float(np.min(np.abs(sig)))
    cond = math.inf if smallest == 0 else 1.0
    if cond > SIGMA_COND_LIMIT:
        raise DomainError("diffusion is not invertible on the sampled nodes")
    report = {"sigma_min": smallest, "sigma_sq_max": float(np.max(sig * sig)), "sigma_condition": cond}
    st = problem.structure
    if st is not None:
        y = rng.normal(size=n_samples)
        z = rng.normal(size=n_samples)
        zeta = rng.normal(size=n_samples)
        g_full = problem.generator(t, r, x, y, z, zeta)
        g_sep = st.kernel.nu(t, r) * st.g0(r, x, y, zeta) + z * st.alpha(r)
        h_full = problem.free_term(t, x)
        h_sep = st.kernel.mu(t, T) * st.h0(x)
        err = float(max(np.max(np.abs(g_full - g_sep)), np.max(np.abs(h_full - h_sep))))
        if err > 1e-10:
            raise DomainError(f"separable structure does not reproduce the coefficients (error {err:.3g})")
        report["structure_error"] = err
        report["identity_residuals"] = list(st.factorization.identity_residuals(np.linspace(0, T, 50)))
    return report


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

H6_DEFAULTS = dict(sigma=0.4, r=1.0, q=1.0, G=1.0, kappa=0.3, alpha=0.2, horizon=1.0)

H6_KERNELS = {
    "heterogeneous": lambda: DiscountKernel.heterogeneous(0.2, 1.5),
    "exponential": lambda: DiscountKernel.exponential(0.5),
    "quasi_exponential": lambda: DiscountKernel.quasi_exponential(0.5, 1.0),
    "convex_combination": lambda: DiscountKernel.convex_combination(0.5, 0.2, 2.0),
}


def h6_problem(kind: str = "heterogeneous", **overrides) -> DiagonalProblem:
    """LQ-type separable system: the drift is the LQ feedback u = -zeta/(sigma r).

    g0 = q x^2/2 + zeta^2/(2 sigma^2 r) - kappa y, h0 = G x^2/2, alpha constant.
    """
    if kind not in H6_KERNELS:
        raise ConfigError(f"unknown kernel kind {kind!r}; known: {sorted(H6_KERNELS)}")
    p = dict(H6_DEFAULTS)
    unknown = set(overrides) - set(p)
    if unknown:
        raise ConfigError(f"unknown parameters: {sorted(unknown)}")
    p.update(overrides)
    sigma, rc, q, G, kappa, a = p["sigma"], p["r"], p["q"], p["G"], p["kappa"], p["alpha"]

    def drift(r, x, y, zeta):
        return -zeta / (sigma * rc)

    def diffusion(r, x):
        return sigma + 0.0 * np.asarray(x, dtype=float)

    def g0(r, x, y, zeta):
        return 0.5 * q * x * x + zeta * zeta / (2 * sigma * sigma * rc) - kappa * y

    def h0(x):
        return 0.5 * G * x * x

    def alpha(r):
        return a

    kernel = H6_KERNELS[kind]()
    return DiagonalProblem.separable(drift, diffusion, kernel, g0, h0, alpha, p["horizon"],
                                     name=f"h6-{kind.replace('_', '-')}",
                                     params=dict(p, kernel=kernel.describe()))


def trivial_problem(horizon=1.0) -> DiagonalProblem:
    """gbar = 0, h = x, no drift, unit diffusion: Theta(t, s, x) = x."""
    return DiagonalProblem(lambda r, x, y, zeta: 0.0 * x,
                           lambda r, x: 1.0 + 0.0 * np.asarray(x, dtype=float),
                           lambda t, r, x, y, z, zeta: 0.0 * (x + t),
                           lambda t, x: x + 0.0 * t, horizon, name="trivial")


# ---------------------------------------------------------------------------
# decoupling route
# ---------------------------------------------------------------------------

def solve_decoupling_pde(problem: DiagonalProblem, grid: PdeGrid,
                         config: Optional[PdeConfig] = None) -> ThetaField:
    """Two-time decoupling field; diagonal arguments enter lagged by one step."""
    config = config or PdeConfig()
    times, nodes, dx = grid.times, grid.space.nodes, grid.space.dx
    sig_all = np.asarray([np.broadcast_to(problem.diffusion(s, nodes), nodes.shape) for s in times])
    check_cfl(float(np.max(sig_all ** 2)), grid, config)
    n = times.size
    theta = ThetaField(times, grid.space)
    theta.data[:, n - 1] = np.broadcast_to(problem.free_term(times[:, None], nodes[None, :]), (n, nodes.size))

    def layer(j, D, rows, R, Rx, Rxx):
        s = times[j + 1]
        sig = sig_all[j + 1]
        Dx, _ = derivatives(D, dx)
        zeta = Dx * sig
        b = problem.drift(s, nodes, D, zeta)
        g = problem.generator(times[rows][:, None], s, nodes, D, Rx * sig, zeta)
        return 0.5 * sig * sig, 0.5 * sig * sig * Rxx + Rx * b + g

    march_two_time(theta, layer, config, what="decoupling PDE")
    return theta


@dataclass
class DiagonalSolution:
    route: str
    times: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    Z_diag: np.ndarray
    seed: int
    z_field: Callable = None             # (i, r) -> pathwise Z(t_i, t_r)
    residuals: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)
    internals: dict = field(default_factory=dict)   # not serialized

    @property
    def n_paths(self):
        return self.X.shape[0]

    def Z(self, i, r):
        return self.z_field(i, r)

    def to_csv(self, path, max_paths=100):
        """Rows (path, time, X, Y, Z_diag) for the first ``max_paths`` paths."""
        N = self.times.size - 1
        m = min(max_paths, self.n_paths)
        rows = ((p, self.times[k], self.X[p, k], self.Y[p, k],
                 self.Z_diag[p, k] if k < N else "")
                for p in range(m) for k in range(N + 1))
        write_rows(path, ["path", "time", "X", "Y", "Z_diag"], rows)

    def summary(self):
        return {"route": self.route, "seed": self.seed, "n_paths": self.n_paths,
                "n_steps": int(self.times.size - 1), "residuals": self.residuals, **self.info}

    def write_json(self, path, extra=None):
        with open(path, "w") as fh:
            json.dump({**self.summary(), **(extra or {})}, fh, indent=2, sort_keys=True)


def _bsvie_residual(problem, sol: DiagonalSolution, dW, n_check):
    """Residual of the integral equation at sampled outer times.

    Returns (weak, pathwise): the RMS over sampled s of the path-mean residual
    and the RMS over sampled s and paths.  The pathwise figure contains the
    O(sqrt(ds)) strong error of the Euler sums.
    """
    times = sol.times
    N = times.size - 1
    dt = np.diff(times)
    idx = np.unique(np.linspace(0, N - 1, min(n_check, N)).astype(int))
    weak = path = 0.0
    X, Y = sol.X, sol.Y
    for i in idx:
        res = Y[:, i] - problem.free_term(times[i], X[:, N])
        for r in range(i, N):
            z = sol.Z(i, r)
            g = problem.generator(times[i], times[r], X[:, r], Y[:, r], z, sol.Z_diag[:, r])
            res = res - g * dt[r] + z * dW[:, r]
        weak += float(np.mean(res)) ** 2
        path += float(np.mean(res * res))
    return math.sqrt(weak / idx.size), math.sqrt(path / idx.size)


def solve_coupled_fsde_bsvie(problem: DiagonalProblem, theta: ThetaField, xi, n_paths: int,
                             seed: int, workers: int = 1, n_check: int = 16) -> DiagonalSolution:
    """Simulate the forward equation driven by the decoupling field and read off (Y, Z)."""
    times = theta.times
    N = times.size - 1
    dt = np.diff(times)
    space = theta.space
    dW = brownian_increments(seed, n_paths, dt, workers)
    X = np.empty((n_paths, N + 1))
    Y = np.empty((n_paths, N + 1))
    Zd = np.empty((n_paths, N))
    X[:, 0] = xi
    grad = {}

    def theta_x(i, r):
        key = (i, r)
        if key not in grad:
            grad[key] = derivatives(theta.data[i, r], space.dx)[0]
        return grad[key]

    for r in range(N):
        x = X[:, r]
        y = space.interpolate(theta.data[r, r], x)
        sig = np.broadcast_to(problem.diffusion(times[r], x), x.shape)
        zeta = space.interpolate(theta_x(r, r), x) * sig
        Y[:, r] = y
        Zd[:, r] = zeta
        nxt = x + problem.drift(times[r], x, y, zeta) * dt[r] + sig * dW[:, r]
        if not np.all(np.isfinite(nxt)):
            p = int(np.argmax(~np.isfinite(nxt)))
            raise BlowUpError(f"path {p} became non-finite at time index {r + 1}", path=p, time_index=r + 1)
        X[:, r + 1] = nxt
    Y[:, N] = space.interpolate(theta.data[N, N], X[:, N])
    grad.clear()

    def z_field(i, r):
        if r < i or r >= N:
            raise DomainError("Z(t, s) is defined for t <= s < T")
        x = X[:, r]
        sig = np.broadcast_to(problem.diffusion(times[r], x), x.shape)
        return space.interpolate(derivatives(theta.data[i, r], space.dx)[0], x) * sig

    sol = DiagonalSolution("pde", times, X, Y, Zd, int(seed), z_field,
                           info={"uniqueness_guaranteed": problem.uniqueness_guaranteed})
    weak, pathwise = _bsvie_residual(problem, sol, dW, n_check)
    sol.residuals = {"bsvie_weak": weak, "bsvie_pathwise": pathwise}
    return sol


# ---------------------------------------------------------------------------
# scaling / forward-backward route
# ---------------------------------------------------------------------------

def _design(x, mean, scale, P):
    z = (x - mean) / scale
    B = np.empty((x.size, P))
    B[:, 0] = 1.0
    for k in range(1, P):
        B[:, k] = B[:, k - 1] * z
    return B


def _backward(problem, plan: RegressionPlan, tau, zero_auxiliary):
    """Joint backward pass for (ytilde(tau, .), ztilde) and (Yhat, Zhat)."""
    st = problem.structure
    fac = st.factorization
    paths = plan.paths
    times, X = paths.times, paths.X
    N, n, P = paths.n_steps, paths.n_paths, plan.size
    T = problem.horizon
    S = fac.scale
    aux = 0.0 if zero_auxiliary else 1.0
    hT = np.asarray(st.h0(X[:, N]), dtype=float) * np.ones(n)
    V = np.stack([S(tau) * st.kernel.mu(tau, T) * hT, fac.terminal_coeff * hT], axis=1)
    Y = np.empty((n, N + 1))
    Y[:, N] = (V[:, 0] + fac.mixing(times[N], tau) * (aux * V[:, 1])) / S(times[N])
    Zd = np.empty((n, N))
    yc = np.zeros((N, P, 2))
    zc_all = np.zeros((N, P, 2))
    y_fn = np.zeros((N, P))
    z_fn = np.zeros((N, P))
    prev = None
    for r in range(N - 1, -1, -1):
        B = plan.design(r)
        if r == N - 1:
            proj = plan.project(r, B, V)
            zc = plan.z_project(r, B, V, proj)
        else:
            proj = plan.A[r] @ prev
            zc = plan.Zop[r] @ prev
        m = fac.mixing(times[r], tau)
        zeta_c = (zc[:, 0] + m * (aux * zc[:, 1])) / S(times[r])
        zeta = B @ zeta_c
        g = np.asarray(st.g0(times[r], X[:, r], Y[:, r + 1], zeta), dtype=float) * np.ones(n)
        a = st.alpha(times[r])
        G = np.stack([S(tau) * st.kernel.nu(tau, times[r]) * g + (B @ zc[:, 0]) * a,
                      fac.running_coeff(times[r]) * g + (B @ zc[:, 1]) * a], axis=1)
        C = proj + paths.dt[r] * plan.project(r, B, G)
        y_c = (C[:, 0] + m * (aux * C[:, 1])) / S(times[r])
        Y[:, r] = B @ y_c
        Zd[:, r] = zeta
        yc[r], zc_all[r] = C, zc
        y_fn[r], z_fn[r] = y_c, zeta_c
        prev = C
    return Y, Zd, yc, zc_all, y_fn, z_fn


def solve_h6_fbsde_reduction(problem: DiagonalProblem, xi, tau: float, n_steps: int, n_paths: int,
                             seed: int, workers: int = 1, basis: Optional[RegressionBasis] = None,
                             damping: float = 0.5, max_sweeps: int = 100, tol: float = 1e-6,
                             zero_auxiliary: bool = False, n_check: int = 4) -> DiagonalSolution:
    """Damped Picard iteration on the forward-backward system of the scaling route.

    Each sweep simulates X with the current decoupling functions for Y(r) and
    Z(r, r) (polynomials in the state), runs the joint backward regression and
    blends the new functions in with weight ``damping``.  The Brownian
    increments are shared by all sweeps.  ``zero_auxiliary`` replaces the
    auxiliary pair by zeros where it enters the solution.
    """
    if problem.structure is None:
        raise UnsupportedKernelError("the scaling route needs the separable kernel structure")
    if not 0 < damping <= 1:
        raise ConfigError("damping must lie in (0, 1]")
    # quadratic decoupling: cubic terms feed back through the zeta^2 cost and
    # destabilise the explicit backward step on fine time grids
    basis = basis or RegressionBasis(degree=2)
    P = basis.size
    times = uniform_times(tau, problem.horizon, n_steps)
    N = times.size - 1
    dt = np.diff(times)
    dW = brownian_increments(seed, n_paths, dt, workers)
    y_fn = np.zeros((N, P))
    z_fn = np.zeros((N, P))
    stdz, span = None, None
    history = []
    X = np.empty((n_paths, N + 1))
    for sweep in range(int(max_sweeps)):
        X[:, 0] = xi
        for r in range(N):
            x = X[:, r]
            if stdz is None:
                y = np.zeros_like(x)
                zeta = np.zeros_like(x)
            else:
                # decoupling polynomials are not extrapolated beyond the first sweep's range
                B = _design(np.clip(x, *span[r]), *stdz[r], P)
                y, zeta = B @ y_fn[r], B @ z_fn[r]
            sig = np.broadcast_to(problem.diffusion(times[r], x), x.shape)
            nxt = x + problem.drift(times[r], x, y, zeta) * dt[r] + sig * dW[:, r]
            if not np.all(np.isfinite(nxt)):
                p = int(np.argmax(~np.isfinite(nxt)))
                raise BlowUpError(f"path {p} became non-finite at time index {r + 1}", path=p,
                                  time_index=r + 1)
            X[:, r + 1] = nxt
        paths = SamplePaths(times, X.copy(), dW, np.zeros((n_paths, N)), int(seed))
        plan = RegressionPlan(paths, basis, standardization=stdz)
        if stdz is None:
            stdz = plan.standardization()
            span = [(float(X[:, r].min()), float(X[:, r].max())) for r in range(N)]
        Y, Zd, yc, zc, new_y, new_z = _backward(problem, plan, tau, zero_auxiliary)
        if sweep == 0:
            blended_y, blended_z = new_y, new_z
        else:
            blended_y = (1 - damping) * y_fn + damping * new_y
            blended_z = (1 - damping) * z_fn + damping * new_z
        change = 0.0
        for r in range(N):
            B = plan.design(r)
            change = max(change, float(np.max(np.abs(B @ (blended_y[r] - y_fn[r])))),
                         float(np.max(np.abs(B @ (blended_z[r] - z_fn[r])))))
        history.append(change)
        y_fn, z_fn = blended_y, blended_z
        if sweep > 0 and change < tol:
            break
    else:
        raise NonConvergenceError(f"forward-backward iteration did not reach tol={tol}", history)

    st = problem.structure
    fac = st.factorization
    aux = 0.0 if zero_auxiliary else 1.0

    def z_field(i, r):
        if r < i or r >= N:
            raise DomainError("Z(t, s) is defined for t <= s < T")
        B = plan.design(r)
        m = fac.mixing(times[i], tau)
        return B @ ((zc[r][:, 0] + m * (aux * zc[r][:, 1])) / fac.scale(times[i]))

    sol = DiagonalSolution("fbsde", times, paths.X, Y, Zd, int(seed), z_field,
                           info={"sweeps": len(history), "history": history,
                                 "uniqueness_guaranteed": True, "damping": damping})
    sol.residuals = {"bsvie_weak": _bsvie_residual(problem, sol, dW, 16)[0],
                     "relationship": relationship_residual(problem, sol, plan, yc, tau, n_check)}
    sol.internals.update(plan=plan, y_coef=yc, z_coef=zc)
    return sol


def relationship_residual(problem, sol: DiagonalSolution, plan: RegressionPlan, yc, tau, n_check=4):
    """Solve the scaled BSDE for ytilde(s, .) at sampled s independently and
    check ytilde(s, s) - ytilde(tau, s) = m(s, tau) Yhat(s) along paths (RMS)."""
    st = problem.structure
    fac = st.factorization
    paths = plan.paths
    times, X = paths.times, paths.X
    N, n = paths.n_steps, paths.n_paths
    T = problem.horizon
    hT = np.asarray(st.h0(X[:, N]), dtype=float) * np.ones(n)
    idx = np.unique(np.linspace(1, N - 1, min(n_check, N - 1)).astype(int)) if N > 1 else np.array([0])
    worst = 0.0
    for i in idx:
        s = times[i]
        V = fac.scale(s) * st.kernel.mu(s, T) * hT
        prev = None
        for r in range(N - 1, i - 1, -1):
            B = plan.design(r)
            if r == N - 1:
                proj = plan.project(r, B, V)
                zc = plan.z_project(r, B, V, proj)
            else:
                proj = plan.A[r] @ prev
                zc = plan.Zop[r] @ prev
            g = np.asarray(st.g0(times[r], X[:, r], sol.Y[:, r + 1], sol.Z_diag[:, r]), dtype=float) * np.ones(n)
            G = fac.scale(s) * st.kernel.nu(s, times[r]) * g + (B @ zc) * st.alpha(times[r])
            prev = proj + paths.dt[r] * plan.project(r, B, G)
        B = plan.design(i)
        lhs = B @ (prev - yc[i][:, 0])
        rhs = fac.mixing(s, tau) * (B @ yc[i][:, 1])
        worst = max(worst, math.sqrt(float(np.mean((lhs - rhs) ** 2))))
    return worst


def cross_validate_diagonal(sol_pde: DiagonalSolution, sol_fbsde: DiagonalSolution):
    """RMS gaps (y_gap, z_diag_gap, x_gap) between two routes on shared noise."""
    if (sol_pde.times.shape != sol_fbsde.times.shape
            or not np.allclose(sol_pde.times, sol_fbsde.times, rtol=0, atol=1e-12)):
        raise DomainError("solutions live on different time grids")
    if sol_pde.n_paths != sol_fbsde.n_paths or sol_pde.seed != sol_fbsde.seed:
        raise DomainError("solutions do not share paths and seed")

    def rms(a, b):
        return math.sqrt(float(np.mean((a - b) ** 2)))

    return (rms(sol_pde.Y, sol_fbsde.Y), rms(sol_pde.Z_diag, sol_fbsde.Z_diag),
            rms(sol_pde.X, sol_fbsde.X))
