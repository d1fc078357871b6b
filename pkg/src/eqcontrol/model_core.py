"""Problem data, discount kernels, the Hamiltonian and its pointwise minimization.

All coefficient callables are expected to broadcast over numpy arrays.  For the
scalar state case (n = d = 1) every argument may be an array and the return
value has the broadcast shape.  The general-dimension single point form of
:func:`eval_hamiltonian` accepts drifts of shape (n,) and diffusions of shape
(n, d).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (DomainError, EvaluationError, MinimizationError,
                     UnsupportedKernelError)

_TIME_TOL = 1e-12

KERNEL_KINDS = ("exponential", "hyperbolic", "heterogeneous",
                "convex_combination", "quasi_exponential")


# ---------------------------------------------------------------------------
# discount kernels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscountKernel:
    """Terminal weight mu(t, T) and running weight nu(t, r) of a cost.

    ``rate1`` / ``rate2`` are the two decay rates (``rate2`` unused for the
    single-rate kinds) and ``alpha`` the mixing or polynomial weight.
    """
    kind: str
    rate1: float
    rate2: float = 0.0
    alpha: float = 0.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise DomainError(f"unknown kernel kind {self.kind!r}")
        if self.rate1 < 0 or self.rate2 < 0:
            raise DomainError("kernel rates must be nonnegative")
        if self.kind == "convex_combination" and not 0.0 < self.alpha < 1.0:
            raise DomainError("convex_combination weight must lie in (0, 1)")
        if self.kind == "quasi_exponential" and self.alpha < 0:
            raise DomainError("quasi_exponential weight must be nonnegative")

    @classmethod
    def exponential(cls, rate):
        return cls("exponential", float(rate))

    @classmethod
    def hyperbolic(cls, rate_terminal, rate_running):
        return cls("hyperbolic", float(rate_terminal), float(rate_running))

    @classmethod
    def heterogeneous(cls, rate_terminal, rate_running):
        return cls("heterogeneous", float(rate_terminal), float(rate_running))

    @classmethod
    def convex_combination(cls, alpha, rate_a, rate_b):
        return cls("convex_combination", float(rate_a), float(rate_b), float(alpha))

    @classmethod
    def quasi_exponential(cls, alpha, rate):
        return cls("quasi_exponential", float(rate), 0.0, float(alpha))

    def mu(self, t, T):
        return eval_discount(self, "mu", t, T)

    def nu(self, t, r):
        return eval_discount(self, "nu", t, r)

    def describe(self):
        return {"kind": self.kind, "rate1": self.rate1, "rate2": self.rate2,
                "alpha": self.alpha}


def eval_discount(kernel: DiscountKernel, which: str, t, r):
    """Evaluate mu (``which='mu'``, r is the horizon) or nu at (t, r), t <= r."""
    if which not in ("mu", "nu"):
        raise DomainError(f"which must be 'mu' or 'nu', got {which!r}")
    t_arr = np.asarray(t, dtype=float)
    r_arr = np.asarray(r, dtype=float)
    lag = r_arr - t_arr
    if np.any(lag < -_TIME_TOL):
        raise DomainError(f"discount needs t <= r, got t={t!r}, r={r!r}")
    lag = np.maximum(lag, 0.0)
    k = kernel.kind
    if k == "exponential":
        out = np.exp(-kernel.rate1 * lag)
    elif k == "hyperbolic":
        rate = kernel.rate1 if which == "mu" else kernel.rate2
        out = 1.0 / (1.0 + rate * lag)
    elif k == "heterogeneous":
        rate = kernel.rate1 if which == "mu" else kernel.rate2
        out = np.exp(-rate * lag)
    elif k == "convex_combination":
        a = kernel.alpha
        out = a * np.exp(-kernel.rate1 * lag) + (1.0 - a) * np.exp(-kernel.rate2 * lag)
    else:
        out = (1.0 + kernel.alpha * lag) * np.exp(-kernel.rate1 * lag)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class KernelFactorization:
    """Scale S(t), terminal constant c_T, running weight k(r) and mixing m(t, s).

    They satisfy  S(t) mu(t,T) - S(s) mu(s,T) = m(t,s) c_T  and
    S(t) nu(t,r) - S(s) nu(s,r) = m(t,s) k(r).
    """
    kernel: DiscountKernel
    horizon: float
    scale: Callable
    terminal_coeff: float
    running_coeff: Callable
    mixing: Callable

    def identity_residuals(self, times):
        """Largest violation of the two identities over all grid pairs/triples."""
        times = np.asarray(times, dtype=float)
        T = self.horizon
        t = times[:, None]
        s = times[None, :]
        lhs = (self.scale(t) * self.kernel.mu(t, T)
               - self.scale(s) * self.kernel.mu(s, T))
        res_mu = float(np.max(np.abs(lhs - self.mixing(t, s) * self.terminal_coeff)))
        res_nu = 0.0
        for r in times:
            ok = times <= r + _TIME_TOL
            tt = times[ok][:, None]
            ss = times[ok][None, :]
            lhs = (self.scale(tt) * self.kernel.nu(tt, r)
                   - self.scale(ss) * self.kernel.nu(ss, r))
            rhs = self.mixing(tt, ss) * self.running_coeff(r)
            res_nu = max(res_nu, float(np.max(np.abs(lhs - rhs))))
        return res_mu, res_nu


def factorize_kernel(kernel: DiscountKernel, horizon: float) -> KernelFactorization:
    """Return the separable factorization of a kernel (not available for hyperbolic)."""
    k = kernel.kind
    T = float(horizon)
    if k == "hyperbolic":
        raise UnsupportedKernelError("hyperbolic kernel has no separable factorization")
    if k == "exponential":
        lam = kernel.rate1

        def scale(t):
            return np.exp(-lam * np.asarray(t, dtype=float))

        def running(r):
            return np.zeros_like(np.asarray(r, dtype=float))

        def mixing(t, s):
            return np.zeros(np.broadcast(np.asarray(t), np.asarray(s)).shape)

        return KernelFactorization(kernel, T, scale, 0.0, running, mixing)
    if k in ("heterogeneous", "convex_combination"):
        l1, l2 = kernel.rate1, kernel.rate2
        weight = 1.0 if k == "heterogeneous" else 1.0 - kernel.alpha
        c_T = 0.0 if k == "heterogeneous" else weight * math.exp(-l2 * T)

        def scale(t):
            return np.exp(-l1 * np.asarray(t, dtype=float))

        def running(r):
            return weight * np.exp(-l2 * np.asarray(r, dtype=float))

        def mixing(t, s):
            t = np.asarray(t, dtype=float)
            s = np.asarray(s, dtype=float)
            return np.exp((l2 - l1) * t) - np.exp((l2 - l1) * s)

        return KernelFactorization(kernel, T, scale, c_T, running, mixing)
    # quasi-exponential
    lam, a = kernel.rate1, kernel.alpha

    def scale(t):
        return np.exp(-lam * np.asarray(t, dtype=float))

    def running(r):
        return a * np.exp(-lam * np.asarray(r, dtype=float))

    def mixing(t, s):
        return np.asarray(s, dtype=float) - np.asarray(t, dtype=float)

    return KernelFactorization(kernel, T, scale, a * math.exp(-lam * T), running, mixing)


# ---------------------------------------------------------------------------
# problem data
# ---------------------------------------------------------------------------

class ControlSet:
    """Finite list of controls in R^m or a box scanned at a fixed resolution.

    ``truncated`` marks a box that stands in for an unbounded control set.
    """

    def __init__(self, points=None, lo=None, hi=None, resolution=0, truncated=False):
        if points is not None:
            pts = np.asarray(points, dtype=float)
            if pts.ndim == 1:
                pts = pts[:, None]
            if pts.size == 0:
                raise DomainError("control set must be non-empty")
            order = np.lexsort(pts.T[::-1])
            self.points = pts[order]
            self.lo = self.points.min(axis=0)
            self.hi = self.points.max(axis=0)
            self.resolution = 0
            self.kind = "finite"
        else:
            lo = np.atleast_1d(np.asarray(lo, dtype=float))
            hi = np.atleast_1d(np.asarray(hi, dtype=float))
            if lo.shape != hi.shape:
                raise DomainError("box bounds have different shapes")
            if np.any(lo > hi):
                raise DomainError("box needs lo <= hi componentwise")
            if int(resolution) < 1:
                raise DomainError("box resolution must be positive")
            self.lo, self.hi = lo, hi
            self.resolution = int(resolution)
            axes = [np.linspace(a, b, self.resolution) if b > a else np.array([a])
                    for a, b in zip(lo, hi)]
            mesh = np.meshgrid(*axes, indexing="ij")
            pts = np.stack([m.ravel() for m in mesh], axis=1)
            order = np.lexsort(pts.T[::-1])
            self.points = pts[order]
            self.kind = "box"
        self.truncated = bool(truncated)

    @classmethod
    def finite(cls, points):
        return cls(points=points)

    @classmethod
    def box(cls, lo, hi, resolution=101, truncated=False):
        return cls(lo=lo, hi=hi, resolution=resolution, truncated=truncated)

    @property
    def dim(self):
        return self.points.shape[1]

    def candidates(self):
        """Scan points sorted lexicographically (ties resolve to the first)."""
        return self.points

    def contains(self, u, atol=1e-12):
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            if self.dim == 1:
                return (u >= self.lo[0] - atol) & (u <= self.hi[0] + atol)
            return np.all((u >= self.lo - atol) & (u <= self.hi + atol), axis=-1)
        if self.dim == 1:
            flat = u.reshape(-1)
            d = np.abs(flat[:, None] - self.points[None, :, 0]).min(axis=1)
            return (d <= atol).reshape(u.shape)
        flat = u.reshape(-1, self.dim)
        d = np.abs(flat[:, None, :] - self.points[None, :, :]).max(axis=2).min(axis=1)
        return (d <= atol).reshape(u.shape[:-1])

    def describe(self):
        if self.kind == "box":
            return {"kind": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist(),
                    "resolution": self.resolution, "truncated": self.truncated}
        return {"kind": "finite", "size": int(self.points.shape[0])}


@dataclass(frozen=True)
class ControlledDynamics:
    """Drift b(s, x, u) and diffusion sigma(s, x, u) of the controlled state."""
    drift: Callable
    diffusion: Callable
    state_dim: int = 1
    noise_dim: int = 1
    sigma_control_free: bool = True


@dataclass(frozen=True)
class SeparableGenerator:
    """Generator of the form sum_k w_k(t, r) phi_k(r, x, u, y) + z beta(r, x, u).

    ``weights(t, r)`` returns shape (K,) + shape(t); ``features(r, x, u, y)``
    returns shape (K,) + shape(x).  Knowing this structure lets the Monte Carlo
    solvers treat all outer times at once in coefficient space.
    """
    weights: Callable
    features: Callable
    z_coefficient: Optional[Callable] = None

    def evaluate(self, t, r, x, u, y, z):
        w = np.asarray(self.weights(t, r), dtype=float)
        phi = np.asarray(self.features(r, x, u, y), dtype=float)
        shape = np.broadcast_shapes(w.shape[1:], phi.shape[1:])
        out = np.zeros(shape)
        for k in range(w.shape[0]):
            out = out + w[k] * phi[k]
        if self.z_coefficient is not None:
            out = out + np.asarray(z) * self.z_coefficient(r, x, u)
        return out


@dataclass(frozen=True)
class CostSpec:
    """Generator g(t, r, x, u, y, z) and free term h(t, x) of the recursive cost."""
    generator: Callable
    free_term: Callable
    time_homogeneous_in_t: bool = False
    separable: Optional[SeparableGenerator] = None


@dataclass(frozen=True)
class ProblemSpec:
    dynamics: ControlledDynamics
    cost: CostSpec
    controls: ControlSet
    horizon: float
    kernel: Optional[DiscountKernel] = None
    minimizer: Optional[Callable] = None
    name: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.horizon > 0:
            raise DomainError("horizon must be positive")
        if self.minimizer is None and self.controls.candidates().shape[0] < 1:
            raise DomainError("control set cannot be scanned")


# ---------------------------------------------------------------------------
# sampling checks of the standing assumptions
# ---------------------------------------------------------------------------

def _lipschitz_ratio(f_a, f_b, dist):
    ok = dist > 1e-12
    if not np.any(ok):
        return 0.0
    return float(np.max(np.abs(f_a[ok] - f_b[ok]) / dist[ok]))


def validate_problem(spec: ProblemSpec, x_lo: float, x_hi: float,
                     lipschitz_bound: float = 1e4, n_pairs: int = 1000,
                     seed: int = 0) -> dict:
    """Sample-based checks of finiteness, flags and Lipschitz moduli.

    Raises on a violated invariant and otherwise returns the estimated moduli.
    Only the scalar state case is sampled.
    """
    rng = np.random.default_rng(seed)
    T = spec.horizon
    cands = spec.controls.candidates()[:, 0]
    n = n_pairs
    t = rng.uniform(0, T, n)
    s = t + rng.uniform(0, 1, n) * (T - t)
    x1, x2 = rng.uniform(x_lo, x_hi, (2, n))
    u1 = cands[rng.integers(0, cands.size, n)]
    u2 = cands[rng.integers(0, cands.size, n)]
    y1, y2 = rng.uniform(-1, 1, (2, n))
    z1, z2 = rng.uniform(-1, 1, (2, n))
    t2 = rng.uniform(0, 1, n) * s
    dyn = spec.dynamics
    g = spec.cost.generator
    h = spec.cost.free_term
    b1 = np.broadcast_to(dyn.drift(s, x1, u1), (n,))
    sig1 = np.broadcast_to(dyn.diffusion(s, x1, u1), (n,))
    sig1b = np.broadcast_to(dyn.diffusion(s, x1, u2), (n,))
    g1 = np.broadcast_to(g(t, s, x1, u1, y1, z1), (n,))
    g2 = np.broadcast_to(g(t2, s, x2, u1, y2, z2), (n,))
    h1 = np.broadcast_to(h(t, x1), (n,))
    h2 = np.broadcast_to(h(t2, x2), (n,))
    for name, arr in (("drift", b1), ("diffusion", sig1), ("generator", g1),
                      ("free term", h1)):
        if not np.all(np.isfinite(arr)):
            raise EvaluationError(f"{name} is not finite on sampled arguments")
    if dyn.sigma_control_free and not np.allclose(sig1, sig1b, rtol=0, atol=1e-12):
        raise DomainError("diffusion flagged control-free but depends on the control")
    if spec.cost.time_homogeneous_in_t:
        g_shift = np.broadcast_to(g(t2, s, x1, u1, y1, z1), (n,))
        h_shift = np.broadcast_to(h(t2, x1), (n,))
        if not (np.allclose(g1, g_shift, atol=1e-12) and np.allclose(h1, h_shift, atol=1e-12)):
            raise DomainError("cost flagged time-homogeneous but depends on the outer time")
    if spec.cost.separable is not None:
        g_sep = np.broadcast_to(spec.cost.separable.evaluate(t, s, x1, u1, y1, z1), (n,))
        if not np.allclose(g1, g_sep, rtol=1e-10, atol=1e-10):
            raise DomainError("separable generator disagrees with the generator")
    b2 = np.broadcast_to(dyn.drift(s, x2, u1), (n,))
    sig2 = np.broadcast_to(dyn.diffusion(s, x2, u1), (n,))
    dx = np.abs(x1 - x2)
    dist_g = np.sqrt((t - t2) ** 2 + dx ** 2 + (y1 - y2) ** 2 + (z1 - z2) ** 2)
    dist_h = np.sqrt((t - t2) ** 2 + dx ** 2)
    report = {
        "drift_x": _lipschitz_ratio(b1, b2, dx),
        "diffusion_x": _lipschitz_ratio(sig1, sig2, dx),
        "generator": _lipschitz_ratio(g1, g2, dist_g),
        "free_term": _lipschitz_ratio(h1, h2, dist_h),
    }
    for key, val in report.items():
        if val > lipschitz_bound:
            raise DomainError(f"sampled Lipschitz modulus of {key} = {val:.3g} exceeds {lipschitz_bound}")
    report["diffusion_max_sq"] = float(np.max(sig1 ** 2))
    return report


def max_diffusion_sq(spec: ProblemSpec, times, nodes) -> float:
    """Largest sigma^2 over grid nodes and scanned controls (scalar case)."""
    cands = spec.controls.candidates()[:, 0]
    if cands.size > 64:
        cands = cands[np.linspace(0, cands.size - 1, 64).astype(int)]
    best = 0.0
    for s in np.asarray(times)[:: max(1, len(times) // 16)]:
        sig = np.asarray(spec.dynamics.diffusion(s, nodes[None, :], cands[:, None]), dtype=float)
        best = max(best, float(np.max(sig * sig)))
    return best


# ---------------------------------------------------------------------------
# Hamiltonian
# ---------------------------------------------------------------------------

def eval_hamiltonian(spec: ProblemSpec, t, s, x, u, theta, p, P) -> float:
    """0.5 tr[P sigma sigma^T] + p b + g(t, s, x, u, theta, p sigma) at one point."""
    if s < t - _TIME_TOL:
        raise DomainError(f"need t <= s, got t={t}, s={s}")
    n, d = spec.dynamics.state_dim, spec.dynamics.noise_dim
    x_arr = np.asarray(x, dtype=float).reshape(n)
    x_in = x_arr if n > 1 else float(x_arr[0])
    u_arr = np.asarray(u, dtype=float)
    u_in = float(u_arr) if u_arr.size == 1 else u_arr
    b = np.asarray(spec.dynamics.drift(s, x_in, u_in), dtype=float).reshape(n)
    sig = np.asarray(spec.dynamics.diffusion(s, x_in, u_in), dtype=float).reshape(n, d)
    p_row = np.asarray(p, dtype=float).reshape(n)
    P_mat = np.asarray(P, dtype=float).reshape(n, n)
    z = p_row @ sig
    z_in = z if d > 1 else float(z[0])
    gval = np.asarray(spec.cost.generator(t, s, x_in, u_in, theta, z_in), dtype=float)
    val = 0.5 * float(np.trace(P_mat @ sig @ sig.T)) + float(p_row @ b) + float(gval)
    if not math.isfinite(val):
        raise EvaluationError(
            f"non-finite Hamiltonian at t={t}, s={s}, x={x}, u={u}, theta={theta}, p={p}, P={P}")
    return val


def hamiltonian_1d(spec: ProblemSpec, t, s, x, u, theta, p, P):
    """Vectorized Hamiltonian for n = d = 1 (all arguments broadcast)."""
    dyn = spec.dynamics
    sig = dyn.diffusion(s, x, u)
    return 0.5 * P * sig * sig + p * dyn.drift(s, x, u) + spec.cost.generator(t, s, x, u, theta, p * sig)


def _golden_refine(fun, lo, hi, iters=60):
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo.copy(), hi.copy()
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(iters):
        left = fc <= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - inv_phi * (b - a)
        new_d = a + inv_phi * (b - a)
        c_next = np.where(left, new_c, d)
        d_next = np.where(left, c, new_d)
        f_new = fun(np.where(left, new_c, new_d))
        fc, fd = np.where(left, f_new, fd), np.where(left, fc, f_new)
        c, d = c_next, d_next
    return 0.5 * (a + b)


def minimize_hamiltonian_1d(spec: ProblemSpec, t, s, x, theta, p, P, refine=False,
                            chunk=256):
    """Node-wise argmin of the Hamiltonian for scalar controls.

    Returns (u, value, boundary_hits).  Uses the closed-form minimizer when the
    problem carries one, otherwise scans the control set; ties go to the
    smallest control.  ``boundary_hits`` counts minimizers on the edge of a
    truncated box.
    """
    shape = np.broadcast_shapes(np.shape(t), np.shape(s), np.shape(x), np.shape(theta),
                                np.shape(p), np.shape(P))
    ctrl = spec.controls
    if spec.minimizer is not None:
        u = np.broadcast_to(np.asarray(spec.minimizer(t, s, x, theta, p, P), dtype=float), shape)
        if not np.all(ctrl.contains(u, atol=1e-9)):
            raise DomainError("closed-form minimizer returned a control outside the control set")
        val = np.broadcast_to(hamiltonian_1d(spec, t, s, x, u, theta, p, P), shape)
        if not np.all(np.isfinite(val)):
            raise MinimizationError("non-finite Hamiltonian at the closed-form minimizer")
    else:
        if ctrl.dim != 1:
            raise DomainError("vectorized minimization needs scalar controls")
        cands = ctrl.candidates()[:, 0]
        best_val = np.full(shape, np.inf)
        best_u = np.full(shape, np.nan)
        ext = (None,) * len(shape)
        for start in range(0, cands.size, chunk):
            cu = cands[start:start + chunk]
            cu_b = cu[(slice(None),) + ext]
            vals = np.broadcast_to(hamiltonian_1d(spec, t, s, x, cu_b, theta, p, P),
                                   (cu.size,) + shape)
            vals = np.where(np.isfinite(vals), vals, np.inf)
            idx = np.argmin(vals, axis=0)
            cand_val = np.take_along_axis(vals, idx[None], axis=0)[0]
            better = cand_val < best_val
            best_val = np.where(better, cand_val, best_val)
            best_u = np.where(better, cu[idx], best_u)
        if not np.all(np.isfinite(best_val)):
            raise MinimizationError("all candidate controls gave non-finite Hamiltonian values")
        u, val = best_u, best_val
        if refine and ctrl.kind == "box" and ctrl.resolution > 1:
            h = (ctrl.hi[0] - ctrl.lo[0]) / (ctrl.resolution - 1)
            lo = np.maximum(u - h, ctrl.lo[0])
            hi = np.minimum(u + h, ctrl.hi[0])

            def fun(v):
                out = np.broadcast_to(hamiltonian_1d(spec, t, s, x, v, theta, p, P), shape)
                return np.where(np.isfinite(out), out, np.inf)

            ur = _golden_refine(fun, lo, hi)
            vr = fun(ur)
            better = vr < val
            u = np.where(better, ur, u)
            val = np.where(better, vr, val)
    hits = 0
    if ctrl.kind == "box" and ctrl.truncated:
        hits = int(np.count_nonzero((u <= ctrl.lo[0] + 1e-12) | (u >= ctrl.hi[0] - 1e-12)))
    return np.asarray(u, dtype=float), np.asarray(val, dtype=float), hits


def minimize_hamiltonian(spec: ProblemSpec, t, s, x, theta, p, P, refine=False):
    """Pointwise minimizer (u*, value) of u -> H(t, s, x, u, theta, p, P)."""
    if spec.dynamics.state_dim == 1 and spec.controls.dim == 1:
        u, val, _ = minimize_hamiltonian_1d(spec, float(t), float(s), float(np.squeeze(x)),
                                            float(theta), float(np.squeeze(p)),
                                            float(np.squeeze(P)), refine=refine)
        return float(u), float(val)
    if spec.minimizer is not None:
        u = np.asarray(spec.minimizer(t, s, x, theta, p, P), dtype=float)
        return u, eval_hamiltonian(spec, t, s, x, u, theta, p, P)
    best_u, best_val = None, math.inf
    for cand in spec.controls.candidates():
        try:
            val = eval_hamiltonian(spec, t, s, x, cand, theta, p, P)
        except EvaluationError:
            continue
        if val < best_val:
            best_u, best_val = cand, val
    if best_u is None:
        raise MinimizationError("all candidate controls gave non-finite Hamiltonian values")
    return best_u, best_val
