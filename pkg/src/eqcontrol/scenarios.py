"""Built-in problem library.

The LQ family has scalar state, dynamics dX = (a X + u) ds + sigma dW and
running cost l(x, u) = (q x^2 + r u^2)/2, terminal cost h0(x) = G x^2/2.
Non-exponential kernels weight the running cost by nu(t, r) and the terminal
cost by mu(t, T); ``kappa`` adds a recursive term -kappa*y to the generator.
The "lq-exponential" scenario writes exponential discounting in recursive form
(generator l - lam*y), which makes it time-homogeneous in the outer time.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError
from .model_core import (ControlledDynamics, ControlSet, CostSpec, DiscountKernel,
                         ProblemSpec, SeparableGenerator, factorize_kernel)


def _zeros(*args):
    return np.zeros(np.broadcast_shapes(*[np.shape(a) for a in args]))


LQ_DEFAULTS = dict(sigma=0.4, a=0.0, q=1.0, r=1.0, G=1.0, horizon=1.0, u_bound=5.0,
                   resolution=1001)


def lq_problem(kernel: DiscountKernel | None, kappa: float = 0.0, recursive_discount: float | None = None,
               name: str = "lq", finite_controls: bool = False, **overrides) -> ProblemSpec:
    """Scalar LQ problem.

    With ``recursive_discount`` set the kernel is ignored in the cost and the
    generator becomes l(x, u) - rate * y with a time-free terminal cost.
    """
    p = dict(LQ_DEFAULTS)
    unknown = set(overrides) - set(p)
    if unknown:
        raise ConfigError(f"unknown LQ parameters: {sorted(unknown)}")
    p.update(overrides)
    sigma, a, q, rc, G, T = p["sigma"], p["a"], p["q"], p["r"], p["G"], p["horizon"]
    ub = p["u_bound"]

    def drift(s, x, u):
        return a * x + u

    def diffusion(s, x, u):
        return sigma + _zeros(s, x, u)

    def running(x, u):
        return 0.5 * (q * x * x + rc * u * u)

    if recursive_discount is not None:
        lam = float(recursive_discount)
        homogeneous = True

        def weight(t, r):
            return np.ones(np.broadcast_shapes(np.shape(t), np.shape(r)))

        def terminal_weight(t):
            return np.ones(np.shape(t))

        y_coef = lam
    else:
        homogeneous = False

        def weight(t, r):
            return kernel.nu(t, r)

        def terminal_weight(t):
            return kernel.mu(t, T)

        y_coef = float(kappa)

    def generator(t, r, x, u, y, z):
        return weight(t, r) * running(x, u) - y_coef * y + 0.0 * z

    def free_term(t, x):
        return terminal_weight(t) * 0.5 * G * x * x

    def weights(t, r):
        w = np.asarray(weight(t, r), dtype=float)
        return np.stack([w, np.full(w.shape, -y_coef)])

    def features(r, x, u, y):
        shape = np.broadcast_shapes(np.shape(x), np.shape(u), np.shape(y))
        return np.stack([np.broadcast_to(running(x, u), shape), np.broadcast_to(y, shape)])

    def minimizer(t, s, x, theta, pp, P):
        return np.clip(-pp / (weight(t, s) * rc), -ub, ub)

    if finite_controls:
        controls = ControlSet.finite(np.linspace(-ub, ub, p["resolution"]))
        psi = None
    else:
        controls = ControlSet.box(-ub, ub, resolution=p["resolution"], truncated=True)
        psi = minimizer
    cost = CostSpec(generator, free_term, time_homogeneous_in_t=homogeneous,
                    separable=SeparableGenerator(weights, features))
    params = dict(p, kappa=y_coef, kernel=None if kernel is None else kernel.describe())
    return ProblemSpec(ControlledDynamics(drift, diffusion), cost, controls, T, kernel=kernel,
                       minimizer=psi, name=name, params=params)


def heat_problem(terminal: str = "square", horizon: float = 1.0, sigma: float = 1.0,
                 name: str = "heat") -> ProblemSpec:
    """Uncontrolled Brownian motion with g = 0 and h(t, x) = x^2 (or x)."""

    def drift(s, x, u):
        return _zeros(s, x, u)

    def diffusion(s, x, u):
        return sigma + _zeros(s, x, u)

    def generator(t, r, x, u, y, z):
        return _zeros(t, r, x, u, y, z)

    if terminal == "square":
        def free_term(t, x):
            return x * x + _zeros(t)
    elif terminal == "linear":
        def free_term(t, x):
            return x + _zeros(t)
    else:
        raise ConfigError(f"unknown heat terminal {terminal!r}")

    def weights(t, r):
        return np.zeros((1,) + np.broadcast_shapes(np.shape(t), np.shape(r)))

    def features(r, x, u, y):
        return np.zeros((1,) + np.broadcast_shapes(np.shape(x), np.shape(u), np.shape(y)))

    cost = CostSpec(generator, free_term, time_homogeneous_in_t=True,
                    separable=SeparableGenerator(weights, features))
    return ProblemSpec(ControlledDynamics(drift, diffusion), cost, ControlSet.finite([0.0]),
                       horizon, name=name, params={"sigma": sigma, "terminal": terminal})


@dataclass(frozen=True)
class Scenario:
    name: str
    kind: str  # "control" or "diagonal"
    description: str
    build: Callable
    x_lo: float = -4.0
    x_hi: float = 4.0
    xi: float = 1.0
    extra: dict = field(default_factory=dict)


def _lq_exponential(**kw):
    lam = 0.5
    return lq_problem(DiscountKernel.exponential(lam), recursive_discount=lam,
                      name="lq-exponential", **kw)


def _lq_heterogeneous(**kw):
    return lq_problem(DiscountKernel.heterogeneous(0.2, 1.5), kappa=0.5,
                      name="lq-heterogeneous", **kw)


def _lq_hyperbolic(**kw):
    return lq_problem(DiscountKernel.hyperbolic(0.5, 2.0), kappa=0.0, name="lq-hyperbolic", **kw)


def _lq_quasi(**kw):
    return lq_problem(DiscountKernel.quasi_exponential(0.5, 1.0), kappa=0.0,
                      name="lq-quasi-exponential", **kw)


def _lq_convex(**kw):
    return lq_problem(DiscountKernel.convex_combination(0.5, 0.2, 2.0), kappa=0.0,
                      name="lq-convex", **kw)


def _heat(**kw):
    return heat_problem(**kw)


def _diag(kind):
    def build(**kw):
        from .diagonal_bsvie import h6_problem
        return h6_problem(kind, **kw)
    return build


SCENARIOS = {
    "lq-exponential": Scenario("lq-exponential", "control",
                               "LQ, exponential discounting in recursive form (time-consistent)",
                               _lq_exponential),
    "lq-heterogeneous": Scenario("lq-heterogeneous", "control",
                                 "LQ, terminal rate 0.2, running rate 1.5, recursive term -0.5*y",
                                 _lq_heterogeneous),
    "lq-hyperbolic": Scenario("lq-hyperbolic", "control", "LQ, hyperbolic kernel (0.5, 2.0)",
                              _lq_hyperbolic),
    "lq-quasi-exponential": Scenario("lq-quasi-exponential", "control",
                                     "LQ, quasi-exponential kernel (alpha 0.5, rate 1.0)", _lq_quasi),
    "lq-convex": Scenario("lq-convex", "control",
                          "LQ, convex combination of exponentials (0.5; 0.2, 2.0)", _lq_convex),
    "heat": Scenario("heat", "control", "Brownian motion, h = x^2, g = 0 (closed form x^2 + T - s)",
                     _heat, x_lo=-8.0, x_hi=8.0, xi=0.0),
    "h6-heterogeneous": Scenario("h6-heterogeneous", "diagonal",
                                 "diagonal-Z system, heterogeneous kernel (0.2, 1.5)",
                                 _diag("heterogeneous")),
    "h6-exponential": Scenario("h6-exponential", "diagonal",
                               "diagonal-Z system, exponential kernel 0.5 (mixing term vanishes)",
                               _diag("exponential")),
    "h6-quasi-exponential": Scenario("h6-quasi-exponential", "diagonal",
                                     "diagonal-Z system, quasi-exponential kernel (0.5, 1.0)",
                                     _diag("quasi_exponential")),
    "h6-convex": Scenario("h6-convex", "diagonal",
                          "diagonal-Z system, convex combination kernel (0.5; 0.2, 2.0)",
                          _diag("convex_combination")),
}


def get_scenario(name: str) -> Scenario:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise ConfigError(f"unknown scenario {name!r}; known: {sorted(SCENARIOS)}") from None


def kernel_factorization_for(spec: ProblemSpec):
    if spec.kernel is None:
        return None
    return factorize_kernel(spec.kernel, spec.horizon)
