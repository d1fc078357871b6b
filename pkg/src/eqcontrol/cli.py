"""Command-line driver: scenario runs, refinement studies and CSV/JSON output.

Configuration is an INI file with sections [problem], [grid], [monte_carlo],
[study] and [output].  Unknown sections or keys are rejected.  Every command
writes its CSV files plus summary.json, which repeats the fully resolved
configuration.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, NUMERIC_ERRORS, UnsupportedKernelError
from .grids import field_to_csv, theta_to_csv, write_rows
from .pde_solvers import (PdeConfig, PdeGrid, degeneracy_gap, fixed_point_residual,
                          solve_classical_hjb, solve_equilibrium_hjb, solve_equilibrium_hjb_variant)
from .scenarios import SCENARIOS, get_scenario

log = logging.getLogger("eqcontrol")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# section -> key -> (type, default); None defaults are filled from the scenario
DEFAULTS = {
    "problem": {"scenario": (str, "lq-heterogeneous"), "xi": (float, None), "t0": (float, 0.0),
                "policy": (str, "equilibrium")},
    "grid": {"n_time": (int, 200), "n_space": (int, 200), "x_lo": (float, None),
             "x_hi": (float, None), "scheme": (str, "explicit"), "safety": (float, 1.0)},
    "monte_carlo": {"n_paths": (int, 100_000), "seed": (int, 0), "basis_degree": (int, 3),
                    "n_steps": (int, 160), "workers": (int, 1), "csv_paths": (int, 100)},
    "study": {"eps_list": (list, "0.2, 0.1, 0.05, 0.025"), "n_list": (list, "2, 4, 8, 16"),
              "partition_kind": (str, "uniform"), "tolerance": (float, 1e-6)},
    "output": {"dir": (str, "out")},
}
POLICIES = ("equilibrium", "zero")
SEED_MAX = 2 ** 64


def _parse_list(text, key):
    items = [p.strip() for p in str(text).replace(";", ",").split(",")]
    items = [p for p in items if p]
    try:
        return [float(p) for p in items]
    except ValueError:
        raise ConfigError(f"{key}: expected a comma-separated list of numbers, got {text!r}") from None


def _convert(kind, raw, key):
    if kind is list:
        return _parse_list(raw, key)
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def load_config(path=None, overrides=None) -> dict:
    """Read an INI file, reject unknown keys, fill defaults and validate."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            parser.read(p)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from None
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown config key {key!r} in [{section}]")
    cfg = {}
    for section, keys in DEFAULTS.items():
        cfg[section] = {}
        for key, (kind, default) in keys.items():
            raw = parser.get(section, key, fallback=None)
            if raw is None:
                cfg[section][key] = _convert(kind, default, key) if default is not None else None
            else:
                cfg[section][key] = _convert(kind, raw, f"[{section}] {key}")
    for (section, key), value in (overrides or {}).items():
        if value is not None:
            cfg[section][key] = value
    _resolve(cfg)
    return cfg


def _resolve(cfg):
    prob, grid, mc, study = cfg["problem"], cfg["grid"], cfg["monte_carlo"], cfg["study"]
    sc = get_scenario(prob["scenario"])
    if prob["xi"] is None:
        prob["xi"] = sc.xi
    if grid["x_lo"] is None:
        grid["x_lo"] = sc.x_lo
    if grid["x_hi"] is None:
        grid["x_hi"] = sc.x_hi
    if prob["policy"] not in POLICIES:
        raise ConfigError(f"policy must be one of {POLICIES}")
    for section, key in (("grid", "n_time"), ("grid", "n_space"), ("monte_carlo", "n_paths"),
                         ("monte_carlo", "n_steps"), ("monte_carlo", "workers"),
                         ("monte_carlo", "csv_paths")):
        if cfg[section][key] <= 0:
            raise ConfigError(f"[{section}] {key} must be positive")
    if grid["n_space"] < 3:
        raise ConfigError("[grid] n_space must be at least 3")
    if not grid["x_hi"] > grid["x_lo"]:
        raise ConfigError("[grid] x_hi must exceed x_lo")
    if mc["basis_degree"] < 0:
        raise ConfigError("[monte_carlo] basis_degree must be non-negative")
    if not 0 <= mc["seed"] < SEED_MAX:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    n_list = study["n_list"]
    if any(n != int(n) or n < 1 for n in n_list):
        raise ConfigError("[study] n_list entries must be positive integers")
    study["n_list"] = [int(n) for n in n_list]
    # PdeConfig validates the scheme name
    PdeConfig(scheme=grid["scheme"], safety=grid["safety"])


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _spec(cfg, kind="control"):
    sc = get_scenario(cfg["problem"]["scenario"])
    if sc.kind != kind:
        raise ConfigError(f"scenario {sc.name!r} is a {sc.kind} scenario; this command needs {kind}")
    return sc.build()


def _pde_grid(cfg, start=None, horizon=1.0):
    g = cfg["grid"]
    start = cfg["problem"]["t0"] if start is None else start
    if not start < horizon:
        raise ConfigError("[problem] t0 must lie before the horizon")
    return PdeGrid.uniform(start, horizon, g["n_time"], g["x_lo"], g["x_hi"], g["n_space"])


def _pde_config(cfg):
    return PdeConfig(scheme=cfg["grid"]["scheme"], safety=cfg["grid"]["safety"])


def _basis(cfg):
    from .stochastic import RegressionBasis
    return RegressionBasis(degree=cfg["monte_carlo"]["basis_degree"])


def _mesh(grid: PdeGrid):
    return {"ds": float(np.max(np.diff(grid.times))), "dx": grid.space.dx}


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_summary(out: Path, cfg, command, fields):
    body = {"command": command, "config": cfg, **fields}
    with open(out / "summary.json", "w") as fh:
        json.dump(_clean(body), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _policy(cfg, spec):
    """None for the zero control, else the equilibrium feedback on the configured grid."""
    if cfg["problem"]["policy"] == "zero":
        return None, None
    grid = _pde_grid(cfg, horizon=spec.horizon)
    res = solve_equilibrium_hjb(spec, grid, _pde_config(cfg))
    return res.strategy, res


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_solve_equilibrium(cfg, out: Path) -> int:
    spec = _spec(cfg)
    grid = _pde_grid(cfg, horizon=spec.horizon)
    pcfg = _pde_config(cfg)
    res = solve_equilibrium_hjb(spec, grid, pcfg)
    theta_to_csv(res.theta, out / "theta.csv")
    field_to_csv(res.value, out / "value.csv")
    field_to_csv(res.strategy.as_field(), out / "strategy.csv", name="control")
    residual = fixed_point_residual(spec, res, grid, pcfg)
    check, value_gap = "n/a", None
    if spec.cost.time_homogeneous_in_t:
        top = spec.cost.free_term(grid.times[-1], grid.space.nodes)
        value, feedback = solve_classical_hjb(spec, grid, top, float(grid.times[0]), pcfg)
        value_gap = float(np.max(np.abs(value.values - res.value.values)))
        same = np.array_equal(feedback.values, res.strategy.values)
        tol = cfg["study"]["tolerance"]
        check = "passed" if value_gap <= tol and (same or spec.controls.kind == "box") else "failed"
    _write_summary(out, cfg, "solve-equilibrium", {
        "scheme": pcfg.scheme, "mesh": _mesh(grid), "layers": grid.n_steps,
        "max_residual": residual, "regime_flag": res.regime_flag,
        "degeneracy_check": check, "degeneracy_value_gap": value_gap,
        "row_spread": degeneracy_gap(res.theta), "boundary_hits": res.boundary_hits})
    log.info("equilibrium: residual %.3g, degeneracy %s", residual, check)
    return EXIT_OK


def cmd_partition_study(cfg, out: Path) -> int:
    from .partition_game import convergence_study
    spec = _spec(cfg)
    n_list = cfg["study"]["n_list"]
    if not n_list:
        raise ConfigError("[study] n_list is empty")
    grid = _pde_grid(cfg, horizon=spec.horizon)
    table = convergence_study(spec, grid, n_list, _pde_config(cfg), cfg["study"]["partition_kind"])
    table.to_csv(out / "convergence.csv")
    _write_summary(out, cfg, "partition-study", {
        "mesh": _mesh(grid), "fitted_rate": table.fitted_rate,
        "rows": table.rows, "final_gap_limit": table.rows[-1]["gap_limit"]})
    log.info("partition study: fitted rate %s", table.fitted_rate)
    return EXIT_OK


def cmd_epsilon_study(cfg, out: Path) -> int:
    from .stochastic import epsilon_gap_study
    spec = _spec(cfg)
    mc, prob = cfg["monte_carlo"], cfg["problem"]
    policy, _ = _policy(cfg, spec)
    study = epsilon_gap_study(spec, policy, prob["t0"], prob["xi"], cfg["study"]["eps_list"],
                              n_steps=mc["n_steps"], n_paths=mc["n_paths"], seed=mc["seed"],
                              basis=_basis(cfg), workers=mc["workers"])
    study.to_csv(out / "epsilon.csv")
    _write_summary(out, cfg, "epsilon-study", {"slope": study.slope, "value": study.value,
                                               "monotone": study.monotone, "gaps": study.gaps})
    log.info("epsilon study: slope %s", study.slope)
    return EXIT_OK


def cmd_bsvie(cfg, out: Path) -> int:
    from .stochastic import check_feynman_kac, evaluate_cost
    spec = _spec(cfg)
    mc, prob = cfg["monte_carlo"], cfg["problem"]
    policy, res = _policy(cfg, spec)
    fields = {}
    if res is not None:
        fk = check_feynman_kac(res.theta, res.strategy, spec, prob["xi"], mc["n_paths"], mc["seed"],
                               _basis(cfg), mc["workers"])
        pair = fk.pair
        fields.update(y_residual=fk.y_residual, z_residual=fk.z_residual)
    else:
        pair = evaluate_cost(spec, prob["t0"], prob["xi"], None, mc["n_steps"], mc["n_paths"],
                             mc["seed"], _basis(cfg), mc["workers"]).pair
    paths = pair.paths
    n = paths.n_paths
    std_error = float(np.std(pair.realized, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    m = min(mc["csv_paths"], n)
    times = paths.times
    rows = ((p, times[k], paths.X[p, k], pair.Y[p, k]) for p in range(m) for k in range(times.size))
    write_rows(out / "bsvie.csv", ["path", "time", "X", "Y"], rows)
    mesh = {"ds": float(np.max(np.diff(times)))}
    if res is not None:
        mesh["dx"] = res.theta.space.dx
    fields.update(value=pair.value(), std_error=std_error, sweeps=pair.sweeps, n_paths=n,
                  n_steps=paths.n_steps, mesh=mesh)
    _write_summary(out, cfg, "bsvie", fields)
    log.info("bsvie: value %.6g +- %.2g", fields["value"], std_error)
    return EXIT_OK


def _auxiliary_vanishes(problem, times) -> bool:
    fac = problem.structure.factorization
    t = np.asarray(times)
    return bool(np.all(fac.mixing(t[:, None], t[None, :]) == 0.0))


def cmd_diagonal(cfg, out: Path) -> int:
    from .diagonal_bsvie import (cross_validate_diagonal, solve_coupled_fsde_bsvie,
                                 solve_decoupling_pde, solve_h6_fbsde_reduction)
    from .stochastic import noise_budget
    problem = _spec(cfg, "diagonal")
    mc, prob = cfg["monte_carlo"], cfg["problem"]
    grid = _pde_grid(cfg, horizon=problem.horizon)
    tau = float(grid.times[0])
    theta = solve_decoupling_pde(problem, grid, _pde_config(cfg))
    a = solve_coupled_fsde_bsvie(problem, theta, prob["xi"], mc["n_paths"], mc["seed"], mc["workers"])
    b = solve_h6_fbsde_reduction(problem, prob["xi"], tau, grid.n_steps, mc["n_paths"], mc["seed"],
                                 mc["workers"])
    y_gap, z_gap, x_gap = cross_validate_diagonal(a, b)
    budget = 3.0 * noise_budget(float(np.max(np.diff(grid.times))), grid.space.dx, mc["n_paths"])
    collapse = "n/a"
    if _auxiliary_vanishes(problem, grid.times):
        c = solve_h6_fbsde_reduction(problem, prob["xi"], tau, grid.n_steps, mc["n_paths"],
                                     mc["seed"], mc["workers"], zero_auxiliary=True)
        same = all(np.array_equal(u, v) for u, v in ((b.X, c.X), (b.Y, c.Y), (b.Z_diag, c.Z_diag)))
        collapse = "passed" if same else "failed"
    a.to_csv(out / "diagonal_pde.csv", mc["csv_paths"])
    b.to_csv(out / "diagonal_fbsde.csv", mc["csv_paths"])
    _write_summary(out, cfg, "diagonal", {
        "mesh": _mesh(grid), "gaps": {"y": y_gap, "z_diag": z_gap, "x": x_gap},
        "budget": budget, "within_budget": max(y_gap, z_gap, x_gap) <= budget,
        "m_collapse_check": collapse, "pde_route": a.summary(), "fbsde_route": b.summary(),
        "uniqueness_guaranteed": problem.uniqueness_guaranteed})
    log.info("diagonal: gaps y %.3g z %.3g x %.3g (budget %.3g), collapse %s",
             y_gap, z_gap, x_gap, budget, collapse)
    return EXIT_OK


def cmd_compare_variant(cfg, out: Path) -> int:
    spec = _spec(cfg)
    grid = _pde_grid(cfg, horizon=spec.horizon)
    pcfg = _pde_config(cfg)
    eq = solve_equilibrium_hjb(spec, grid, pcfg)
    var = solve_equilibrium_hjb_variant(spec, grid, pcfg)
    diff = var.value.values - eq.value.values
    t, x = grid.times, grid.space.nodes
    rows = ((j, k, t[j], x[k], eq.value.values[j, k], var.value.values[j, k], diff[j, k])
            for j in range(t.size) for k in range(x.size))
    write_rows(out / "compare.csv",
               ["s_index", "x_index", "s", "x", "equilibrium", "variant", "diff"], rows)
    _write_summary(out, cfg, "compare-variant", {
        "mesh": _mesh(grid), "max_gap": float(np.max(np.abs(diff))),
        "theta_max_gap": eq.theta.max_abs_diff(var.theta),
        "strategy_max_gap": float(np.max(np.abs(var.strategy.values - eq.strategy.values))),
        "regime_flag": eq.regime_flag, "variant_flag": var.variant})
    return EXIT_OK


def cmd_list_scenarios(cfg, out) -> int:
    rows = [(s.name, s.kind, s.description) for s in SCENARIOS.values()]
    for name, kind, desc in rows:
        print(f"{name:24s} {kind:9s} {desc}")
    if out is not None:
        write_rows(out / "scenarios.csv", ["name", "kind", "description"], rows)
    return EXIT_OK


COMMANDS = {
    "solve-equilibrium": cmd_solve_equilibrium,
    "partition-study": cmd_partition_study,
    "epsilon-study": cmd_epsilon_study,
    "bsvie": cmd_bsvie,
    "diagonal": cmd_diagonal,
    "compare-variant": cmd_compare_variant,
    "list-scenarios": cmd_list_scenarios,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eqcontrol",
                                     description="Equilibrium strategies for recursive time-inconsistent control")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="INI configuration file")
        p.add_argument("--out", type=Path, help="output directory (overrides [output] dir)")
        p.add_argument("--seed", type=int, help="random seed (overrides [monte_carlo] seed)")
        p.add_argument("--workers", type=int, help="worker threads (overrides [monte_carlo] workers)")
        p.add_argument("--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    started = time.perf_counter()
    try:
        if args.command == "list-scenarios":
            return cmd_list_scenarios(None, args.out and _prepare(args.out))
        overrides = {("monte_carlo", "seed"): args.seed, ("monte_carlo", "workers"): args.workers,
                     ("output", "dir"): None if args.out is None else str(args.out)}
        cfg = load_config(args.config, overrides)
        out = _prepare(Path(cfg["output"]["dir"]))
        code = COMMANDS[args.command](cfg, out)
        log.info("%s finished in %.1f s", args.command, time.perf_counter() - started)
        return code
    except (ConfigError, DomainError, UnsupportedKernelError) as exc:
        print(f"eqcontrol: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"eqcontrol: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def _prepare(out: Path) -> Path:
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


if __name__ == "__main__":
    sys.exit(main())
