import json

import pytest

from eqcontrol import cli
from eqcontrol.errors import DivergenceError

SMALL = """
[problem]
scenario = {scenario}
[grid]
n_time = 40
n_space = 41
[monte_carlo]
n_paths = {n_paths}
n_steps = 40
seed = 3
[study]
n_list = {n_list}
eps_list = 0.2, 0.1, 0.05
"""


def _config(tmp_path, scenario="lq-heterogeneous", n_list="2, 4, 8", n_paths=3000, extra=""):
    path = tmp_path / f"{scenario}.ini"
    path.write_text(SMALL.format(scenario=scenario, n_list=n_list, n_paths=n_paths) + extra)
    return path


def _run(tmp_path, command, cfg, name="out", *flags):
    out = tmp_path / name
    code = cli.main([command, "--config", str(cfg), "--out", str(out), *flags])
    return code, out


def _summary(out):
    return json.loads((out / "summary.json").read_text())


def test_solve_equilibrium_homogeneous(tmp_path):
    code, out = _run(tmp_path, "solve-equilibrium", _config(tmp_path, "lq-exponential"))
    assert code == 0
    s = _summary(out)
    assert s["regime_flag"] == "thm-4.2" and s["degeneracy_check"] == "passed"
    for key in ("scheme", "mesh", "layers", "max_residual"):
        assert key in s
    for name in ("theta.csv", "value.csv", "strategy.csv"):
        assert (out / name).stat().st_size > 0
    # resolved config carries defaults
    assert s["config"]["grid"]["x_lo"] == -4.0 and s["config"]["monte_carlo"]["basis_degree"] == 3


def test_solve_equilibrium_heterogeneous(tmp_path):
    code, out = _run(tmp_path, "solve-equilibrium", _config(tmp_path))
    assert code == 0
    assert _summary(out)["degeneracy_check"] == "n/a"


def test_partition_study(tmp_path):
    code, out = _run(tmp_path, "partition-study", _config(tmp_path))
    assert code == 0
    lines = (out / "convergence.csv").read_text().splitlines()
    assert len(lines) == 4
    assert lines[-1].split(",")[-1] != ""
    code, out = _run(tmp_path, "partition-study", _config(tmp_path, "lq-exponential", n_list="1"), "one")
    assert code == 0
    s = _summary(out)
    assert len(s["rows"]) == 1 and s["final_gap_limit"] <= 1e-6


def test_empty_n_list_is_a_config_error(tmp_path, capsys):
    code, _ = _run(tmp_path, "partition-study", _config(tmp_path, n_list=""))
    assert code == 2
    assert "n_list" in capsys.readouterr().err


def test_epsilon_study_and_bsvie(tmp_path):
    cfg = _config(tmp_path)
    code, out = _run(tmp_path, "epsilon-study", cfg)
    assert code == 0
    s = _summary(out)
    assert isinstance(s["slope"], float) and s["slope"] > 1.5
    assert (out / "epsilon.csv").read_text().startswith("eps,gap\n")
    code, out = _run(tmp_path, "bsvie", cfg, "b")
    assert code == 0
    s = _summary(out)
    assert s["y_residual"] < 0.05 and s["std_error"] > 0
    assert (out / "bsvie.csv").read_text().startswith("path,time,X,Y\n")


def test_diagonal_collapse(tmp_path):
    cfg = _config(tmp_path, "h6-exponential")
    code, out = _run(tmp_path, "diagonal", cfg)
    assert code == 0
    s = _summary(out)
    assert s["m_collapse_check"] == "passed" and s["within_budget"]
    assert (out / "diagonal_pde.csv").exists() and (out / "diagonal_fbsde.csv").exists()
    code, out = _run(tmp_path, "diagonal", _config(tmp_path, "h6-heterogeneous"), "het")
    assert code == 0 and _summary(out)["m_collapse_check"] == "n/a"


def test_compare_variant(tmp_path):
    code, out = _run(tmp_path, "compare-variant", _config(tmp_path))
    assert code == 0
    s = _summary(out)
    assert s["max_gap"] > 0 and s["variant_flag"] == "WYY-variant"


def test_kind_mismatch_and_unknown_keys(tmp_path, capsys):
    code, _ = _run(tmp_path, "diagonal", _config(tmp_path))
    assert code == 2
    code, _ = _run(tmp_path, "solve-equilibrium", _config(tmp_path, extra="[output]\nformat = csv\n"))
    assert code == 2
    assert "format" in capsys.readouterr().err
    bad = tmp_path / "bad.ini"
    bad.write_text("[solver]\nx = 1\n")
    code, _ = _run(tmp_path, "solve-equilibrium", bad)
    assert code == 2
    bad.write_text("[grid]\nn_time = many\n")
    code, _ = _run(tmp_path, "solve-equilibrium", bad)
    assert code == 2
    bad.write_text("[problem]\nscenario = nope\n")
    code, _ = _run(tmp_path, "solve-equilibrium", bad)
    assert code == 2
    assert "nope" in capsys.readouterr().err


def test_inline_comments_are_stripped(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[problem]\nxi = 0.5   ; initial state\n[grid]\nn_time = 20  # coarse\n")
    resolved = cli.load_config(cfg, {})
    assert resolved["problem"]["xi"] == 0.5
    assert resolved["grid"]["n_time"] == 20


def test_missing_config_names_the_path(tmp_path, capsys):
    missing = tmp_path / "absent.ini"
    code, _ = _run(tmp_path, "solve-equilibrium", missing)
    assert code == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_flags(tmp_path):
    assert cli.main(["solve-equilibrium", "--seed", "-1", "--config", str(_config(tmp_path))]) == 2
    assert cli.main(["no-such-command"]) == 2


def test_cfl_violation_exits_2(tmp_path, capsys):
    cfg = _config(tmp_path)
    cfg.write_text(cfg.read_text().replace("n_space = 41", "n_space = 201"))
    code, _ = _run(tmp_path, "solve-equilibrium", cfg)
    assert code == 2
    assert "explicit scheme unstable" in capsys.readouterr().err


def test_numeric_failure_exits_3(tmp_path, monkeypatch, capsys):
    def boom(*args, **kwargs):
        raise DivergenceError("synthetic blow-up", layer=7)

    monkeypatch.setattr(cli, "solve_equilibrium_hjb", boom)
    code, _ = _run(tmp_path, "solve-equilibrium", _config(tmp_path))
    assert code == 3
    assert "synthetic" in capsys.readouterr().err


def test_list_scenarios(tmp_path, capsys):
    assert cli.main(["list-scenarios", "--out", str(tmp_path / "ls")]) == 0
    text = capsys.readouterr().out
    assert "lq-heterogeneous" in text and "h6-exponential" in text
    assert (tmp_path / "ls" / "scenarios.csv").exists()


@pytest.mark.parametrize("command,scenario", [
    ("solve-equilibrium", "lq-heterogeneous"), ("partition-study", "lq-heterogeneous"),
    ("epsilon-study", "lq-heterogeneous"), ("bsvie", "lq-heterogeneous"),
    ("diagonal", "h6-heterogeneous"), ("compare-variant", "lq-heterogeneous")])
def test_outputs_are_reproducible_across_workers(tmp_path, command, scenario):
    cfg = _config(tmp_path, scenario, n_paths=5000)
    outs = []
    for i, workers in enumerate(("1", "4", "1")):
        code, out = _run(tmp_path, command, cfg, f"run{i}", "--workers", workers)
        assert code == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))})
    assert outs[0] and outs[0] == outs[1] == outs[2]
