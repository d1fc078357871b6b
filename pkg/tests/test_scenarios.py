import numpy as np
import pytest

from eqcontrol.errors import ConfigError
from eqcontrol.model_core import validate_problem
from eqcontrol.scenarios import SCENARIOS, get_scenario, kernel_factorization_for, lq_problem


@pytest.mark.parametrize("name", [n for n, s in SCENARIOS.items() if s.kind == "control"])
def test_control_scenarios_validate(name):
    sc = get_scenario(name)
    spec = sc.build()
    report = validate_problem(spec, sc.x_lo, sc.x_hi)
    assert report["diffusion_max_sq"] > 0


def test_heat_closed_form_parameters():
    spec = get_scenario("heat").build()
    assert spec.cost.free_term(0.3, 2.0) == 4.0
    assert spec.cost.time_homogeneous_in_t


def test_recursive_exponential_is_homogeneous():
    spec = get_scenario("lq-exponential").build()
    assert spec.cost.time_homogeneous_in_t
    g = spec.cost.generator
    assert g(0.0, 0.5, 1.0, 0.2, 0.3, 0.0) == g(0.4, 0.5, 1.0, 0.2, 0.3, 0.0)
    assert kernel_factorization_for(spec) is not None
    assert kernel_factorization_for(lq_problem(None, recursive_discount=0.1)) is None


def test_heterogeneous_weights():
    spec = get_scenario("lq-heterogeneous").build()
    # nu(0, 1) * l + mu(0, 1) h with rates 1.5 / 0.2 and y-coefficient 0.5
    val = spec.cost.generator(0.0, 1.0, 1.0, 0.0, 2.0, 0.0)
    assert val == pytest.approx(np.exp(-1.5) * 0.5 - 0.5 * 2.0)
    assert spec.cost.free_term(0.0, 1.0) == pytest.approx(np.exp(-0.2) * 0.5)


def test_unknown_names_and_parameters():
    with pytest.raises(ConfigError):
        get_scenario("missing")
    with pytest.raises(ConfigError):
        lq_problem(None, recursive_discount=0.1, gamma=2.0)
    with pytest.raises(ConfigError):
        get_scenario("heat").build(terminal="cubic")
