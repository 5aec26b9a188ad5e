import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dcrlab.engine import MethodConfig
from dcrlab.errors import ConfigError, ParameterError
from dcrlab.gates import (GateSchedule, constant, dcr_aggr20, draw_bernoulli_gate, draw_bernoulli_gates,
                          draw_gates, draw_gumbel_gate, draw_gumbel_gates, gate_for_step, linear,
                          parse_schedule, schedule_value, theseus_aggr20)

unit = st.floats(0.0, 1.0)


@pytest.mark.parametrize("t, value", [(0.0, 1.0), (0.10, 0.3), (0.20, 0.0), (0.5, 0.0), (1.0, 0.0)])
def test_dcr_aggr20_breakpoints(t, value):
    assert schedule_value(dcr_aggr20(), t) == value


def test_dcr_aggr20_interpolates_linearly():
    assert schedule_value(dcr_aggr20(), 0.05) == pytest.approx(0.65, abs=1e-15)


@pytest.mark.parametrize("t, value", [(0.0, 0.1), (0.10, 0.7), (0.20, 1.0), (1.0, 1.0)])
def test_theseus_aggr20_breakpoints(t, value):
    assert schedule_value(theseus_aggr20(), t) == value


@given(unit, unit)
def test_schedules_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert schedule_value(dcr_aggr20(), lo) >= schedule_value(dcr_aggr20(), hi)
    assert schedule_value(theseus_aggr20(), lo) <= schedule_value(theseus_aggr20(), hi)


@given(unit)
def test_schedule_values_in_unit_interval(t):
    for s in (dcr_aggr20(), theseus_aggr20(), constant(0.5), linear(0.1, 1.0, 0.5)):
        assert 0.0 <= s(t) <= 1.0


@pytest.mark.parametrize("t", [-0.01, 1.01, math.nan])
def test_schedule_rejects_out_of_range(t):
    with pytest.raises(ParameterError):
        schedule_value(dcr_aggr20(), t)


def test_parse_schedule_names():
    assert parse_schedule("dcr_aggr20") == dcr_aggr20()
    assert parse_schedule("theseus_aggr20") == theseus_aggr20()
    assert parse_schedule("constant:0.5")(0.3) == 0.5
    lin = parse_schedule("linear:0.1:1.0:0.5")
    assert lin(0.0) == 0.1 and lin(0.5) == 1.0 and lin(0.9) == 1.0
    assert lin(0.25) == pytest.approx(0.55)


@pytest.mark.parametrize("text", ["aggr30", "constant:2", "linear:0:1", "constant:x", ""])
def test_parse_schedule_rejects(text):
    with pytest.raises(ConfigError):
        parse_schedule(text)


def test_schedule_breakpoints_validated():
    with pytest.raises(ParameterError):
        GateSchedule("custom", ((0.0, 1.0), (0.0, 0.5), (1.0, 0.0)))


def test_bernoulli_endpoints():
    rng = np.random.default_rng(0)
    assert not draw_bernoulli_gates(0.0, rng, 1000).any()
    assert draw_bernoulli_gates(1.0, rng, 1000).all()
    assert draw_bernoulli_gate(1.0, rng) == 1


def test_bernoulli_mean_binomial_se():
    z = draw_bernoulli_gates(0.7, np.random.default_rng(1), 100_000)
    assert set(np.unique(z)) <= {0.0, 1.0}
    assert abs(z.mean() - 0.7) <= 3 * math.sqrt(0.21 / 100_000)


def test_bernoulli_reproducible():
    a = draw_bernoulli_gates(0.5, np.random.default_rng(9), 50)
    b = draw_bernoulli_gates(0.5, np.random.default_rng(9), 50)
    assert np.array_equal(a, b)


def test_gumbel_low_temperature_concentrates():
    r = draw_gumbel_gates(0.3, 0.05, np.random.default_rng(2), 100_000)
    assert np.mean((r < 0.01) | (r > 0.99)) > 0.9
    assert abs(r.mean() - 0.3) <= 3 * math.sqrt(0.21 / 100_000) + 0.01


def test_gumbel_symmetric_at_half():
    r = draw_gumbel_gates(0.5, 1.0, np.random.default_rng(3), 100_000)
    assert abs(r.mean() - 0.5) <= 3 * r.std() / math.sqrt(len(r))


@given(st.floats(1e-6, 1 - 1e-6), st.floats(0.01, 10.0), st.integers(0, 2**32 - 1))
def test_gumbel_strictly_inside(p, tau, seed):
    r = draw_gumbel_gate(p, tau, np.random.default_rng(seed))
    assert 0.0 < r < 1.0


@pytest.mark.parametrize("p", [0.0, 1.0])
def test_gumbel_rejects_endpoints(p):
    with pytest.raises(ParameterError):
        draw_gumbel_gate(p, 1.0, np.random.default_rng(0))


def test_dcr_gate_shared_across_layers():
    gates = gate_for_step(MethodConfig("dcr"), 37, 400, [1, 2, 3, 4], np.random.default_rng(0))
    values = {g.value for g in gates.values()}
    assert len(values) == 1
    assert all(g.mechanism == "deterministic" for g in gates.values())


def test_dcr_gate_final_step_is_zero():
    gates = gate_for_step(MethodConfig("dcr"), 400, 400, [1, 2], np.random.default_rng(0))
    assert all(g.value == 0.0 for g in gates.values())


def test_theseus_layers_independent():
    method = MethodConfig("theseus", schedule=constant(0.5))
    rng = np.random.default_rng(4)
    n = 100_000
    a = np.empty(n)
    b = np.empty(n)
    for i in range(n):
        g = draw_gates(method, 0.5, [1, 2], rng)
        a[i], b[i] = g[1].value, g[2].value
    corr = np.corrcoef(a, b)[0, 1]
    assert abs(corr) <= 3 / math.sqrt(n)


def test_gumbel_method_at_p_one_is_deterministic():
    gates = draw_gates(MethodConfig("theseus_gumbel"), 0.5, [1, 2], np.random.default_rng(0))
    assert all(g.value == 1.0 and g.mechanism == "deterministic" for g in gates.values())


def test_per_example_gates_shape():
    method = MethodConfig("theseus", per_example_gates=True)
    gates = draw_gates(method, 0.05, [1], np.random.default_rng(0), batch_size=8)
    assert gates[1].value.shape == (8,)


def test_student_only_has_no_gates():
    assert draw_gates(MethodConfig("student_only"), 0.3, [1, 2], np.random.default_rng(0)) == {}


def test_gate_for_step_bounds():
    with pytest.raises(ParameterError):
        gate_for_step(MethodConfig("dcr"), 5, 4, [1], np.random.default_rng(0))
