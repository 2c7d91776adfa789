import numpy as np
import pytest

from brokerfee import simulate
from brokerfee.agent import (AgentUtilitySpec, CflError, HjbSettings,
                             UnsupportedContractError, best_response,
                             estimate_agent_value, solve_hjb, zeta_integral)
from brokerfee.contracts import Constant, LinearPolynomial, LipschitzTable
from brokerfee.model import FeedbackPolicy, ModelParams

WIDE = ModelParams(rate_lower=-100.0, rate_upper=100.0)

# smaller grid than the acceptance instance; enough for the closed form
FAST = HjbSettings(n_w=101, n_z=101)


@pytest.fixture(scope="module")
def zero_fee_solution():
    return solve_hjb(Constant(0.0), WIDE, FAST)


def test_closed_form_value(zero_fee_solution):
    _, grid = zero_fee_solution
    assert grid.value_at_origin == pytest.approx(1.0 / 24.0, rel=0.01)


def test_closed_form_policy(zero_fee_solution):
    policy, _ = zero_fee_solution
    t = policy.t_nodes
    w = policy.w_nodes
    inner = slice(len(w) // 10, len(w) - len(w) // 10)
    tt, ww = np.meshgrid(t, w[inner], indexing="ij")
    approx = policy(tt, ww, np.zeros_like(ww))
    exact = ww * (1.0 - tt)
    assert np.max(np.abs(approx - exact)) <= 0.02 * np.max(np.abs(exact))


def test_constant_fee_shifts_value(zero_fee_solution):
    _, grid0 = zero_fee_solution
    _, grid_c = solve_hjb(Constant(0.25), WIDE, FAST)
    shift = grid0.value_at_origin - grid_c.value_at_origin
    assert shift == pytest.approx(0.25, abs=1e-10)


def test_forced_zero_rate():
    params = ModelParams(rate_lower=0.0, rate_upper=0.0)
    policy, grid = solve_hjb(Constant(0.4), params, FAST)
    assert np.all(policy.table == 0.0)
    # no trading: value reduces to minus the fee
    assert grid.value_at_origin == pytest.approx(-0.4, abs=2e-3)


def test_mc_agrees_with_grid(zero_fee_solution):
    policy, grid = zero_fee_solution
    value, se = estimate_agent_value(Constant(0.0), policy, WIDE, 20_000, 5)
    tol = max(0.01 * abs(grid.value_at_origin), 3 * se)
    assert abs(value - grid.value_at_origin) <= tol


def test_cfl_override_rejected():
    with pytest.raises(CflError):
        solve_hjb(Constant(0.0), WIDE, HjbSettings(n_w=101, n_z=101, dt=0.5))


def test_unsupported_contract_raises():
    c = LinearPolynomial(np.array([[0.1]]), cap=1.0, operator="time_average")
    with pytest.raises(UnsupportedContractError):
        solve_hjb(c, WIDE, FAST)


def test_zeta_quadrature():
    params = ModelParams(n_steps=4)
    times = params.times
    from brokerfee.model import DiscretizedPath
    w = np.array([0.0, 1.0, 1.0, 1.0, 1.0])
    z = np.array([0.0, 0.0, 2.0, 2.0, 2.0])
    path = DiscretizedPath(times, np.zeros(5), z, w)
    coef = params.epsilon**2 * params.phi_a / params.sigma**2
    expected = (coef * np.sum(w[:-1] ** 2) + np.sum(z[:-1] * w[:-1])) * 0.25
    assert zeta_integral(path, params) == pytest.approx(expected)


def test_objective_forms_agree():
    # E^W[reweighted] and E^Q[pathwise] estimate the same value
    params = ModelParams(rate_lower=-1.0, rate_upper=1.0, n_steps=100)
    contract = Constant(0.1)
    policy = FeedbackPolicy.constant(0.5, params)
    spec = AgentUtilitySpec(params, contract)

    controlled = simulate.simulate_controlled(params, policy, 40_000, 11)
    v_q, se_q = simulate._mean_se(spec.pathwise_objective(controlled))

    reference = simulate.girsanov_weights(
        simulate.simulate_reference(params, 40_000, 12), policy, params)
    v_w, se_w = simulate._mean_se(spec.reweighted_objective(reference))
    assert abs(v_q - v_w) <= 3 * np.hypot(se_q, se_w)


def test_best_response_markovian_dispatch(zero_fee_solution):
    response = best_response(Constant(0.0), WIDE, FAST)
    assert response.value_se == 0.0
    assert response.grid is not None
    assert response.value == pytest.approx(1.0 / 24.0, rel=0.01)


def test_best_response_fallback_on_path_dependent_fee():
    params = ModelParams(rate_lower=-1.0, rate_upper=1.0, n_steps=50)
    fee = LinearPolynomial(np.array([[0.05]]), cap=0.5,
                           operator="time_average")
    settings = HjbSettings(n_w=41, n_z=41)
    response = best_response(fee, params, settings, mc_count=1500, seed=2,
                             ascent_cap=10)
    assert response.grid is None
    assert response.value_se > 0.0
    # the ascent never moves downhill from its seed policy
    assert np.all(np.diff(response.trace) >= -1e-12)


def test_table_contract_through_grid_solver():
    nodes = np.linspace(-4.0, 4.0, 9)
    values = np.clip(0.25 * nodes[None, :] + 0 * nodes[:, None], -1, 1)
    fee = LipschitzTable(nodes, nodes, values, gamma=1.0, holder_const=1.0,
                         cap=1.0)
    params = ModelParams(rate_lower=-1.0, rate_upper=1.0)
    policy, grid = solve_hjb(fee, params, HjbSettings(n_w=61, n_z=61))
    assert np.isfinite(grid.value_at_origin)


def test_value_grid_csv(tmp_path, zero_fee_solution):
    _, grid = zero_fee_solution
    fn = tmp_path / "value.csv"
    grid.to_csv(fn)
    header = fn.read_text().splitlines()[0]
    assert header.split(",")[:3] == ["t", "w", "z"]
