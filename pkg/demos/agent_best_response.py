"""The client's best response, against the analytic benchmark.

For a constant fee and wide rate bounds the control problem has a closed
form: the optimal rate is w (T - t) / (2 phi_a) and the zero-fee value is
T^4 / (48 phi_a). The grid solver should reproduce both, and a Monte
Carlo evaluation of the returned policy should agree with the grid value.

Run: python3 demos/agent_best_response.py
"""

import numpy as np

from brokerfee.agent import HjbSettings, estimate_agent_value, solve_hjb
from brokerfee.contracts import Constant
from brokerfee.model import ModelParams

params = ModelParams(rate_lower=-100.0, rate_upper=100.0)
target = params.horizon**4 / (48.0 * params.phi_a)

policy, grid = solve_hjb(Constant(0.0), params, HjbSettings(n_w=201, n_z=201))
value = grid.value_at_origin
print(f"grid value at the origin : {value:.6f}")
print(f"closed form T^4/(48 phi_a): {target:.6f}")
print(f"relative error            : {abs(value - target) / target:.2%}")

print()
print("policy slice at z = 0 (closed form pi* = w (T - t)):")
print(f"  {'t':>5s} {'w':>6s} {'solver':>9s} {'exact':>9s}")
for t in (0.0, 0.5):
    for w in (-2.0, 1.0, 3.0):
        got = float(policy(t, w, 0.0))
        exact = w * (params.horizon - t)
        print(f"  {t:5.2f} {w:6.2f} {got:9.4f} {exact:9.4f}")

print()
mc, se = estimate_agent_value(Constant(0.0), policy, params, 40_000, 11)
print(f"Monte Carlo value at the solver policy: {mc:.6f} +- {se:.6f}")
print(f"grid/Monte Carlo gap                  : {abs(mc - value):.6f}")

print()
print("a constant fee shifts the value one for one:")
for c in (0.0, 0.02, 0.04):
    _, g = solve_hjb(Constant(c), params, HjbSettings(n_w=101, n_z=101))
    print(f"  fee {c:.2f} -> value {g.value_at_origin:+.6f}")
