"""The broker's search over constant fees.

With a quadratic rate penalty and a zero reservation level the optimal
constant fee extracts the client's whole trading surplus: c* = 1/24 and
the broker value is 1/48 at the package's benchmark parameters. The
search log is a maximizing sequence; its incumbent trail should settle
on the closed-form answer.

Run: python3 demos/contract_search.py
"""

from brokerfee import principal
from brokerfee.model import ModelParams

params = ModelParams(rate_lower=-100.0, rate_upper=100.0, phi_p=0.25,
                     reservation=0.0, n_paths=40_000)
family = principal.ContractFamily("constant", cap=1.0)

seed_contract = principal.feasibility_seed(params, family)
print(f"participation-binding constant: {seed_contract.value:.6f} "
      f"(closed form 1/24 = {1 / 24:.6f})")

best, sequence = principal.optimize(family, params, budget=30, seed=5)
print(f"\nsearch used {len(sequence)} evaluations")
print(f"{'iter':>4s} {'stage':>7s} {'fee':>9s} {'J_p':>9s} {'V_a':>9s} "
      f"{'feasible':>8s} {'best':>9s}")
for record in sequence.records[:12]:
    print(f"{record['iteration']:4d} {record['stage']:>7s} "
          f"{record['coefficients'][0]:9.4f} {record['j_p']:9.4f} "
          f"{record['v_a']:9.4f} {str(record['participation']):>8s} "
          f"{record['best_so_far']:9.4f}")
if len(sequence) > 12:
    print("  ...")

print(f"\nincumbent fee : {best.value:.6f}  (target 1/24 = {1 / 24:.6f})")
record = sequence.records[sequence.best_index]
print(f"incumbent J_p : {record['j_p']:.6f}  (target 1/48 = {1 / 48:.6f})")

report = principal.convergence_report(sequence)
print(f"\nconvergence: {report.summary()}")
