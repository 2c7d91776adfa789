"""Outer contract search for the broker.

The broker picks a contract from a compact coefficient family; for each
candidate the client's best response is computed and the broker's value
J_p = E[xi - phi_p * int pi^2 dt] is estimated under the responding
measure. Candidates violating the client's participation constraint are
rejected outright. The search is derivative-free (the objective is a
noisy black box in the coefficients): Latin-hypercube screening over the
coefficient box followed by Nelder-Mead refinement from the best screened
point, with every proposal projected back into the box. The full
evaluation log is the maximizing sequence the existence argument asks
for, and convergence diagnostics are read off its incumbent trail.
"""

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from . import simulate
from .agent import HjbSettings, best_response, estimate_agent_value
from .contracts import (Constant, LinearPolynomial, LipschitzTable,
                        contract_to_record, project_to_box)
from .model import ModelParams
from .rng import split_seed, uniforms

__all__ = [
    "PrincipalUtilitySpec", "PrincipalEvaluation", "MaximizingSequence",
    "ContractFamily", "ConvergenceReport",
    "principal_objective", "feasibility_seed", "optimize",
    "convergence_report",
]

INFEASIBLE_OBJECTIVE = -1e12


@dataclass(frozen=True)
class PrincipalUtilitySpec:
    """Broker-side integrand: fee received minus quadratic rate penalty."""

    params: ModelParams
    contract: object

    def pathwise_objective(self, batch) -> np.ndarray:
        """xi(X) - phi_p * int pi^2 dt per path of a controlled batch."""
        if batch.rates is None:
            raise ValueError("batch must carry the controlled rates")
        xi = self.contract.evaluate_batch(batch.times, batch.p, batch.z)
        dt = batch.times[1] - batch.times[0]
        penalty = np.sum(batch.rates**2, axis=1) * dt
        return xi - self.params.phi_p * penalty


@dataclass(frozen=True)
class PrincipalEvaluation:
    j_p: float
    j_p_se: float
    v_a: float
    v_a_se: float
    participation: bool


def principal_objective(contract, params: ModelParams,
                        settings: HjbSettings = HjbSettings(),
                        mc_count: Optional[int] = None,
                        seed: int = 0) -> PrincipalEvaluation:
    """Broker value of one contract against the client's best response.

    The client side is solved first; the broker integrand is then averaged
    over a controlled simulation at the responding policy. ``seed`` keys
    the simulation, so calls sharing a seed use common random numbers and
    their values are directly comparable. The participation flag allows
    three standard errors of slack below the reservation level.
    """
    response = best_response(contract, params, settings, seed=seed)
    count = mc_count if mc_count is not None else params.n_paths
    batch = simulate.simulate_controlled(params, response.policy, count,
                                         split_seed(seed, "principal-crn"))
    spec = PrincipalUtilitySpec(params, contract)
    j_p, j_p_se = simulate._mean_se(spec.pathwise_objective(batch))
    participation = response.value >= params.reservation - 3 * response.value_se
    return PrincipalEvaluation(j_p, j_p_se, response.value,
                               response.value_se, participation)


@dataclass(frozen=True)
class ContractFamily:
    """Compact parametric family searched by the broker.

    ``kind`` selects the contract class; ``cap`` is the coefficient box
    half-width K. Polynomial families need ``degree`` (and an operator
    tag); table families need the sampling grids plus the Holder data.
    """

    kind: str
    cap: float
    degree: int = 1
    operator: str = "terminal"
    p_nodes: Optional[np.ndarray] = None
    z_nodes: Optional[np.ndarray] = None
    gamma: float = 1.0
    holder_const: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "linear_polynomial",
                             "lipschitz_table"):
            raise ValueError(f"unknown contract family: {self.kind}")
        if self.cap <= 0:
            raise ValueError("coefficient cap must be positive")
        if self.kind == "lipschitz_table" and (
                self.p_nodes is None or self.z_nodes is None):
            raise ValueError("table family needs p_nodes and z_nodes")

    @property
    def dimension(self) -> int:
        if self.kind == "constant":
            return 1
        if self.kind == "linear_polynomial":
            return self.degree**2
        return len(self.p_nodes) * len(self.z_nodes)

    def make(self, theta: np.ndarray):
        theta = np.clip(np.asarray(theta, dtype=float), -self.cap, self.cap)
        if self.kind == "constant":
            return Constant(float(theta[0]))
        if self.kind == "linear_polynomial":
            coeffs = theta.reshape(self.degree, self.degree)
            return LinearPolynomial(coeffs, self.cap, self.operator)
        values = theta.reshape(len(self.p_nodes), len(self.z_nodes))
        # the box is the search set; Holder membership is checked by the
        # audits, not imposed on intermediate proposals
        return LipschitzTable(self.p_nodes, self.z_nodes, values,
                              self.gamma, self.holder_const, self.cap,
                              enforce_holder=False)

    def coefficients(self, contract) -> np.ndarray:
        if self.kind == "constant":
            return np.array([contract.value])
        if self.kind == "linear_polynomial":
            return contract.coeffs.ravel().copy()
        return contract.values.ravel().copy()


class MaximizingSequence:
    """Append-only log of contract evaluations with an incumbent trail."""

    def __init__(self, family: ContractFamily):
        self.family = family
        self.records = []
        self.best_index = None

    def append(self, theta, evaluation: PrincipalEvaluation,
               stage: str) -> None:
        objective = (evaluation.j_p if evaluation.participation
                     else INFEASIBLE_OBJECTIVE)
        improved = (evaluation.participation
                    and (self.best_index is None
                         or objective > self.records[self.best_index]
                         ["objective"]))
        if improved:
            self.best_index = len(self.records)
        self.records.append({
            "iteration": len(self.records),
            "stage": stage,
            "coefficients": np.asarray(theta, dtype=float).copy(),
            "j_p": evaluation.j_p, "j_p_se": evaluation.j_p_se,
            "v_a": evaluation.v_a, "v_a_se": evaluation.v_a_se,
            "participation": evaluation.participation,
            "objective": objective,
            "best_so_far": (self.records[self.best_index]["objective"]
                            if self.best_index is not None and not improved
                            else objective),
        })

    def __len__(self) -> int:
        return len(self.records)

    @property
    def incumbent(self):
        if self.best_index is None:
            return None
        return self.family.make(self.records[self.best_index]["coefficients"])

    def best_trace(self) -> np.ndarray:
        """Best-so-far objective per record; nondecreasing by construction."""
        return np.array([r["best_so_far"] for r in self.records])

    def incumbent_updates(self):
        """Records where the incumbent changed, in order."""
        out, best = [], -np.inf
        for r in self.records:
            if r["participation"] and r["objective"] > best:
                best = r["objective"]
                out.append(r)
        return out

    def to_csv(self, filename) -> None:
        dim = self.family.dimension
        with open(filename, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "stage"]
                            + [f"coef_{k}" for k in range(dim)]
                            + ["j_p", "j_p_se", "v_a", "v_a_se",
                               "participation", "best_so_far"])
            for r in self.records:
                writer.writerow(
                    [r["iteration"], r["stage"]]
                    + [repr(float(c)) for c in r["coefficients"]]
                    + [repr(r["j_p"]), repr(r["j_p_se"]), repr(r["v_a"]),
                       repr(r["v_a_se"]), int(r["participation"]),
                       repr(r["best_so_far"])])

    def to_json(self, filename) -> None:
        payload = []
        for r in self.records:
            entry = dict(r)
            entry["coefficients"] = r["coefficients"].tolist()
            entry["contract"] = contract_to_record(
                self.family.make(r["coefficients"]))
            payload.append(entry)
        with open(filename, "w") as fh:
            json.dump(payload, fh, indent=1)


def feasibility_seed(params: ModelParams, family: ContractFamily,
                     settings: HjbSettings = HjbSettings(),
                     seed: int = 0) -> Constant:
    """Constant contract that binds the participation constraint.

    The client's gross surplus (value at zero fee) is estimated once; the
    constant fee equal to surplus minus the reservation level leaves the
    client exactly at reservation, so it is the largest feasible constant
    up to estimation error.
    """
    response = best_response(Constant(0.0), params, settings, seed=seed)
    needed = response.value - params.reservation
    if abs(needed) > family.cap:
        raise ValueError(
            f"family cap K={family.cap:g} cannot reach the binding constant; "
            f"need K >= {abs(needed):.6g}")
    return Constant(needed)


def _latin_hypercube(n: int, dim: int, seed: int) -> np.ndarray:
    """n points in [0, 1]^dim, one per axis stratum in every dimension."""
    u = uniforms(split_seed(seed, "lhs-jitter"), (n, dim))
    order = np.argsort(uniforms(split_seed(seed, "lhs-perm"), (n, dim)),
                       axis=0)
    return (order + u) / n


class _BudgetExhausted(Exception):
    pass


def optimize(family: ContractFamily, params: ModelParams, budget: int = 200,
             settings: HjbSettings = HjbSettings(),
             mc_count: Optional[int] = None, seed: int = 0):
    """Search the family for the broker-optimal contract.

    Returns (best contract, MaximizingSequence). All evaluations share
    common random numbers keyed by ``seed``. The first evaluation is the
    participation-binding constant seed when the family admits it; then
    Latin-hypercube screening spends about a third of the budget and
    Nelder-Mead refines from the best point found. Additive-fee
    invariance makes repeat client solves for constant contracts free:
    the response policy is independent of the constant, so it is solved
    once and the value shifted.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    sequence = MaximizingSequence(family)
    count = mc_count if mc_count is not None else params.n_paths
    crn_seed = split_seed(seed, "principal-crn")
    cache = {}

    def evaluate(theta, stage):
        if len(sequence) >= budget:
            raise _BudgetExhausted
        theta = np.clip(np.asarray(theta, dtype=float), -family.cap,
                        family.cap)
        contract = project_to_box(family.make(theta))
        if isinstance(contract, Constant):
            # additive fee: policy and penalty identical across constants
            if "constant" not in cache:
                resp = best_response(Constant(0.0), params, settings,
                                     seed=seed)
                batch = simulate.simulate_controlled(
                    params, resp.policy, count, crn_seed)
                dt = batch.times[1] - batch.times[0]
                pen = params.phi_p * np.sum(batch.rates**2, axis=1) * dt
                pen_mean, pen_se = simulate._mean_se(pen)
                cache["constant"] = (resp, pen_mean, pen_se)
            resp, pen_mean, pen_se = cache["constant"]
            c = contract.value
            evaluation = PrincipalEvaluation(
                c - pen_mean, pen_se, resp.value - c, resp.value_se,
                resp.value - c >= params.reservation - 3 * resp.value_se)
        else:
            resp = best_response(contract, params, settings, seed=seed)
            batch = simulate.simulate_controlled(params, resp.policy, count,
                                                 crn_seed)
            spec = PrincipalUtilitySpec(params, contract)
            j_p, j_p_se = simulate._mean_se(spec.pathwise_objective(batch))
            evaluation = PrincipalEvaluation(
                j_p, j_p_se, resp.value, resp.value_se,
                resp.value >= params.reservation - 3 * resp.value_se)
        sequence.append(family.coefficients(contract), evaluation, stage)
        return (evaluation.j_p if evaluation.participation
                else INFEASIBLE_OBJECTIVE)

    seed_error = None
    try:
        try:
            anchor = feasibility_seed(params, family, settings, seed=seed)
            theta0 = np.full(family.dimension, 0.0)
            theta0[0] = anchor.value
            if family.kind == "constant":
                evaluate(theta0, "seed")
            elif family.kind == "linear_polynomial":
                # polynomial families have no constant term; screen from zero
                theta0 = None
            else:
                evaluate(np.full(family.dimension, anchor.value), "seed")
        except ValueError as exc:
            seed_error = exc

        n_screen = max(min(budget // 3, budget - len(sequence) - 1), 0)
        points = _latin_hypercube(n_screen, family.dimension, seed)
        for k in range(n_screen):
            evaluate(family.cap * (2.0 * points[k] - 1.0), "screen")

        if sequence.best_index is not None:
            start = sequence.records[sequence.best_index]["coefficients"]
        else:
            start = np.zeros(family.dimension)
        remaining = budget - len(sequence)
        if remaining > 0:
            minimize(lambda th: -evaluate(th, "refine"), start,
                     method="Nelder-Mead",
                     options={"maxfev": remaining, "xatol": 1e-6,
                              "fatol": 1e-12, "initial_simplex":
                              _initial_simplex(start, family.cap)})
    except _BudgetExhausted:
        pass

    if sequence.best_index is None:
        hint = f" (feasibility_seed: {seed_error})" if seed_error else ""
        raise RuntimeError(
            "no feasible contract found within budget; consider the "
            "feasibility_seed constant as a starting point" + hint)
    return sequence.incumbent, sequence


def _initial_simplex(start, cap):
    dim = len(start)
    simplex = np.tile(start, (dim + 1, 1))
    step = 0.05 * cap
    for k in range(dim):
        simplex[k + 1, k] = np.clip(start[k] + step, -cap, cap)
        if simplex[k + 1, k] == start[k]:
            simplex[k + 1, k] = start[k] - step
    return simplex


@dataclass(frozen=True)
class ConvergenceReport:
    n_updates: int
    cauchy_tail: float          # max pairwise coefficient distance, last 1/4
    jp_increments: np.ndarray
    limit_point: np.ndarray
    limit_value: float
    subsequence_exists: bool    # compact box: always true

    def summary(self) -> str:
        return (f"{self.n_updates} incumbent updates, cauchy tail "
                f"{self.cauchy_tail:.3g}, limit value {self.limit_value:.6g}")


def convergence_report(sequence: MaximizingSequence) -> ConvergenceReport:
    """Diagnostics of the incumbent trail.

    The coefficient box is compact, so a convergent subsequence always
    exists; the report quantifies how settled the trail actually is via
    the max pairwise distance over the last quarter of incumbent updates
    and the increments of the best objective.
    """
    if len(sequence) < 2:
        raise ValueError("need at least two evaluations")
    updates = sequence.incumbent_updates()
    coeffs = np.array([r["coefficients"] for r in updates])
    values = np.array([r["objective"] for r in updates])
    tail_start = max(len(updates) - max(len(updates) // 4, 1), 0)
    tail = coeffs[tail_start:]
    cauchy = 0.0
    for i in range(len(tail)):
        for j in range(i + 1, len(tail)):
            cauchy = max(cauchy, float(np.max(np.abs(tail[i] - tail[j]))))
    return ConvergenceReport(
        n_updates=len(updates),
        cauchy_tail=cauchy,
        jp_increments=np.diff(values),
        limit_point=coeffs[-1],
        limit_value=float(values[-1]),
        subsequence_exists=True)
