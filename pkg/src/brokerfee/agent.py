"""Agent best response: backward HJB grid solver plus Monte Carlo checks.

For a Markovian fee the client's problem is a degenerate-drift control
problem in the state (Z, W) (plus P when the fee reads the price). The
value function solves

    V_t + sup_pi [pi V_z - phi_a pi^2] + z w + (1/2) eps^2 V_zz
        + (1/2) V_ww [+ w V_p + (1/2) sigma^2 V_pp] = 0,
    V(T, .) = -xi,

and the maximizing rate is the clamped closed form
pi* = clamp(V_z / (2 phi_a), L, U): the Hamiltonian is strictly concave
in pi, so no grid search over rates is needed. The solver uses an
explicit scheme with a CFL-checked time step, upwind differencing for
the advection terms, and one-sided differences at the domain boundary.
Fees outside the Markovian classes are handled by projected coordinate
ascent over a coarse policy table with common random numbers.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .contracts import (Constant, LinearPolynomial, LipschitzTable,
                        evaluate_on_batch)
from .model import DiscretizedPath, FeedbackPolicy, ModelParams
from .rng import split_seed
from . import simulate

__all__ = [
    "HjbSettings", "ValueGrid", "AgentUtilitySpec", "BestResponse",
    "CflError", "UnsupportedContractError",
    "zeta_integral", "solve_hjb", "estimate_agent_value", "best_response",
]


class CflError(RuntimeError):
    """Raised when a user-supplied time step violates the CFL bound."""

    def __init__(self, dt, dt_max):
        super().__init__(
            f"time step {dt:g} violates the CFL bound; maximum stable "
            f"step is {dt_max:g}")
        self.dt_max = dt_max


class UnsupportedContractError(ValueError):
    """Contract outside the classes the grid solver can handle."""


@dataclass(frozen=True)
class HjbSettings:
    """Grid solver knobs.

    The spatial domain is truncated at +-6 sqrt(T) standard deviations for
    w and at +-(6 eps sqrt(T) + max(|L|,|U|) T) for z; Gaussian tails make
    the boundary influence negligible at the acceptance tolerances.
    """

    n_w: int = 201
    n_z: int = 201
    n_p: int = 61
    n_save: int = 81
    # well below the stability limit: the explicit sweep is first order in
    # time, so the extra steps buy accuracy, not just stability
    cfl_safety: float = 0.25
    dt: Optional[float] = None  # override; checked against the CFL bound


@dataclass(frozen=True)
class ValueGrid:
    """Value samples over saved time slices of the backward sweep.

    ``values`` has shape (n_save, [n_p,] n_w, n_z); the slice at the final
    saved time equals the terminal reward exactly.
    """

    t_nodes: np.ndarray
    w_nodes: np.ndarray
    z_nodes: np.ndarray
    values: np.ndarray
    p_nodes: Optional[np.ndarray] = None

    @property
    def value_at_origin(self) -> float:
        v0 = self.values[0]
        if self.p_nodes is not None:
            v0 = _interp_axis(self.p_nodes, v0, 0.0, axis=0)
        v0 = _interp_axis(self.w_nodes, v0, 0.0, axis=0)
        return float(_interp_axis(self.z_nodes, v0, 0.0, axis=0))

    def to_csv(self, filename) -> None:
        """Node coordinates + value, one row per node, for plotting."""
        with open(filename, "w") as fh:
            if self.p_nodes is None:
                fh.write("t,w,z,value\n")
                for i, t in enumerate(self.t_nodes):
                    for j, w in enumerate(self.w_nodes):
                        for k, z in enumerate(self.z_nodes):
                            fh.write(f"{t!r},{w!r},{z!r},"
                                     f"{self.values[i, j, k]!r}\n")
            else:
                fh.write("t,p,w,z,value\n")
                for i, t in enumerate(self.t_nodes):
                    for q, p in enumerate(self.p_nodes):
                        for j, w in enumerate(self.w_nodes):
                            for k, z in enumerate(self.z_nodes):
                                fh.write(f"{t!r},{p!r},{w!r},{z!r},"
                                         f"{self.values[i, q, j, k]!r}\n")


def policy_to_csv(policy: FeedbackPolicy, filename) -> None:
    with open(filename, "w") as fh:
        fh.write("t,w,z,rate\n")
        for i, t in enumerate(policy.t_nodes):
            for j, w in enumerate(policy.w_nodes):
                for k, z in enumerate(policy.z_nodes):
                    fh.write(f"{t!r},{w!r},{z!r},{policy.table[i, j, k]!r}\n")


def _interp_axis(nodes, values, x, axis):
    idx = int(np.clip(np.searchsorted(nodes, x, side="right") - 1,
                      0, len(nodes) - 2))
    frac = np.clip((x - nodes[idx]) / (nodes[idx + 1] - nodes[idx]), 0.0, 1.0)
    lo = np.take(values, idx, axis=axis)
    hi = np.take(values, idx + 1, axis=axis)
    return (1 - frac) * lo + frac * hi


def zeta_integral(path: DiscretizedPath, params: ModelParams) -> float:
    """Left-point quadrature of (eps^2 phi_a / sigma^2) W^2 + Z W over the
    grid; the state-only part of the agent's reweighted utility."""
    dt = path.times[1] - path.times[0]
    coef = params.epsilon**2 * params.phi_a / params.sigma**2
    integrand = coef * path.w[:-1] ** 2 + path.z[:-1] * path.w[:-1]
    return float(np.sum(integrand) * dt)


def _zeta_batch(batch, params: ModelParams) -> np.ndarray:
    dt = batch.times[1] - batch.times[0]
    coef = params.epsilon**2 * params.phi_a / params.sigma**2
    w_left = batch.w[:, :-1]
    return np.sum(coef * w_left**2 + batch.z[:, :-1] * w_left, axis=1) * dt


@dataclass(frozen=True)
class AgentUtilitySpec:
    """The client's objective assembled from the model parameters.

    Pathwise (controlled-measure) form: -xi + int Z W dt - phi_a int pi^2 dt.
    Reference-measure form: M (-xi - 2 eps^2 phi_a log M + zeta), where zeta
    collects the state-only running terms. The two agree in expectation.
    """

    params: ModelParams
    contract: object

    def pathwise_objective(self, batch) -> np.ndarray:
        """Per-path objective on a controlled batch carrying rates."""
        if batch.rates is None:
            raise ValueError("batch carries no per-step rates")
        dt = batch.times[1] - batch.times[0]
        xi = evaluate_on_batch(self.contract, batch)
        w_left = batch.w[:, :-1]
        reward = np.sum(batch.z[:, :-1] * w_left, axis=1) * dt
        cost = self.params.phi_a * np.sum(batch.rates**2, axis=1) * dt
        return -xi + reward - cost

    def reweighted_objective(self, batch) -> np.ndarray:
        """Per-path M-weighted utility on a reference batch with weights."""
        if not batch.has_weights:
            raise ValueError("batch carries no weights")
        xi = evaluate_on_batch(self.contract, batch)
        zeta = _zeta_batch(batch, self.params)
        lam = 2 * self.params.epsilon**2 * self.params.phi_a
        return batch.m * (-xi - lam * batch.log_m + zeta)


def _terminal_reward(contract, p_nodes, w_nodes, z_nodes):
    """(-xi) on the spatial grid; returns (reward, p_dependent)."""
    if isinstance(contract, Constant):
        return -np.full((len(w_nodes), len(z_nodes)), contract.value), False
    if isinstance(contract, LinearPolynomial):
        if contract.operator != "terminal":
            raise UnsupportedContractError(
                "grid solver handles the terminal operator only")
        pp, zz = np.meshgrid(p_nodes, z_nodes, indexing="ij")
        payoff = contract.terminal_payoff(pp, zz)
        return -payoff[:, None, :].repeat(len(w_nodes), axis=1), True
    if isinstance(contract, LipschitzTable):
        horizon_like = contract.sample_time is None
        if not horizon_like:
            raise UnsupportedContractError(
                "grid solver handles terminal-sampled tables only")
        pp, zz = np.meshgrid(p_nodes, z_nodes, indexing="ij")
        payoff = contract.terminal_payoff(pp, zz)
        if np.allclose(payoff, payoff[:1, :]):  # constant in p
            return -np.broadcast_to(payoff[0][None, :],
                                    (len(w_nodes), len(z_nodes))).copy(), False
        return -payoff[:, None, :].repeat(len(w_nodes), axis=1), True
    raise UnsupportedContractError(
        f"grid solver does not support {type(contract).__name__}")


def _upwind_advection(v, speed, dx, axis):
    """speed * dV/dx with the difference chosen by the sign of speed."""
    fwd = np.empty_like(v)
    bwd = np.empty_like(v)
    sl = [slice(None)] * v.ndim

    def ax(s):
        out = list(sl)
        out[axis] = s
        return tuple(out)

    d = np.diff(v, axis=axis) / dx
    fwd[ax(slice(None, -1))] = d
    fwd[ax(slice(-1, None))] = d[ax(slice(-1, None))]
    bwd[ax(slice(1, None))] = d
    bwd[ax(slice(None, 1))] = d[ax(slice(None, 1))]
    return np.maximum(speed, 0.0) * fwd + np.minimum(speed, 0.0) * bwd


def _second_diff(v, dx, axis):
    """Central second difference, zero at the boundary slices."""
    out = np.zeros_like(v)
    sl = [slice(None)] * v.ndim

    def ax(s):
        t = list(sl)
        t[axis] = s
        return tuple(t)

    out[ax(slice(1, -1))] = (v[ax(slice(2, None))] - 2 * v[ax(slice(1, -1))]
                             + v[ax(slice(None, -2))]) / dx**2
    return out


def _central_grad(v, dx, axis):
    return np.gradient(v, dx, axis=axis)


def solve_hjb(contract, params: ModelParams,
              settings: HjbSettings = HjbSettings()):
    """Backward explicit sweep; returns (FeedbackPolicy, ValueGrid).

    The reported agent value is the grid value at the origin. Raises
    :class:`CflError` if an explicit time-step override is too large and
    :class:`UnsupportedContractError` for non-Markovian fees.
    """
    T = params.horizon
    sigma, eps, phi_a = params.sigma, params.epsilon, params.phi_a
    lo, up = params.rate_lower, params.rate_upper
    rate_bound = max(abs(lo), abs(up))

    w_max = 6.0 * np.sqrt(T)
    z_max = 6.0 * eps * np.sqrt(T) + rate_bound * T
    p_max = 6.0 * np.sqrt(sigma**2 * T + T**3 / 3.0)

    n_w, n_z, n_save = settings.n_w, settings.n_z, settings.n_save
    p_nodes = np.linspace(-p_max, p_max, settings.n_p)
    w_nodes = np.linspace(-w_max, w_max, n_w)
    z_nodes = np.linspace(-z_max, z_max, n_z)
    reward_T, p_dependent = _terminal_reward(contract, p_nodes,
                                             w_nodes, z_nodes)
    if p_dependent:
        # price-dependent fees add a third spatial axis; coarsen the other
        # two so the sweep fits in memory and finishes in reasonable time
        n_w, n_z, n_save = min(n_w, 101), min(n_z, 101), min(n_save, 17)
        w_nodes = np.linspace(-w_max, w_max, n_w)
        z_nodes = np.linspace(-z_max, z_max, n_z)
        reward_T, _ = _terminal_reward(contract, p_nodes, w_nodes, z_nodes)
    else:
        p_nodes = None
    dw = w_nodes[1] - w_nodes[0]
    dz = z_nodes[1] - z_nodes[0]

    cfl_denom = eps**2 / dz**2 + 1.0 / dw**2 + rate_bound / dz
    if p_dependent:
        dp = p_nodes[1] - p_nodes[0]
        cfl_denom += 0.5 * sigma**2 * 2 / dp**2 + w_max / dp
    dt_max = settings.cfl_safety / cfl_denom
    if settings.dt is not None:
        if settings.dt > dt_max / settings.cfl_safety:
            raise CflError(settings.dt, dt_max / settings.cfl_safety)
        dt_max = settings.dt
    n_t = int(np.ceil(T / dt_max))
    dt = T / n_t

    save_idx = np.unique(np.linspace(0, n_t, min(n_save, n_t + 1))
                         .round().astype(int))
    t_saved = save_idx * dt
    saved_values = {}
    saved_policy = {}

    v = reward_T.astype(float).copy()
    if p_dependent:
        zw = w_nodes[None, :, None] * z_nodes[None, None, :]
        w_speed = w_nodes[None, :, None]
        z_axis, w_axis = 2, 1
    else:
        zw = w_nodes[:, None] * z_nodes[None, :]
        z_axis, w_axis = 1, 0

    def rate_from(v):
        vz = _central_grad(v, dz, axis=z_axis)
        return np.clip(vz / (2 * phi_a), lo, up)

    def record(step_index, v):
        if step_index in set(save_idx):
            saved_values[step_index] = v.copy()
            saved_policy[step_index] = rate_from(v)

    record(n_t, v)
    for step in range(n_t, 0, -1):
        pi = rate_from(v)
        rhs = (zw
               + _upwind_advection(v, pi, dz, axis=z_axis)
               - phi_a * pi**2
               + 0.5 * eps**2 * _second_diff(v, dz, axis=z_axis)
               + 0.5 * _second_diff(v, dw, axis=w_axis))
        if p_dependent:
            rhs = rhs + (_upwind_advection(v, w_speed, dp, axis=0)
                         + 0.5 * sigma**2 * _second_diff(v, dp, axis=0))
        v = v + dt * rhs
        record(step - 1, v)

    values = np.stack([saved_values[i] for i in save_idx])
    rates = np.stack([saved_policy[i] for i in save_idx])
    grid = ValueGrid(t_saved, w_nodes, z_nodes, values,
                     p_nodes if p_dependent else None)
    if p_dependent:
        # policy table marginalized at the central price slice; the rate rule
        # does not read P through the dynamics, only through the fee's
        # terminal slope, which varies little over the bulk of the domain
        mid = len(p_nodes) // 2
        rates = rates[:, mid, :, :]
    policy = FeedbackPolicy(t_saved, w_nodes, z_nodes, rates, (lo, up))
    return policy, grid


def estimate_agent_value(contract, policy: FeedbackPolicy,
                         params: ModelParams, count: int, seed: int):
    """Monte Carlo value of following ``policy`` against ``contract``.

    Simulates under the controlled measure and averages the pathwise
    objective; the stochastic-integral part of the trading profit has zero
    mean and is omitted. Returns (value, standard error).
    """
    batch = simulate.simulate_controlled(params, policy, count, seed)
    spec = AgentUtilitySpec(params, contract)
    samples = spec.pathwise_objective(batch)
    value, se = simulate._mean_se(samples)
    return value, se


@dataclass(frozen=True)
class BestResponse:
    policy: FeedbackPolicy
    value: float
    value_se: float
    grid: Optional[ValueGrid]
    converged: bool = True
    trace: tuple = ()


def _is_markovian(contract) -> bool:
    if isinstance(contract, Constant):
        return True
    if isinstance(contract, LinearPolynomial):
        return contract.operator == "terminal"
    if isinstance(contract, LipschitzTable):
        return contract.sample_time is None
    return False


def _nearest_markovian(contract):
    """Markovian stand-in used to seed the coordinate-ascent fallback."""
    if isinstance(contract, LinearPolynomial):
        return LinearPolynomial(contract.coeffs, contract.cap, "terminal")
    return Constant(0.0)


def best_response(contract, params: ModelParams,
                  settings: HjbSettings = HjbSettings(),
                  mc_count: Optional[int] = None, seed: int = 0,
                  ascent_cap: int = 200, ascent_tol: float = 1e-6
                  ) -> BestResponse:
    """Optimal trading policy and value for ``contract``.

    Markovian classes go through the grid solver. Other fees are handled
    by projected coordinate ascent over a coarse policy table, seeded by
    the nearest Markovian approximation, with common random numbers across
    iterates so value comparisons are low-variance. Non-convergence at the
    iteration cap is reported via the ``converged`` flag, not an error.
    """
    if _is_markovian(contract):
        policy, grid = solve_hjb(contract, params, settings)
        return BestResponse(policy, grid.value_at_origin, 0.0, grid)

    count = mc_count if mc_count is not None else min(params.n_paths, 4000)
    eval_seed = split_seed(seed, "ascent-crn")
    seed_policy, _ = solve_hjb(_nearest_markovian(contract), params, settings)

    T = params.horizon
    t_nodes = np.linspace(0.0, T, 4)
    w_nodes = np.linspace(-6 * np.sqrt(T), 6 * np.sqrt(T), 5)
    rate_bound = max(abs(params.rate_lower), abs(params.rate_upper))
    z_half = 6 * params.epsilon * np.sqrt(T) + rate_bound * T
    z_nodes = np.linspace(-z_half, z_half, 5)
    bounds = (params.rate_lower, params.rate_upper)
    tt, ww, zz = np.meshgrid(t_nodes, w_nodes, z_nodes, indexing="ij")
    table = seed_policy(tt.ravel(), ww.ravel(), zz.ravel()).reshape(tt.shape)

    def objective(tab):
        pol = FeedbackPolicy(t_nodes, w_nodes, z_nodes, tab, bounds)
        val, _ = estimate_agent_value(contract, pol, params, count, eval_seed)
        return val

    best = objective(table)
    trace = [best]
    coords = list(np.ndindex(table.shape))
    step = max(0.25 * min(bounds[1] - bounds[0], 8.0), 1e-3)
    converged = False
    it = 0
    while it < ascent_cap:
        improved_this_sweep = 0.0
        for coord in coords:
            if it >= ascent_cap:
                break
            it += 1
            base = table[coord]
            for cand in (base + step, base - step):
                cand = np.clip(cand, bounds[0], bounds[1])
                if cand == base:
                    continue
                table[coord] = cand
                val = objective(table)
                if val > best + 1e-12:
                    improved_this_sweep += val - best
                    best = val
                    base = cand
                else:
                    table[coord] = base
            trace.append(best)
        if improved_this_sweep < ascent_tol:
            step *= 0.5
            if step < 1e-4:
                converged = True
                break

    policy = FeedbackPolicy(t_nodes, w_nodes, z_nodes, table, bounds)
    value, se = estimate_agent_value(contract, policy, params, count, eval_seed)
    return BestResponse(policy, value, se, None, converged, tuple(trace))
