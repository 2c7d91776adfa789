"""Finite scenario-tree oracle for the relaxed-control theory.

Everything the relaxation argument claims in the continuous model has an
exact finite analogue on a scenario tree: relaxed controls are explicit
finite measures over (path-atom, density-atom) pairs, the strong problem
is a finite concave program with a Gibbs closed form, and the claims
(strong controls embed, the relaxed optimum collapses to a Dirac density,
values coincide, an admissible drift can be extracted) can be brute-forced
to solver tolerance. This module is the verification half of the package:
it never trusts the continuous solvers, only convex duality on the tree.
"""

import itertools
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linprog, minimize as sp_minimize
from scipy.sparse import csr_matrix
from scipy.special import logsumexp

from .model import ModelParams
from .rng import uniforms

__all__ = [
    "ScenarioTree", "DiscreteConstraintSet", "RelaxedControlDiscrete",
    "StrongSolution", "CollapseReport", "ExtractionReport",
    "build_tree", "node_constraint_set", "atom_utility_from_contract",
    "solve_strong_discrete", "solve_relaxed_discrete",
    "verify_collapse", "extract_strong_control",
    "default_density_grid", "save_instance", "load_instance",
]

MAX_ATOMS = 100_000


@dataclass(frozen=True)
class ScenarioTree:
    """Finite discrete analogue of the canonical path space.

    Atoms are root-to-leaf paths; at each of ``depth`` steps every channel
    moves by one of ``branching`` increments whose second moment matches
    dt * scale^2 for the channel. ``choices`` stores, per atom and step,
    the index of the joint increment combination, enumerated so that the
    atoms of any tree node form a contiguous block.
    """

    depth: int
    branching: int
    channels: int
    dt: float
    scales: tuple
    combos: np.ndarray      # (n_combos, channels) per-step increments
    choices: np.ndarray     # (n_atoms, depth) combo index per step
    paths: np.ndarray       # (n_atoms, depth + 1, channels) cumulative
    probs: np.ndarray       # (n_atoms,) uniform base probabilities

    @property
    def n_atoms(self) -> int:
        return self.paths.shape[0]

    @property
    def n_combos(self) -> int:
        return self.combos.shape[0]

    def node_slice(self, depth: int, prefix: int) -> slice:
        """Contiguous atom block of the node given by a length-``depth``
        choice prefix encoded as a base-n_combos integer."""
        block = self.n_combos ** (self.depth - depth)
        return slice(prefix * block, (prefix + 1) * block)


def build_tree(depth: int, branching: int, params: ModelParams,
               channels: int = 3) -> ScenarioTree:
    """Deterministic tree with per-step increments matching the model's
    per-step variances (sigma, eps, 1 channel scales)."""
    if branching not in (2, 3):
        raise ValueError("branching must be 2 (binomial) or 3 (trinomial)")
    if not 1 <= depth <= 4:
        raise ValueError("depth must lie in 1..4")
    n_combos = branching**channels
    n_atoms = n_combos**depth
    if n_atoms > MAX_ATOMS:
        raise ValueError(f"atom count {n_atoms} exceeds {MAX_ATOMS}")
    dt = params.horizon / depth
    scales = (params.sigma, params.epsilon, 1.0)[:channels]
    if branching == 2:
        base = np.array([-1.0, 1.0]) * np.sqrt(dt)
    else:
        # uniform probabilities; stretch so the second moment is still dt
        base = np.array([-1.0, 0.0, 1.0]) * np.sqrt(1.5 * dt)
    per_channel = [s * base for s in scales]
    combos = np.array(list(itertools.product(*per_channel)))
    choices = np.array(list(itertools.product(range(n_combos), repeat=depth)),
                       dtype=int)
    increments = combos[choices]                  # (n_atoms, depth, channels)
    paths = np.zeros((n_atoms, depth + 1, channels))
    np.cumsum(increments, axis=1, out=paths[:, 1:, :])
    probs = np.full(n_atoms, 1.0 / n_atoms)
    return ScenarioTree(depth, branching, channels, dt, tuple(scales),
                        combos, choices, paths, probs)


def atom_utility_from_contract(tree: ScenarioTree, contract,
                               params: ModelParams) -> np.ndarray:
    """Per-atom utility -xi(path) + zeta(path) in model units (3-channel
    trees only); the entropy part is carried by the solver, not by u."""
    if tree.channels != 3:
        raise ValueError("contract utilities require a 3-channel tree")
    times = np.linspace(0.0, tree.depth * tree.dt, tree.depth + 1)
    p, z, w = tree.paths[:, :, 0], tree.paths[:, :, 1], tree.paths[:, :, 2]
    xi = contract.evaluate_batch(times, p, z)
    coef = params.epsilon**2 * params.phi_a / params.sigma**2
    zeta = np.sum(coef * w[:, :-1] ** 2 + z[:, :-1] * w[:, :-1],
                  axis=1) * tree.dt
    return -xi + zeta


@dataclass(frozen=True)
class DiscreteConstraintSet:
    """Linear forms c_r(x) implementing the stopped-increment constraints.

    Each form contributes sum_x p(x) E[m|x] c_r(x) <= 0 to the feasible
    set; adaptedness is recorded via the step index its eta depends on.
    """

    forms: np.ndarray      # (n_constraints, n_atoms)
    labels: tuple
    s_steps: np.ndarray    # (n_constraints,) eta measurability index

    @property
    def n_constraints(self) -> int:
        return self.forms.shape[0]

    def moments(self, probs, cond_mean) -> np.ndarray:
        return self.forms @ (probs * cond_mean)


_ROW_NAMES = ("drift_p_upper", "drift_p_lower", "drift_w_upper",
              "drift_w_lower", "rate_upper", "rate_lower")


def node_constraint_set(tree: ScenarioTree, rate_lower: float,
                        rate_upper: float, rows=range(6)
                        ) -> DiscreteConstraintSet:
    """One constraint per (tree node, selected row): eta = indicator of the
    node, window = the node's own step. These etas are the natural finite
    test family on a tree; feasibility with all six rows pins the tilted
    drift of P to W, keeps W driftless, and bounds the Z drift to [L, U].
    """
    if tree.channels != 3:
        raise ValueError("constraint rows require a 3-channel tree")
    forms, labels, s_steps = [], [], []
    inc = tree.combos[tree.choices]           # (n_atoms, depth, channels)
    for d in range(tree.depth):
        w_node = tree.paths[:, d, 2]
        dp_, dz_, dw_ = inc[:, d, 0], inc[:, d, 1], inc[:, d, 2]
        dt = tree.dt
        row_values = (
            dp_ - w_node * dt, w_node * dt - dp_,
            dw_, -dw_,
            dz_ - rate_upper * dt, rate_lower * dt - dz_,
        )
        for prefix in range(tree.n_combos**d):
            sl = tree.node_slice(d, prefix)
            for r in rows:
                form = np.zeros(tree.n_atoms)
                form[sl] = row_values[r][sl]
                forms.append(form)
                labels.append(f"d{d}/node{prefix}/{_ROW_NAMES[r]}")
                s_steps.append(d)
    return DiscreteConstraintSet(np.array(forms), tuple(labels),
                                 np.array(s_steps, dtype=int))


@dataclass(frozen=True)
class StrongSolution:
    value: float
    density: np.ndarray        # optimal m per atom
    multipliers: Optional[np.ndarray]
    kkt_residual: float
    iterations: int


def _gibbs(probs, adjusted_u, lam):
    log_m = adjusted_u / lam - logsumexp(adjusted_u / lam, b=probs)
    return np.exp(log_m)


def _primal_value(probs, m, u, lam):
    # m log m -> 0 as m -> 0; clip keeps the log finite at hard zeros
    safe = np.maximum(m, 1e-300)
    return float(np.sum(probs * (m * u - lam * safe * np.log(safe))))


def solve_strong_discrete(tree: ScenarioTree, u: np.ndarray, lam: float,
                          constraints: Optional[DiscreteConstraintSet] = None,
                          tol: float = 1e-9, max_iter: int = 10_000
                          ) -> StrongSolution:
    """Maximize sum p [m u - lam m log m] over densities m > 0 with
    sum p m = 1 and the optional linear constraint set.

    With only the normalization the optimum is the Gibbs density
    m = e^{u/lam} / sum p e^{u/lam}, value lam log sum p e^{u/lam}.
    Otherwise the strictly concave program is solved by projected-gradient
    ascent on the Lagrange dual (nonnegative multipliers on the linear
    constraints, normalization absorbed into the Gibbs form), with
    backtracking steps and a KKT-residual stopping rule.
    """
    if lam <= 0:
        raise ValueError("entropy weight must be positive")
    probs = tree.probs
    u = np.asarray(u, dtype=float)
    if constraints is None or constraints.n_constraints == 0:
        m = _gibbs(probs, u, lam)
        value = float(lam * logsumexp(u / lam, b=probs))
        return StrongSolution(value, m, None, 0.0, 0)

    c = constraints.forms

    def dual(mu):
        return float(lam * logsumexp((u - c.T @ mu) / lam, b=probs))

    def dual_grad(mu):
        # the dual gradient is minus the constraint moments E[m(mu) c_r]
        return -(c @ (probs * _gibbs(probs, u - c.T @ mu, lam)))

    def kkt(mu):
        moments = -dual_grad(mu)
        return max(float(np.max(moments, initial=0.0)),
                   float(np.max(np.abs(mu * moments), initial=0.0)))

    # quasi-Newton dual ascent under the sign constraints, then plain
    # projected-gradient polishing until the KKT residual clears tol
    result = sp_minimize(dual, np.zeros(constraints.n_constraints),
                         jac=dual_grad, method="L-BFGS-B",
                         bounds=[(0.0, None)] * constraints.n_constraints,
                         options={"maxiter": max_iter, "ftol": 1e-16,
                                  "gtol": 1e-14})
    mu = result.x
    iterations = int(result.nit)
    residual = kkt(mu)
    lipschitz = max(float(np.linalg.norm(c * np.sqrt(probs), 2)**2) / lam,
                    1e-12)
    step = 0.5 / lipschitz
    while residual > tol and iterations < max_iter:
        mu = np.maximum(mu - step * dual_grad(mu), 0.0)
        residual = kkt(mu)
        iterations += 1
    if residual > 1e3 * tol:
        raise RuntimeError(
            f"dual ascent did not converge: KKT residual {residual:g} "
            "(instance may be infeasible)")
    m = _gibbs(probs, u - c.T @ mu, lam)
    return StrongSolution(_primal_value(probs, m, u, lam), m, mu,
                          residual, iterations)


def default_density_grid(extra_values=None, n: int = 21,
                         lo: float = 1e-3, hi: float = 1e3) -> np.ndarray:
    """Log-spaced density atoms spanning [lo, hi], optionally extended by
    exact values (e.g. a Gibbs solution) so the Dirac optimum is on-grid."""
    grid = np.geomspace(lo, hi, n)
    if extra_values is not None:
        grid = np.concatenate([grid, np.atleast_1d(extra_values)])
    return np.unique(grid)


@dataclass(frozen=True)
class RelaxedControlDiscrete:
    """A finite measure over (path-atom, density-atom) pairs.

    ``atoms[x]`` lists the admissible density values of path-atom x and
    ``weights[x]`` the conditional distribution over them. Dirac mode is
    the special case of a single unit weight per atom.
    """

    probs: np.ndarray
    atoms: tuple        # tuple of 1-D arrays, one per path-atom
    weights: tuple      # matching conditional probabilities

    def __post_init__(self):
        if not (len(self.atoms) == len(self.weights) == len(self.probs)):
            raise ValueError("per-atom lists must match the base measure")

    @classmethod
    def dirac(cls, tree: ScenarioTree, m: np.ndarray):
        """The embedding of a strong control (density a function of the
        path) as a relaxed control."""
        atoms = tuple(np.array([v]) for v in m)
        weights = tuple(np.array([1.0]) for _ in m)
        return cls(tree.probs, atoms, weights)

    def conditional_mean(self) -> np.ndarray:
        return np.array([float(w @ a)
                         for a, w in zip(self.atoms, self.weights)])

    def mean_density(self) -> float:
        return float(self.probs @ self.conditional_mean())

    def entropy(self) -> float:
        return float(sum(p * float(w @ (a * np.log(a)))
                         for p, a, w in zip(self.probs, self.atoms,
                                            self.weights)))

    def objective(self, u: np.ndarray, lam: float) -> float:
        linear = float(self.probs @ (u * self.conditional_mean()))
        return linear - lam * self.entropy()

    def max_secondary_weight(self) -> float:
        """0 for exact Dirac mode; small for a collapsed optimum."""
        worst = 0.0
        for w in self.weights:
            if len(w) > 1:
                worst = max(worst, float(np.sort(w)[-2]))
        return worst

    def is_dirac(self, tol: float = 1e-6) -> bool:
        return self.max_secondary_weight() <= tol

    def check_feasibility(self, constraints=None, tol: float = 1e-9) -> dict:
        """Conditions of the relaxed-control definition, as diagnostics."""
        cond_mean = self.conditional_mean()
        report = {
            "normalization_gap": abs(float(self.probs @ cond_mean) - 1.0),
            "min_density_atom": float(min(np.min(a) for a in self.atoms)),
            "marginal_gap": float(max(abs(np.sum(w) - 1.0)
                                      for w in self.weights)),
            "entropy": self.entropy(),
        }
        if constraints is not None:
            moments = constraints.moments(self.probs, cond_mean)
            report["max_constraint_moment"] = float(np.max(moments,
                                                           initial=0.0))
        report["feasible"] = (
            report["normalization_gap"] <= tol
            and report["min_density_atom"] > 0
            and report["marginal_gap"] <= tol
            and report.get("max_constraint_moment", 0.0) <= tol)
        return report


def solve_relaxed_discrete(tree: ScenarioTree, u: np.ndarray, lam: float,
                           density_grid,
                           constraints: Optional[DiscreteConstraintSet] = None,
                           ) -> tuple:
    """Optimize over randomized-mode relaxed controls on a finite density
    grid; returns (value, RelaxedControlDiscrete).

    With the density values fixed to grid atoms the program is linear in
    the conditional weights q(x, j): maximize
    sum_x p(x) sum_j q(x,j) [m_j u(x) - lam m_j log m_j] subject to the
    per-atom marginals, the normalization, and the constraint moments.
    """
    if lam <= 0:
        raise ValueError("entropy weight must be positive")
    probs = np.asarray(tree.probs, dtype=float)
    u = np.asarray(u, dtype=float)
    n_atoms = tree.n_atoms
    grids = ([np.asarray(density_grid[x], dtype=float) for x in range(n_atoms)]
             if isinstance(density_grid, (list, tuple))
             else [np.asarray(density_grid, dtype=float)] * n_atoms)
    for g in grids:
        if np.any(g <= 0):
            raise ValueError("density atoms must be strictly positive")
    sizes = [len(g) for g in grids]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n_var = offsets[-1]

    cost = np.concatenate([
        -probs[x] * (g * u[x] - lam * g * np.log(g))
        for x, g in enumerate(grids)])

    rows, cols, vals = [], [], []
    for x, g in enumerate(grids):
        idx = np.arange(offsets[x], offsets[x + 1])
        rows.extend([x] * len(idx))
        cols.extend(idx)
        vals.extend([1.0] * len(idx))
    mass_row = np.concatenate([probs[x] * g for x, g in enumerate(grids)])
    rows.extend([n_atoms] * n_var)
    cols.extend(range(n_var))
    vals.extend(mass_row)
    a_eq = csr_matrix((vals, (rows, cols)), shape=(n_atoms + 1, n_var))
    b_eq = np.concatenate([np.ones(n_atoms), [1.0]])

    a_ub = b_ub = None
    if constraints is not None and constraints.n_constraints > 0:
        rows, cols, vals = [], [], []
        for r in range(constraints.n_constraints):
            coeff = constraints.forms[r]
            for x, g in enumerate(grids):
                if coeff[x] == 0.0:
                    continue
                idx = np.arange(offsets[x], offsets[x + 1])
                rows.extend([r] * len(idx))
                cols.extend(idx)
                vals.extend(probs[x] * coeff[x] * g)
        a_ub = csr_matrix((vals, (rows, cols)),
                          shape=(constraints.n_constraints, n_var))
        b_ub = np.zeros(constraints.n_constraints)

    result = linprog(cost, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq,
                     bounds=(0, None), method="highs")
    if not result.success:
        raise RuntimeError(f"relaxed program failed: {result.message}")
    q = result.x
    weights = tuple(q[offsets[x]:offsets[x + 1]] / max(
        np.sum(q[offsets[x]:offsets[x + 1]]), 1e-300)
        for x in range(n_atoms))
    control = RelaxedControlDiscrete(probs, tuple(np.array(g) for g in grids),
                                     weights)
    return float(-result.fun), control


@dataclass(frozen=True)
class CollapseReport:
    trials: int
    counterexamples: tuple
    min_jensen_gap: float
    relaxed_is_dirac: bool
    max_secondary_weight: float


def verify_collapse(tree: ScenarioTree, u: np.ndarray, lam: float,
                    trials: int, seed: int,
                    constraints: Optional[DiscreteConstraintSet] = None
                    ) -> CollapseReport:
    """Check that randomization never helps when the entropy weight is
    positive.

    For random feasible two-point randomizations, the Dirac control at the
    conditional mean dominates by exactly lam times the Jensen gap of
    m log m (strictly when the two points differ); and the relaxed
    optimizer, run on a grid containing the strong optimum, must return a
    Dirac-mode control. Any violation is reported as a counterexample with
    the full instance data.
    """
    probs = tree.probs
    raw = uniforms(seed, (trials, tree.n_atoms, 3))
    counterexamples = []
    min_gap = np.inf
    for k in range(trials):
        g = 2.0 * raw[k, :, 0] - 1.0
        cond_mean = np.exp(g)
        cond_mean /= probs @ cond_mean
        shrink = 0.05 + 0.9 * raw[k, :, 1]       # first point below the mean
        q = 0.05 + 0.9 * raw[k, :, 2]
        m1 = cond_mean * shrink
        m2 = (cond_mean - q * m1) / (1.0 - q)
        rand_entropy = float(probs @ (q * m1 * np.log(m1)
                                      + (1 - q) * m2 * np.log(m2)))
        dirac_entropy = float(probs @ (cond_mean * np.log(cond_mean)))
        gap = lam * (rand_entropy - dirac_entropy)  # objective(dirac)-obj(rand)
        min_gap = min(min_gap, gap)
        if gap <= -1e-12 or (gap <= 0 and np.any(np.abs(m1 - m2) > 1e-12)):
            counterexamples.append({
                "trial": k, "gap": gap, "cond_mean": cond_mean.tolist(),
                "m1": m1.tolist(), "m2": m2.tolist(), "q": q.tolist()})

    strong = solve_strong_discrete(tree, u, lam, constraints)
    grid = default_density_grid(strong.density)
    _, control = solve_relaxed_discrete(tree, u, lam, grid, constraints)
    return CollapseReport(trials, tuple(counterexamples), float(min_gap),
                          control.is_dirac(1e-6),
                          control.max_secondary_weight())


@dataclass(frozen=True)
class ExtractionReport:
    drifts: dict            # (depth, prefix) -> per-channel drift
    max_violation: float
    reconstruction_error: float


def extract_strong_control(tree: ScenarioTree,
                           control: RelaxedControlDiscrete,
                           rate_lower: float, rate_upper: float
                           ) -> ExtractionReport:
    """Per-node drifts of the measure reweighted by E[m | path-atom].

    This is the discrete martingale-representation analogue: conditional
    transition ratios of the tilted tree measure determine a one-step
    drift per node; re-accumulating the density from those transitions
    recovers the conditional-mean density exactly. The report evaluates
    the six constraint rows at every node and records the worst violation.
    """
    cond_mean = control.conditional_mean()
    tilted = tree.probs * cond_mean
    inc = tree.combos[tree.choices]
    n_combos = tree.n_combos
    drifts = {}
    max_violation = 0.0
    reconstructed = np.ones(tree.n_atoms)
    for d in range(tree.depth):
        for prefix in range(n_combos**d):
            sl = tree.node_slice(d, prefix)
            mass = float(np.sum(tilted[sl]))
            if mass <= 1e-300:
                continue
            block = tree.node_slice(d, prefix).start
            child_len = n_combos ** (tree.depth - d - 1)
            drift = np.zeros(tree.channels)
            for combo in range(n_combos):
                child = slice(block + combo * child_len,
                              block + (combo + 1) * child_len)
                trans = float(np.sum(tilted[child])) / mass
                drift += trans * tree.combos[combo]
                reconstructed[child] *= trans * n_combos
            drift /= tree.dt
            drifts[(d, prefix)] = drift
            w_node = float(tree.paths[sl.start, d, 2])
            residuals = (drift[0] - w_node, w_node - drift[0],
                         drift[2], -drift[2],
                         drift[1] - rate_upper, rate_lower - drift[1])
            max_violation = max(max_violation, max(residuals))
    recon_err = float(np.max(np.abs(reconstructed - cond_mean)))
    return ExtractionReport(drifts, float(max_violation), recon_err)


# ---------------------------------------------------------------------------
# Regression-fixture serialization: atom table + constraint list + solution.

def save_instance(filename, tree: ScenarioTree, u, lam,
                  constraints: Optional[DiscreteConstraintSet] = None,
                  solution: Optional[StrongSolution] = None) -> None:
    record = {
        "tree": {"depth": tree.depth, "branching": tree.branching,
                 "channels": tree.channels, "dt": tree.dt,
                 "scales": list(tree.scales)},
        "u": np.asarray(u).tolist(),
        "lam": lam,
        "constraints": None if constraints is None else {
            "forms": constraints.forms.tolist(),
            "labels": list(constraints.labels),
            "s_steps": constraints.s_steps.tolist()},
        "solution": None if solution is None else {
            "value": solution.value,
            "density": solution.density.tolist(),
            "kkt_residual": solution.kkt_residual},
    }
    with open(filename, "w") as fh:
        json.dump(record, fh)


def load_instance(filename) -> dict:
    with open(filename) as fh:
        record = json.load(fh)
    horizon = record["tree"]["dt"] * record["tree"]["depth"]
    sigma, eps = record["tree"]["scales"][0], 0.5
    if record["tree"]["channels"] >= 2:
        eps = record["tree"]["scales"][1]
    params = ModelParams(sigma=sigma, epsilon=eps, horizon=horizon)
    tree = build_tree(record["tree"]["depth"], record["tree"]["branching"],
                      params, record["tree"]["channels"])
    out = {"tree": tree, "u": np.array(record["u"]), "lam": record["lam"]}
    if record["constraints"] is not None:
        out["constraints"] = DiscreteConstraintSet(
            np.array(record["constraints"]["forms"]),
            tuple(record["constraints"]["labels"]),
            np.array(record["constraints"]["s_steps"], dtype=int))
    if record["solution"] is not None:
        out["solution"] = record["solution"]
    return out
