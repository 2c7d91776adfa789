"""Core domain types for the brokerage-fee contract model.

The market state is X = (P, Z, W): price, client inventory, and the
client's private trading signal. Under the reference measure the three
coordinates are independent Brownian motions scaled by (sigma, epsilon, 1);
the client controls the drift of Z through a trading rate pi in [L, U],
while the drift of P is pinned to W and W itself is driftless. The linear
constraint system (A, b) encodes exactly that structure: six rows whose
residuals b + A*nu are nonpositive precisely for admissible drifts.
"""

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "ModelParams",
    "DiscretizedPath",
    "FeedbackPolicy",
    "ConstraintSpec",
    "PathWeight",
    "validate_params",
    "constraint_rows",
    "params_to_config",
    "params_from_config",
]


@dataclass(frozen=True)
class ModelParams:
    """All scalar model inputs plus discretization/sampling settings."""

    sigma: float = 1.0
    epsilon: float = 0.5
    phi_a: float = 0.5
    phi_p: float = 0.25
    rate_lower: float = -10.0
    rate_upper: float = 10.0
    horizon: float = 1.0
    reservation: float = 0.0
    n_steps: int = 250
    n_paths: int = 10_000
    seed: int = 0

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


_PARAM_FIELDS = (
    "sigma", "epsilon", "phi_a", "phi_p", "rate_lower", "rate_upper",
    "horizon", "reservation", "n_steps", "n_paths", "seed",
)


def validate_params(params: ModelParams) -> ModelParams:
    """Return ``params`` unchanged if all invariants hold.

    Raises ``ValueError`` naming the first violated invariant.
    """
    if not params.sigma > 0:
        raise ValueError("sigma must be positive")
    if not params.epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not params.phi_a > 0:
        raise ValueError("phi_a must be positive")
    if not params.phi_p >= 0:
        raise ValueError("phi_p must be nonnegative")
    if not params.horizon > 0:
        raise ValueError("horizon must be positive")
    if params.rate_lower > params.rate_upper:
        raise ValueError("rate_lower exceeds rate_upper")
    if params.n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    if params.n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    return params


def params_to_config(params: ModelParams, prefix: str = "model") -> dict:
    """Flatten to the dotted key-value form used by text configs."""
    return {f"{prefix}.{name}": getattr(params, name) for name in _PARAM_FIELDS}


def params_from_config(items: dict, prefix: str = "model") -> ModelParams:
    """Rebuild ModelParams from dotted keys; unknown keys are an error."""
    kwargs = {}
    for key, value in items.items():
        if not key.startswith(prefix + "."):
            raise ValueError(f"unexpected config key: {key}")
        name = key[len(prefix) + 1:]
        if name not in _PARAM_FIELDS:
            raise ValueError(f"unknown model parameter: {name}")
        caster = int if name in ("n_steps", "n_paths", "seed") else float
        kwargs[name] = caster(value)
    return validate_params(ModelParams(**kwargs))


@dataclass(frozen=True)
class DiscretizedPath:
    """One sampled trajectory of X = (P, Z, W) on a uniform time grid.

    All three coordinates start at the origin; the objectives are unchanged
    by a constant shift of P, so nothing is lost by the canonical start.
    """

    times: np.ndarray
    p: np.ndarray
    z: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        n = len(self.times)
        if not (len(self.p) == len(self.z) == len(self.w) == n):
            raise ValueError("path arrays must share the grid length")
        if n >= 2:
            dt = np.diff(self.times)
            if not (np.all(dt > 0) and np.allclose(dt, dt[0], rtol=1e-9)):
                raise ValueError("times must be strictly increasing and uniform")
        for arr in (self.p, self.z, self.w):
            if arr[0] != 0.0:
                raise ValueError("paths must start at the origin")


@dataclass(frozen=True)
class PathWeight:
    """Girsanov weight of one path: log-density, density, entropy pieces."""

    log_m: float
    m: float
    int_pi_sq: float  # accumulated integral of pi^2 dt
    int_w_sq: float   # accumulated integral of W^2 dt

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError("density must be strictly positive")
        if abs(np.log(self.m) - self.log_m) > 1e-12 * max(1.0, abs(self.log_m)):
            raise ValueError("m and log_m are inconsistent")


class FeedbackPolicy:
    """Trading-rate rule pi(t, w, z) stored on a regular grid.

    Values are clamped to [L, U] at construction and again after
    interpolation, so every rate the policy emits is admissible.
    Evaluation uses trilinear interpolation with constant extrapolation
    beyond the grid edges.
    """

    def __init__(self, t_nodes, w_nodes, z_nodes, table, bounds):
        self.t_nodes = np.asarray(t_nodes, dtype=float)
        self.w_nodes = np.asarray(w_nodes, dtype=float)
        self.z_nodes = np.asarray(z_nodes, dtype=float)
        self.bounds = (float(bounds[0]), float(bounds[1]))
        table = np.asarray(table, dtype=float)
        expected = (len(self.t_nodes), len(self.w_nodes), len(self.z_nodes))
        if table.shape != expected:
            raise ValueError(f"table shape {table.shape} != {expected}")
        self.table = np.clip(table, self.bounds[0], self.bounds[1])

    @classmethod
    def constant(cls, rate, params: ModelParams):
        """Policy identically equal to ``rate`` (clamped to [L, U])."""
        bounds = (params.rate_lower, params.rate_upper)
        nodes = np.array([0.0, params.horizon])
        table = np.full((2, 2, 2), float(rate))
        return cls(nodes, np.array([-1.0, 1.0]), np.array([-1.0, 1.0]),
                   table, bounds)

    @classmethod
    def from_function(cls, fn, t_nodes, w_nodes, z_nodes, bounds):
        """Tabulate ``fn(t, w, z)`` on the grid nodes."""
        tt, ww, zz = np.meshgrid(t_nodes, w_nodes, z_nodes, indexing="ij")
        return cls(t_nodes, w_nodes, z_nodes, fn(tt, ww, zz), bounds)

    @staticmethod
    def _locate(nodes, x):
        idx = np.searchsorted(nodes, x, side="right") - 1
        idx = np.clip(idx, 0, len(nodes) - 2)
        width = nodes[idx + 1] - nodes[idx]
        frac = np.clip((x - nodes[idx]) / width, 0.0, 1.0)
        return idx, frac

    def __call__(self, t, w, z):
        """Vectorized rate lookup; broadcasts over w and z."""
        t = np.asarray(t, dtype=float)
        w = np.asarray(w, dtype=float)
        z = np.asarray(z, dtype=float)
        it, ft = self._locate(self.t_nodes, t)
        iw, fw = self._locate(self.w_nodes, w)
        iz, fz = self._locate(self.z_nodes, z)
        out = np.zeros(np.broadcast_shapes(t.shape, w.shape, z.shape))
        for dt_, wt_ in ((0, 1 - ft), (1, ft)):
            for dw_, ww_ in ((0, 1 - fw), (1, fw)):
                for dz_, wz_ in ((0, 1 - fz), (1, fz)):
                    out += wt_ * ww_ * wz_ * self.table[it + dt_, iw + dw_, iz + dz_]
        return np.clip(out, self.bounds[0], self.bounds[1])


@dataclass(frozen=True)
class ConstraintSpec:
    """The six-row linear constraint system of the brokerage model.

    Residual rows, evaluated at drift nu = (nu_p, nu_z, nu_w):

        1:  nu_p - W      2:  W - nu_p      (price drift pinned to W)
        3:  nu_w          4: -nu_w          (signal is driftless)
        5:  nu_z - U      6:  L - nu_z      (rate bounds)

    Admissibility of a rate pi means all rows are <= 0 at nu = (W, pi, 0).
    """

    rate_lower: float
    rate_upper: float
    a_matrix: np.ndarray = field(default=None)

    def __post_init__(self):
        a = np.array([
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
        ])
        object.__setattr__(self, "a_matrix", a)

    @classmethod
    def from_params(cls, params: ModelParams) -> "ConstraintSpec":
        return cls(params.rate_lower, params.rate_upper)

    def b_vector(self, w):
        """State-dependent vector b = (-W, W, 0, 0, -U, L); broadcasts."""
        w = np.asarray(w, dtype=float)
        out = np.zeros(w.shape + (6,))
        out[..., 0] = -w
        out[..., 1] = w
        out[..., 4] = -self.rate_upper
        out[..., 5] = self.rate_lower
        return out

    def residuals(self, w, rate):
        """b + A*nu at nu = (W, pi, 0); shape (..., 6), broadcasts."""
        w = np.asarray(w, dtype=float)
        rate = np.asarray(rate, dtype=float)
        shape = np.broadcast_shapes(w.shape, rate.shape)
        out = np.zeros(shape + (6,))
        out[..., 4] = rate - self.rate_upper
        out[..., 5] = self.rate_lower - rate
        return out


def constraint_rows(state, rate, spec: ConstraintSpec) -> np.ndarray:
    """Six constraint residuals b + A*nu for one state sample.

    ``state`` is a (P, Z, W) triple; only W enters (and cancels in rows
    1-2 by construction). All residuals <= 0 iff rate in [L, U].
    """
    _, _, w = state
    return spec.residuals(np.asarray(w), np.asarray(rate))
