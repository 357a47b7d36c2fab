"""Time grids, controlled-model bundles, seeded RNG streams, and Euler-Maruyama simulation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, NumericBlowupError, ShapeError

Array = np.ndarray

LOG_2PI = float(np.log(2.0 * np.pi))


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent, reproducible generator for (seed, stream id)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),)))


def spawn_streams(seed: int, n: int, base: int = 0) -> list[np.random.Generator]:
    return [rng_stream(seed, base + i) for i in range(n)]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [t0, t_end] into n_steps intervals (n_steps + 1 nodes)."""

    t0: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigurationError(f"n_steps must be >= 1, got {self.n_steps}")
        if not self.t_end > self.t0:
            raise ConfigurationError(f"need t_end > t0, got [{self.t0}, {self.t_end}]")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t0) / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    def nodes(self) -> Array:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def node(self, i: int) -> float:
        if not 0 <= i <= self.n_steps:
            raise IndexError(f"node index {i} outside grid 0..{self.n_steps}")
        return self.t0 + self.dt * i


@dataclass
class AffineQuadratic:
    """Optional structure payload: affine drift, constant or control-linear noise,
    quadratic tracking costs.  Lets the control solver dispatch to a compiled loop.

    drift(t_i, x, u) = state_matrix @ x + control_matrix @ u + forcing[i]
    additive mode:   diffusion = noise_matrix            (d, q), constant
    control mode:    diffusion[:, 0] = control_noise @ u (q = 1)
    running cost     0.5 (x - state_target[i])' Rs (x - state_target[i]) + 0.5 u' Qc u
    terminal cost    terminal_scale * (x - terminal_target)' K (x - terminal_target)
    """

    state_matrix: Array
    control_matrix: Array
    forcing: Array              # (n_nodes, d)
    noise_mode: str             # "additive" | "control"
    noise_matrix: Array         # additive: (d, q); control: control_noise (d, m)
    state_weight: Array         # Rs (d, d)
    control_weight: Array       # Qc (m, m)
    state_target: Array         # (n_nodes, d)
    terminal_weight: Array      # (d, d)
    terminal_target: Array      # (d,)
    terminal_scale: float = 0.5

    def __post_init__(self):
        if self.noise_mode not in ("additive", "control"):
            raise ConfigurationError(f"unknown noise_mode {self.noise_mode!r}")


@dataclass
class ControlledModel:
    """Drift, diffusion, observation map, costs, and the partials the solvers need.

    Partial-derivative conventions: drift_x[i, j] = d drift_i / d x_j,
    diffusion_x[i, k, j] = d diffusion_{ik} / d x_j, and likewise for _u.
    drift_div is the analytic divergence sum_i d drift_i / d x_i used by the
    density-prediction fixed point (control frozen at the applied value).
    """

    dim_state: int
    dim_control: int
    dim_obs: int
    dim_noise: int
    drift: Callable[[float, Array, Array], Array]
    diffusion: Callable[[float, Array, Array], Array]
    drift_x: Callable[[float, Array, Array], Array]
    drift_u: Callable[[float, Array, Array], Array]
    diffusion_x: Callable[[float, Array, Array], Array]
    diffusion_u: Callable[[float, Array, Array], Array]
    drift_div: Callable[[float, Array, Array], float]
    observe: Callable[[Array], Array]
    running_cost: Callable[[float, Array, Array], float]
    running_cost_x: Callable[[float, Array, Array], Array]
    running_cost_u: Callable[[float, Array, Array], Array]
    terminal_cost: Callable[[Array], float]
    terminal_cost_x: Callable[[Array], Array]
    obs_noise_cov: Array
    control_low: Optional[Array] = None
    control_high: Optional[Array] = None
    affine: Optional[AffineQuadratic] = None

    def __post_init__(self):
        self.obs_noise_cov = np.atleast_2d(np.asarray(self.obs_noise_cov, dtype=float))
        if self.obs_noise_cov.shape != (self.dim_obs, self.dim_obs):
            raise ShapeError(
                f"obs_noise_cov shape {self.obs_noise_cov.shape} != ({self.dim_obs}, {self.dim_obs})"
            )
        if not np.allclose(self.obs_noise_cov, self.obs_noise_cov.T):
            raise ConfigurationError("obs_noise_cov must be symmetric")

    def check_state(self, x: Array, where: str = "state") -> Array:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim_state,):
            raise ShapeError(f"{where} shape {x.shape} != ({self.dim_state},)")
        return x

    def check_control(self, u: Array, where: str = "control") -> Array:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.dim_control,):
            raise ShapeError(f"{where} shape {u.shape} != ({self.dim_control},)")
        return u

    def clip_control(self, u: Array) -> Array:
        if self.control_low is None and self.control_high is None:
            return u
        return np.clip(u, self.control_low, self.control_high)


@dataclass
class ControlSchedule:
    """Piecewise-constant control values on grid nodes start_index..n_steps."""

    grid: TimeGrid
    start_index: int
    values: Array  # (grid.n_steps - start_index + 1, m)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        expected = self.grid.n_steps - self.start_index + 1
        if self.start_index < 0 or self.start_index > self.grid.n_steps:
            raise ConfigurationError(f"start_index {self.start_index} outside grid")
        if self.values.shape[0] != expected:
            raise ShapeError(
                f"schedule needs {expected} rows for nodes {self.start_index}..{self.grid.n_steps},"
                f" got {self.values.shape[0]}"
            )

    @property
    def horizon(self) -> int:
        """Number of simulation steps remaining."""
        return self.grid.n_steps - self.start_index

    @property
    def dim_control(self) -> int:
        return self.values.shape[1]

    def value(self, node_index: int) -> Array:
        return self.values[node_index - self.start_index]

    def shifted(self) -> "ControlSchedule":
        """Warm start for the next node: drop the first row."""
        if self.horizon == 0:
            raise ConfigurationError("cannot shift a single-node schedule")
        return ControlSchedule(self.grid, self.start_index + 1, self.values[1:].copy())

    def copy(self) -> "ControlSchedule":
        return ControlSchedule(self.grid, self.start_index, self.values.copy())

    @classmethod
    def zeros(cls, grid: TimeGrid, dim_control: int, start_index: int = 0) -> "ControlSchedule":
        return cls(grid, start_index, np.zeros((grid.n_steps - start_index + 1, dim_control)))


@dataclass(frozen=True)
class ObservationRecord:
    index: int
    time: float
    value: Array


def em_state_step(model: ControlledModel, t: float, x: Array, u: Array, dt: float, omega: Array) -> Array:
    """One Euler-Maruyama step: x + drift*dt + diffusion @ (sqrt(dt)*omega)."""
    if dt <= 0.0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    x = model.check_state(x)
    u = model.check_control(u)
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (model.dim_noise,):
        raise ShapeError(f"noise shape {omega.shape} != ({model.dim_noise},)")
    b = np.asarray(model.drift(t, x, u), dtype=float)
    s = np.asarray(model.diffusion(t, x, u), dtype=float)
    if b.shape != (model.dim_state,):
        raise ShapeError(f"drift output shape {b.shape} != ({model.dim_state},)")
    if s.shape != (model.dim_state, model.dim_noise):
        raise ShapeError(f"diffusion output shape {s.shape} != ({model.dim_state}, {model.dim_noise})")
    return x + b * dt + s @ (np.sqrt(dt) * omega)


def simulate_state_path(
    model: ControlledModel,
    schedule: ControlSchedule,
    x0: Array,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[Array] = None,
    return_noise: bool = False,
):
    """Simulate the controlled state on schedule.grid from node start_index to the end.

    One standard-Gaussian draw per step unless `noise` (horizon, q) is supplied.
    Returns the (horizon + 1, d) path, plus the noise if return_noise is set.
    """
    x0 = model.check_state(x0, "x0")
    grid = schedule.grid
    h = schedule.horizon
    if noise is None:
        if rng is None:
            raise ConfigurationError("need either rng or explicit noise")
        noise = rng.standard_normal((h, model.dim_noise))
    else:
        noise = np.asarray(noise, dtype=float)
        if noise.shape != (h, model.dim_noise):
            raise ShapeError(f"noise shape {noise.shape} != ({h}, {model.dim_noise})")
    dt = grid.dt
    sqdt = np.sqrt(dt)
    path = np.empty((h + 1, model.dim_state))
    path[0] = x0
    x = x0
    for i in range(h):
        node = schedule.start_index + i
        t = grid.node(node)
        u = schedule.values[i]
        b = model.drift(t, x, u)
        s = model.diffusion(t, x, u)
        x = x + b * dt + s @ (sqdt * noise[i])
        if not np.all(np.isfinite(x)):
            raise NumericBlowupError(f"simulate_state_path: non-finite state at step {node + 1}")
        path[i + 1] = x
    if return_noise:
        return path, noise
    return path


def simulate_observation(
    model: ControlledModel,
    x: Array,
    rng: np.random.Generator,
    cov: Optional[Array] = None,
) -> Array:
    """Noisy reading observe(x) + eta, eta ~ N(0, cov or model.obs_noise_cov)."""
    x = model.check_state(x)
    y = np.asarray(model.observe(x), dtype=float)
    if y.shape != (model.dim_obs,):
        raise ShapeError(f"observation shape {y.shape} != ({model.dim_obs},)")
    cov = model.obs_noise_cov if cov is None else np.asarray(cov, dtype=float)
    if not np.any(cov):
        return y
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError(f"obs_noise_cov not positive definite: {exc}") from exc
    return y + chol @ rng.standard_normal(model.dim_obs)


def _chol_or_raise(cov: Array) -> Array:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError(f"observation covariance is singular: {exc}") from exc


def log_likelihood(model: ControlledModel, x: Array, observed: Array, cov: Optional[Array] = None) -> float:
    """log N(observed; observe(x), cov)."""
    x = model.check_state(x)
    observed = np.asarray(observed, dtype=float)
    if observed.shape != (model.dim_obs,):
        raise ShapeError(f"observed shape {observed.shape} != ({model.dim_obs},)")
    cov = model.obs_noise_cov if cov is None else np.asarray(cov, dtype=float)
    chol = _chol_or_raise(cov)
    resid = observed - np.asarray(model.observe(x), dtype=float)
    z = np.linalg.solve(chol, resid)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * (z @ z) - 0.5 * (model.dim_obs * LOG_2PI + logdet))


def log_likelihood_many(
    model: ControlledModel,
    points: Array,
    observed: Array,
    cov: Optional[Array] = None,
) -> Array:
    """log-likelihood of one observation at each row of points, shape (n,)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    observed = np.asarray(observed, dtype=float)
    cov = model.obs_noise_cov if cov is None else np.asarray(cov, dtype=float)
    chol = _chol_or_raise(cov)
    preds = np.empty((points.shape[0], model.dim_obs))
    for i, p in enumerate(points):
        preds[i] = model.observe(p)
    resid = observed[None, :] - preds
    z = np.linalg.solve(chol, resid.T)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * np.sum(z * z, axis=0) - 0.5 * (model.dim_obs * LOG_2PI + logdet)
