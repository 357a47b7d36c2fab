"""Sample-wise stochastic-maximum-principle control solver.

One simulated trajectory per iteration: solve the adjoint pair backward along
it, assemble the cost gradient with respect to the control at every remaining
node, take a projected SGD step.  A batch mode averages the gradient over
several start states and path realizations before each update.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _accel
from .core import (
    Array,
    ControlledModel,
    ControlSchedule,
    TimeGrid,
    em_state_step,
    simulate_observation,
    simulate_state_path,
)
from .errors import ConfigurationError, NumericBlowupError

log = logging.getLogger(__name__)


@dataclass
class AdjointPath:
    """Backward solution pair along one path: ybar (h+1, d), zbar (h+1, d, q).

    The terminal ybar equals the terminal-cost gradient exactly; zbar at the
    final node is zero by convention (no noise increment is attached to it).
    """

    ybar: Array
    zbar: Array


def solve_adjoint_samplewise(
    model: ControlledModel, path: Array, noises: Array, schedule: ControlSchedule
) -> AdjointPath:
    """Backward recursion along one simulated path.

    ybar[i] = ybar[i+1] + (drift_x' ybar[i+1] + diffusion_x' zbar[i+1]
              + running_cost_x) * dt, all evaluated at (t_{i+1}, path[i+1], u_i);
    zbar[i] = outer(ybar[i+1], noises[i]) / sqrt(dt).
    """
    grid = schedule.grid
    h = schedule.horizon
    d, q = model.dim_state, model.dim_noise
    path = np.asarray(path, dtype=float)
    noises = np.asarray(noises, dtype=float)
    if path.shape != (h + 1, d):
        raise ConfigurationError(f"path shape {path.shape} != ({h + 1}, {d})")
    if noises.shape != (h, q):
        raise ConfigurationError(f"noises shape {noises.shape} != ({h}, {q})")
    dt = grid.dt
    sqdt = np.sqrt(dt)
    ybar = np.empty((h + 1, d))
    zbar = np.zeros((h + 1, d, q))
    ybar[h] = model.terminal_cost_x(path[h])
    for i in range(h - 1, -1, -1):
        t_next = grid.node(schedule.start_index + i + 1)
        u_i = schedule.values[i]
        zbar[i] = np.outer(ybar[i + 1], noises[i]) / sqdt
        sx = np.asarray(model.diffusion_x(t_next, path[i + 1], u_i), dtype=float)
        rate = (
            np.asarray(model.drift_x(t_next, path[i + 1], u_i), dtype=float).T @ ybar[i + 1]
            + np.einsum("akj,ak->j", sx, zbar[i + 1])
            + np.asarray(model.running_cost_x(t_next, path[i + 1], u_i), dtype=float)
        )
        ybar[i] = ybar[i + 1] + rate * dt
        if not np.all(np.isfinite(ybar[i])):
            raise NumericBlowupError(f"solve_adjoint_samplewise: non-finite adjoint at step {i}")
    return AdjointPath(ybar=ybar, zbar=zbar)


def gradient_sample(
    model: ControlledModel, path: Array, adjoint: AdjointPath, schedule: ControlSchedule
) -> Array:
    """Per-node control gradient along one path:
    psi[i] = drift_u' ybar[i] + diffusion_u' zbar[i] + running_cost_u,
    everything evaluated at (t_i, path[i], u_i)."""
    grid = schedule.grid
    h = schedule.horizon
    psi = np.empty((h + 1, model.dim_control))
    for i in range(h + 1):
        t = grid.node(schedule.start_index + i)
        u_i = schedule.values[i]
        su = np.asarray(model.diffusion_u(t, path[i], u_i), dtype=float)
        psi[i] = (
            np.asarray(model.drift_u(t, path[i], u_i), dtype=float).T @ adjoint.ybar[i]
            + np.einsum("akj,ak->j", su, adjoint.zbar[i])
            + np.asarray(model.running_cost_u(t, path[i], u_i), dtype=float)
        )
    return psi


def sgd_update(
    schedule: ControlSchedule,
    gradient: Array,
    step: float,
    low: Optional[Array] = None,
    high: Optional[Array] = None,
) -> ControlSchedule:
    """Projected step: u_i <- clip(u_i - step * psi_i)."""
    if step < 0.0:
        raise ConfigurationError(f"step size must be >= 0, got {step}")
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != schedule.values.shape:
        raise ConfigurationError(
            f"gradient shape {gradient.shape} != schedule shape {schedule.values.shape}"
        )
    values = schedule.values - step * gradient
    if low is not None or high is not None:
        values = np.clip(values, low, high)
    return ControlSchedule(schedule.grid, schedule.start_index, values)


def path_cost(model: ControlledModel, path: Array, schedule: ControlSchedule) -> float:
    """Left-rectangle running cost plus terminal cost along one path."""
    grid = schedule.grid
    dt = grid.dt
    total = 0.0
    for i in range(schedule.horizon):
        t = grid.node(schedule.start_index + i)
        total += float(model.running_cost(t, path[i], schedule.values[i])) * dt
    return total + float(model.terminal_cost(path[-1]))


def monte_carlo_cost(
    model: ControlledModel,
    schedule: ControlSchedule,
    x0: Array,
    rng: Optional[np.random.Generator] = None,
    n_samples: int = 1,
    noise: Optional[Array] = None,
) -> float:
    """Average simulated cost; pass `noise` (n, h, q) for common random numbers."""
    if noise is not None:
        noise = np.asarray(noise, dtype=float)
        n_samples = noise.shape[0]
    total = 0.0
    for k in range(n_samples):
        nk = None if noise is None else noise[k]
        path = simulate_state_path(model, schedule, x0, rng, noise=nk)
        total += path_cost(model, path, schedule)
    return total / n_samples


def gradient_statistics(
    model: ControlledModel,
    schedule: ControlSchedule,
    x0: Array,
    rng: np.random.Generator,
    n_samples: int,
    use_fast_path: bool = True,
):
    """Mean and standard error of the per-path gradient at a fixed schedule,
    averaged over n_samples fresh trajectories from x0."""
    x0 = model.check_state(x0, "x0")
    h = schedule.horizon
    q = model.dim_noise
    noises = rng.standard_normal((n_samples, h, q))
    psi_sum = np.zeros_like(schedule.values)
    psi_sq = np.zeros_like(schedule.values)
    fast = (
        use_fast_path
        and model.affine is not None
        and _accel.AVAILABLE
        and (model.affine.noise_mode == "additive" or q == 1)
    )
    if fast:
        aff = model.affine
        x0s = np.broadcast_to(x0, (n_samples, model.dim_state)).copy()
        bad = _accel.affine_psi_sums(
            schedule.values,
            x0s,
            noises,
            aff.state_matrix,
            aff.control_matrix,
            aff.forcing,
            aff.noise_mode == "control",
            aff.noise_matrix,
            aff.state_weight,
            aff.control_weight,
            aff.state_target,
            aff.terminal_weight,
            aff.terminal_target,
            2.0 * aff.terminal_scale,
            schedule.grid.dt,
            schedule.start_index,
            psi_sum,
            psi_sq,
        )
        if bad >= 0:
            raise NumericBlowupError(f"gradient_statistics: non-finite path at sample {bad}")
    else:
        for k in range(n_samples):
            path = simulate_state_path(model, schedule, x0, noise=noises[k])
            adjoint = solve_adjoint_samplewise(model, path, noises[k], schedule)
            psi = gradient_sample(model, path, adjoint, schedule)
            psi_sum += psi
            psi_sq += psi * psi
    mean = psi_sum / n_samples
    var = np.maximum(psi_sq / n_samples - mean**2, 0.0)
    return mean, np.sqrt(var / n_samples)


@dataclass
class SolverConfig:
    """Settings for the per-node control optimization.

    The step at SGD iteration l is step_size / (1 + l / step_half_life);
    step_half_life defaults to iterations // 2 at construction so a warm-started
    continuation with the same config reproduces a single longer run.
    """

    iterations: int = 1000
    step_size: float = 0.1
    step_half_life: Optional[float] = None
    use_fast_path: bool = True

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.step_half_life is None:
            self.step_half_life = max(1, self.iterations // 2)

    def step_at(self, l: int) -> float:
        return self.step_size / (1.0 + l / self.step_half_life)


def _bounds_arrays(model: ControlledModel) -> tuple[Array, Array]:
    m = model.dim_control
    low = np.full(m, -np.inf) if model.control_low is None else np.asarray(model.control_low, float)
    high = np.full(m, np.inf) if model.control_high is None else np.asarray(model.control_high, float)
    return low, high


def optimize_control_at(
    model: ControlledModel,
    schedule: ControlSchedule,
    cloud_points: Array,
    config: SolverConfig,
    rng: np.random.Generator,
    start_iteration: int = 0,
):
    """Sample-wise SGD on the control over [t_n, T].

    Each iteration draws a start state uniformly from the cloud (the resampled
    cloud already follows the posterior), simulates one controlled path, solves
    the adjoint backward along it, and takes a projected gradient step on every
    node of the schedule.  Returns (control at t_n, final schedule).

    RNG protocol per iteration: one integer (cloud index), then (horizon, q)
    standard normals, so split runs with carried start_iteration reproduce a
    single longer run exactly.
    """
    cloud_points = np.atleast_2d(np.asarray(cloud_points, dtype=float))
    if cloud_points.shape[0] < 1:
        raise ConfigurationError("empty start-state cloud")
    if cloud_points.shape[1] != model.dim_state:
        raise ConfigurationError(
            f"cloud is {cloud_points.shape[1]}-dimensional, model wants {model.dim_state}"
        )
    n_cloud = cloud_points.shape[0]
    L = config.iterations
    h = schedule.horizon
    q = model.dim_noise
    low, high = _bounds_arrays(model)
    values = np.clip(schedule.values.copy(), low, high)
    if L == 0:
        final = ControlSchedule(schedule.grid, schedule.start_index, values)
        return final.values[0].copy(), final

    picks = np.empty(L, dtype=np.int64)
    noises = np.empty((L, h, q))
    for l in range(L):
        picks[l] = rng.integers(n_cloud)
        noises[l] = rng.standard_normal((h, q))
    steps = np.array([config.step_at(start_iteration + l) for l in range(L)])

    fast = (
        config.use_fast_path
        and model.affine is not None
        and _accel.AVAILABLE
        and (model.affine.noise_mode == "additive" or q == 1)
    )
    if fast:
        aff = model.affine
        bad = _accel.run_affine_iterations(
            values,
            cloud_points,
            picks,
            noises,
            steps,
            aff.state_matrix,
            aff.control_matrix,
            aff.forcing,
            aff.noise_mode == "control",
            aff.noise_matrix,
            aff.state_weight,
            aff.control_weight,
            aff.state_target,
            aff.terminal_weight,
            aff.terminal_target,
            2.0 * aff.terminal_scale,
            schedule.grid.dt,
            schedule.start_index,
            low,
            high,
        )
        if bad >= 0:
            raise NumericBlowupError(f"optimize_control_at: non-finite path at iteration {bad}")
    else:
        work = ControlSchedule(schedule.grid, schedule.start_index, values)
        for l in range(L):
            path = simulate_state_path(model, work, cloud_points[picks[l]], noise=noises[l])
            adjoint = solve_adjoint_samplewise(model, path, noises[l], work)
            psi = gradient_sample(model, path, adjoint, work)
            work = sgd_update(work, psi, steps[l], low, high)
        values = work.values

    final = ControlSchedule(schedule.grid, schedule.start_index, values)
    return final.values[0].copy(), final


def optimize_control_batch(
    model: ControlledModel,
    schedule: ControlSchedule,
    cloud_points: Array,
    config: SolverConfig,
    rng: np.random.Generator,
    n_states: int = 1,
    n_paths: int = 1,
    weights: Optional[Array] = None,
):
    """Full-gradient reference mode: before each update the gradient is averaged
    over n_states cloud draws x n_paths path realizations.  With weights given,
    start states are drawn proportionally to them (un-resampled clouds)."""
    if n_states < 1 or n_paths < 1:
        raise ConfigurationError("n_states and n_paths must be >= 1")
    cloud_points = np.atleast_2d(np.asarray(cloud_points, dtype=float))
    n_cloud = cloud_points.shape[0]
    prob = None
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (n_cloud,):
            raise ConfigurationError("weights must align with cloud points")
        prob = weights / weights.sum()
    low, high = _bounds_arrays(model)
    work = ControlSchedule(schedule.grid, schedule.start_index, np.clip(schedule.values.copy(), low, high))
    h = work.horizon
    q = model.dim_noise
    for l in range(config.iterations):
        acc = np.zeros_like(work.values)
        for _ in range(n_states):
            if prob is None:
                i = int(rng.integers(n_cloud))
            else:
                i = int(rng.choice(n_cloud, p=prob))
            for _ in range(n_paths):
                noise = rng.standard_normal((h, q))
                path = simulate_state_path(model, work, cloud_points[i], noise=noise)
                adjoint = solve_adjoint_samplewise(model, path, noise, work)
                acc += gradient_sample(model, path, adjoint, work)
        acc /= n_states * n_paths
        work = sgd_update(work, acc, config.step_at(l), low, high)
    return work


@dataclass
class ClosedLoopRecord:
    """Everything a closed-loop run produces, aligned on the grid."""

    grid: TimeGrid
    truth: Array          # (n_nodes, d)
    estimates: Array      # (n_nodes, d) filter mean, estimates[0] is the prior mean
    controls: Array       # (n_steps, m) applied at nodes 0..n_steps-1
    observations: Array   # (n_steps, p) received at nodes 1..n_steps
    stage_costs: Array    # (n_steps,) running cost increments along the truth
    total_cost: float


def run_closed_loop(
    model: ControlledModel,
    grid: TimeGrid,
    truth_x0: Array,
    filter_runner,
    solver_config: SolverConfig,
    truth_rng: np.random.Generator,
    control_rng: np.random.Generator,
    truth_model: Optional[ControlledModel] = None,
    state_event: Optional[Callable[[int, Array], Array]] = None,
    obs_cov_at: Optional[Callable[[int], Optional[Array]]] = None,
    control_override: Optional[Callable[[int], Array]] = None,
):
    """Alternate per node: optimize the control from the current filter cloud,
    apply it to the truth for one step, observe, and advance the filter.

    filter_runner duck type: points() -> (N, d) start states, mean() -> (d,),
    step(u, observation) advances one node.  state_event(step, x) may displace
    the truth after stepping; obs_cov_at(step) may override the observation
    noise; control_override(step) bypasses the optimizer (prescribed control).
    """
    truth_model = model if truth_model is None else truth_model
    x = truth_model.check_state(np.asarray(truth_x0, dtype=float), "truth_x0")
    n = grid.n_steps
    d, m, p = model.dim_state, model.dim_control, model.dim_obs
    truth = np.empty((n + 1, d))
    estimates = np.empty((n + 1, d))
    controls = np.empty((n, m))
    observations = np.empty((n, p))
    stage_costs = np.empty(n)
    truth[0] = x
    estimates[0] = filter_runner.mean()
    schedule = ControlSchedule.zeros(grid, m)
    dt = grid.dt
    for step in range(n):
        t = grid.node(step)
        if step > 0:
            schedule = schedule.shifted()
        if control_override is not None:
            u = np.asarray(control_override(step), dtype=float)
            schedule.values[0] = u
        else:
            u, schedule = optimize_control_at(
                model, schedule, filter_runner.points(), solver_config, control_rng
            )
        controls[step] = u
        stage_costs[step] = float(truth_model.running_cost(t, x, u)) * dt
        omega = truth_rng.standard_normal(truth_model.dim_noise)
        x = em_state_step(truth_model, t, x, u, dt, omega)
        if state_event is not None:
            x = np.asarray(state_event(step + 1, x), dtype=float)
        if not np.all(np.isfinite(x)):
            raise NumericBlowupError(f"run_closed_loop: non-finite truth at step {step + 1}")
        cov = obs_cov_at(step + 1) if obs_cov_at is not None else None
        obs = simulate_observation(truth_model, x, truth_rng, cov=cov)
        filter_runner.step(u, obs)
        truth[step + 1] = x
        estimates[step + 1] = filter_runner.mean()
        observations[step] = obs
    total = float(stage_costs.sum() + truth_model.terminal_cost(x))
    return ClosedLoopRecord(
        grid=grid,
        truth=truth,
        estimates=estimates,
        controls=controls,
        observations=observations,
        stage_costs=stage_costs,
        total_cost=total,
    )
