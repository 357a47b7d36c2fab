"""Concrete controlled models: the linear-quadratic benchmark, the discretized
heat system with a control field, the Dubins airplane, and a small 1-D affine
builder used for desk-scale checks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import AffineQuadratic, Array, ControlledModel, TimeGrid
from .errors import ConfigurationError
from .oracle import LqSpec, dubins_reference, heat_discretize

DUBINS_SPEED = math.sqrt(1.0 + math.pi**2)  # matches the helix reference speed


def lq_model(spec: LqSpec, grid: TimeGrid, obs_noise_std: float = 0.1) -> ControlledModel:
    """Benchmark dynamics dY = A(u - r(t)) dt + sigma B u dW with sin observations.

    Running cost 0.5 [(x - X*(t))' R (x - X*(t)) + u' K u], terminal 0.5 x' Q x:
    the spec's constructed control is the exact optimum of this problem.
    """
    if abs(grid.t_end - spec.T) > 1e-12:
        raise ConfigurationError("grid horizon must match spec.T")
    d = spec.dim
    A, B, R, K, Q = spec.A, spec.B, spec.R, spec.K, spec.Q
    sigma = spec.sigma
    xT = spec.state_terminal()
    head = A @ A @ (spec.gap_antiderivative(spec.T) - xT)
    s2 = sigma**2

    def reference(t: float) -> Array:
        return spec.x0 + (spec.alpha_log(t) / s2) * head - spec.gap(t)

    def forcing(t: float) -> Array:
        # drift = A u - A r(t); this is the -A r(t) part
        return -A @ spec.reference_forcing(t)

    zeros_dxd = np.zeros((d, d))
    sigmaB = sigma * B
    diffusion_u = np.zeros((d, 1, d))
    diffusion_u[:, 0, :] = sigmaB

    nodes = grid.nodes()
    affine = AffineQuadratic(
        state_matrix=zeros_dxd,
        control_matrix=A.copy(),
        forcing=np.stack([forcing(t) for t in nodes]),
        noise_mode="control",
        noise_matrix=sigmaB.copy(),
        state_weight=R.copy(),
        control_weight=K.copy(),
        state_target=np.stack([reference(t) for t in nodes]),
        terminal_weight=Q.copy(),
        terminal_target=np.zeros(d),
        terminal_scale=0.5,
    )

    return ControlledModel(
        dim_state=d,
        dim_control=d,
        dim_obs=d,
        dim_noise=1,
        drift=lambda t, x, u: A @ u + forcing(t),
        diffusion=lambda t, x, u: (sigmaB @ u)[:, None],
        drift_x=lambda t, x, u: zeros_dxd,
        drift_u=lambda t, x, u: A,
        diffusion_x=lambda t, x, u: np.zeros((d, 1, d)),
        diffusion_u=lambda t, x, u: diffusion_u,
        drift_div=lambda t, x, u: 0.0,
        observe=np.sin,
        running_cost=lambda t, x, u: 0.5 * float((x - reference(t)) @ R @ (x - reference(t)) + u @ K @ u),
        running_cost_x=lambda t, x, u: R @ (x - reference(t)),
        running_cost_u=lambda t, x, u: K @ u,
        terminal_cost=lambda x: 0.5 * float(x @ Q @ x),
        terminal_cost_x=lambda x: Q @ x,
        obs_noise_cov=obs_noise_std**2 * np.eye(d),
        affine=affine,
    )


@dataclass
class HeatSystem:
    """Discretized controlled heat equation plus the pieces its oracle needs."""

    model: ControlledModel
    grid: TimeGrid
    xs: Array            # spatial nodes
    A: Array
    control_vec: Array   # B in the stencil, zero at the boundary
    forcing_vec: Array   # C in the stencil, zero at the boundary
    control_coef: float
    forcing_coef: float
    state_weight: Array
    control_weight: Array
    terminal_weight: Array

    def profile(self, t: float) -> Array:
        """Source term x (1 - x) t (1 - t) on the spatial nodes."""
        return self.xs * (1.0 - self.xs) * t * (1.0 - t)

    def initial_state(self) -> Array:
        """Initial profile 10 x (1 - x) * 10 e^{-x}."""
        return 10.0 * self.xs * (1.0 - self.xs) * 10.0 * np.exp(-self.xs)


def heat_system(
    grid: TimeGrid,
    n_space: int = 21,
    diffusivity: float = 5e-5,
    advection: float = 5e-5,
    control_coef: float = 1.0,
    forcing_coef: float = 1.0,
    sigma: float = 0.1,
    obs_noise_std: float = 0.1,
) -> HeatSystem:
    """Heat equation turned into an n-dimensional controlled SDE:
    dP = (A P + B u + C f(t)) dt + sigma dW, observed through sin(P)."""
    A, bvec, cvec = heat_discretize(diffusivity, advection, control_coef, forcing_coef, n_space)
    xs = np.linspace(0.0, 1.0, n_space)
    n = n_space
    eye = np.eye(n)

    def profile(t: float) -> Array:
        return xs * (1.0 - xs) * t * (1.0 - t)

    def forcing(t: float) -> Array:
        return cvec * profile(t)

    zeros_x = np.zeros((n, n, n))
    zeros_u = np.zeros((n, n, n))
    noise = sigma * eye
    nodes = grid.nodes()
    affine = AffineQuadratic(
        state_matrix=A.copy(),
        control_matrix=np.diag(bvec),
        forcing=np.stack([forcing(t) for t in nodes]),
        noise_mode="additive",
        noise_matrix=noise.copy(),
        state_weight=eye.copy(),
        control_weight=eye.copy(),
        state_target=np.zeros((grid.n_nodes, n)),
        terminal_weight=eye.copy(),
        terminal_target=np.zeros(n),
        terminal_scale=0.5,
    )

    model = ControlledModel(
        dim_state=n,
        dim_control=n,
        dim_obs=n,
        dim_noise=n,
        drift=lambda t, x, u: A @ x + bvec * u + forcing(t),
        diffusion=lambda t, x, u: noise,
        drift_x=lambda t, x, u: A,
        drift_u=lambda t, x, u: np.diag(bvec),
        diffusion_x=lambda t, x, u: zeros_x,
        diffusion_u=lambda t, x, u: zeros_u,
        drift_div=lambda t, x, u: float(np.trace(A)),
        observe=np.sin,
        running_cost=lambda t, x, u: 0.5 * float(x @ x + u @ u),
        running_cost_x=lambda t, x, u: x,
        running_cost_u=lambda t, x, u: u,
        terminal_cost=lambda x: 0.5 * float(x @ x),
        terminal_cost_x=lambda x: x,
        obs_noise_cov=obs_noise_std**2 * eye,
        affine=affine,
    )
    return HeatSystem(
        model=model,
        grid=grid,
        xs=xs,
        A=A,
        control_vec=bvec,
        forcing_vec=cvec,
        control_coef=control_coef,
        forcing_coef=forcing_coef,
        state_weight=eye,
        control_weight=eye,
        terminal_weight=eye,
    )


def dubins_model(
    grid: TimeGrid,
    speed: float = DUBINS_SPEED,
    sigma: float = 0.1,
    obs_noise_std: float = 0.1,
    position_weight: float = 40.0,
    control_weight: float = 1.0,
    terminal_weight: float = 20.0,
    reference: Callable[[float], Array] = dubins_reference,
) -> ControlledModel:
    """Airplane kinematics (X, Y, Z, theta, phi) with bearing-only observations
    from two fixed platforms; the control steers the two heading angles.

    Costs follow the trajectory-tracking setup: 0.5 * position_weight
    |pos - ref(t)|^2 + 0.5 * control_weight |u|^2 running, and terminal_weight
    |pos_T - ref(T)|^2 at the end (no half on the terminal term).
    """
    T = grid.t_end
    ref_T = np.asarray(reference(T), dtype=float)
    diff = np.diag([sigma, sigma, sigma, sigma**2, sigma**2])
    zeros_sx = np.zeros((5, 5, 5))
    zeros_su = np.zeros((5, 5, 2))
    b_u = np.zeros((5, 2))
    b_u[3, 0] = 1.0
    b_u[4, 1] = 1.0

    def drift(t, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        ct = np.cos(x[..., 3])
        st = np.sin(x[..., 3])
        cp = np.cos(x[..., 4])
        sp = np.sin(x[..., 4])
        out = np.empty(np.broadcast(x[..., 0], u[..., 0]).shape + (5,))
        out[..., 0] = speed * ct * cp
        out[..., 1] = speed * ct * sp
        out[..., 2] = speed * st
        out[..., 3] = u[..., 0]
        out[..., 4] = u[..., 1]
        return out

    def drift_x(t, x, u):
        ct, st = np.cos(x[3]), np.sin(x[3])
        cp, sp = np.cos(x[4]), np.sin(x[4])
        out = np.zeros((5, 5))
        out[0, 3] = -speed * st * cp
        out[0, 4] = -speed * ct * sp
        out[1, 3] = -speed * st * sp
        out[1, 4] = speed * ct * cp
        out[2, 3] = speed * ct
        return out

    def observe(x):
        x = np.asarray(x, dtype=float)
        den = x[..., 1] + 2.0
        return np.stack(
            [
                np.arctan((x[..., 0] + 3.0) / den),
                np.arctan((x[..., 0] - 2.0) / den),
                np.arctan((x[..., 2] - 2.0) / den),
            ],
            axis=-1,
        )

    def running_cost(t, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        err = x[..., :3] - np.asarray(reference(t), dtype=float)
        return 0.5 * position_weight * np.sum(err * err, axis=-1) + 0.5 * control_weight * np.sum(
            u * u, axis=-1
        )

    def running_cost_x(t, x, u):
        out = np.zeros(5)
        out[:3] = position_weight * (x[:3] - np.asarray(reference(t), dtype=float))
        return out

    def terminal_cost(x):
        x = np.asarray(x, dtype=float)
        err = x[..., :3] - ref_T
        return terminal_weight * np.sum(err * err, axis=-1)

    def terminal_cost_x(x):
        out = np.zeros(5)
        out[:3] = 2.0 * terminal_weight * (x[:3] - ref_T)
        return out

    return ControlledModel(
        dim_state=5,
        dim_control=2,
        dim_obs=3,
        dim_noise=5,
        drift=drift,
        diffusion=lambda t, x, u: diff,
        drift_x=drift_x,
        drift_u=lambda t, x, u: b_u,
        diffusion_x=lambda t, x, u: zeros_sx,
        diffusion_u=lambda t, x, u: zeros_su,
        drift_div=lambda t, x, u: 0.0,
        observe=observe,
        running_cost=running_cost,
        running_cost_x=running_cost_x,
        running_cost_u=lambda t, x, u: control_weight * np.asarray(u, dtype=float),
        terminal_cost=terminal_cost,
        terminal_cost_x=terminal_cost_x,
        obs_noise_cov=obs_noise_std**2 * np.eye(3),
    )


def dubins_initial_state() -> Array:
    """Start on the reference with the stated initial headings."""
    return np.array([0.0, 0.5, 0.0, 0.0, math.atan(1.0 / (2.0 * math.pi))])


def affine_model_1d(
    drift_const: float = 0.0,
    drift_x_coef: float = 0.0,
    drift_u_coef: float = 0.0,
    diff_const: float = 1.0,
    diff_x_coef: float = 0.0,
    diff_u_coef: float = 0.0,
    obs_coef: float = 1.0,
    obs_noise_std: float = 1.0,
    state_weight: float = 1.0,
    control_weight: float = 1.0,
    terminal_weight: float = 1.0,
    state_target: Callable[[float], float] = lambda t: 0.0,
    control_low: Optional[float] = None,
    control_high: Optional[float] = None,
) -> ControlledModel:
    """Scalar model with affine drift and diffusion in (x, u); exercises every
    partial the solvers consume, including control- and state-dependent noise."""

    def diffusion(t, x, u):
        return np.array([[diff_const + diff_x_coef * float(x[0]) + diff_u_coef * float(u[0])]])

    return ControlledModel(
        dim_state=1,
        dim_control=1,
        dim_obs=1,
        dim_noise=1,
        drift=lambda t, x, u: np.array([drift_const + drift_x_coef * float(x[0]) + drift_u_coef * float(u[0])]),
        diffusion=diffusion,
        drift_x=lambda t, x, u: np.array([[drift_x_coef]]),
        drift_u=lambda t, x, u: np.array([[drift_u_coef]]),
        diffusion_x=lambda t, x, u: np.array([[[diff_x_coef]]]),
        diffusion_u=lambda t, x, u: np.array([[[diff_u_coef]]]),
        drift_div=lambda t, x, u: drift_x_coef,
        observe=lambda x: obs_coef * np.asarray(x, dtype=float),
        running_cost=lambda t, x, u: 0.5
        * float(state_weight * (x[0] - state_target(t)) ** 2 + control_weight * u[0] ** 2),
        running_cost_x=lambda t, x, u: np.array([state_weight * (x[0] - state_target(t))]),
        running_cost_u=lambda t, x, u: np.array([control_weight * u[0]]),
        terminal_cost=lambda x: 0.5 * float(terminal_weight * x[0] ** 2),
        terminal_cost_x=lambda x: np.array([terminal_weight * x[0]]),
        obs_noise_cov=np.array([[obs_noise_std**2]]),
        control_low=None if control_low is None else np.array([control_low]),
        control_high=None if control_high is None else np.array([control_high]),
    )
