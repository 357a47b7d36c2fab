"""Reference solutions the solvers are tested against: a constructed linear-quadratic
benchmark with closed-form optimal control, the coupled forward-backward ODE system
solved as one linear system, a Riccati integrator for the discretized heat system,
the Dubins reference path, and a brute-force tree-search control baseline."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import Array, ControlledModel, TimeGrid
from .errors import BudgetExceededError, ConfigurationError, NumericBlowupError


def _check_spd(name: str, mat: Array) -> Array:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ConfigurationError(f"{name} must be square, got {mat.shape}")
    if not np.allclose(mat, mat.T):
        raise ConfigurationError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(mat)) <= 0.0:
        raise ConfigurationError(f"{name} must be positive definite")
    return mat


def default_coupling_matrix(dim: int = 10) -> Array:
    """dim x dim matrix with unit diagonal and 0.2 everywhere else."""
    return 0.2 * np.ones((dim, dim)) + 0.8 * np.eye(dim)


@dataclass
class LqSpec:
    """Linear-quadratic benchmark: state dX = A(u - r(t)) dt + sigma B u dW.

    The tracking gap X - X* is a chosen function of time (`gap`), with
    componentwise antiderivative `gap_antiderivative`; together with the
    costate terminal condition p(T) = Q X_T these fix the whole benchmark
    in closed form.  The constructed control is optimal for the running cost
    0.5 [(X - X*)' R (X - X*) + u' K u] and terminal cost 0.5 X' Q X.
    """

    A: Array
    B: Array
    R: Array
    K: Array
    Q: Array
    sigma: float
    T: float
    x0: Array
    gap: Callable[[float], Array]
    gap_antiderivative: Callable[[float], Array]

    def __post_init__(self):
        self.A = _check_spd("A", self.A)
        d = self.A.shape[0]
        for name in ("B", "R", "K", "Q"):
            setattr(self, name, _check_spd(name, getattr(self, name)))
            if getattr(self, name).shape != (d, d):
                raise ConfigurationError(f"{name} shape mismatch with A")
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.x0.shape != (d,):
            raise ConfigurationError(f"x0 shape {self.x0.shape} != ({d},)")
        if self.sigma < 0.0 or self.T <= 0.0:
            raise ConfigurationError("need sigma >= 0 and T > 0")

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def is_identity_suite(self) -> bool:
        eye = np.eye(self.dim)
        return all(np.array_equal(getattr(self, n), eye) for n in ("B", "R", "K", "Q"))

    def beta(self, t):
        """Scalar control-weight denominator for the identity suite."""
        return (1.0 + self.sigma**2) + self.sigma**2 * (self.T - np.asarray(t))

    def alpha_log(self, t):
        return np.log(self.beta(0.0) / self.beta(t))

    def control_denominator(self, t: float) -> Array:
        s2 = self.sigma**2
        return s2 * (self.T - t) * (self.B.T @ self.R @ self.B) + self.K + s2 * (self.B.T @ self.Q @ self.B)

    def reference_forcing(self, t: float) -> Array:
        """r(t) = A rhat(t) with rhat = -gap_antiderivative / beta."""
        return self.A @ (-self.gap_antiderivative(t) / self.beta(t))

    # --- closed forms (identity B, R, K, Q) -------------------------------
    def _require_identity(self, what: str):
        if not self.is_identity_suite():
            raise ConfigurationError(f"{what} is only available for identity B, R, K, Q")

    def state_terminal(self) -> Array:
        self._require_identity("closed-form state")
        c = self.alpha_log(self.T) / self.sigma**2
        a2 = self.A @ self.A
        gT = self.gap_antiderivative(self.T)
        return np.linalg.solve(np.eye(self.dim) + c * a2, self.x0 + c * (a2 @ gT))

    def state(self, t) -> Array:
        """Optimally controlled mean state; vectorized over t."""
        self._require_identity("closed-form state")
        xT = self.state_terminal()
        a2 = self.A @ self.A
        gT = self.gap_antiderivative(self.T)
        t = np.asarray(t, dtype=float)
        coeff = self.alpha_log(t) / self.sigma**2
        head = a2 @ (gT - xT)
        return self.x0 + np.multiply.outer(coeff, head) if t.ndim else self.x0 + coeff * head

    def reference(self, t: float) -> Array:
        """X*(t) = X(t) - gap(t)."""
        return self.state(t) - self.gap(t)

    def costate_exact(self, t: float) -> Array:
        """p(t) = Q X_T + R (g(t) - g(T)) with g the gap antiderivative."""
        xT = self.state_terminal()
        return self.Q @ xT + self.R @ (self.gap_antiderivative(t) - self.gap_antiderivative(self.T))

    def control_optimal(self, t: float) -> Array:
        return lq_exact_control(self, t, self.costate_exact(t))


def lq_benchmark(dim: int = 10, sigma: float = 0.1, T: float = 1.0, x0: Optional[Array] = None) -> LqSpec:
    """The 10-component constructed benchmark (any dim <= 10 takes the leading components)."""
    if not 1 <= dim <= 10:
        raise ConfigurationError("benchmark supports 1..10 components")

    def antider(t: float) -> Array:
        full = np.array([
            0.5 * t**2,
            np.sin(t),
            t**3 / 3.0,
            np.cos(2.0 * np.pi * t),
            np.sinh(t),
            np.log1p(t),
            np.tan(t),
            np.arctan(t),
            t,
            np.exp(t - T),
        ])
        return full[:dim]

    def gap(t: float) -> Array:
        full = -np.array([
            t,
            np.cos(t),
            t**2,
            -2.0 * np.pi * np.sin(2.0 * np.pi * t),
            np.cosh(t),
            1.0 / (1.0 + t),
            1.0 / np.cos(t) ** 2,
            1.0 / (1.0 + t**2),
            1.0,
            np.exp(t - T),
        ])
        return full[:dim]

    A = default_coupling_matrix(dim) if dim > 1 else np.ones((1, 1))
    eye = np.eye(dim)
    x0 = np.zeros(dim) if x0 is None else np.asarray(x0, dtype=float)
    return LqSpec(A=A, B=eye, R=eye, K=eye, Q=eye, sigma=sigma, T=T, x0=x0,
                  gap=gap, gap_antiderivative=antider)


def lq_exact_control(spec: LqSpec, t: float, costate: Array) -> Array:
    """u*(t) = -(sigma^2 B'RB (T-t) + K + sigma^2 B'QB)^{-1} A p(t)."""
    denom = spec.control_denominator(t)
    try:
        return -np.linalg.solve(denom, spec.A @ np.asarray(costate, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise NumericBlowupError(f"singular control denominator at t={t}: {exc}") from exc


def lq_costate(spec: LqSpec, times: Array, states: Array) -> Array:
    """Costate at times[0] from a state path on [times[0], T] by trapezoid quadrature:
    p = Q X_T + int R (X - X*) ds."""
    times = np.asarray(times, dtype=float)
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[0] != times.shape[0]:
        raise ConfigurationError("times and states must align")
    refs = np.stack([spec.reference(t) for t in times])
    integrand = (states - refs) @ spec.R.T
    integral = np.trapezoid(integrand, x=times, axis=0)
    return spec.Q @ states[-1] + integral


def lq_fbode_solve(spec: LqSpec, grid: TimeGrid, start_index: int, y_start: Array):
    """Solve the coupled state/costate ODE pair on [t_n, T] as one dense linear system.

    Unknowns are the states at nodes start_index+1 .. n_steps; the coupling runs
    through the terminal state (costate terminal condition) and the running sums
    approximating the costate integral.  Returns a dict with nodes, states,
    costates, controls, and the linear-system residual.
    """
    spec._require_identity("fbode solve")
    d = spec.dim
    y_start = np.asarray(y_start, dtype=float)
    if y_start.shape != (d,):
        raise ConfigurationError(f"y_start shape {y_start.shape} != ({d},)")
    if abs(grid.t_end - spec.T) > 1e-12:
        raise ConfigurationError("grid must end at spec.T")
    n = grid.n_steps - start_index
    if n < 1:
        raise ConfigurationError("need at least one step to solve")
    dt = grid.dt
    nodes = grid.nodes()[start_index:]
    a2 = spec.A @ spec.A
    a_t = 1.0 / spec.beta(nodes)
    refs = np.stack([spec.reference(t) for t in nodes])          # X*(t_i), i = 0..n
    forcing = np.stack([spec.reference_forcing(t) for t in nodes])

    eye = np.eye(d)
    mat = np.zeros((n * d, n * d))
    rhs = np.zeros(n * d)

    def blk(j):  # unknown block for X at local node j, j = 1..n
        return slice((j - 1) * d, j * d)

    for row in range(n):
        r = slice(row * d, (row + 1) * d)
        coupling = a_t[row] * dt * dt * a2
        mat[r, blk(row + 1)] += eye
        if row >= 1:
            mat[r, blk(row)] -= eye
        for i in range(max(row, 1), n):
            mat[r, blk(i)] += coupling
        mat[r, blk(n)] += a_t[row] * dt * a2
        rhs[r] = coupling @ refs[row:n].sum(axis=0) - dt * (spec.A @ forcing[row])
        if row == 0:
            rhs[r] += y_start - coupling @ y_start

    try:
        sol = np.linalg.solve(mat, rhs)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError(f"fbode system singular (grid too coarse?): {exc}") from exc
    residual = float(np.max(np.abs(mat @ sol - rhs)))

    states = np.vstack([y_start, sol.reshape(n, d)])
    gaps = states - refs
    # left-rectangle running sum matching the discretization
    tail = np.vstack([np.cumsum(gaps[:-1][::-1], axis=0)[::-1], np.zeros(d)])
    costates = states[-1] @ spec.Q.T + dt * tail @ spec.R.T
    controls = np.stack([lq_exact_control(spec, nodes[i], costates[i]) for i in range(n + 1)])
    return {
        "nodes": nodes,
        "states": states,
        "costates": costates,
        "controls": controls,
        "residual": residual,
    }


# --- discretized heat system ------------------------------------------------

def heat_discretize(a: float, b: float, c: float, d: float, n: int):
    """Forward-time / central-space / backward-space stencil matrices.

    Returns (A, B, C): A is the full n x n diffusion+advection matrix,
    B and C are injection vectors with zero first/last entries carrying
    the control and forcing coefficients c and d.
    """
    if n < 3:
        raise ConfigurationError(f"need n >= 3 spatial nodes, got {n}")
    h = 1.0 / (n - 1)
    diff = np.diag(np.full(n, -2.0)) + np.diag(np.ones(n - 1), 1) + np.diag(np.ones(n - 1), -1)
    adv = np.eye(n) - np.diag(np.ones(n - 1), -1)
    A = (a / h**2) * diff + (b / h) * adv
    mask = np.ones(n)
    mask[0] = mask[-1] = 0.0
    return A, c * mask, d * mask


def riccati_solve(A: Array, B: Array, R: Array, Q: Array, K: Array, grid: TimeGrid) -> Array:
    """Backward RK4 integration of dG/dt = -A'G - GA + G B R^{-1} B' G - Q, G(T) = K.

    R weighs the control, Q the state, K the terminal state.  Returns G at every
    grid node, symmetrized each step, shape (n_nodes, n, n).
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    Q = np.asarray(Q, dtype=float)
    K = np.asarray(K, dtype=float)
    try:
        S = B @ np.linalg.solve(R, B.T)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError(f"control weight R is singular: {exc}") from exc

    def deriv(G):
        return -A.T @ G - G @ A + G @ S @ G - Q

    dt = grid.dt
    out = np.empty((grid.n_nodes, n, n))
    G = 0.5 * (K + K.T)
    out[-1] = G
    for i in range(grid.n_steps - 1, -1, -1):
        k1 = deriv(G)
        k2 = deriv(G - 0.5 * dt * k1)
        k3 = deriv(G - 0.5 * dt * k2)
        k4 = deriv(G - dt * k3)
        G = G - (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        G = 0.5 * (G + G.T)
        if not np.all(np.isfinite(G)):
            raise NumericBlowupError(f"riccati_solve: non-finite G at node {i}; reduce dt")
        out[i] = G
    return out


def heat_optimal_control(G: Array, P: Array, f: Array, R: Array, B: Array, c: float, d: float) -> Array:
    """Feedback field u = (-R^{-1} diag(B) G P - d f) / c for the discretized heat system."""
    G = np.asarray(G, dtype=float)
    P = np.asarray(P, dtype=float)
    B = np.asarray(B, dtype=float)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    feedback = np.linalg.solve(R, B * (G @ P))
    return (-feedback - d * np.asarray(f, dtype=float)) / c


# --- Dubins reference ---------------------------------------------------------

def dubins_reference(t) -> Array:
    """Helix waypoint (0.5 sin 2 pi t, 0.5 cos 2 pi t, t); vectorized over t."""
    t = np.asarray(t, dtype=float)
    out = np.stack([0.5 * np.sin(2.0 * np.pi * t), 0.5 * np.cos(2.0 * np.pi * t), t], axis=-1)
    return out


# --- brute-force control baseline ---------------------------------------------

def projected_tree_edges(n_choices: int, depth: int) -> int:
    """Exact edge count of the exhaustive open-loop control tree (python int)."""
    return sum(n_choices**k for k in range(1, depth + 1))



def _drift_batch(model: ControlledModel, t: float, states: Array, u: Array) -> Array:
    """Drift over a batch of states; falls back to a row loop if the callable
    does not broadcast."""
    try:
        b = np.asarray(model.drift(t, states, u), dtype=float)
        if b.shape == states.shape:
            return b
    except Exception:
        pass
    flat = states.reshape(-1, states.shape[-1])
    out = np.stack([np.asarray(model.drift(t, x, u), dtype=float) for x in flat])
    return out.reshape(states.shape)


def _stage_cost_batch(model: ControlledModel, t: float, states: Array, u: Array) -> Array:
    try:
        vals = np.asarray(model.running_cost(t, states, u), dtype=float)
        if vals.shape == states.shape[:-1]:
            return vals
    except Exception:
        pass
    flat = states.reshape(-1, states.shape[-1])
    return np.array([model.running_cost(t, x, u) for x in flat]).reshape(states.shape[:-1])


def _terminal_cost_batch(model: ControlledModel, states: Array) -> Array:
    try:
        vals = np.asarray(model.terminal_cost(states), dtype=float)
        if vals.shape == states.shape[:-1]:
            return vals
    except Exception:
        pass
    flat = states.reshape(-1, states.shape[-1])
    return np.array([model.terminal_cost(x) for x in flat]).reshape(states.shape[:-1])


class _TreeExpander:
    """Choice-major level expansion: after the k-th expanded level the leaf index
    decodes as choice_k = (index // n_choices**k) % n_choices."""

    def __init__(self, model, control_grid, nodes, dt, noise_reps, rng):
        self.model = model
        self.grid = control_grid
        self.n = control_grid.shape[0]
        self.nodes = nodes
        self.dt = dt
        self.reps = noise_reps
        self.rng = rng
        self.sqdt = np.sqrt(dt)

    def expand_level(self, step: int, states: Array, costs: Array):
        t = self.nodes[step]
        out_states, out_costs = [], []
        for j in range(self.n):
            u = self.grid[j]
            stage = _stage_cost_batch(self.model, t, states, u) * self.dt
            advanced = states + self.dt * _drift_batch(self.model, t, states, u)
            if self.reps:
                stage = stage.mean(axis=-1)
                # noise-averaged rollouts assume state-independent diffusion
                first = states.reshape(-1, states.shape[-1])[0]
                diff = np.asarray(self.model.diffusion(t, first, u), dtype=float)
                omega = self.rng.standard_normal(states.shape[:-1] + (diff.shape[1],))
                advanced = advanced + self.sqdt * omega @ diff.T
            out_states.append(advanced)
            out_costs.append(costs + stage)
        return np.concatenate(out_states, axis=0), np.concatenate(out_costs, axis=0)


def dp_baseline(
    model: ControlledModel,
    control_grid: Array,
    grid: TimeGrid,
    rng: Optional[np.random.Generator] = None,
    x0: Optional[Array] = None,
    start_index: int = 0,
    noise_realizations: int = 0,
    max_edges: int = 200_000_000,
    block_leaves: int = 2_000_000,
):
    """Exhaustive open-loop search over the control-grid tree.

    Every control sequence of length horizon is evaluated on the deterministic
    skeleton (sigma = 0), or on `noise_realizations` averaged noisy rollouts
    when that flag is set (constant-diffusion models only).  Work grows as
    n_choices**horizon: this is a baseline to compare against, not a practical
    solver.  Memory stays bounded by expanding the deepest levels block by
    block.  Returns the best sequence, its cost, edge/leaf counts, wall-clock.
    """
    if x0 is None:
        raise ConfigurationError("dp_baseline needs an explicit start state x0")
    x0 = model.check_state(x0, "x0")
    control_grid = np.atleast_2d(np.asarray(control_grid, dtype=float))
    if control_grid.shape[1] != model.dim_control:
        raise ConfigurationError(
            f"control grid is {control_grid.shape[1]}-dimensional, model wants {model.dim_control}"
        )
    horizon = grid.n_steps - start_index
    if horizon < 1:
        raise ConfigurationError("nothing to optimize: empty horizon")
    n_choices = control_grid.shape[0]
    edges = projected_tree_edges(n_choices, horizon)
    reps = max(1, noise_realizations)
    if edges * reps > max_edges:
        raise BudgetExceededError(
            f"control tree needs {edges} edges (x{reps} rollouts) > budget {max_edges}"
        )
    if noise_realizations > 0 and rng is None:
        raise ConfigurationError("noise-averaged mode needs an rng")

    t_start = time.perf_counter()
    nodes = grid.nodes()[start_index:]
    expander = _TreeExpander(model, control_grid, nodes, grid.dt, noise_realizations, rng)

    if noise_realizations:
        states = np.broadcast_to(x0, (1, reps, model.dim_state)).copy()
    else:
        states = x0[None, :].copy()
    costs = np.zeros(1)

    # phase 1: expand levels fully while they stay small
    split = 0
    while split < horizon and n_choices ** (split + 1) * reps <= block_leaves:
        states, costs = expander.expand_level(split, states, costs)
        split += 1
    n_prefix = states.shape[0]

    if split == horizon:
        term = _terminal_cost_batch(model, states)
        if noise_realizations:
            term = term.mean(axis=-1)
        total = costs + term
        best = int(np.argmin(total))
        best_cost = float(total[best])
        prefix_idx, suffix = best, []
    else:
        # phase 2: remaining levels block by block over prefixes
        deep = horizon - split
        leaf_factor = n_choices**deep
        block = max(1, block_leaves // (leaf_factor * reps))
        best_cost = np.inf
        prefix_idx, suffix = 0, [0] * deep
        for lo in range(0, n_prefix, block):
            hi = min(lo + block, n_prefix)
            s, c = states[lo:hi], costs[lo:hi]
            width = hi - lo
            for k in range(deep):
                s, c = expander.expand_level(split + k, s, c)
            term = _terminal_cost_batch(model, s)
            if noise_realizations:
                term = term.mean(axis=-1)
            total = c + term
            local = int(np.argmin(total))
            if total[local] < best_cost:
                best_cost = float(total[local])
                prefix_idx = lo + local % width
                rest = local // width
                suffix = [(rest // n_choices**k) % n_choices for k in range(deep)]

    seq = np.empty((horizon, model.dim_control))
    for k in range(split):
        seq[k] = control_grid[(prefix_idx // n_choices**k) % n_choices]
    for k, choice in enumerate(suffix):
        seq[split + k] = control_grid[choice]

    return {
        "sequence": seq,
        "cost": best_cost,
        "edges": edges * reps,
        "leaves": n_choices**horizon,
        "wall_clock_s": time.perf_counter() - t_start,
    }
