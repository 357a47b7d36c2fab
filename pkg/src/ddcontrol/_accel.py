"""Compiled inner loop for the control solver's affine-quadratic fast path.

The arithmetic mirrors the generic loop in smp.py step for step: forward
Euler-Maruyama path, backward adjoint recursion, gradient assembly, projected
update.  Kept separate so the generic path stays dependency-light."""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


@njit(cache=True)
def affine_psi_sums(
    values,        # (h+1, m) fixed schedule
    x0s,           # (L, d) start states
    noises,        # (L, h, q)
    state_mat,
    control_mat,
    forcing,
    control_noise_mode,
    noise_mat,
    state_weight,
    control_weight,
    target,
    terminal_weight,
    terminal_target,
    terminal_scale2,
    dt,
    start_node,
    psi_sum,       # (h+1, m) out, accumulated
    psi_sq_sum,    # (h+1, m) out, accumulated
):
    """Accumulate first and second moments of the per-path gradient at a fixed
    schedule; arithmetic identical to run_affine_iterations without the update."""
    L = x0s.shape[0]
    h = noises.shape[1]
    d = state_mat.shape[0]
    m = control_mat.shape[1]
    sqdt = np.sqrt(dt)
    xs = np.empty((h + 1, d))
    for l in range(L):
        for a in range(d):
            xs[0, a] = x0s[l, a]
        for i in range(h):
            node = start_node + i
            u = values[i]
            drift = state_mat @ xs[i] + control_mat @ u + forcing[node]
            if control_noise_mode:
                col = noise_mat @ u
                w = noises[l, i, 0]
                for a in range(d):
                    xs[i + 1, a] = xs[i, a] + dt * drift[a] + sqdt * col[a] * w
            else:
                kick = noise_mat @ noises[l, i]
                for a in range(d):
                    xs[i + 1, a] = xs[i, a] + dt * drift[a] + sqdt * kick[a]
        for a in range(d):
            if not np.isfinite(xs[h, a]):
                return l
        y = terminal_scale2 * (terminal_weight @ (xs[h] - terminal_target))
        psi = control_mat.T @ y + control_weight @ values[h]
        for j in range(m):
            psi_sum[h, j] += psi[j]
            psi_sq_sum[h, j] += psi[j] * psi[j]
        for i in range(h - 1, -1, -1):
            node = start_node + i + 1
            y_next = y
            fx = state_weight @ (xs[i + 1] - target[node])
            y = y_next + dt * (state_mat.T @ y_next + fx)
            psi = control_mat.T @ y + control_weight @ values[i]
            if control_noise_mode:
                scale = noises[l, i, 0] / sqdt
                zterm = noise_mat.T @ y_next
                for j in range(m):
                    psi[j] += scale * zterm[j]
            for j in range(m):
                psi_sum[i, j] += psi[j]
                psi_sq_sum[i, j] += psi[j] * psi[j]
    return -1


@njit(cache=True)
def run_affine_iterations(
    values,        # (h+1, m) in/out
    cloud,         # (n_cloud, d)
    pick,          # (L,) int64 cloud indices
    noises,        # (L, h, q)
    steps,         # (L,) step sizes
    state_mat,     # (d, d)
    control_mat,   # (d, m)
    forcing,       # (n_nodes, d), indexed by absolute node
    control_noise_mode,  # bool: True -> q = 1, diffusion column = noise_mat @ u
    noise_mat,     # additive: (d, q); control mode: (d, m)
    state_weight,  # (d, d)
    control_weight,  # (m, m)
    target,        # (n_nodes, d)
    terminal_weight,  # (d, d)
    terminal_target,  # (d,)
    terminal_scale2,  # 2 * terminal cost scale
    dt,
    start_node,    # absolute node index of values[0]
    low,           # (m,) possibly -inf
    high,          # (m,) possibly +inf
):
    L = pick.shape[0]
    h = noises.shape[1]
    d = state_mat.shape[0]
    m = control_mat.shape[1]
    sqdt = np.sqrt(dt)
    xs = np.empty((h + 1, d))

    for l in range(L):
        x0 = cloud[pick[l]]
        for a in range(d):
            xs[0, a] = x0[a]
        # forward path under the current schedule
        for i in range(h):
            node = start_node + i
            u = values[i]
            drift = state_mat @ xs[i] + control_mat @ u + forcing[node]
            if control_noise_mode:
                col = noise_mat @ u
                w = noises[l, i, 0]
                for a in range(d):
                    xs[i + 1, a] = xs[i, a] + dt * drift[a] + sqdt * col[a] * w
            else:
                kick = noise_mat @ noises[l, i]
                for a in range(d):
                    xs[i + 1, a] = xs[i, a] + dt * drift[a] + sqdt * kick[a]
        for a in range(d):
            if not np.isfinite(xs[h, a]):
                return l
        # terminal adjoint and last-node update (its martingale term is zero)
        y = terminal_scale2 * (terminal_weight @ (xs[h] - terminal_target))
        psi = control_mat.T @ y + control_weight @ values[h]
        r = steps[l]
        for j in range(m):
            v = values[h, j] - r * psi[j]
            if v < low[j]:
                v = low[j]
            if v > high[j]:
                v = high[j]
            values[h, j] = v
        # backward sweep: update each node as soon as its adjoint is known
        for i in range(h - 1, -1, -1):
            node = start_node + i + 1
            y_next = y
            fx = state_weight @ (xs[i + 1] - target[node])
            y = y_next + dt * (state_mat.T @ y_next + fx)
            psi = control_mat.T @ y + control_weight @ values[i]
            if control_noise_mode:
                scale = noises[l, i, 0] / sqdt
                zterm = noise_mat.T @ y_next
                for j in range(m):
                    psi[j] += scale * zterm[j]
            for j in range(m):
                v = values[i, j] - r * psi[j]
                if v < low[j]:
                    v = low[j]
                if v > high[j]:
                    v = high[j]
                values[i, j] = v
    return -1
