"""Kernel-learning backward-SDE filter.

One filter step: propagate the spatial sample cloud through the dynamics,
predict the density value at each propagated point by the time-inverse
fixed-point iteration, fold in the observation by Bayes, pick kernel centers
by importance sampling, fit a Gaussian-kernel mixture to the (point, value)
pairs by single-sample SGD, and resample a fresh cloud from the fitted mixture.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .core import Array, ControlledModel, TimeGrid, log_likelihood_many
from .errors import (
    ConfigurationError,
    DegeneracyError,
    FixedPointDivergenceError,
    NumericBlowupError,
    ShapeError,
)

log = logging.getLogger(__name__)

_EVAL_CHUNK = 4_000_000  # max kernel-matrix elements per evaluation chunk


@dataclass
class KernelDensity:
    """Weighted Gaussian-kernel mixture with diagonal bandwidths.

    p(x) = sum_k weights[k] * exp(-sum_j (centers[k,j] - x_j)^2 / bandwidths[k,j]^2),
    so each kernel is an unnormalized Gaussian with std bandwidth / sqrt(2).
    """

    centers: Array
    weights: Array
    bandwidths: Array

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        self.bandwidths = np.atleast_2d(np.asarray(self.bandwidths, dtype=float))
        k, d = self.centers.shape
        if self.weights.shape != (k,):
            raise ShapeError(f"weights shape {self.weights.shape} != ({k},)")
        if self.bandwidths.shape != (k, d):
            raise ShapeError(f"bandwidths shape {self.bandwidths.shape} != ({k}, {d})")
        if not np.all(self.weights > 0.0):
            raise ConfigurationError("kernel weights must be positive")
        if not np.all(self.bandwidths > 0.0):
            raise ConfigurationError("kernel bandwidths must be positive")

    @property
    def n_kernels(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def __call__(self, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        if pts.shape[1] != self.dim:
            raise ShapeError(f"points are {pts.shape[1]}-dimensional, density is {self.dim}")
        n, k = pts.shape[0], self.n_kernels
        out = np.empty(n)
        chunk = max(1, _EVAL_CHUNK // max(1, k * self.dim))
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            diff = (pts[lo:hi, None, :] - self.centers[None, :, :]) / self.bandwidths[None, :, :]
            out[lo:hi] = np.exp(-np.sum(diff * diff, axis=2)) @ self.weights
        return out[0] if single else out

    def kernel_masses(self) -> Array:
        """Unnormalized probability mass of each kernel: weight * prod(bandwidths)."""
        return self.weights * np.prod(self.bandwidths, axis=1)

    def integral(self) -> float:
        return float(np.pi ** (self.dim / 2.0) * self.kernel_masses().sum())

    def mean(self) -> Array:
        w = self.kernel_masses()
        w = w / w.sum()
        return w @ self.centers

    def covariance(self) -> Array:
        w = self.kernel_masses()
        w = w / w.sum()
        mu = w @ self.centers
        cov = np.zeros((self.dim, self.dim))
        for k in range(self.n_kernels):
            delta = self.centers[k] - mu
            cov += w[k] * (np.diag(self.bandwidths[k] ** 2 / 2.0) + np.outer(delta, delta))
        return cov

    def sample(self, n: int, rng: np.random.Generator) -> Array:
        """Draw points from the mixture: kernel by probability mass, then the
        kernel's Gaussian (std = bandwidth / sqrt(2))."""
        w = self.kernel_masses()
        ks = rng.choice(self.n_kernels, size=n, p=w / w.sum())
        std = self.bandwidths[ks] / math.sqrt(2.0)
        return self.centers[ks] + std * rng.standard_normal((n, self.dim))

    @classmethod
    def gaussian(cls, mean: Array, std: Array) -> "KernelDensity":
        """Single-kernel mixture equal to the normalized Gaussian N(mean, diag(std^2))."""
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        std = np.broadcast_to(np.asarray(std, dtype=float), mean.shape).astype(float)
        if np.any(std <= 0):
            raise ConfigurationError("std must be positive")
        amp = 1.0 / ((2.0 * np.pi) ** (mean.size / 2.0) * np.prod(std))
        return cls(mean[None, :], np.array([amp]), (std * math.sqrt(2.0))[None, :])


@dataclass
class SampleCloud:
    """Spatial points carrying approximate filtering-density values."""

    points: Array
    values: Array

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.points.shape[0],):
            raise ShapeError("cloud values must align with points")
        if self.points.shape[0] < 1:
            raise ConfigurationError("cloud needs at least one point")
        if np.any(self.values < 0.0):
            raise ConfigurationError("cloud values must be nonnegative")

    @property
    def size(self) -> int:
        return self.points.shape[0]


@dataclass
class FilterState:
    step: int
    density: KernelDensity
    cloud: SampleCloud


@dataclass
class KernelFilterConfig:
    """Knobs for one filter step; defaults follow the package-wide conventions:
    kernel count ceil(sqrt(N)), learning rates 0.1 / 0.01 of the (internally
    standardized) value and coordinate scales with half-life J/4, clamps on
    weights and bandwidths, fixed-point tolerance 1e-6."""

    n_samples: int = 400
    n_kernels: Optional[int] = None
    fixed_point_iterations: int = 20
    fixed_point_tol: float = 1e-6
    fit_iterations: int = 2000
    weight_rate: float = 0.1
    bandwidth_rate: float = 0.01
    rate_half_life: Optional[float] = None
    bandwidth_init_scale: float = 2.0
    weight_floor: float = 1e-12
    bandwidth_floor: float = 1e-6
    degeneracy_retries: int = 3
    degeneracy_inflation: float = 10.0

    def kernels_for(self, n_points: int) -> int:
        k = self.n_kernels if self.n_kernels is not None else math.ceil(math.sqrt(n_points))
        return max(1, min(k, n_points))


def propagate_cloud(
    model: ControlledModel, points: Array, u_applied: Array, t: float, dt: float, rng: np.random.Generator
) -> Array:
    """Euler-Maruyama push of every cloud point through one step of the dynamics
    with the applied control frozen."""
    if dt <= 0.0:
        raise ConfigurationError("dt must be positive")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    u = model.check_control(u_applied, "u_applied")
    n = points.shape[0]
    sqdt = math.sqrt(dt)
    omega = rng.standard_normal((n, model.dim_noise))
    out = np.empty_like(points)
    for i in range(n):
        b = np.asarray(model.drift(t, points[i], u), dtype=float)
        s = np.asarray(model.diffusion(t, points[i], u), dtype=float)
        out[i] = points[i] + b * dt + s @ (sqdt * omega[i])
        if not np.all(np.isfinite(out[i])):
            raise NumericBlowupError(f"propagate_cloud: non-finite point at sample {i}")
    return out


def backward_sample(
    model: ControlledModel, x: Array, u_applied: Array, t: float, dt: float, rng: np.random.Generator
) -> Array:
    """One time-inverse Euler-Maruyama draw anchored at x:
    x - drift(x) dt + diffusion sqrt(dt) omega."""
    x = model.check_state(x)
    u = model.check_control(u_applied, "u_applied")
    b = np.asarray(model.drift(t, x, u), dtype=float)
    s = np.asarray(model.diffusion(t, x, u), dtype=float)
    return x - b * dt + s @ (math.sqrt(dt) * rng.standard_normal(model.dim_noise))


def predict_density_values(
    model: ControlledModel,
    prev_density: Callable[[Array], Array],
    points: Array,
    u_applied: Array,
    t_next: float,
    dt: float,
    iterations: int,
    rng: np.random.Generator,
    tol: float = 1e-6,
) -> Array:
    """Predicted density value at each point by the stochastic fixed point.

    Iteration l draws one fresh time-inverse sample per point, updates the
    running average E_l of prev_density at those samples, and sets
    y_{l+1} = E_l - dt * div(drift) * y_l, starting from y_0 = prev_density(x).
    Stops early once the relative change drops below tol everywhere.  Five
    consecutive growing updates raise FixedPointDivergenceError once the step
    magnitude has escaped the solution scale (the magnitude gate keeps
    running-average fluctuations, which shrink like 1/l, from false-alarming).
    """
    if iterations < 1:
        raise ConfigurationError("need at least one fixed-point iteration")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    u = model.check_control(u_applied, "u_applied")
    n = points.shape[0]
    sqdt = math.sqrt(dt)
    drifts = np.empty_like(points)
    divs = np.empty(n)
    diffs = np.empty((n, model.dim_state, model.dim_noise))
    for i in range(n):
        drifts[i] = model.drift(t_next, points[i], u)
        divs[i] = model.drift_div(t_next, points[i], u)
        diffs[i] = model.diffusion(t_next, points[i], u)
    anchors = points - drifts * dt
    coef = dt * divs

    y = np.asarray(prev_density(points), dtype=float).copy()
    scale0 = np.max(np.abs(y)) + 1e-300
    running_sum = np.zeros(n)
    prev_step = None
    grow = np.zeros(n, dtype=int)
    for l in range(1, iterations + 1):
        omega = rng.standard_normal((n, model.dim_noise))
        pulled = anchors + sqdt * np.einsum("nij,nj->ni", diffs, omega)
        running_sum += np.asarray(prev_density(pulled), dtype=float)
        y_new = running_sum / l - coef * y
        step = np.abs(y_new - y)
        if not np.all(np.isfinite(y_new)) or np.max(np.abs(y_new)) > 1e12 * max(1.0, scale0):
            raise FixedPointDivergenceError(
                f"density prediction diverged at iteration {l}; reduce the time step"
            )
        if prev_step is not None:
            grow = np.where(step > prev_step, grow + 1, 0)
            escaped = step > np.maximum(np.abs(y_new), scale0)
            if np.any((grow >= 5) & escaped):
                raise FixedPointDivergenceError(
                    f"density prediction growing for 5 iterations at iteration {l};"
                    " reduce the time step"
                )
        prev_step = step
        rel = step / np.maximum(np.abs(y_new), 1e-300)
        y = y_new
        if np.max(rel) < tol:
            break
    return np.maximum(y, 0.0)


def predict_density_value(
    model: ControlledModel,
    prev_density: Callable[[Array], Array],
    x: Array,
    u_applied: Array,
    t_next: float,
    dt: float,
    iterations: int,
    rng: np.random.Generator,
    tol: float = 1e-6,
) -> float:
    """Single-point variant of predict_density_values."""
    x = model.check_state(x)
    return float(
        predict_density_values(
            model, prev_density, x[None, :], u_applied, t_next, dt, iterations, rng, tol
        )[0]
    )


def bayes_update(
    model: ControlledModel,
    points: Array,
    predicted: Array,
    observation: Array,
    cov: Optional[Array] = None,
) -> Array:
    """Posterior density values: likelihood * predicted, scaled so the
    importance-sampling estimate of the posterior integral (with the predicted
    values as proposal) is one.  Raises DegeneracyError if every likelihood
    underflows."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    predicted = np.asarray(predicted, dtype=float)
    n = points.shape[0]
    if predicted.shape != (n,):
        raise ShapeError("predicted values must align with points")
    if not np.any(predicted > 0.0):
        raise DegeneracyError("no positive predicted density values to update")
    loglik = log_likelihood_many(model, points, observation, cov)
    mask = predicted > 0.0
    log_norm = logsumexp(loglik[mask]) - math.log(n)
    if not np.isfinite(log_norm):
        raise DegeneracyError("likelihood underflow at every cloud point")
    with np.errstate(divide="ignore"):
        log_pred = np.where(mask, np.log(np.maximum(predicted, 1e-300)), -np.inf)
    rho = np.exp(loglik + log_pred - log_norm)
    rho[~mask] = 0.0
    if not np.any(rho > 0.0):
        raise DegeneracyError("posterior underflow at every cloud point")
    return rho


def select_centers(points: Array, values: Array, k: int, rng: np.random.Generator):
    """K distinct points drawn without replacement with probability ~ values.
    Returns (centers, indices)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    values = np.asarray(values, dtype=float)
    n = points.shape[0]
    if k > n:
        raise ValueError(f"cannot select {k} centers from {n} points")
    positive = np.flatnonzero(values > 0.0)
    if positive.size >= k:
        prob = values / values.sum()
        idx = rng.choice(n, size=k, replace=False, p=prob)
    else:
        rest = np.setdiff1d(np.arange(n), positive)
        extra = rng.choice(rest, size=k - positive.size, replace=False)
        idx = np.concatenate([positive, extra])
    return points[idx].copy(), idx


def _neighbor_bandwidths(centers: Array, scale: float) -> Array:
    """Per-kernel initial bandwidth from the nearest-neighbor center distance.

    Narrow initializations leave the SGD in a zero-gradient region (the kernel
    values vanish at every other training point) and truncate the tails, where
    centers are sparse; scaling the gap to the nearest center adapts both.
    """
    k, d = centers.shape
    if k == 1:
        return np.ones((1, d))
    dist2 = np.sum((centers[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(dist2, np.inf)
    nearest = np.sqrt(dist2.min(axis=1))
    return scale * np.maximum(nearest, 1e-3)[:, None] * np.ones((1, d))


def kernel_fit_gradients(centers: Array, weights: Array, bandwidths: Array, x: Array, target: float):
    """Single-sample squared-error loss gradients at one training point.

    loss = (p(x) - target)^2 with p the mixture evaluation; returns
    (d loss / d weights, d loss / d bandwidths)."""
    diff = centers - x[None, :]
    scaled = diff / bandwidths
    phi = np.exp(-np.sum(scaled * scaled, axis=1))
    err = float(weights @ phi - target)
    grad_w = 2.0 * err * phi
    grad_b = 2.0 * err * (weights * phi)[:, None] * (2.0 * diff * diff / bandwidths**3)
    return grad_w, grad_b


def fit_kernel_density(
    points: Array,
    values: Array,
    centers: Array,
    center_values: Array,
    config: KernelFilterConfig,
    rng: np.random.Generator,
    init_weights: Optional[Array] = None,
    init_bandwidths: Optional[Array] = None,
) -> KernelDensity:
    """Fit mixture weights and diagonal bandwidths to (point, value) training
    pairs by single-sample SGD; training points are drawn with probability
    proportional to their values.

    The fit runs in standardized coordinates (cloud mean/std) and value units
    (max value), where the configured learning rates apply literally; the
    result is mapped back exactly, kernels being closed under the affine map.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    values = np.asarray(values, dtype=float)
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    center_values = np.asarray(center_values, dtype=float)
    n, d = points.shape
    k = centers.shape[0]
    if config.fit_iterations < 1:
        raise ConfigurationError("need at least one fit iteration")

    x_shift = points.mean(axis=0)
    x_scale = points.std(axis=0)
    x_scale = np.where(x_scale > 1e-12, x_scale, 1.0)
    v_scale = float(values.max())
    if v_scale <= 0.0:
        raise ConfigurationError("cannot fit a density to all-zero values")

    z_points = (points - x_shift) / x_scale
    z_centers = (centers - x_shift) / x_scale
    z_values = values / v_scale

    if init_weights is None:
        w = np.maximum(center_values / v_scale / k, config.weight_floor / v_scale)
    else:
        w = np.asarray(init_weights, dtype=float) / v_scale
    if init_bandwidths is None:
        lam = _neighbor_bandwidths(z_centers, config.bandwidth_init_scale)
    else:
        lam = np.asarray(init_bandwidths, dtype=float) / x_scale[None, :]

    w_floor = config.weight_floor / v_scale
    lam_floor = config.bandwidth_floor / x_scale
    half_life = config.rate_half_life if config.rate_half_life is not None else max(
        1.0, config.fit_iterations / 4.0
    )
    prob = values / values.sum()
    draws = rng.choice(n, size=config.fit_iterations, p=prob)
    for j in range(config.fit_iterations):
        i = draws[j]
        grad_w, grad_b = kernel_fit_gradients(z_centers, w, lam, z_points[i], z_values[i])
        decay = 1.0 + j / half_life
        w = w - (config.weight_rate / decay) * grad_w
        lam = lam - (config.bandwidth_rate / decay) * grad_b
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(lam))):
            raise NumericBlowupError(f"fit_kernel_density: non-finite update at iteration {j}")
        w = np.maximum(w, w_floor)
        lam = np.maximum(lam, lam_floor[None, :])

    return KernelDensity(centers, w * v_scale, lam * x_scale[None, :])


def resample(density: KernelDensity, n: int, rng: np.random.Generator) -> Array:
    """Fresh spatial points drawn from the kernel mixture."""
    if n < 1:
        raise ConfigurationError("need at least one sample")
    return density.sample(n, rng)


def filter_step(
    state: FilterState,
    model: ControlledModel,
    u_applied: Array,
    observation: Array,
    t: float,
    dt: float,
    config: KernelFilterConfig,
    rng: np.random.Generator,
) -> FilterState:
    """One predict/update/fit/resample cycle from node `state.step` at time t."""
    pts = propagate_cloud(model, state.cloud.points, u_applied, t, dt, rng)
    predicted = predict_density_values(
        model,
        state.density,
        pts,
        u_applied,
        t + dt,
        dt,
        config.fixed_point_iterations,
        rng,
        config.fixed_point_tol,
    )
    if not np.any(predicted > 0.0):
        log.warning("filter_step %d: predicted density vanished on the cloud; flat prior fallback",
                    state.step)
        predicted = np.ones(pts.shape[0])
    cov = np.array(model.obs_noise_cov, dtype=float)
    rho = None
    for attempt in range(config.degeneracy_retries + 1):
        try:
            rho = bayes_update(model, pts, predicted, observation, cov=cov)
            break
        except DegeneracyError:
            if attempt == config.degeneracy_retries:
                raise
            cov = cov * config.degeneracy_inflation
            log.warning(
                "filter_step %d: likelihood underflow, inflating observation covariance x%g",
                state.step,
                config.degeneracy_inflation ** (attempt + 1),
            )
    k = config.kernels_for(pts.shape[0])
    centers, idx = select_centers(pts, rho, k, rng)
    density = fit_kernel_density(pts, rho, centers, rho[idx], config, rng)
    new_points = resample(density, state.cloud.size, rng)
    cloud = SampleCloud(new_points, density(new_points))
    return FilterState(step=state.step + 1, density=density, cloud=cloud)


class KernelFilterRunner:
    """Closed-loop adapter: owns the filter state and an RNG stream."""

    def __init__(
        self,
        model: ControlledModel,
        grid: TimeGrid,
        initial_density: KernelDensity,
        config: KernelFilterConfig,
        rng: np.random.Generator,
    ):
        self.model = model
        self.grid = grid
        self.config = config
        self.rng = rng
        points = resample(initial_density, config.n_samples, rng)
        cloud = SampleCloud(points, initial_density(points))
        self.state = FilterState(step=0, density=initial_density, cloud=cloud)

    def points(self) -> Array:
        return self.state.cloud.points

    def mean(self) -> Array:
        return self.state.density.mean()

    def step(self, u_applied: Array, observation: Array) -> None:
        t = self.grid.node(self.state.step)
        self.state = filter_step(
            self.state, self.model, u_applied, observation, t, self.grid.dt, self.config, self.rng
        )


def density_to_csv(density: KernelDensity, path) -> None:
    """One row per kernel: center components, weight, bandwidth components."""
    d = density.dim
    header = [f"center_{j}" for j in range(d)] + ["weight"] + [f"bandwidth_{j}" for j in range(d)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(density.n_kernels):
            row = [repr(v) for v in density.centers[k]]
            row.append(repr(float(density.weights[k])))
            row.extend(repr(v) for v in density.bandwidths[k])
            writer.writerow(row)


def density_from_csv(path) -> KernelDensity:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = (len(header) - 1) // 2
        centers, weights, bandwidths = [], [], []
        for row in reader:
            vals = [float(v) for v in row]
            centers.append(vals[:d])
            weights.append(vals[d])
            bandwidths.append(vals[d + 1 :])
    return KernelDensity(np.array(centers), np.array(weights), np.array(bandwidths))


def cloud_to_csv(cloud: SampleCloud, path) -> None:
    """One row per point: components, value."""
    d = cloud.points.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x_{j}" for j in range(d)] + ["value"])
        for i in range(cloud.size):
            writer.writerow([repr(v) for v in cloud.points[i]] + [repr(float(cloud.values[i]))])
