"""Bootstrap particle filter baseline: propagate, likelihood-reweight,
systematic resampling below half effective sample size."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import Array, ControlledModel, TimeGrid, log_likelihood_many
from .errors import ConfigurationError, DegeneracyError, NumericBlowupError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class ParticleEnsemble:
    particles: Array
    weights: Array

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        n = self.particles.shape[0]
        if self.weights.shape != (n,):
            raise ShapeError("weights must align with particles")
        if np.any(self.weights < 0.0):
            raise ConfigurationError("weights must be nonnegative")
        total = self.weights.sum()
        if not np.isfinite(total) or total <= 0.0:
            raise ConfigurationError("weights must have positive finite sum")
        self.weights = self.weights / total

    @property
    def size(self) -> int:
        return self.particles.shape[0]

    def mean(self) -> Array:
        return self.weights @ self.particles

    @classmethod
    def uniform(cls, particles: Array) -> "ParticleEnsemble":
        particles = np.atleast_2d(np.asarray(particles, dtype=float))
        n = particles.shape[0]
        return cls(particles, np.full(n, 1.0 / n))


def effective_sample_size(weights: Array) -> float:
    weights = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(weights**2))


def systematic_resample(weights: Array, rng: np.random.Generator) -> Array:
    """Indices of the systematic (lowest-variance) resampling scheme."""
    weights = np.asarray(weights, dtype=float)
    n = weights.shape[0]
    positions = (rng.random() + np.arange(n)) / n
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.searchsorted(cumulative, positions)


def pf_step(
    ensemble: ParticleEnsemble,
    model: ControlledModel,
    u_applied: Array,
    observation: Array,
    t: float,
    dt: float,
    rng: np.random.Generator,
    ess_fraction: float = 0.5,
    degeneracy_retries: int = 3,
    degeneracy_inflation: float = 10.0,
) -> ParticleEnsemble:
    """One bootstrap step: propagate every particle by Euler-Maruyama, multiply
    weights by the observation likelihood, resample when the effective sample
    size drops under ess_fraction * N.  Mirrors the kernel filter's degeneracy
    fallback: total weight underflow inflates the observation covariance."""
    u = model.check_control(u_applied, "u_applied")
    n = ensemble.size
    sqdt = math.sqrt(dt)
    omega = rng.standard_normal((n, model.dim_noise))
    moved = np.empty_like(ensemble.particles)
    for i in range(n):
        x = ensemble.particles[i]
        b = np.asarray(model.drift(t, x, u), dtype=float)
        s = np.asarray(model.diffusion(t, x, u), dtype=float)
        moved[i] = x + b * dt + s @ (sqdt * omega[i])
        if not np.all(np.isfinite(moved[i])):
            raise NumericBlowupError(f"pf_step: non-finite particle at index {i}")

    cov = np.array(model.obs_noise_cov, dtype=float)
    with np.errstate(divide="ignore"):
        log_w_prior = np.log(ensemble.weights)
    for attempt in range(degeneracy_retries + 1):
        log_w = log_w_prior + log_likelihood_many(model, moved, observation, cov)
        total = logsumexp(log_w)
        if np.isfinite(total):
            break
        if attempt == degeneracy_retries:
            raise DegeneracyError("particle weights underflowed at every particle")
        cov = cov * degeneracy_inflation
        log.warning(
            "pf_step: weight underflow, inflating observation covariance x%g",
            degeneracy_inflation ** (attempt + 1),
        )
    weights = np.exp(log_w - total)
    weights = weights / weights.sum()

    if effective_sample_size(weights) < ess_fraction * n:
        idx = systematic_resample(weights, rng)
        moved = moved[idx]
        weights = np.full(n, 1.0 / n)
    return ParticleEnsemble(moved, weights)


class ParticleFilterRunner:
    """Closed-loop adapter with the same duck type as KernelFilterRunner.

    points() serves start states for the control solver; systematic resampling
    keeps the weights near uniform, which is what the uniform draw over points
    assumes."""

    def __init__(
        self,
        model: ControlledModel,
        grid: TimeGrid,
        initial_particles: Array,
        rng: np.random.Generator,
        ess_fraction: float = 0.5,
    ):
        self.model = model
        self.grid = grid
        self.rng = rng
        self.ess_fraction = ess_fraction
        self.ensemble = ParticleEnsemble.uniform(initial_particles)
        self._step = 0

    def points(self) -> Array:
        return self.ensemble.particles

    def mean(self) -> Array:
        return self.ensemble.mean()

    def step(self, u_applied: Array, observation: Array) -> None:
        t = self.grid.node(self._step)
        self.ensemble = pf_step(
            self.ensemble,
            self.model,
            u_applied,
            observation,
            t,
            self.grid.dt,
            self.rng,
            self.ess_fraction,
        )
        self._step += 1


def ensemble_to_csv(ensemble: ParticleEnsemble, path) -> None:
    """One row per particle: components, weight."""
    d = ensemble.particles.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x_{j}" for j in range(d)] + ["weight"])
        for i in range(ensemble.size):
            writer.writerow(
                [repr(v) for v in ensemble.particles[i]] + [repr(float(ensemble.weights[i]))]
            )
