"""Feedback control of partially observed SDEs.

A kernel-learning backward-SDE filter estimates the hidden controlled state
from noisy indirect observations; a sample-wise stochastic-maximum-principle
SGD solver computes the feedback control node by node.  Analytical references
(linear-quadratic benchmark, Riccati feedback for a discretized heat equation,
a Dubins helix) and a particle-filter / brute-force-search pair of baselines
make every component checkable at desk scale.
"""

from .core import (
    AffineQuadratic,
    ControlledModel,
    ControlSchedule,
    ObservationRecord,
    TimeGrid,
    em_state_step,
    log_likelihood,
    rng_stream,
    simulate_observation,
    simulate_state_path,
)
from .errors import (
    BudgetExceededError,
    ConfigurationError,
    DegeneracyError,
    FixedPointDivergenceError,
    NumericBlowupError,
    ShapeError,
)
from .kernel_filter import (
    FilterState,
    KernelDensity,
    KernelFilterConfig,
    KernelFilterRunner,
    SampleCloud,
    bayes_update,
    fit_kernel_density,
    filter_step,
    predict_density_value,
    predict_density_values,
    propagate_cloud,
    backward_sample,
    resample,
    select_centers,
)
from .particle_filter import ParticleEnsemble, ParticleFilterRunner, pf_step, systematic_resample
from .smp import (
    AdjointPath,
    ClosedLoopRecord,
    SolverConfig,
    gradient_sample,
    monte_carlo_cost,
    optimize_control_at,
    optimize_control_batch,
    run_closed_loop,
    sgd_update,
    solve_adjoint_samplewise,
)
from .oracle import (
    LqSpec,
    dp_baseline,
    dubins_reference,
    heat_discretize,
    heat_optimal_control,
    lq_benchmark,
    lq_costate,
    lq_exact_control,
    lq_fbode_solve,
    riccati_solve,
)

__version__ = "0.1.0"
