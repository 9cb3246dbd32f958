"""Adaptive binary-search budget allocation over concave resources.

A decision maker repeatedly splits one unit of budget between K resources with
concave, non-decreasing rewards and observes noisy gradients.  This package
implements the adaptive allocators (a sequential-sign-test binary search for
two resources and recursively imbricated searches on a balanced resource tree
for more), the instance families used to benchmark them, and a regret harness
with exact optima, reference rate curves, and a projected-gradient baseline.
"""

from .harness import (
    ExperimentResult,
    RegretTrace,
    checkpoint_grid,
    fit_loglog_slope,
    grid_optimum,
    optimal_allocation,
    reference_curves,
    run_experiment,
    sgd_baseline,
)
from .k2_search import RunTrace, regret_of_trace, run_k2
from .rewards import (
    InstanceSpec,
    NoiseModel,
    RewardFunction,
    make_c_alpha,
    make_instance,
    make_linear,
    make_quadratic,
    noisy_gradient,
)
from .sign_test import SequentialSignTest, SignStatus, sample_budget_bound
from .tree_allocator import (
    FunctionTree,
    GradientEstimate,
    build_tree,
    estimate_node_gradient,
    run_tree,
)

__version__ = "0.1.0"
