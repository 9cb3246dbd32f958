"""Tests for the tree allocator and the envelope gradient estimation."""

import math

import numpy as np
import pytest

from alloc_dichotomy import rewards as rw
from alloc_dichotomy.harness import grid_profiles, optimal_allocation
from alloc_dichotomy.k2_search import regret_of_trace
from alloc_dichotomy.rewards import NoiseModel, RewardModelError
from alloc_dichotomy.tree_allocator import (
    build_tree,
    child_stop_threshold,
    estimate_node_gradient,
    run_tree,
)

ZERO = NoiseModel("zero", 0.0)


def mixed_k4_functions():
    return (
        rw.make_quadratic(1.0, 2.0),
        rw.make_c_alpha(-1.0, 1.0, 2.0),
        rw.make_c_alpha(-0.5, 1.5, 3.0),
        rw.make_quadratic(0.5, 1.5),
    )


# -- tree construction ---------------------------------------------------------


def test_build_tree_shapes():
    f = rw.make_quadratic(1.0, 2.0)
    t2 = build_tree([f, f])
    assert t2.leaf_count == 2 and t2.depth == 1
    assert t2.root.left.is_leaf and t2.root.right.is_leaf

    t3 = build_tree([f, f, f])
    assert t3.leaf_count == 4 and t3.depth == 2
    assert [leaf.is_pad for leaf in t3.leaves] == [False, False, False, True]

    t4 = build_tree([f] * 4)
    assert t4.leaf_count == 4
    # children of (i, j) are (i+1, 2j-1) and (i+1, 2j)
    for (level, index), node in t4.nodes.items():
        if not node.is_leaf:
            assert node.left.node_id == (level + 1, 2 * index - 1)
            assert node.right.node_id == (level + 1, 2 * index)
    assert [t4.leaves[i].leaf_slot for i in range(4)] == [0, 1, 2, 3]

    t5 = build_tree([f] * 5)
    assert t5.leaf_count == 8 and t5.depth == 3
    assert sum(leaf.is_pad for leaf in t5.leaves) == 3


def test_build_tree_rejects_bad_sizes():
    f = rw.make_quadratic(1.0, 2.0)
    with pytest.raises(RewardModelError):
        build_tree([f])
    with pytest.raises(RewardModelError):
        build_tree([f] * 65537)


def test_child_stop_threshold_is_magnitude():
    assert child_stop_threshold(-0.2) == pytest.approx(0.2)
    assert child_stop_threshold(0.0) == 0.0


# -- envelope gradient estimation ----------------------------------------------


def test_estimate_symmetric_quadratic_node():
    inst = rw.make_quadratic_k4_instance(10**6, noise=ZERO)
    est = estimate_node_gradient(inst, (1, 1), 0.5)
    # split optimum at 0.25 by symmetry; profile gradient = f'(0.25) = 1.5
    assert est.value == pytest.approx(1.5, abs=1e-4)
    assert est.half_width <= 1e-3


def test_estimate_boundary_branch():
    # right child dominates everywhere: split optimum pinned at 0, and the
    # profile gradient equals the right child's gradient at the full budget
    fns = (rw.make_linear(0.1), rw.make_linear(0.9))
    inst = rw.make_instance(fns, 10**6, noise=ZERO)
    est = estimate_node_gradient(inst, (0, 1), 0.7)
    assert est.value == pytest.approx(0.9, abs=1e-3)


def test_estimate_leaf_reads_oracle():
    inst = rw.make_quadratic_k4_instance(1000, noise=ZERO)
    est = estimate_node_gradient(inst, (2, 1), 0.3)
    assert est.value == pytest.approx(inst.functions[0].grad(0.3))
    assert est.half_width == 0.0


def finite_difference_profile_gradient(values, xs, v, step=1e-3):
    i = int(round(v * (len(xs) - 1)))
    d = int(round(step * (len(xs) - 1)))
    return (values[i + d] - values[i - d]) / (xs[i + d] - xs[i - d])


def test_estimates_match_brute_force_profiles():
    fns = mixed_k4_functions()
    inst = rw.make_instance(fns, 10**6, noise=ZERO)
    xs, tree, values, args = grid_profiles(fns, 100001)
    for node_id in [(1, 1), (1, 2)]:
        for v in (0.2, 0.55, 0.9):
            est = estimate_node_gradient(inst, node_id, v)
            fd = finite_difference_profile_gradient(values[node_id], xs, v)
            assert abs(est.value - fd) <= 1e-3


def test_estimate_covers_truth_within_half_width():
    fns = mixed_k4_functions()
    inst = rw.make_instance(fns, 10**6, noise=ZERO)
    xs, tree, values, args = grid_profiles(fns, 100001)
    for v in (0.3, 0.7):
        est = estimate_node_gradient(inst, (1, 2), v)
        fd = finite_difference_profile_gradient(values[(1, 2)], xs, v)
        assert abs(est.value - fd) <= est.half_width + 1e-4


# -- full runs -------------------------------------------------------------------


def test_identical_quadratics_stay_at_uniform():
    inst = rw.make_quadratic_k4_instance(20000, noise=ZERO)
    trace = run_tree(inst)
    assert np.allclose(trace.final_allocation, 0.25)
    assert regret_of_trace(trace, inst) == pytest.approx(0.0, abs=1e-12)
    assert trace.total_samples == 20000


def test_distinct_linear_arms_concentrate():
    fns = tuple(rw.make_linear(s) for s in (0.9, 0.2, 0.3, 0.1))
    inst = rw.make_instance(fns, 200000, noise=ZERO)
    trace = run_tree(inst)
    assert trace.final_allocation[0] > 0.99


def test_padded_three_arm_recovers_pair_optimum():
    f1, f2 = rw.make_experiment_pair_beta2()
    inst = rw.make_instance((f1, f2, rw.make_zero_pad()), 300000, noise=ZERO)
    trace = run_tree(inst)
    alloc = np.asarray(trace.final_allocation)
    target, _ = optimal_allocation(inst.functions)
    assert np.max(np.abs(alloc[:3] - target)) <= 1e-2
    assert alloc[3] <= 1e-2


def test_time_steps_and_simplex_feasibility():
    inst = rw.make_quadratic_k4_instance(5000, seed=3)
    trace = run_tree(inst)
    assert trace.total_samples == 5000
    for seg in trace.segments:
        coords = np.asarray(seg.allocation)
        assert coords.shape == (4,)
        assert np.all(coords >= -1e-9)
        assert abs(coords.sum() - 1.0) <= 1e-9
        assert seg.gap >= 0.0


def test_noisy_run_near_optimum_is_stable():
    inst = rw.make_quadratic_k4_instance(100000, seed=5)
    trace = run_tree(inst)
    assert regret_of_trace(trace, inst) <= 1e-3


def test_gradient_ordering_invariant_holds():
    fns = mixed_k4_functions()
    inst = rw.make_instance(fns, 30000, seed=1)
    trace = run_tree(inst, check_invariants=True)
    assert trace.invariant_failures == []


def test_k2_delegates_to_binary_search():
    inst = rw.make_appendix_beta2_instance(5000, noise=ZERO)
    trace = run_tree(inst)
    assert trace.depth_records  # produced by the two-resource search
    assert trace.final_allocation[0] == pytest.approx(0.4, abs=0.01)


def test_node_query_sample_bound_noise_free():
    # with exact signs, samples charged at a query stay far below the
    # guaranteed budget for that query's gradient
    fns = mixed_k4_functions()
    inst = rw.make_instance(fns, 200000, noise=ZERO)
    trace = run_tree(inst)
    xs, tree, values, args = grid_profiles(fns, 20001)
    log_term = math.log(2.0 * inst.horizon / inst.confidence)
    horizon_log = math.log(inst.horizon)
    checked = 0
    for rec in trace.node_records:
        if rec.sign is None:
            continue
        node = tree.node(*rec.node)
        left_id, right_id = node.left.node_id, node.right.node_id
        step = 2e-3
        if not (step < rec.query < rec.budget - step):
            continue
        gl = finite_difference_profile_gradient(values[left_id], xs, rec.query, step)
        gr = finite_difference_profile_gradient(
            values[right_id], xs, rec.budget - rec.query, step
        )
        grad = abs(gl - gr)
        if grad < 1e-2:
            continue
        bound = 8.0 * log_term * horizon_log**rec.depth_from_leaves / grad**2
        assert rec.samples <= 2.0 * bound
        checked += 1
    assert checked >= 5


def test_node_profiles_inherit_leaf_shape():
    # every internal profile is concave, non-decreasing, 0 at 0, and no
    # steeper than the steepest leaf
    fns = mixed_k4_functions()
    xs, tree, values, args = grid_profiles(fns, 2001)
    step = xs[1] - xs[0]
    max_l = max(f.lipschitz_L for f in fns)
    for node_id, h in values.items():
        if tree.node(*node_id).is_leaf:
            continue
        assert abs(h[0]) <= 1e-12
        assert np.all(np.diff(h) >= -1e-12)
        assert np.all(np.diff(h, 2) <= 1e-9)
        assert np.all(np.diff(h) <= max_l * step + 1e-9)


def test_determinism():
    a = run_tree(rw.make_quadratic_k4_instance(20000, seed=21))
    b = run_tree(rw.make_quadratic_k4_instance(20000, seed=21))
    assert a.final_allocation == b.final_allocation
    assert [(s.count, s.allocation) for s in a.segments] == [
        (s.count, s.allocation) for s in b.segments
    ]
