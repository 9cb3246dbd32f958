"""Tests for optima, grid oracles, reference curves, slope fits, and replication."""

import math

import numpy as np
import pytest

from alloc_dichotomy import rewards as rw
from alloc_dichotomy.harness import (
    RegretTrace,
    checkpoint_grid,
    fit_loglog_slope,
    grid_optimum,
    optimal_allocation,
    pair_profile_on_grid,
    reference_curves,
    run_experiment,
    sgd_baseline,
)
from alloc_dichotomy.k2_search import RunTrace, Segment
from alloc_dichotomy.rewards import NoiseModel, RewardFunction, RewardModelError

ZERO = NoiseModel("zero", 0.0)


def random_functions(rng, k):
    fns = []
    for _ in range(k):
        if rng.random() < 0.5:
            a = rng.uniform(0.4, 1.0)
            fns.append(rw.make_quadratic(a, rng.uniform(2.0 * a, 2.0)))
        else:
            fns.append(
                rw.make_c_alpha(
                    -rng.uniform(0.3, 1.0),
                    rng.uniform(1.0, 2.0),
                    rng.uniform(1.6, 3.0),
                )
            )
    return tuple(fns)


# -- exact optimum --------------------------------------------------------------


def test_identical_strictly_concave_gives_uniform():
    f = rw.make_quadratic(1.0, 2.0)
    for k in (2, 3, 4):
        alloc, value = optimal_allocation([f] * k)
        assert np.allclose(alloc, 1.0 / k, atol=1e-9)
        assert value == pytest.approx(k * float(f.eval(1.0 / k)), abs=1e-9)


def test_linear_arms_put_everything_on_the_best():
    alloc, value = optimal_allocation([rw.make_linear(3.0), rw.make_linear(1.0)])
    assert np.allclose(alloc, [1.0, 0.0], atol=1e-9)
    assert value == pytest.approx(3.0)


def test_equal_linear_arms_resolve_deterministically():
    alloc, value = optimal_allocation([rw.make_linear(1.0), rw.make_linear(1.0)])
    assert value == pytest.approx(1.0)
    assert alloc.sum() == pytest.approx(1.0)


def test_experiment_pair_optimum():
    alloc, value = optimal_allocation(rw.make_experiment_pair_beta2())
    assert np.allclose(alloc, [0.4, 0.6], atol=1e-9)


def test_non_concave_input_rejected():
    convex = RewardFunction(
        family="custom",
        params=(),
        lipschitz_L=2.0,
        _value=lambda x: x**2,
        _grad=lambda x: 2.0 * x,
    )
    with pytest.raises(RewardModelError):
        optimal_allocation([convex, convex])


def test_water_filling_agrees_with_grid_oracle():
    rng = np.random.default_rng(42)
    for _ in range(10):
        k = int(rng.integers(2, 5))
        fns = random_functions(rng, k)
        alloc, value = optimal_allocation(fns)
        galloc, gvalue = grid_optimum(fns, resolution=1e-3)
        assert abs(value - gvalue) <= 1e-4
        assert np.max(np.abs(alloc - galloc)) <= 5e-3


def test_pair_profile_grid_matches_full_scan():
    rng = np.random.default_rng(3)
    f1, f2 = random_functions(rng, 2)
    xs, h, arg = pair_profile_on_grid(f1, f2, 501)
    vals1 = np.asarray(f1.eval(xs))
    vals2 = np.asarray(f2.eval(xs))
    for i in range(0, 501, 25):
        full = np.max(vals1[: i + 1] + vals2[i::-1])
        assert h[i] == pytest.approx(full, abs=1e-12)


# -- reference curves -------------------------------------------------------------


def test_reference_curve_examples():
    t = math.e**2
    lower, upper = reference_curves(2.0, [t], k=2)
    assert lower[0] == pytest.approx(math.e**-2)
    assert upper[0] == pytest.approx(1.0 / (t / 4.0))
    lower, upper = reference_curves(2.5, [100.0], k=2)
    assert lower[0] == pytest.approx(1.0 / 100.0)
    assert upper[0] == pytest.approx(math.log(100.0) / 100.0)
    lower, _ = reference_curves(1.0, [64.0], k=2)
    assert lower[0] == pytest.approx(64.0**-0.5)
    # many resources pick up extra log powers
    _, upper = reference_curves(2.0, [math.e**2], k=4)
    assert upper[0] == pytest.approx((math.e**2 / 2.0**3) ** -1.0)
    with pytest.raises(ValueError):
        reference_curves(0.5, [10.0])


# -- slope fitting -----------------------------------------------------------------


def test_slope_of_exact_power_law():
    ts = checkpoint_grid(10**6)
    slope = fit_loglog_slope(ts, ts.astype(float) ** -0.75)
    assert slope == pytest.approx(-0.75, abs=1e-9)


def test_slope_of_log_squared_over_t():
    ts = checkpoint_grid(10**6)
    values = np.log(ts.astype(float)) ** 2 / ts
    slope = fit_loglog_slope(ts, values)
    # d ln R / d ln t = -1 + 2/ln t stays within [-0.856, -0.826] on the
    # final decade, and a least-squares slope is a convex combination
    assert -0.856 <= slope <= -0.826


def test_slope_of_constant_curve_is_zero():
    ts = checkpoint_grid(10**5)
    assert fit_loglog_slope(ts, np.full(len(ts), 0.37)) == pytest.approx(0.0, abs=1e-12)


def test_slope_insufficient_checkpoints():
    with pytest.raises(ValueError):
        fit_loglog_slope([10, 20, 30], [1.0, 0.5, 0.3])
    ts = np.linspace(10, 50, 20)  # no decade of span
    with pytest.raises(ValueError):
        fit_loglog_slope(ts, 1.0 / ts)


def test_checkpoint_grid_shape():
    ts = checkpoint_grid(10**4)
    assert ts[0] == 1 and ts[-1] == 10**4
    assert np.all(np.diff(ts) > 0)
    assert len(ts) >= 10 * 4  # >= 10 checkpoints per decade


# -- traces -----------------------------------------------------------------------


def test_regret_trace_from_segments():
    run = RunTrace(
        horizon=100,
        segments=[Segment(40, (0.5, 0.5), 0.2), Segment(60, (0.4, 0.6), 0.05)],
        final_allocation=(0.4, 0.6),
    )
    cps = np.array([1, 40, 50, 100])
    trace = RegretTrace.from_run(run, cps)
    assert trace.avg_regret[0] == pytest.approx(0.2)
    assert trace.avg_regret[1] == pytest.approx(0.2)
    assert trace.avg_regret[2] == pytest.approx((40 * 0.2 + 10 * 0.05) / 50)
    assert trace.avg_regret[3] == pytest.approx((40 * 0.2 + 60 * 0.05) / 100)
    assert trace.final_cumulative == pytest.approx(11.0)
    cum = trace.avg_regret * cps
    assert np.all(np.diff(cum) >= -1e-12)


# -- baseline ----------------------------------------------------------------------


def test_sgd_zero_noise_at_optimum_has_zero_regret():
    inst = rw.make_appendix_beta2_instance(2000, noise=ZERO)
    trace = sgd_baseline(inst, start=np.array([0.4, 0.6]))
    assert trace.final_avg_regret == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(trace.final_allocation, [0.4, 0.6], atol=1e-12)


def test_sgd_linear_arms_slope_near_minus_half():
    inst = rw.make_linear_gap_instance(10**5, gap=0.5, seed=0)
    result = run_experiment(inst, algorithm="sgd", replications=4, beta=math.inf)
    assert -0.65 <= result.slope <= -0.35


def test_sgd_respects_budget_and_projection():
    inst = rw.make_quadratic_k4_instance(500, seed=8)
    trace = sgd_baseline(inst)
    alloc = np.asarray(trace.final_allocation)
    assert np.all(alloc >= -1e-12)
    assert alloc.sum() == pytest.approx(1.0, abs=1e-9)
    assert trace.checkpoint_ts[-1] == 500


# -- experiment runner -------------------------------------------------------------


def test_run_experiment_deterministic():
    inst = rw.make_appendix_beta2_instance(3000, noise=ZERO, seed=5)
    a = run_experiment(inst, algorithm="k2", replications=1)
    b = run_experiment(inst, algorithm="k2", replications=1)
    assert np.array_equal(a.mean_avg_regret, b.mean_avg_regret)
    assert a.mean_final == b.mean_final


def test_run_experiment_isolates_seed_failures():
    inst = rw.make_appendix_beta2_instance(1000, seed=0)

    def flaky(seeded):
        if seeded.seed == 1:
            raise RuntimeError("boom")
        from alloc_dichotomy.k2_search import run_k2

        return run_k2(seeded)

    result = run_experiment(inst, algorithm=flaky, replications=3)
    assert set(result.errors) == {1}
    assert set(result.per_seed_final) == {0, 2}
    assert not result.ok


def test_run_experiment_beta_resolution():
    inst = rw.make_appendix_beta2_instance(1000)
    result = run_experiment(inst, algorithm="k2", replications=1)
    assert result.beta == pytest.approx(2.0)  # from the pair metadata
    result = run_experiment(inst, algorithm="k2", replications=1, beta=1.5)
    assert result.beta == pytest.approx(1.5)
