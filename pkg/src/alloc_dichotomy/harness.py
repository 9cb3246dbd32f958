"""Ground-truth optima, regret measurement, reference rate curves, and replication.

The exact optimum of a separable concave objective on the simplex is found by
water-filling: bisect on the common marginal value lambda, inverting each
resource's gradient by monotone bisection, until the candidate coordinates sum
to one.  A grid dynamic program over the same resource tree provides an
independent brute-force cross-check.  Regret is always measured against exact
closed-form values, never against noisy samples.
"""

from __future__ import annotations

import concurrent.futures
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .k2_search import RunTrace, run_k2
from .rewards import InstanceSpec, RewardFunction, RewardModelError
from .tree_allocator import build_tree, run_tree

__all__ = [
    "DEFAULT_CHECKPOINT_RATIO",
    "checkpoint_grid",
    "RegretTrace",
    "ExperimentResult",
    "optimal_allocation",
    "grid_profiles",
    "grid_optimum",
    "pair_profile_on_grid",
    "reference_curves",
    "fit_loglog_slope",
    "sgd_baseline",
    "run_experiment",
]

DEFAULT_CHECKPOINT_RATIO = 10.0 ** (1.0 / 20.0)
_WORKERS_ENV = "ALLOC_DICHOTOMY_THREADS"


def checkpoint_grid(horizon: int, ratio: float = DEFAULT_CHECKPOINT_RATIO) -> np.ndarray:
    """Geometrically spaced integer checkpoints from 1 to the horizon."""
    if not ratio > 1.0:
        raise ValueError("checkpoint ratio must exceed 1")
    ts = []
    v = 1.0
    while v < horizon:
        t = int(math.ceil(v))
        if not ts or t > ts[-1]:
            ts.append(t)
        v *= ratio
    if not ts or ts[-1] != horizon:
        ts.append(int(horizon))
    return np.array(ts, dtype=np.int64)


@dataclass
class RegretTrace:
    """Average regret R(t) = cumulative gap / t sampled at checkpoints."""

    horizon: int
    checkpoint_ts: np.ndarray
    avg_regret: np.ndarray
    final_avg_regret: float
    final_cumulative: float
    final_allocation: tuple[float, ...] = ()

    @classmethod
    def from_run(cls, run: RunTrace, checkpoint_ts: np.ndarray) -> "RegretTrace":
        cps = np.asarray(checkpoint_ts, dtype=np.int64)
        out = np.zeros(len(cps))
        cum = 0.0
        t = 0
        ptr = 0
        for seg in run.segments:
            end = t + seg.count
            while ptr < len(cps) and cps[ptr] <= end:
                out[ptr] = (cum + (cps[ptr] - t) * seg.gap) / cps[ptr]
                ptr += 1
            cum += seg.count * seg.gap
            t = end
        while ptr < len(cps):  # trace shorter than a checkpoint: extend flat
            out[ptr] = cum / cps[ptr]
            ptr += 1
        return cls(
            horizon=run.horizon,
            checkpoint_ts=cps,
            avg_regret=out,
            final_avg_regret=cum / run.horizon,
            final_cumulative=cum,
            final_allocation=tuple(run.final_allocation),
        )


# ---------------------------------------------------------------------------
# exact optimum by water-filling
# ---------------------------------------------------------------------------

_CONCAVITY_GRID = np.linspace(0.0, 1.0, 65)


def _check_concave(functions: Sequence[RewardFunction]):
    for f in functions:
        g = np.asarray(f.grad(_CONCAVITY_GRID))
        tol = 1e-7 * max(1.0, f.lipschitz_L)
        if np.any(np.diff(g) > tol):
            raise RewardModelError("non-concave input: gradient increases on [0, 1]")


def _invert_gradient(f: RewardFunction, lam: float) -> float:
    """Solve f'(x) = lam on [0, 1] for a non-increasing gradient."""
    lo, hi = 0.0, 1.0
    for _ in range(48):
        mid = 0.5 * (lo + hi)
        if float(f.grad(mid)) >= lam:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _coords_at(functions, lam: float) -> np.ndarray:
    xs = np.empty(len(functions))
    for i, f in enumerate(functions):
        if float(f.grad(0.0)) <= lam:
            xs[i] = 0.0
        elif float(f.grad(1.0)) >= lam:
            xs[i] = 1.0
        else:
            xs[i] = _invert_gradient(f, lam)
    return xs


def optimal_allocation(
    functions: Sequence[RewardFunction],
) -> tuple[np.ndarray, float]:
    """Maximize sum f_k(x_k) over the simplex; returns (allocation, value).

    Bisects the shared marginal value lambda until the clamped gradient
    inverses sum to one, then distributes any residual mass across resources
    whose gradient is flat at lambda (ties go to the lowest index).
    """
    functions = list(functions)
    if len(functions) < 1:
        raise RewardModelError("need at least one resource")
    _check_concave(functions)
    lam_hi = max(float(f.grad(0.0)) for f in functions) + 1.0
    lam_lo = min(float(f.grad(1.0)) for f in functions) - 1.0
    a, b = lam_lo, lam_hi  # sum(a) >= 1 >= sum(b)
    for _ in range(100):
        mid = 0.5 * (a + b)
        if float(_coords_at(functions, mid).sum()) >= 1.0:
            a = mid
        else:
            b = mid
    lo_x = _coords_at(functions, b)
    hi_x = _coords_at(functions, a)
    x = lo_x.copy()
    residual = 1.0 - float(x.sum())
    for i in range(len(functions)):
        if residual <= 0.0:
            break
        take = min(hi_x[i] - lo_x[i], residual)
        if take > 0.0:
            x[i] += take
            residual -= take
    if residual > 1e-9:
        raise RewardModelError("water-filling failed to place the whole budget")
    # absorb float dust so the allocation is exactly on the simplex
    x[int(np.argmax(x))] += 1.0 - float(x.sum())
    np.clip(x, 0.0, 1.0, out=x)
    value = float(sum(f.eval(v) for f, v in zip(functions, x)))
    return x, value


# ---------------------------------------------------------------------------
# brute-force grid oracle over the resource tree
# ---------------------------------------------------------------------------


def _maxplus_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(max,+) convolution of two concave sequences on a shared uniform grid.

    h[i] = max_{0<=j<=i} a[j] + b[i-j]; the argmax is non-decreasing in i for
    concave inputs, so a single forward sweep is exact and O(n).
    """
    n = len(a)
    h = np.empty(n)
    arg = np.empty(n, dtype=np.int64)
    j = 0
    h[0] = a[0] + b[0]
    arg[0] = 0
    for i in range(1, n):
        best = a[j] + b[i - j]
        while j + 1 <= i and a[j + 1] + b[i - j - 1] > best:
            j += 1
            best = a[j] + b[i - j]
        h[i] = best
        arg[i] = j
    return h, arg


def pair_profile_on_grid(
    f_left: RewardFunction, f_right: RewardFunction, grid_points: int = 1001
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Brute-force profile H(x) = max_{z<=x} f_left(z) + f_right(x-z) on a grid.

    Returns (budgets, H values, split index of the argmax).  Exact on the grid
    for concave inputs.
    """
    xs = np.linspace(0.0, 1.0, grid_points)
    h, arg = _maxplus_pair(np.asarray(f_left.eval(xs)), np.asarray(f_right.eval(xs)))
    return xs, h, arg


def grid_profiles(functions: Sequence[RewardFunction], grid_points: int):
    """Profiles of every tree node on one shared uniform budget grid."""
    tree = build_tree(functions)
    xs = np.linspace(0.0, 1.0, grid_points)
    values: dict[tuple[int, int], np.ndarray] = {}
    args: dict[tuple[int, int], np.ndarray] = {}

    def walk(node):
        if node.is_leaf:
            values[node.node_id] = np.asarray(node.func.eval(xs))
            return values[node.node_id]
        h, arg = _maxplus_pair(walk(node.left), walk(node.right))
        values[node.node_id] = h
        args[node.node_id] = arg
        return h

    walk(tree.root)
    return xs, tree, values, args


def grid_optimum(
    functions: Sequence[RewardFunction], resolution: float = 1e-4
) -> tuple[np.ndarray, float]:
    """Brute-force optimum on a uniform grid of the given resolution."""
    n = int(round(1.0 / resolution)) + 1
    xs, tree, values, args = grid_profiles(functions, n)
    slots = np.zeros(tree.leaf_count)

    def backtrack(node, i):
        if node.is_leaf:
            slots[node.leaf_slot] = xs[i]
            return
        j = int(args[node.node_id][i])
        backtrack(node.left, j)
        backtrack(node.right, i - j)

    backtrack(tree.root, n - 1)
    return slots[: tree.k], float(values[tree.root.node_id][n - 1])


# ---------------------------------------------------------------------------
# reference curves and slope fits
# ---------------------------------------------------------------------------


def reference_curves(beta: float, ts, k: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Lower/upper reference rates at the given times.

    For beta <= 2 the pair is t^{-beta/2} and (t / ln^p t)^{-beta/2} with
    p = 2 for two resources and log2(K) + 1 otherwise; past beta = 2 the decay
    saturates at t^{-1} against ln^p(t) / t with p = 1 or log2(K).
    """
    if not beta >= 1.0:
        raise ValueError("beta must be >= 1")
    if k < 2:
        raise ValueError("k must be >= 2")
    ts = np.asarray(ts, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ln = np.log(ts)
        if beta <= 2.0:
            p = 2.0 if k == 2 else math.log2(k) + 1.0
            lower = ts ** (-beta / 2.0)
            upper = (ts / ln**p) ** (-beta / 2.0)
        else:
            p = 1.0 if k == 2 else math.log2(k)
            lower = 1.0 / ts
            upper = ln**p / ts
    upper = np.where(np.isfinite(upper), upper, 0.0)
    return lower, upper


def fit_loglog_slope(ts, values) -> float:
    """Least-squares slope of ln R against ln t over the final decade of t."""
    ts = np.asarray(ts, dtype=float)
    values = np.asarray(values, dtype=float)
    if ts.size != values.size:
        raise ValueError("checkpoint and value arrays disagree in length")
    if ts.size < 10 or ts.max() < 10.0 * ts.min():
        raise ValueError("insufficient checkpoints: need >= 10 spanning a decade")
    window = ts >= ts.max() / 10.0 * (1.0 - 1e-12)
    wt = ts[window]
    wv = values[window]
    keep = wv > 0.0
    wt, wv = wt[keep], wv[keep]
    if wt.size < 10:
        raise ValueError("insufficient positive checkpoints in the final decade")
    slope, _ = np.polyfit(np.log(wt), np.log(wv), 1)
    return float(slope)


# ---------------------------------------------------------------------------
# projected stochastic gradient ascent baseline
# ---------------------------------------------------------------------------


def _project_simplex_rows(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of v onto the probability simplex."""
    n, k = v.shape
    u = np.sort(v, axis=1)[:, ::-1]
    css = np.cumsum(u, axis=1)
    j = np.arange(1, k + 1)
    cond = u + (1.0 - css) / j > 0.0
    rho = k - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = (css[np.arange(n), rho] - 1.0) / (rho + 1.0)
    return np.maximum(v - theta[:, None], 0.0)


def _sgd_batch(
    instance: InstanceSpec,
    seeds: Sequence[int],
    step_scale: float,
    start,
    checkpoint_ts: np.ndarray,
) -> list[RegretTrace]:
    """All requested replications advanced in lockstep (shared time, separate noise)."""
    k = instance.k
    horizon = instance.horizon
    functions = instance.functions
    noise = instance.noise
    n_seeds = len(seeds)
    _, opt_value = optimal_allocation(functions)
    if start is None:
        x = np.full((n_seeds, k), 1.0 / k)
    else:
        x = np.tile(np.asarray(start, dtype=float), (n_seeds, 1))
        if x.shape != (n_seeds, k):
            raise ValueError("start point has the wrong dimension")
    rngs = [np.random.default_rng(int(s)) for s in seeds]
    cps = np.asarray(checkpoint_ts, dtype=np.int64)
    curves = np.zeros((n_seeds, len(cps)))
    cum = np.zeros(n_seeds)
    ptr = 0
    chunk = 8192
    buf = None
    buf_pos = chunk
    inv_sqrt = step_scale / np.sqrt(np.arange(1, horizon + 1))
    # hot loop: x is already projected into [0, 1], so the raw closed forms
    # can skip the public domain checks
    values_fns = [f._value for f in functions]
    grads_fns = [f._grad for f in functions]
    for t in range(1, horizon + 1):
        value = np.zeros(n_seeds)
        for i in range(k):
            value += values_fns[i](x[:, i])
        cum += np.maximum(0.0, opt_value - value)
        if ptr < len(cps) and t == cps[ptr]:
            curves[:, ptr] = cum / t
            ptr += 1
        if buf_pos == chunk:
            if noise.is_zero:
                buf = np.zeros((chunk, n_seeds, k))
            else:
                buf = np.stack([noise.draw(r, (chunk, k)) for r in rngs], axis=1)
            buf_pos = 0
        grads = np.empty((n_seeds, k))
        for i in range(k):
            grads[:, i] = grads_fns[i](x[:, i])
        step = x + inv_sqrt[t - 1] * (grads + buf[buf_pos])
        buf_pos += 1
        if k == 2:
            left = np.clip((step[:, 0] - step[:, 1] + 1.0) * 0.5, 0.0, 1.0)
            x = np.stack([left, 1.0 - left], axis=1)
        else:
            x = _project_simplex_rows(step)
    traces = []
    for s in range(n_seeds):
        traces.append(
            RegretTrace(
                horizon=horizon,
                checkpoint_ts=cps.copy(),
                avg_regret=curves[s].copy(),
                final_avg_regret=float(cum[s] / horizon),
                final_cumulative=float(cum[s]),
                final_allocation=tuple(x[s]),
            )
        )
    return traces


def sgd_baseline(
    instance: InstanceSpec,
    seed: int | None = None,
    step_scale: float = 1.0,
    start=None,
    checkpoint_ts=None,
) -> RegretTrace:
    """Projected stochastic gradient ascent with step step_scale / sqrt(t).

    Uses the same per-step noisy-gradient budget accounting as the allocators
    and measures regret from exact closed forms.
    """
    if seed is None:
        seed = instance.seed
    if checkpoint_ts is None:
        checkpoint_ts = checkpoint_grid(instance.horizon)
    return _sgd_batch(instance, [seed], step_scale, start, checkpoint_ts)[0]


# ---------------------------------------------------------------------------
# replication harness
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    """Aggregated replications of one algorithm on one instance."""

    label: str
    algorithm: str
    k: int
    beta: float
    horizon: int
    seeds: list[int]
    checkpoint_ts: np.ndarray
    mean_avg_regret: np.ndarray
    ref_lower: np.ndarray
    ref_upper: np.ndarray
    per_seed_final: dict[int, float]
    per_seed_slope: dict[int, float]
    mean_final: float
    std_final: float
    slope: float
    traces: dict[int, RegretTrace] = field(default_factory=dict)
    errors: dict[int, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors


def _resolve_beta(instance: InstanceSpec, beta: float | None) -> float:
    if beta is not None:
        return float(beta)
    known = [f.known_beta for f in instance.functions if f.known_beta is not None]
    return float(max(known)) if known else math.inf


def _max_workers() -> int:
    raw = os.environ.get(_WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_experiment(
    instance: InstanceSpec,
    algorithm: str | Callable = "k2",
    replications: int = 1,
    seeds: Sequence[int] | None = None,
    beta: float | None = None,
    checkpoint_ratio: float = DEFAULT_CHECKPOINT_RATIO,
    step_scale: float = 1.0,
    label: str = "",
) -> ExperimentResult:
    """Run independent replications and aggregate their regret curves.

    ``algorithm`` is "k2", "tree", "sgd", or a callable mapping a seeded
    instance to a run trace.  Per-seed failures are recorded without aborting
    the other seeds.
    """
    if replications < 1:
        raise ValueError("replications must be >= 1")
    if seeds is None:
        seeds = [instance.seed + r for r in range(replications)]
    seeds = [int(s) for s in seeds]
    cps = checkpoint_grid(instance.horizon, checkpoint_ratio)
    beta_val = _resolve_beta(instance, beta)
    algo_name = algorithm if isinstance(algorithm, str) else getattr(
        algorithm, "__name__", "custom"
    )

    traces: dict[int, RegretTrace] = {}
    errors: dict[int, str] = {}

    def one_seed(seed: int) -> RegretTrace:
        seeded = instance.with_seed(seed)
        if algorithm == "k2":
            return RegretTrace.from_run(run_k2(seeded), cps)
        if algorithm == "tree":
            return RegretTrace.from_run(run_tree(seeded), cps)
        if algorithm == "sgd":
            return sgd_baseline(seeded, seed=seed, step_scale=step_scale, checkpoint_ts=cps)
        if callable(algorithm):
            out = algorithm(seeded)
            return out if isinstance(out, RegretTrace) else RegretTrace.from_run(out, cps)
        raise ValueError(f"unknown algorithm: {algorithm!r}")

    if algorithm == "sgd":
        try:
            for seed, tr in zip(seeds, _sgd_batch(instance, seeds, step_scale, None, cps)):
                traces[seed] = tr
        except Exception:
            # isolate the failing seed(s) by running them one at a time
            for seed in seeds:
                try:
                    traces[seed] = one_seed(seed)
                except Exception as exc:  # noqa: BLE001
                    errors[seed] = f"{type(exc).__name__}: {exc}"
    else:
        workers = min(_max_workers(), len(seeds))
        if workers > 1:
            with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
                futures = {pool.submit(one_seed, s): s for s in seeds}
                for fut, seed in futures.items():
                    try:
                        traces[seed] = fut.result()
                    except Exception as exc:  # noqa: BLE001
                        errors[seed] = f"{type(exc).__name__}: {exc}"
        else:
            for seed in seeds:
                try:
                    traces[seed] = one_seed(seed)
                except Exception as exc:  # noqa: BLE001
                    errors[seed] = f"{type(exc).__name__}: {exc}"

    good = [traces[s] for s in seeds if s in traces]
    if good:
        mean_curve = np.mean([tr.avg_regret for tr in good], axis=0)
        finals = np.array([tr.final_avg_regret for tr in good])
        mean_final = float(finals.mean())
        std_final = float(finals.std(ddof=1)) if len(finals) > 1 else 0.0
    else:
        mean_curve = np.zeros(len(cps))
        mean_final = math.nan
        std_final = math.nan

    def safe_slope(ts, vals):
        try:
            return fit_loglog_slope(ts, vals)
        except ValueError:
            return math.nan

    slope = safe_slope(cps, mean_curve) if good else math.nan
    per_seed_slope = {
        s: safe_slope(cps, traces[s].avg_regret) for s in seeds if s in traces
    }
    per_seed_final = {s: traces[s].final_avg_regret for s in seeds if s in traces}
    ref_lower, ref_upper = reference_curves(beta_val, cps, instance.k)
    return ExperimentResult(
        label=label or algo_name,
        algorithm=algo_name,
        k=instance.k,
        beta=beta_val,
        horizon=instance.horizon,
        seeds=seeds,
        checkpoint_ts=cps,
        mean_avg_regret=mean_curve,
        ref_lower=ref_lower,
        ref_upper=ref_upper,
        per_seed_final=per_seed_final,
        per_seed_slope=per_seed_slope,
        mean_final=mean_final,
        std_final=std_final,
        slope=slope,
        traces=traces,
        errors=errors,
    )
