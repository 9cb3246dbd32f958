"""Two-resource allocator: a binary search on [0, 1] driven by sequential sign tests.

The split profile g(x) = f1(x) + f2(1-x) is concave, so the sign of its
gradient at the midpoint of the current interval tells which half contains the
peak.  Each midpoint is sampled until the sign test decides, the interval is
halved, and the process repeats until the horizon runs out.  With zero
observation noise a single exact sample settles each sign.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .rewards import InstanceSpec, RewardModelError
from .sign_test import SequentialSignTest, SignStatus

__all__ = [
    "Segment",
    "DepthRecord",
    "NodeQueryRecord",
    "SearchState",
    "RunTrace",
    "profile_gradient_source",
    "run_k2",
    "regret_of_trace",
]


@dataclass(frozen=True)
class Segment:
    """A maximal stretch of time steps played at one fixed allocation."""

    count: int
    allocation: tuple[float, ...]
    gap: float  # exact instantaneous suboptimality of this allocation


@dataclass(frozen=True)
class DepthRecord:
    """One completed (or truncated) binary-search depth."""

    depth: int
    point: float
    samples: int
    sign: int | None  # +1 right, -1 left, None undecided at horizon/cap


@dataclass(frozen=True)
class NodeQueryRecord:
    """Sampling charged to one node query of the tree allocator."""

    node: tuple[int, int]
    budget: float
    query: float
    samples: int
    sign: int | None
    depth_from_leaves: int


@dataclass
class SearchState:
    """Current interval of a binary search; the query is always the midpoint."""

    lo: float = 0.0
    hi: float = 1.0
    depth: int = 1

    @property
    def query(self) -> float:
        return 0.5 * (self.lo + self.hi)

    @property
    def width(self) -> float:
        return self.hi - self.lo


@dataclass
class RunTrace:
    """Complete record of one allocation run.

    Time steps are stored as segments (runs of identical allocations) so that
    horizon-10^7 traces stay small; ``iter_time_steps`` expands them on demand.
    ``depth_records`` is filled by the two-resource search, ``node_records`` by
    the tree allocator.
    """

    horizon: int
    segments: list[Segment] = field(default_factory=list)
    depth_records: list[DepthRecord] = field(default_factory=list)
    node_records: list[NodeQueryRecord] = field(default_factory=list)
    final_allocation: tuple[float, ...] = ()
    invariant_failures: list[str] = field(default_factory=list)

    @property
    def total_samples(self) -> int:
        return sum(seg.count for seg in self.segments)

    @property
    def num_time_steps(self) -> int:
        return self.total_samples

    def iter_time_steps(self) -> Iterator[tuple[int, tuple[float, ...], float]]:
        """Yield (t, allocation, gap) for t = 1..total_samples."""
        t = 0
        for seg in self.segments:
            for _ in range(seg.count):
                t += 1
                yield t, seg.allocation, seg.gap

    def cumulative_regret(self) -> float:
        return sum(seg.count * seg.gap for seg in self.segments)


def profile_gradient_source(
    instance: InstanceSpec, rng: np.random.Generator
) -> Callable[[float, int], np.ndarray]:
    """Noisy oracle for the profile gradient g'(x) = f1'(x) - f2'(1-x).

    Returns a callable (x, size) -> size noisy draws; one noise value is drawn
    per observation.
    """
    f1, f2 = instance.functions
    noise = instance.noise

    def source(x: float, size: int = 1) -> np.ndarray:
        g = float(f1.grad(x)) - float(f2.grad(1.0 - x))
        return g + noise.draw(rng, size)

    return source


def run_k2(
    instance: InstanceSpec,
    gradient_source: Callable[[float, int], np.ndarray] | None = None,
    rng: np.random.Generator | None = None,
    noise_free: bool | None = None,
) -> RunTrace:
    """Run the binary-search allocator for K = 2 until the horizon is spent.

    ``gradient_source`` must return noisy draws of the profile gradient at the
    queried point; by default it is built from the instance's noise model.
    ``noise_free`` short-circuits the sign tests with single exact samples and
    defaults to True exactly when the instance noise is zero.
    """
    if instance.k != 2:
        raise RewardModelError("run_k2 requires exactly two resources")
    f1, f2 = instance.functions
    horizon = instance.horizon
    delta = instance.confidence
    if rng is None:
        rng = instance.rng()
    if noise_free is None:
        noise_free = instance.noise.is_zero
    if gradient_source is None:
        gradient_source = profile_gradient_source(instance, rng)

    from .harness import optimal_allocation

    _, opt_value = optimal_allocation(instance.functions)

    def gap_at(x: float) -> float:
        return max(0.0, opt_value - (float(f1.eval(x)) + float(f2.eval(1.0 - x))))

    lipschitz = max(instance.max_lipschitz, 1e-9)
    depth_cap = max(1, math.ceil(math.log2(max(2.0, lipschitz * horizon))))

    state = SearchState()
    trace = RunTrace(horizon=horizon)
    t = 0
    while t < horizon:
        x = state.query
        gap = gap_at(x)
        if state.depth > depth_cap:
            # finer interval cannot improve the regret; replay the last point
            n = horizon - t
            trace.segments.append(Segment(n, (x, 1.0 - x), gap))
            trace.depth_records.append(DepthRecord(state.depth, x, n, None))
            t = horizon
            break
        if noise_free:
            sample = float(np.asarray(gradient_source(x, 1)).reshape(-1)[0])
            if sample == 0.0:
                # exactly at the peak: no direction to learn, stay here
                n = horizon - t
                trace.segments.append(Segment(n, (x, 1.0 - x), gap))
                trace.depth_records.append(DepthRecord(state.depth, x, n, None))
                t = horizon
                break
            sign = 1 if sample > 0.0 else -1
            used = 1
            t += 1
        else:
            test = SequentialSignTest(horizon=horizon, confidence=delta)
            used = 0
            chunk = 256
            status = SignStatus.UNDECIDED
            while t < horizon and status is SignStatus.UNDECIDED:
                m = min(chunk, horizon - t)
                status, consumed = test.update_many(gradient_source(x, m))
                t += consumed
                used += consumed
                chunk = min(chunk * 4, 1 << 16)
            if status is SignStatus.UNDECIDED:
                sign = None
            else:
                sign = 1 if status is SignStatus.POSITIVE else -1
        trace.segments.append(Segment(used, (x, 1.0 - x), gap))
        trace.depth_records.append(DepthRecord(state.depth, x, used, sign))
        if sign is None:
            break
        if sign > 0:
            state.lo = x
        else:
            state.hi = x
        state.depth += 1
    trace.final_allocation = (state.query, 1.0 - state.query)
    return trace


def regret_of_trace(trace: RunTrace, instance: InstanceSpec) -> float:
    """Average regret (1/T) sum of exact per-step gaps, recomputed from closed forms."""
    from .harness import optimal_allocation

    _, opt_value = optimal_allocation(instance.functions)
    total = 0.0
    for seg in trace.segments:
        value = sum(
            float(f.eval(x)) for f, x in zip(instance.functions, seg.allocation)
        )
        total += seg.count * max(0.0, opt_value - value)
    return total / trace.horizon
