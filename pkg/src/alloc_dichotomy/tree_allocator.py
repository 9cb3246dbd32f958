"""Tree allocator for K >= 3 resources: recursively imbricated binary searches.

Resources sit at the leaves of a balanced binary tree (padded with constant-zero
functions up to a power of two).  Each internal node owns the profile
H(v) = max of its subtree's total reward under sub-budget v, and runs a binary
search over how to split its budget between its children.  Gradients of the
profiles are not observable directly; by the envelope identity the gradient of
H at v lies between the children's profile gradients at the current split, so
the midpoint of the two child estimates approximates it with error at most half
their spread.  Child searches refine only while their own gradient spread
exceeds the parent's, which is what keeps total sampling balanced across
levels.

One global time step plays the full allocation implied by every current query
point, observes one noisy gradient per real leaf, and advances every active
search simultaneously.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .k2_search import NodeQueryRecord, RunTrace, Segment, run_k2
from .rewards import InstanceSpec, RewardFunction, RewardModelError, make_zero_pad

__all__ = [
    "GradientEstimate",
    "TreeNode",
    "FunctionTree",
    "NodeSearchState",
    "build_tree",
    "child_stop_threshold",
    "run_tree",
    "estimate_node_gradient",
]

_MAX_RESOURCES = 65536
_CHUNK_START = 256
_CHUNK_CAP = 1 << 15


@dataclass(frozen=True)
class GradientEstimate:
    """Profile-gradient estimate with a half-width that covers the truth
    whenever every underlying sign decision was correct."""

    value: float
    half_width: float


@dataclass
class TreeNode:
    """Node (level, index) of the balanced resource tree; leaves carry functions."""

    level: int
    index: int  # 1-based within the level
    slot_lo: int
    slot_hi: int  # leaf slots [slot_lo, slot_hi)
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    func: RewardFunction | None = None
    leaf_slot: int | None = None
    is_pad: bool = False

    @property
    def is_leaf(self) -> bool:
        return self.leaf_slot is not None

    @property
    def node_id(self) -> tuple[int, int]:
        return (self.level, self.index)


@dataclass
class FunctionTree:
    """Balanced binary tree over K resources, zero-padded to a power of two."""

    root: TreeNode
    functions: tuple[RewardFunction, ...]
    k: int
    leaf_count: int
    depth: int
    nodes: dict[tuple[int, int], TreeNode]
    leaves: list[TreeNode]

    def node(self, level: int, index: int) -> TreeNode:
        return self.nodes[(level, index)]

    def depth_from_leaves(self, node: TreeNode) -> int:
        return self.depth - 1 - node.level


def build_tree(functions) -> FunctionTree:
    """Build the balanced tree: split leaf slots at the midpoint, pad with zeros."""
    functions = tuple(functions)
    k = len(functions)
    if k < 2:
        raise RewardModelError("tree needs at least two resources")
    if k > _MAX_RESOURCES:
        raise RewardModelError(f"tree supports at most {_MAX_RESOURCES} resources")
    depth = max(1, math.ceil(math.log2(k)))
    leaf_count = 1 << depth
    pad = make_zero_pad()
    nodes: dict[tuple[int, int], TreeNode] = {}
    leaves: list[TreeNode] = [None] * leaf_count

    def construct(level: int, index: int, lo: int, hi: int) -> TreeNode:
        if hi - lo == 1:
            node = TreeNode(
                level=level,
                index=index,
                slot_lo=lo,
                slot_hi=hi,
                func=functions[lo] if lo < k else pad,
                leaf_slot=lo,
                is_pad=lo >= k,
            )
            leaves[lo] = node
        else:
            mid = (lo + hi) // 2
            node = TreeNode(level=level, index=index, slot_lo=lo, slot_hi=hi)
            node.left = construct(level + 1, 2 * index - 1, lo, mid)
            node.right = construct(level + 1, 2 * index, mid, hi)
        nodes[(level, index)] = node
        return node

    root = construct(0, 1, 0, leaf_count)
    return FunctionTree(
        root=root,
        functions=functions,
        k=k,
        leaf_count=leaf_count,
        depth=depth,
        nodes=nodes,
        leaves=leaves,
    )


@dataclass
class NodeSearchState:
    """Binary-search state of one internal node at a fixed budget argument."""

    node_id: tuple[int, int]
    budget: float
    lo: float
    hi: float
    query: float
    n_queries: int = 1
    floored: bool = False
    boundary_left: bool = False
    boundary_right: bool = False
    charge: int = 0  # time steps charged to the current query


@dataclass
class _LeafState:
    budget: float
    total: float = 0.0
    count: int = 0


def child_stop_threshold(parent_gradient_magnitude: float) -> float:
    """Refinement threshold for a child search: the parent's current gradient
    magnitude.  A child keeps halving only while its own gradient-spread upper
    bound is at least this value; at (or below) it the child's envelope error
    is already small enough for the parent to decide."""
    return abs(float(parent_gradient_magnitude))


class _TreeRun:
    """Mutable engine advancing all searches in lockstep, one time step each."""

    def __init__(
        self,
        instance: InstanceSpec,
        tree: FunctionTree,
        subtree: TreeNode,
        root_budget: float,
        rng: np.random.Generator,
        sampler: Callable[[np.ndarray, int], np.ndarray] | None,
        noise_free: bool,
        collect_trace: bool = True,
        check_invariants: bool = False,
    ):
        self.instance = instance
        self.tree = tree
        self.subtree = subtree
        self.rng = rng
        self.noise_free = noise_free
        self.collect_trace = collect_trace
        self.check_invariants = check_invariants
        self.invariant_failures: list[str] = []
        horizon = instance.horizon
        lipschitz = max(instance.max_lipschitz, 1e-9)
        self.floor_width = 1.0 / (lipschitz * horizon)
        self.query_cap = max(1, math.ceil(math.log2(horizon)))
        self.smooth_bound = max(
            (f.smooth_Lprime if f.smooth_Lprime is not None else 10.0 * f.lipschitz_L)
            for f in instance.functions
        )
        self.log_term = math.log(2.0 * horizon / instance.confidence)
        if sampler is None:
            sampler = self._default_sampler()
        self.sampler = sampler

        # leaves of the driven subtree, in slot order
        self.active_leaves = [
            leaf for leaf in tree.leaves if subtree.slot_lo <= leaf.leaf_slot < subtree.slot_hi
        ]
        self.internal: list[TreeNode] = []  # breadth-first, root of subtree first

        def collect(node: TreeNode):
            if node.is_leaf:
                return
            self.internal.append(node)
            collect(node.left)
            collect(node.right)

        collect(subtree)
        self.internal.sort(key=lambda n: (n.level, n.index))
        self.parent = {}
        for node in self.internal:
            for child in (node.left, node.right):
                self.parent[child.node_id] = node

        self.search: dict[tuple[int, int], NodeSearchState] = {}
        self.leaf_state: dict[int, _LeafState] = {}
        self.t = 0
        self.segments: list[Segment] = []
        self.node_records: list[NodeQueryRecord] = []
        self._opt_value: float | None = None
        self._reset_subtree(subtree, root_budget)

    # -- construction helpers ------------------------------------------------

    def _default_sampler(self):
        instance = self.instance
        noise = instance.noise
        rng = self.rng

        def sampler(coords: np.ndarray, size: int) -> np.ndarray:
            grads = np.array(
                [float(f.grad(x)) for f, x in zip(instance.functions, coords)]
            )
            if noise.is_zero:
                return np.broadcast_to(grads, (size, coords.size)).copy()
            return grads + noise.draw(rng, (size, coords.size))

        return sampler

    def _reset_subtree(self, node: TreeNode, budget: float):
        budget = min(max(budget, 0.0), 1.0)
        if node.is_leaf:
            self.leaf_state[node.leaf_slot] = _LeafState(budget=budget)
            return
        state = NodeSearchState(
            node_id=node.node_id,
            budget=budget,
            lo=0.0,
            hi=budget,
            query=budget / 2.0,
        )
        state.floored = budget < self.floor_width
        self.search[node.node_id] = state
        self._reset_subtree(node.left, state.query)
        self._reset_subtree(node.right, budget - state.query)

    def _retire_query(self, node: TreeNode, sign: int | None):
        state = self.search[node.node_id]
        if state.charge > 0 and self.collect_trace:
            self.node_records.append(
                NodeQueryRecord(
                    node=node.node_id,
                    budget=state.budget,
                    query=state.query,
                    samples=state.charge,
                    sign=sign,
                    depth_from_leaves=self.tree.depth_from_leaves(node),
                )
            )
        state.charge = 0

    def _retire_subtree(self, node: TreeNode):
        if node.is_leaf:
            return
        self._retire_query(node, None)
        self._retire_subtree(node.left)
        self._retire_subtree(node.right)

    # -- per-period quantities -------------------------------------------------

    def full_coords(self) -> np.ndarray:
        """Budgets of all leaf slots (real resources first, then pads)."""
        out = np.zeros(self.tree.leaf_count)
        for slot, state in self.leaf_state.items():
            out[slot] = state.budget
        return out

    def real_coords(self) -> np.ndarray:
        return self.full_coords()[: self.tree.k]

    def _optimum(self) -> float:
        if self._opt_value is None:
            from .harness import optimal_allocation

            _, self._opt_value = optimal_allocation(self.instance.functions)
        return self._opt_value

    def _gap(self, real_coords: np.ndarray) -> float:
        value = sum(
            float(f.eval(x)) for f, x in zip(self.instance.functions, real_coords)
        )
        gap = self._optimum() - value
        if gap < -1e-9:
            raise AssertionError("negative suboptimality gap; optimum solver inconsistent")
        return max(0.0, gap)

    # -- estimation ------------------------------------------------------------

    def _leaf_arrays(self, leaf: TreeNode, draws: np.ndarray | None, m: int):
        if leaf.is_pad:
            zero = np.zeros(m)
            return zero, zero
        state = self.leaf_state[leaf.leaf_slot]
        if self.noise_free:
            val = np.full(m, float(draws[0, leaf.leaf_slot]) if draws is not None else 0.0)
            return val, np.zeros(m)
        col = draws[:, leaf.leaf_slot]
        counts = state.count + np.arange(1, m + 1)
        means = (state.total + np.cumsum(col)) / counts
        widths = np.sqrt(2.0 * self.log_term / counts)
        return means, widths

    def _estimates(self, node: TreeNode, draws, m, cache):
        """Bottom-up (value, half_width) arrays for the profile gradient of
        ``node`` at its current budget; caches each internal node's split
        gradient (value, half_width) in ``cache``."""
        if node.is_leaf:
            return self._leaf_arrays(node, draws, m)
        lv, la = self._estimates(node.left, draws, m, cache)
        rv, ra = self._estimates(node.right, draws, m, cache)
        gv = lv - rv
        ga = la + ra
        cache[node.node_id] = (gv, ga)
        state = self.search[node.node_id]
        if state.boundary_left or state.boundary_right:
            slack = self.smooth_bound * (state.hi - state.lo)
            if state.boundary_left:
                return rv, ra + slack
            return lv, la + slack
        return 0.5 * (lv + rv), 0.5 * np.abs(gv) + ga

    def _estimate_from_state(self, node: TreeNode) -> GradientEstimate:
        """Scalar profile-gradient estimate from the committed sample state."""
        if node.is_leaf:
            if node.is_pad:
                return GradientEstimate(0.0, 0.0)
            state = self.leaf_state[node.leaf_slot]
            if state.count == 0:
                return GradientEstimate(0.0, math.inf)
            width = 0.0 if self.noise_free else math.sqrt(2.0 * self.log_term / state.count)
            return GradientEstimate(state.total / state.count, width)
        left = self._estimate_from_state(node.left)
        right = self._estimate_from_state(node.right)
        state = self.search[node.node_id]
        if state.boundary_left or state.boundary_right:
            slack = self.smooth_bound * (state.hi - state.lo)
            if state.boundary_left:
                return GradientEstimate(right.value, right.half_width + slack)
            return GradientEstimate(left.value, left.half_width + slack)
        spread = abs(left.value - right.value)
        return GradientEstimate(
            0.5 * (left.value + right.value),
            0.5 * spread + left.half_width + right.half_width,
        )

    # -- decisions ---------------------------------------------------------------

    def _apply_decision(self, node: TreeNode, sign: int):
        state = self.search[node.node_id]
        self._retire_query(node, sign)
        self._retire_subtree(node.left)
        self._retire_subtree(node.right)
        if sign > 0:
            state.lo = state.query
        else:
            state.hi = state.query
        state.query = 0.5 * (state.lo + state.hi)
        state.n_queries += 1
        if state.hi - state.lo < self.floor_width or state.n_queries > self.query_cap:
            state.floored = True
        # a floored search pinned at an edge of [0, budget] has identified a
        # boundary optimum: the surviving child's gradient is the profile
        # gradient there (one-sided envelope case)
        state.boundary_left = state.floored and state.lo == 0.0 and state.hi < state.budget
        state.boundary_right = state.floored and state.hi == state.budget and state.lo > 0.0
        self._reset_subtree(node.left, state.query)
        self._reset_subtree(node.right, state.budget - state.query)

    def _process_chunk(self, m: int) -> tuple[int, bool]:
        """Advance up to m steps; returns (steps consumed, whether a search moved)."""
        coords = self.full_coords()
        real = coords[: self.tree.k]
        if self.noise_free:
            draws = np.asarray(self.sampler(real, 1), dtype=float)
            arrays_m = 1
        else:
            draws = np.asarray(self.sampler(real, m), dtype=float)
            arrays_m = m
        cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        self._estimates(self.subtree, draws, arrays_m, cache)

        best = None  # (first index, level, index, node)
        for node in self.internal:
            state = self.search[node.node_id]
            if state.floored:
                continue
            gv, ga = cache[node.node_id]
            decided = np.abs(gv) > ga
            parent = self.parent.get(node.node_id)
            if parent is not None and not self.search[parent.node_id].floored:
                # vectorized child_stop_threshold: freeze while the spread's
                # upper bound sits below the parent's gradient magnitude; the
                # gate serves the parent's sign test, so a floored parent
                # (no test left to decide) lifts it
                pgv, _ = cache[parent.node_id]
                decided = decided & (np.abs(gv) + ga >= np.abs(pgv))
            if not decided.any():
                continue
            idx = int(np.argmax(decided))
            key = (idx, node.level, node.index)
            if best is None or key < best[0]:
                best = (key, node)

        if best is None:
            consumed = m
            moved_node = None
        else:
            (idx, _, _), node = best[0], best[1]
            consumed = 1 if self.noise_free else idx + 1
            moved_node = node
            gv, _ = cache[node.node_id]
            sign = 1 if float(gv[min(idx, arrays_m - 1)]) > 0.0 else -1

        if self.check_invariants and not self.noise_free:
            self._check_ordering(cache, min(consumed, arrays_m) - 1)

        # commit consumed samples to the leaf accumulators
        if not self.noise_free:
            for leaf in self.active_leaves:
                if leaf.is_pad:
                    continue
                state = self.leaf_state[leaf.leaf_slot]
                state.total += float(draws[: consumed, leaf.leaf_slot].sum())
                state.count += consumed
        else:
            for leaf in self.active_leaves:
                if leaf.is_pad:
                    continue
                state = self.leaf_state[leaf.leaf_slot]
                state.total += float(draws[0, leaf.leaf_slot]) * consumed
                state.count += consumed
        for node in self.internal:
            self.search[node.node_id].charge += consumed
        self.t += consumed
        if self.collect_trace:
            gap = self._gap(real)
            self.segments.append(Segment(consumed, tuple(coords), gap))

        if moved_node is not None:
            self._apply_decision(moved_node, sign)
        return consumed, moved_node is not None

    def _check_ordering(self, cache, idx):
        """Record violations of the child/parent gradient ordering at step idx."""
        for node in self.internal:
            parent = self.parent.get(node.node_id)
            if parent is None or self.search[node.node_id].floored:
                continue
            if self.search[parent.node_id].floored:
                continue
            gv, ga = cache[node.node_id]
            pgv, pga = cache[parent.node_id]
            refine = abs(float(gv[idx])) + float(ga[idx]) >= abs(float(pgv[idx]))
            if not refine:
                continue
            if abs(float(gv[idx])) < abs(float(pgv[idx])) - float(ga[idx]) - float(pga[idx]):
                self.invariant_failures.append(
                    f"ordering violated at t={self.t} node={node.node_id}"
                )

    def run(self, max_steps: int, stop_when_floored: bool = False):
        chunk = _CHUNK_START
        while self.t < max_steps:
            if (
                stop_when_floored
                and all(self.search[n.node_id].floored for n in self.internal)
                and all(
                    leaf.is_pad or self.leaf_state[leaf.leaf_slot].count > 0
                    for leaf in self.active_leaves
                )
            ):
                break
            consumed, moved = self._process_chunk(min(chunk, max_steps - self.t))
            chunk = _CHUNK_START if moved else min(chunk * 4, _CHUNK_CAP)

    def finalize_records(self):
        self._retire_subtree(self.subtree)


def run_tree(
    instance: InstanceSpec,
    sampler: Callable[[np.ndarray, int], np.ndarray] | None = None,
    rng: np.random.Generator | None = None,
    noise_free: bool | None = None,
    check_invariants: bool = False,
) -> RunTrace:
    """Run the tree allocator until the horizon is spent.

    Each time step plays the allocation given by every node's current query
    point (padded slots included), consumes one noisy gradient vector, and
    advances all active searches.  Two resources delegate to the plain binary
    search.
    """
    if instance.k == 2 and sampler is None:
        return run_k2(instance, rng=rng, noise_free=noise_free)
    if rng is None:
        rng = instance.rng()
    if noise_free is None:
        noise_free = instance.noise.is_zero
    tree = build_tree(instance.functions)
    engine = _TreeRun(
        instance,
        tree,
        tree.root,
        1.0,
        rng,
        sampler,
        noise_free,
        collect_trace=True,
        check_invariants=check_invariants,
    )
    engine.run(instance.horizon)
    engine.finalize_records()
    return RunTrace(
        horizon=instance.horizon,
        segments=engine.segments,
        node_records=engine.node_records,
        final_allocation=tuple(engine.full_coords()),
        invariant_failures=list(engine.invariant_failures),
    )


def estimate_node_gradient(
    instance: InstanceSpec,
    node_id: tuple[int, int],
    budget: float,
    rng: np.random.Generator | None = None,
    sampler: Callable[[np.ndarray, int], np.ndarray] | None = None,
    max_steps: int | None = None,
    noise_free: bool | None = None,
) -> GradientEstimate:
    """Estimate the profile gradient of node ``node_id`` at the given budget.

    Runs the node's binary search (and, recursively, its descendants') until
    every search hits the precision floor or ``max_steps`` samples are spent,
    then reads off the midpoint estimate; if the search collapsed onto an edge
    of [0, budget] the surviving child's gradient is used instead.
    """
    if not 0.0 <= budget <= 1.0:
        raise RewardModelError("budget must lie in [0, 1]")
    if rng is None:
        rng = instance.rng()
    if noise_free is None:
        noise_free = instance.noise.is_zero
    tree = build_tree(instance.functions)
    node = tree.node(*node_id)
    if max_steps is None:
        max_steps = instance.horizon
    engine = _TreeRun(
        instance,
        tree,
        node,
        budget,
        rng,
        sampler,
        noise_free,
        collect_trace=False,
    )
    if node.is_leaf:
        engine_steps = min(max_steps, instance.horizon)
        chunk = np.asarray(engine.sampler(engine.real_coords(), max(1, engine_steps)))
        state = engine.leaf_state[node.leaf_slot]
        state.total = float(chunk[:, node.leaf_slot].sum())
        state.count = chunk.shape[0]
        if noise_free:
            state.total = float(chunk[0, node.leaf_slot])
            state.count = 1
        return engine._estimate_from_state(node)
    engine.run(max_steps, stop_when_floored=True)
    return engine._estimate_from_state(node)
