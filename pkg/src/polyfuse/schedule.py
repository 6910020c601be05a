"""Loop-level code generation for fused blocks.

A fused node lowers to a rectangular iteration domain (its output shape), an
expression body whose leaves carry affine access functions, and a prelude of
standalone matmuls feeding temporary buffers (their reduction order is never
varied, so every schedule of a block computes bitwise-identical results).

Schedule variants differ in loop order, hoisting of inner-loop-invariant
subexpressions, and unroll factor. The interpreter executes the scheduled nest
by blocking the outermost loop and vectorizing the rest; non-hoisted invariant
subexpressions are expanded to the full slab before evaluation, so their
redundant recomputation really happens and really costs time, exactly as the
redundancy profile claims.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import interp, kernels, poly
from .graph import GraphError, Node, OpKind, Shape, TensorGraph

log = logging.getLogger(__name__)

UNROLL_FACTORS = (1, 2, 4, 8)
# Elements the innermost loop group processes per emitted iteration at unroll 1.
BASE_STRIP_ELEMS = 16384


class LoweringError(GraphError):
    pass


@dataclass(frozen=True)
class IterationDomain:
    """Rectangular loop bounds [0, extent) per dimension, outer to inner."""

    extents: tuple[int, ...]

    def __post_init__(self):
        if not 1 <= len(self.extents) <= 3:
            raise LoweringError(f"iteration domains must have 1..3 dims, got {self.extents}")
        if any(e < 1 for e in self.extents):
            raise LoweringError(f"iteration domain extents must be >= 1, got {self.extents}")

    @property
    def size(self) -> int:
        n = 1
        for e in self.extents:
            n *= e
        return n


@dataclass(frozen=True)
class AccessFunction:
    """Affine map from loop variables to a flat row-major offset."""

    coeffs: tuple[int, ...]
    offset: int = 0

    def stride_along(self, dim: int) -> int:
        return self.coeffs[dim]


@dataclass(frozen=True)
class RedundancyProfile:
    redundant_flops: int
    stride_cost: int


@dataclass(frozen=True)
class ScheduleVariant:
    order: tuple[int, ...]  # permutation of domain dims, outermost first
    hoisted: tuple[poly.Expr, ...]  # subexpressions computed at their invariant level
    unroll: int
    profile: RedundancyProfile

    def describe(self) -> str:
        names = "ijk"
        order = "".join(names[d] for d in self.order)
        hoists = ",".join(poly.describe(h) for h in self.hoisted) or "-"
        return (
            f"order={order} hoist=[{hoists}] unroll={self.unroll} "
            f"redundant={self.profile.redundant_flops} stride={self.profile.stride_cost}"
        )


@dataclass(frozen=True)
class LoweredBlock:
    domain: IterationDomain
    body: poly.Expr  # matmul-free; leaves are slot indices
    prelude: tuple[tuple[int, poly.Expr], ...]  # (temp slot, matmul expr over slots)
    slot_shapes: dict[int, Shape]
    access: dict[int, AccessFunction]
    out_shape: Shape


def _row_major_strides(shape: Shape) -> tuple[int, ...]:
    strides = [1] * len(shape)
    for d in range(len(shape) - 2, -1, -1):
        strides[d] = strides[d + 1] * shape[d + 1]
    return tuple(strides)


def access_for(leaf_shape: Shape, domain: IterationDomain) -> AccessFunction:
    """Affine access of a leaf aligned positionally to the domain; broadcast dims get 0."""
    extents = domain.extents
    if len(leaf_shape) > len(extents):
        raise LoweringError(f"leaf shape {leaf_shape} outranks domain {extents}")
    padded = (1,) * (len(extents) - len(leaf_shape)) + tuple(leaf_shape)
    strides = _row_major_strides(padded)
    coeffs = []
    for d, (dim, extent) in enumerate(zip(padded, extents)):
        if dim == extent:
            coeffs.append(strides[d] if extent > 1 else 0)
        elif dim == 1:
            coeffs.append(0)
        else:
            raise LoweringError(
                f"leaf shape {leaf_shape} has no affine alignment with domain {extents}"
            )
    return AccessFunction(tuple(coeffs))


def legality_check(
    producer_domain: IterationDomain,
    producer_write: tuple[int | None, ...],
    consumer_domain: IterationDomain,
    consumer_read: tuple[int | None, ...],
    order: tuple[int, ...] | None = None,
) -> bool:
    """Can the producer's loop nest fuse into the consumer's at the same level?

    `producer_write[k]` names the fused (consumer) dim that drives producer
    buffer dim k, or None when the producer does not iterate it (extent-1
    broadcast dims, pinned at index 0). `consumer_read[k]` names the fused dim
    whose value the consumer uses to index producer buffer dim k, or None for
    a constant 0.

    True iff at every fused iteration point, the producer element being read
    was written at a lexicographically earlier point, or at the same point
    (the producer statement runs first). Decided exactly by a per-dimension
    analysis of the selector maps; no enumeration.
    """
    extents = consumer_domain.extents
    if order is None:
        order = tuple(range(len(extents)))
    if len(producer_write) != len(producer_domain.extents):
        raise ValueError("producer_write must have one entry per producer dim")
    if len(consumer_read) != len(producer_domain.extents):
        raise ValueError("consumer_read must have one entry per producer dim")

    # Positional embedding must be exact: driven dims match extents, others are 1.
    for k, (p_extent, w) in enumerate(zip(producer_domain.extents, producer_write)):
        if w is None:
            if p_extent != 1:
                return False
        elif p_extent != extents[w]:
            return False
        r = consumer_read[k]
        if r is not None and extents[r] > p_extent:
            return False  # read out of the producer's range

    # sel[d]: the fused dim whose value gives the write iteration's coordinate d.
    sel: list[int | None] = [None] * len(extents)
    for k, w in enumerate(producer_write):
        if w is not None:
            sel[w] = consumer_read[k]

    def settled(pos: int, zero_dims: frozenset[int]) -> bool:
        if pos == len(order):
            return True  # full tie: producer statement precedes the consumer's
        d = order[pos]
        s = sel[d]
        if s == d:
            return settled(pos + 1, zero_dims)
        w_max = 0 if s is None or s in zero_dims else extents[s] - 1
        if w_max == 0:
            # Strictly earlier wherever q_d > 0; only the q_d = 0 slice can tie.
            return settled(pos + 1, zero_dims | {d})
        # s != d and the write coordinate varies independently of q_d: some
        # point has W_d > q_d, i.e. the element is written in the future.
        return False

    return settled(0, frozenset())


def lower_block(node: Node) -> LoweredBlock:
    """Lower a fused node: extract matmul prelude, derive access maps, check legality."""
    if node.kind is not OpKind.FUSED:
        raise LoweringError(f"node {node.id}: only fused nodes lower to loop nests", node.id)
    assert node.shape is not None
    if len(node.shape) > 2:
        raise LoweringError(f"node {node.id}: {len(node.shape)}-d blocks are unsupported", node.id)
    domain = IterationDomain(node.shape)

    slot_shapes: dict[int, Shape] = {}
    for leaf in poly.leaves(node.attrs["expr"]):
        slot_shapes[leaf.ref] = leaf.shape
    next_slot = len(node.inputs)
    prelude: list[tuple[int, poly.Expr]] = []
    temp_by_key: dict[tuple, int] = {}

    def strip(e: poly.Expr) -> poly.Expr:
        nonlocal next_slot
        if isinstance(e, poly.Leaf):
            return e
        if isinstance(e, poly.MatMul):
            inner = poly.MatMul(strip(e.lhs), strip(e.rhs), e.shape)
            key = poly.canonical_key(inner)
            if key not in temp_by_key:
                temp_by_key[key] = next_slot
                slot_shapes[next_slot] = e.shape
                prelude.append((next_slot, inner))
                next_slot += 1
            return poly.Leaf(temp_by_key[key], e.shape)
        if isinstance(e, poly.AddN):
            return poly.AddN(tuple(strip(c) for c in e.children), e.shape)
        if isinstance(e, poly.MulN):
            return poly.MulN(tuple(strip(c) for c in e.children), e.shape)
        return poly.Unary(e.fn, strip(e.child), e.shape)

    body = strip(node.attrs["expr"])

    access: dict[int, AccessFunction] = {}
    for leaf in poly.leaves(body):
        if leaf.ref in access:
            continue
        access[leaf.ref] = access_for(leaf.shape, domain)
        padded = (1,) * (len(domain.extents) - len(leaf.shape)) + tuple(leaf.shape)
        write = tuple(d if padded[d] > 1 else None for d in range(len(padded)))
        read = tuple(d if padded[d] > 1 else None for d in range(len(padded)))
        if not legality_check(IterationDomain(padded), write, domain, read):
            raise LoweringError(
                f"node {node.id}: leaf slot {leaf.ref} cannot legally fuse", node.id
            )
    return LoweredBlock(
        domain=domain,
        body=body,
        prelude=tuple(prelude),
        slot_shapes=slot_shapes,
        access=access,
        out_shape=node.shape,
    )


def _vars_of(e: poly.Expr, access: Mapping[int, AccessFunction]) -> frozenset[int]:
    return frozenset(
        d for leaf in poly.leaves(e) for d, c in enumerate(access[leaf.ref].coeffs) if c != 0
    )


def _maximal_hoistable(lb: LoweredBlock, inner_dim: int) -> list[poly.Expr]:
    """Largest subexpressions with at least one operator and no innermost-loop leaf."""
    found: list[poly.Expr] = []

    def walk(e: poly.Expr) -> None:
        if isinstance(e, poly.Leaf):
            return
        if inner_dim not in _vars_of(e, lb.access):
            found.append(e)
            return
        for c in _children(e):
            walk(c)

    walk(lb.body)
    return found


def _children(e: poly.Expr) -> tuple[poly.Expr, ...]:
    if isinstance(e, (poly.AddN, poly.MulN)):
        return e.children
    if isinstance(e, poly.MatMul):
        return (e.lhs, e.rhs)
    if isinstance(e, poly.Unary):
        return (e.child,)
    return ()


def _profile(lb: LoweredBlock, order: tuple[int, ...], hoisted: tuple[poly.Expr, ...]) -> RedundancyProfile:
    extents = lb.domain.extents
    effective = frozenset(d for d, e in enumerate(extents) if e > 1)
    hoisted_keys = {poly.canonical_key(h) for h in hoisted}
    redundant = 0

    def walk(e: poly.Expr) -> None:
        nonlocal redundant
        if isinstance(e, poly.Leaf):
            return
        v = _vars_of(e, lb.access)
        if v & effective != effective:
            if poly.canonical_key(e) not in hoisted_keys:
                ideal = 1
                for d in v:
                    ideal *= extents[d]
                redundant += (lb.domain.size - ideal) * poly.op_count(e)
            return
        for c in _children(e):
            walk(c)

    walk(lb.body)
    inner = order[-1]
    stride_cost = sum(abs(a.stride_along(inner)) for a in lb.access.values())
    out_strides = _row_major_strides(lb.out_shape)
    padded_out = (0,) * (len(extents) - len(lb.out_shape))
    stride_cost += abs((padded_out + out_strides)[inner]) if extents[inner] > 1 else 0
    return RedundancyProfile(redundant_flops=redundant, stride_cost=stride_cost)


def gen_variants(lb: LoweredBlock) -> list[ScheduleVariant]:
    """All schedule variants: loop orders x optional hoisting x unroll factors.

    For a 2-D block this always contains the row-outer recompute schedule and,
    when an inner-invariant subexpression exists, the permuted schedule with
    that subexpression hoisted out of the inner loop: the classic trade of
    redundant recomputation against storage-order locality.
    """
    ndim = len(lb.domain.extents)
    orders = [(0,)] if ndim == 1 else [(0, 1), (1, 0)]
    bases: list[tuple[tuple[int, ...], tuple[poly.Expr, ...]]] = []
    for order in orders:
        bases.append((order, ()))
        hoistable = _maximal_hoistable(lb, order[-1])
        if hoistable:
            bases.append((order, tuple(hoistable)))
    variants = []
    for order, hoists in bases:
        prof_cache = _profile(lb, order, hoists)
        for u in UNROLL_FACTORS:
            variants.append(ScheduleVariant(order=order, hoisted=hoists, unroll=u, profile=prof_cache))
    return variants


def estimate_locality(lb: LoweredBlock, variant: ScheduleVariant, lam: float = 0.25) -> float:
    """Stride-weighted traffic plus discounted redundancy; orders candidates only.

    The auto-tuner owns the final choice; this just ranks variants before any
    measurement happens.
    """
    inner = variant.order[-1]
    hoisted_keys = {poly.canonical_key(h) for h in variant.hoisted}
    touched: dict[int, int] = {}

    def walk(e: poly.Expr, scope: int) -> None:
        if isinstance(e, poly.Leaf):
            touched[e.ref] = max(touched.get(e.ref, 0), scope)
            return
        if poly.canonical_key(e) in hoisted_keys:
            ideal = 1
            for d in _vars_of(e, lb.access):
                ideal *= lb.domain.extents[d]
            scope = ideal
        for c in _children(e):
            walk(c, scope)

    walk(lb.body, lb.domain.size)
    cost = 0.0
    for slot, acc in lb.access.items():
        cost += abs(acc.stride_along(inner)) * touched.get(slot, 0)
    out_strides = _row_major_strides(lb.out_shape)
    padded_out = (0,) * (len(lb.domain.extents) - len(lb.out_shape))
    cost += abs((padded_out + out_strides)[inner]) * lb.domain.size
    return cost + lam * variant.profile.redundant_flops


def _leaf_view(arr: np.ndarray, slicer: tuple[slice, ...], ndim: int) -> np.ndarray:
    view = arr.reshape((1,) * (ndim - arr.ndim) + arr.shape)
    idx = tuple(
        slice(0, 1) if view.shape[d] == 1 else slicer[d] for d in range(ndim)
    )
    return view[idx]


def execute_schedule(
    lb: LoweredBlock, variant: ScheduleVariant, bindings: Mapping[int, np.ndarray]
) -> np.ndarray:
    """Interpret the scheduled nest; deterministic, bitwise-stable across variants."""
    env: dict[int, np.ndarray] = dict(bindings)
    for slot in lb.slot_shapes:
        if slot in env and tuple(env[slot].shape) != lb.slot_shapes[slot]:
            raise interp.ExecutionError(
                f"slot {slot}: bound shape {tuple(env[slot].shape)} != {lb.slot_shapes[slot]}"
            )
    for slot, mm in lb.prelude:
        assert isinstance(mm, poly.MatMul)
        env[slot] = kernels.matmul(
            poly.eval_expr(mm.lhs, env), poly.eval_expr(mm.rhs, env)
        )

    extents = lb.domain.extents
    ndim = len(extents)
    block_dim = variant.order[0]
    other = lb.domain.size // extents[block_dim]
    strip = max(1, (variant.unroll * BASE_STRIP_ELEMS) // max(other, 1))

    key_of: dict[int, tuple] = {}

    def index_keys(e: poly.Expr) -> None:
        key_of[id(e)] = poly.canonical_key(e)
        for c in _children(e):
            index_keys(c)

    index_keys(lb.body)
    hoisted_keys = {poly.canonical_key(h) for h in variant.hoisted}

    def evaluate(e: poly.Expr, slicer: tuple[slice, ...], slab_shape: tuple[int, ...],
                 hoist_vals: dict[tuple, np.ndarray], expand: bool) -> np.ndarray:
        k = key_of.get(id(e)) or poly.canonical_key(e)
        if k in hoist_vals:
            return hoist_vals[k]
        if isinstance(e, poly.Leaf):
            view = _leaf_view(env[e.ref], slicer, ndim)
            return np.broadcast_to(view, slab_shape) if expand else view
        if isinstance(e, poly.AddN):
            acc = evaluate(e.children[0], slicer, slab_shape, hoist_vals, expand)
            for c in e.children[1:]:
                acc = acc + evaluate(c, slicer, slab_shape, hoist_vals, expand)
            return acc
        if isinstance(e, poly.MulN):
            acc = evaluate(e.children[0], slicer, slab_shape, hoist_vals, expand)
            for c in e.children[1:]:
                acc = acc * evaluate(c, slicer, slab_shape, hoist_vals, expand)
            return acc
        if isinstance(e, poly.Unary):
            return poly._UNARY_FNS[e.fn](evaluate(e.child, slicer, slab_shape, hoist_vals, expand))
        raise AssertionError("matmuls are stripped into the prelude before execution")

    def hoist_slab(h: poly.Expr, slicer: tuple[slice, ...]) -> np.ndarray:
        # Evaluated on its own (reduced) index space: computed once per point
        # of its variant set, then re-read via broadcasting at every use.
        return evaluate(h, slicer, (), {}, expand=False)

    out = np.empty(extents, dtype=interp.DTYPE)
    full = tuple(slice(0, e) for e in extents)
    global_hoists: dict[tuple, np.ndarray] = {}
    for h in variant.hoisted:
        if block_dim not in _vars_of(h, lb.access):
            global_hoists[poly.canonical_key(h)] = hoist_slab(h, full)

    for start in range(0, extents[block_dim], strip):
        stop = min(start + strip, extents[block_dim])
        slicer = tuple(
            slice(start, stop) if d == block_dim else slice(0, extents[d]) for d in range(ndim)
        )
        slab_shape = tuple(s.stop - s.start for s in slicer)
        hoist_vals = dict(global_hoists)
        for h in variant.hoisted:
            k = poly.canonical_key(h)
            if k not in hoist_vals:
                hoist_vals[k] = hoist_slab(h, slicer)
        res = evaluate(lb.body, slicer, slab_shape, hoist_vals, expand=True)
        out[slicer] = np.broadcast_to(res, slab_shape)
    return out.reshape(lb.out_shape)


def default_variant(lb: LoweredBlock) -> ScheduleVariant:
    """Locality-ranked first guess; the tuner replaces it when it runs."""
    variants = gen_variants(lb)
    best = min(range(len(variants)), key=lambda i: (estimate_locality(lb, variants[i]), i))
    return variants[best]


ExecutionPlan = dict[int, tuple[LoweredBlock, ScheduleVariant] | None]


def compile_plan(
    g: TensorGraph, choices: Mapping[int, ScheduleVariant] | None = None
) -> ExecutionPlan:
    """Lower every fused node once and fix its schedule (None marks per-op fallback)."""
    choices = choices or {}
    plan: ExecutionPlan = {}
    for n in g.nodes:
        if n.kind is not OpKind.FUSED:
            continue
        try:
            lb = lower_block(n)
        except LoweringError as e:
            log.warning("node %d falls back to per-op execution: %s", n.id, e)
            plan[n.id] = None
            continue
        plan[n.id] = (lb, choices.get(n.id) or default_variant(lb))
    return plan


def run_graph(
    g: TensorGraph,
    bindings: Mapping[int, np.ndarray],
    choices: Mapping[int, ScheduleVariant] | None = None,
    plan: ExecutionPlan | None = None,
) -> dict[int, np.ndarray]:
    """Execute a (possibly fused) graph; fused nodes run their chosen schedule."""
    interp.check_bindings(g, bindings)
    if plan is None:
        plan = compile_plan(g, choices)
    env: dict[int, np.ndarray] = {}
    for nid in g.topo_order():
        n = g.node(nid)
        if n.kind is OpKind.INPUT:
            env[nid] = bindings[nid]
        elif n.kind is OpKind.FUSED:
            slots = {i: env[ref] for i, ref in enumerate(n.inputs)}
            scheduled = plan[nid]
            if scheduled is None:
                env[nid] = poly.eval_expr(n.attrs["expr"], slots)
            else:
                env[nid] = execute_schedule(scheduled[0], scheduled[1], slots)
        else:
            env[nid] = interp.eval_node(n, [env[i] for i in n.inputs])
    return {oid: env[oid] for oid in g.outputs}


def graph_executable(
    g: TensorGraph, choices: Mapping[int, ScheduleVariant] | None = None
) -> Callable[[Mapping[int, np.ndarray]], dict[int, np.ndarray]]:
    plan = compile_plan(g, choices)

    def run(bindings: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
        return run_graph(g, bindings, plan=plan)

    return run
