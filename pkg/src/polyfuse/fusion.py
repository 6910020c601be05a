"""Layer fusion: algebraic factoring, vertical elementwise merging, matmul epilogues.

A fusion candidate is a connected set of nodes replaceable by one fused node
holding an expression body. Candidates are enumerated per region, selected
greedily by computation savings, and applied by rewriting the graph.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import poly
from .graph import (
    GraphError,
    Node,
    OpKind,
    POINTWISE_KINDS,
    POLY_KINDS,
    TensorGraph,
    count_metrics,
    infer_shapes,
    validate_graph,
)


@dataclass(frozen=True)
class FusionCandidate:
    kind: str  # "algebraic" | "vertical" | "epilogue"
    root: int
    covered: frozenset[int]
    body: poly.Expr  # leaves are graph node ids
    delta_layers: int
    delta_computations: int


@dataclass(frozen=True)
class FusionPlan:
    accepted: tuple[FusionCandidate, ...]

    @property
    def total_delta_computations(self) -> int:
        return sum(c.delta_computations for c in self.accepted)

    @property
    def total_delta_layers(self) -> int:
        return sum(c.delta_layers for c in self.accepted)


def grow_region(g: TensorGraph, root: int, kinds: set[OpKind]) -> set[int]:
    """Maximal interior node set reachable from root through the given kinds.

    A non-root node stays interior only while every consumer of its value lies
    inside the region and it is not a graph output; demotions cascade until a
    fixpoint, so interior results never escape the fused block.
    """
    consumers = g.consumers()
    out_set = set(g.outputs)
    demoted: set[int] = set()
    while True:
        interior: set[int] = set()
        stack = [root]
        while stack:
            nid = stack.pop()
            if nid in interior:
                continue
            interior.add(nid)
            for ref in g.node(nid).inputs:
                if ref in demoted or ref in interior:
                    continue
                if g.node(ref).kind in kinds:
                    stack.append(ref)
        changed = False
        for nid in sorted(interior):
            if nid == root:
                continue
            if nid in out_set or any(c not in interior for c in consumers[nid]):
                demoted.add(nid)
                changed = True
        if not changed:
            return interior


def region_to_expr(g: TensorGraph, root: int, interior: set[int]) -> poly.Expr:
    """Expand the region into an expression tree; everything outside is a leaf.

    Shared interior nodes expand once per occurrence, which is exactly how the
    symbolic computation count sees them.
    """

    def build(nid: int) -> poly.Expr:
        n = g.node(nid)
        assert n.shape is not None, "shapes must be inferred before extraction"
        if nid not in interior:
            return poly.Leaf(nid, n.shape)
        if n.kind is OpKind.ADD:
            return poly.add_n([build(n.inputs[0]), build(n.inputs[1])])
        if n.kind is OpKind.MUL:
            return poly.mul_n([build(n.inputs[0]), build(n.inputs[1])])
        if n.kind is OpKind.MATMUL:
            return poly.mat_mul(build(n.inputs[0]), build(n.inputs[1]))
        if n.kind is OpKind.GELU:
            return poly.unary("gelu", build(n.inputs[0]))
        raise GraphError(f"node {nid}: kind {n.kind.value} cannot join a fused region", nid)

    return build(root)


def extract_poly(g: TensorGraph, root: int) -> poly.Expr:
    """Maximal polynomial expression rooted at an add/mul/matmul node."""
    n = g.node(root)
    if n.kind not in POLY_KINDS:
        raise GraphError(f"node {root}: kind {n.kind.value} is not a polynomial root", root)
    return region_to_expr(g, root, grow_region(g, root, POLY_KINDS))


def _regions(g: TensorGraph, kinds: set[OpKind]) -> list[tuple[int, set[int]]]:
    """All maximal regions of the given kinds, one per root, reverse-topological."""
    assigned: set[int] = set()
    regions: list[tuple[int, set[int]]] = []
    for nid in reversed(g.topo_order()):
        n = g.node(nid)
        if n.kind not in kinds or nid in assigned:
            continue
        interior = grow_region(g, nid, kinds)
        regions.append((nid, interior))
        assigned |= interior
    return regions


def _candidate(g: TensorGraph, kind: str, root: int, interior: set[int], body: poly.Expr,
               before_ops: int) -> FusionCandidate:
    return FusionCandidate(
        kind=kind,
        root=root,
        covered=frozenset(interior),
        body=body,
        delta_layers=len(interior) - 1,
        delta_computations=before_ops - poly.op_count(body),
    )


def enumerate_candidates(g: TensorGraph) -> list[FusionCandidate]:
    """All fusion candidates: algebraic rewrites, pointwise regions, matmul epilogues."""
    cands: list[FusionCandidate] = []

    # Algebraic: polynomial regions where distributive factoring saves operators.
    for root, interior in _regions(g, POLY_KINDS):
        if len(interior) < 2:
            continue
        tree = poly.canonicalize(region_to_expr(g, root, interior))
        before = poly.op_count(tree)
        factored = poly.distributive_factor(tree)
        if poly.op_count(factored) < before:
            cands.append(_candidate(g, "algebraic", root, interior, factored, before))

    # Vertical: connected pointwise regions (aligned or row-broadcast domains).
    # Factoring still applies inside the body so nested savings are kept.
    pointwise_regions = _regions(g, POINTWISE_KINDS)
    region_of: dict[int, tuple[int, set[int]]] = {}
    for root, interior in pointwise_regions:
        for nid in interior:
            region_of[nid] = (root, interior)
        if len(interior) < 2:
            continue
        tree = poly.canonicalize(region_to_expr(g, root, interior))
        body = poly.distributive_factor(tree)
        cands.append(_candidate(g, "vertical", root, interior, body, poly.op_count(tree)))

    # Epilogue: a matmul with its pointwise consumer region folded into the write-out.
    consumers = g.consumers()
    out_set = set(g.outputs)
    for n in g.nodes:
        if n.kind is not OpKind.MATMUL or n.id in out_set:
            continue
        cons = consumers[n.id]
        if len(cons) != 1 or cons[0] not in region_of:
            continue
        root, interior = region_of[cons[0]]
        covered = interior | {n.id}
        tree = poly.canonicalize(region_to_expr(g, root, covered))
        body = poly.distributive_factor(tree)
        cands.append(_candidate(g, "epilogue", root, covered, body, poly.op_count(tree)))

    cands.sort(key=lambda c: (c.root, c.kind))
    return cands


def select_plan(cands: list[FusionCandidate]) -> FusionPlan:
    """Greedy by computation savings, then layer savings, then smallest covered id."""
    ranked = sorted(
        cands,
        key=lambda c: (-c.delta_computations, -c.delta_layers, min(c.covered)),
    )
    taken: set[int] = set()
    accepted: list[FusionCandidate] = []
    for c in ranked:
        if c.delta_layers < 1:
            continue
        if c.covered & taken:
            continue
        accepted.append(c)
        taken |= c.covered
    return FusionPlan(tuple(accepted))


def _make_fused_node(g: TensorGraph, cand: FusionCandidate) -> Node:
    ordered_refs: list[int] = []
    mult: dict[int, int] = {}
    for leaf in poly.leaves(cand.body):
        if leaf.ref not in mult:
            ordered_refs.append(leaf.ref)
            mult[leaf.ref] = 0
        mult[leaf.ref] += 1
    slot_of = {ref: i for i, ref in enumerate(ordered_refs)}
    body = poly.remap_leaves(cand.body, slot_of)
    root = g.node(cand.root)
    assert root.shape is not None
    return Node(
        id=cand.root,  # renumbered below
        kind=OpKind.FUSED,
        inputs=tuple(ordered_refs),
        attrs={
            "expr": body,
            "fusion_kind": cand.kind,
            "op_count": poly.op_count(body),
            "leaf_multiplicity": tuple(mult[r] for r in ordered_refs),
            "has_matmul": poly.contains_matmul(body),
            "out_shape": root.shape,
        },
        shape=root.shape,
    )


def rewrite_graph(g: TensorGraph, plan: FusionPlan) -> TensorGraph:
    """Replace each accepted candidate with one fused node; re-validate and re-infer."""
    valid = set(range(g.n_nodes))
    taken: set[int] = set()
    for c in plan.accepted:
        if not c.covered <= valid or c.root not in c.covered:
            raise GraphError(f"fusion plan references stale node ids {sorted(c.covered - valid)}")
        if c.covered & taken:
            raise GraphError("fusion plan candidates overlap")
        taken |= c.covered
    root_to_cand = {c.root: c for c in plan.accepted}
    dropped = {nid for c in plan.accepted for nid in c.covered if nid != c.root}

    new_id: dict[int, int] = {}
    kept: list[tuple[int, Node]] = []
    for n in g.nodes:
        if n.id in dropped:
            continue
        new_id[n.id] = len(kept)
        if n.id in root_to_cand:
            kept.append((n.id, _make_fused_node(g, root_to_cand[n.id])))
        else:
            kept.append((n.id, n))

    nodes: list[Node] = []
    for old_id, n in kept:
        remapped = tuple(new_id[i] for i in n.inputs)
        nodes.append(Node(id=new_id[old_id], kind=n.kind, inputs=remapped,
                          attrs=n.attrs, shape=n.shape))
    outputs = [new_id[o] for o in g.outputs]
    return infer_shapes(validate_graph(nodes, outputs))


def fuse(g: TensorGraph) -> tuple[TensorGraph, FusionPlan, list[FusionCandidate]]:
    """Enumerate, select, and rewrite in one step."""
    cands = enumerate_candidates(g)
    plan = select_plan(cands)
    return rewrite_graph(g, plan), plan, cands


def fusion_report(g: TensorGraph) -> dict:
    """Machine-readable candidate/plan/metrics summary with stable key order."""
    fused, plan, cands = fuse(g)
    accepted = {id(c) for c in plan.accepted}
    return {
        "candidates": [
            {
                "kind": c.kind,
                "root": c.root,
                "covered": sorted(c.covered),
                "delta_layers": c.delta_layers,
                "delta_computations": c.delta_computations,
                "body": poly.describe(c.body),
                "accepted": id(c) in accepted,
            }
            for c in cands
        ],
        "plan": [sorted(c.covered) for c in plan.accepted],
        "metrics": {"before": count_metrics(g), "after": count_metrics(fused)},
    }
