"""Tensor computation graph IR: op kinds, parsing, validation, shape inference, metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping

Shape = tuple[int, ...]

MAX_RANK = 4
ELEMENT_BYTES = 4  # all tensors are 32-bit reals


class GraphError(Exception):
    """Base class for graph construction and validation failures."""

    def __init__(self, message: str, node_id: int | None = None):
        super().__init__(message)
        self.node_id = node_id


class ParseError(GraphError):
    pass


class ShapeError(GraphError):
    pass


class OpKind(Enum):
    MATMUL = "matmul"
    ADD = "add"
    MUL = "mul"
    TRANSPOSE = "transpose"
    RESHAPE = "reshape"
    GELU = "gelu"
    SOFTMAX = "softmax"
    LAYERNORM = "layernorm"
    INPUT = "input"
    CONST = "const"
    # Introduced by the fusion pass; never accepted by the parser.
    FUSED = "fused"


class LayerClass(Enum):
    COMPUTE_INTENSIVE = "compute_intensive"
    MEMORY_INTENSIVE = "memory_intensive"


ARITY: dict[OpKind, int] = {
    OpKind.MATMUL: 2,
    OpKind.ADD: 2,
    OpKind.MUL: 2,
    OpKind.TRANSPOSE: 1,
    OpKind.RESHAPE: 1,
    OpKind.GELU: 1,
    OpKind.SOFTMAX: 1,
    OpKind.LAYERNORM: 1,
    OpKind.INPUT: 0,
    OpKind.CONST: 0,
}

# Kinds that form algebraic (polynomial) regions.
POLY_KINDS = {OpKind.ADD, OpKind.MUL, OpKind.MATMUL}
# Kinds computable point-by-point on an aligned iteration domain.
POINTWISE_KINDS = {OpKind.ADD, OpKind.MUL, OpKind.GELU}
# Kinds that apply one arithmetic operator per occurrence in the expression.
_ARITH_KINDS = {
    OpKind.MATMUL,
    OpKind.ADD,
    OpKind.MUL,
    OpKind.GELU,
    OpKind.SOFTMAX,
    OpKind.LAYERNORM,
}

_ATTR_KEYS: dict[OpKind, tuple[set[str], set[str]]] = {
    # kind -> (required attr keys, optional attr keys)
    OpKind.INPUT: ({"shape"}, set()),
    OpKind.CONST: ({"shape", "data"}, set()),
    OpKind.TRANSPOSE: (set(), {"axes"}),
    OpKind.RESHAPE: ({"shape"}, set()),
}


@dataclass(frozen=True)
class Node:
    id: int
    kind: OpKind
    inputs: tuple[int, ...]
    attrs: dict[str, Any] = field(default_factory=dict)
    shape: Shape | None = None


@dataclass(frozen=True)
class TensorGraph:
    nodes: tuple[Node, ...]
    outputs: tuple[int, ...]

    def node(self, node_id: int) -> Node:
        return self.nodes[node_id]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def consumers(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for ref in n.inputs:
                out[ref].append(n.id)
        return out

    def topo_order(self) -> list[int]:
        """Deterministic topological order (smallest ready id first)."""
        import heapq

        indeg = {n.id: len(n.inputs) for n in self.nodes}
        waiting = self.consumers()
        ready = [nid for nid, d in indeg.items() if d == 0]
        heapq.heapify(ready)
        order: list[int] = []
        while ready:
            nid = heapq.heappop(ready)
            order.append(nid)
            for c in waiting[nid]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(ready, c)
        if len(order) != self.n_nodes:
            raise GraphError("graph contains a cycle")
        return order


def _check_shape_attr(dims: Any, node_id: int) -> Shape:
    if (
        not isinstance(dims, list)
        or not dims
        or len(dims) > MAX_RANK
        or not all(isinstance(d, int) and d >= 1 for d in dims)
    ):
        raise ParseError(
            f"node {node_id}: shape must be a list of 1..{MAX_RANK} positive integers, got {dims!r}",
            node_id,
        )
    return tuple(dims)


def _parse_node(raw: Any) -> Node:
    if not isinstance(raw, dict):
        raise ParseError(f"node entry must be an object, got {type(raw).__name__}")
    unknown = set(raw) - {"id", "op", "inputs", "attrs"}
    if unknown:
        raise ParseError(f"node {raw.get('id')}: unknown keys {sorted(unknown)}", raw.get("id"))
    if "id" not in raw or not isinstance(raw["id"], int):
        raise ParseError("node is missing an integer 'id'")
    nid = raw["id"]
    op_name = raw.get("op")
    try:
        kind = OpKind(op_name)
    except ValueError:
        raise ParseError(f"node {nid}: unknown op kind {op_name!r}", nid) from None
    if kind is OpKind.FUSED:
        raise ParseError(f"node {nid}: unknown op kind 'fused'", nid)

    inputs = raw.get("inputs", [])
    if not isinstance(inputs, list) or not all(isinstance(i, int) for i in inputs):
        raise ParseError(f"node {nid}: inputs must be a list of node ids", nid)
    if len(inputs) != ARITY[kind]:
        raise ParseError(
            f"node {nid}: op '{kind.value}' takes {ARITY[kind]} inputs, got {len(inputs)}", nid
        )

    attrs = raw.get("attrs", {})
    if not isinstance(attrs, dict):
        raise ParseError(f"node {nid}: attrs must be an object", nid)
    required, optional = _ATTR_KEYS.get(kind, (set(), set()))
    extra = set(attrs) - required - optional
    if extra:
        raise ParseError(f"node {nid}: unknown attrs {sorted(extra)} for op '{kind.value}'", nid)
    missing = required - set(attrs)
    if missing:
        raise ParseError(f"node {nid}: op '{kind.value}' requires attrs {sorted(missing)}", nid)

    if "shape" in attrs:
        attrs = dict(attrs)
        attrs["shape"] = list(attrs["shape"]) if isinstance(attrs["shape"], list) else attrs["shape"]
        _check_shape_attr(attrs["shape"], nid)
    if kind is OpKind.CONST:
        data = attrs["data"]
        n_elems = 1
        for d in attrs["shape"]:
            n_elems *= d
        if (
            not isinstance(data, list)
            or len(data) != n_elems
            or not all(isinstance(v, (int, float)) for v in data)
        ):
            raise ParseError(
                f"node {nid}: const data must be a flat list of {n_elems} numbers", nid
            )
    if kind is OpKind.TRANSPOSE and "axes" in attrs:
        axes = attrs["axes"]
        if not isinstance(axes, list) or sorted(axes) != list(range(len(axes))):
            raise ParseError(f"node {nid}: transpose axes must be a permutation, got {axes!r}", nid)

    return Node(id=nid, kind=kind, inputs=tuple(inputs), attrs=dict(attrs))


def validate_graph(nodes: list[Node], outputs: list[int]) -> TensorGraph:
    """Structural validation shared by the parser and the rewriter."""
    seen: set[int] = set()
    for n in nodes:
        if n.id in seen:
            raise ParseError(f"duplicate node id {n.id}", n.id)
        seen.add(n.id)
    if seen != set(range(len(nodes))):
        raise ParseError(f"node ids must be dense from 0, got {sorted(seen)}")
    by_id = sorted(nodes, key=lambda n: n.id)
    for n in by_id:
        for ref in n.inputs:
            if ref not in seen:
                raise ParseError(f"node {n.id} references missing node {ref}", n.id)
    if not outputs:
        raise ParseError("outputs must be a non-empty list")
    for oid in outputs:
        if oid not in seen:
            raise ParseError(f"outputs reference missing node {oid}")

    # Cycle check: iterative DFS over input edges.
    WHITE, GREY, BLACK = 0, 1, 2
    color = [WHITE] * len(by_id)
    for start in range(len(by_id)):
        if color[start] != WHITE:
            continue
        stack: list[tuple[int, int]] = [(start, 0)]
        color[start] = GREY
        while stack:
            nid, idx = stack[-1]
            ins = by_id[nid].inputs
            if idx == len(ins):
                color[nid] = BLACK
                stack.pop()
                continue
            stack[-1] = (nid, idx + 1)
            ref = ins[idx]
            if color[ref] == GREY:
                raise ParseError(f"cycle detected through node {ref}", ref)
            if color[ref] == WHITE:
                color[ref] = GREY
                stack.append((ref, 0))
    return TensorGraph(nodes=tuple(by_id), outputs=tuple(outputs))


def parse_graph(document: str) -> TensorGraph:
    """Parse the JSON graph format into a validated, shape-uninferred graph."""
    try:
        data = json.loads(document)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e}") from None
    if not isinstance(data, dict):
        raise ParseError("top-level document must be an object")
    unknown = set(data) - {"nodes", "outputs"}
    if unknown:
        raise ParseError(f"unknown top-level keys {sorted(unknown)}")
    if "nodes" not in data or "outputs" not in data:
        raise ParseError("document requires 'nodes' and 'outputs'")
    if not isinstance(data["nodes"], list) or not isinstance(data["outputs"], list):
        raise ParseError("'nodes' and 'outputs' must be arrays")
    nodes = [_parse_node(raw) for raw in data["nodes"]]
    if not all(isinstance(o, int) for o in data["outputs"]):
        raise ParseError("'outputs' must be an array of node ids")
    return validate_graph(nodes, list(data["outputs"]))


def elementwise_result(a: Shape, b: Shape) -> Shape | None:
    """Result shape of a binary elementwise op, or None if incompatible.

    Equal shapes combine at any rank; otherwise only the 2-D row-broadcast
    case (1, N) against (M, N) is admitted.
    """
    if a == b:
        return a
    if len(a) == 2 and len(b) == 2 and a[1] == b[1]:
        if a[0] == 1:
            return b
        if b[0] == 1:
            return a
    return None


def _infer_node_shape(n: Node, in_shapes: list[Shape]) -> Shape:
    k = n.kind
    if k in (OpKind.INPUT, OpKind.CONST):
        return tuple(n.attrs["shape"])
    if k in (OpKind.ADD, OpKind.MUL):
        res = elementwise_result(in_shapes[0], in_shapes[1])
        if res is None:
            raise ShapeError(
                f"node {n.id}: incompatible operand shapes {in_shapes[0]} and {in_shapes[1]}",
                n.id,
            )
        return res
    if k is OpKind.MATMUL:
        a, b = in_shapes
        if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
            raise ShapeError(
                f"node {n.id}: incompatible operand shapes {a} and {b} for matmul", n.id
            )
        return (a[0], b[1])
    if k is OpKind.TRANSPOSE:
        (a,) = in_shapes
        axes = n.attrs.get("axes", list(reversed(range(len(a)))))
        if len(axes) != len(a):
            raise ShapeError(f"node {n.id}: transpose axes rank mismatch for shape {a}", n.id)
        return tuple(a[ax] for ax in axes)
    if k is OpKind.RESHAPE:
        (a,) = in_shapes
        target = tuple(n.attrs["shape"])
        pa = pt = 1
        for d in a:
            pa *= d
        for d in target:
            pt *= d
        if pa != pt:
            raise ShapeError(
                f"node {n.id}: cannot reshape {a} ({pa} elements) to {target} ({pt} elements)",
                n.id,
            )
        return target
    if k in (OpKind.GELU, OpKind.SOFTMAX, OpKind.LAYERNORM):
        return in_shapes[0]
    if k is OpKind.FUSED:
        return tuple(n.attrs["out_shape"])
    raise GraphError(f"node {n.id}: cannot infer shape for kind {k.value}", n.id)


def infer_shapes(g: TensorGraph) -> TensorGraph:
    """Annotate every node with its shape; idempotent."""
    shapes: dict[int, Shape] = {}
    new_nodes = list(g.nodes)
    for nid in g.topo_order():
        n = g.node(nid)
        shape = _infer_node_shape(n, [shapes[i] for i in n.inputs])
        if len(shape) > MAX_RANK:
            raise ShapeError(f"node {nid}: rank {len(shape)} exceeds {MAX_RANK}", nid)
        shapes[nid] = shape
        new_nodes[nid] = replace(n, shape=shape)
    return TensorGraph(nodes=tuple(new_nodes), outputs=g.outputs)


def classify_node(n: Node) -> LayerClass:
    """Compute-intensive ops reuse input elements (matmul); everything else reads each once."""
    if n.kind is OpKind.MATMUL:
        return LayerClass.COMPUTE_INTENSIVE
    if n.kind is OpKind.FUSED and n.attrs.get("has_matmul"):
        return LayerClass.COMPUTE_INTENSIVE
    return LayerClass.MEMORY_INTENSIVE


def expansion_counts(g: TensorGraph) -> dict[int, int]:
    """Symbolic operator applications in each node's fully expanded expression tree.

    Shared producers are counted once per occurrence, so the result for a node
    can exceed the number of graph nodes below it. Fused nodes contribute their
    stored operator count plus their inputs weighted by leaf multiplicity.
    """
    counts: dict[int, int] = {}
    for nid in g.topo_order():
        n = g.node(nid)
        if n.kind in (OpKind.INPUT, OpKind.CONST):
            counts[nid] = 0
        elif n.kind is OpKind.FUSED:
            mults = n.attrs["leaf_multiplicity"]
            counts[nid] = n.attrs["op_count"] + sum(
                m * counts[ref] for m, ref in zip(mults, n.inputs)
            )
        else:
            own = 1 if n.kind in _ARITH_KINDS else 0
            counts[nid] = own + sum(counts[ref] for ref in n.inputs)
    return counts


def count_metrics(g: TensorGraph) -> dict[str, int]:
    """Layer count, symbolic computation count, and intermediate buffer bytes."""
    layer_count = sum(1 for n in g.nodes if n.kind not in (OpKind.INPUT, OpKind.CONST))
    counts = expansion_counts(g)
    computation_count = sum(counts[oid] for oid in g.outputs)
    out_set = set(g.outputs)
    intermediate_bytes = 0
    for n in g.nodes:
        if n.kind in (OpKind.INPUT, OpKind.CONST) or n.id in out_set:
            continue
        if n.shape is None:
            raise GraphError(f"node {n.id}: shapes must be inferred before metrics", n.id)
        elems = 1
        for d in n.shape:
            elems *= d
        intermediate_bytes += elems * ELEMENT_BYTES
    return {
        "layer_count": layer_count,
        "computation_count": computation_count,
        "intermediate_bytes": intermediate_bytes,
    }
