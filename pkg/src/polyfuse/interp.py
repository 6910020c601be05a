"""Reference interpreter: evaluates graphs node by node with numpy kernels.

This is the numerical oracle for every fusion and scheduling pass: no fusion,
no reordering, one materialized buffer per node.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import kernels
from .graph import GraphError, Node, OpKind, TensorGraph

DTYPE = np.float32


class ExecutionError(GraphError):
    pass


def eval_node(n: Node, xs: list[np.ndarray]) -> np.ndarray:
    k = n.kind
    if k is OpKind.ADD:
        return xs[0] + xs[1]
    if k is OpKind.MUL:
        return xs[0] * xs[1]
    if k is OpKind.MATMUL:
        return kernels.matmul(xs[0], xs[1])
    if k is OpKind.GELU:
        return kernels.gelu(xs[0])
    if k is OpKind.SOFTMAX:
        return kernels.softmax_rows(xs[0])
    if k is OpKind.LAYERNORM:
        return kernels.layernorm_rows(xs[0])
    if k is OpKind.TRANSPOSE:
        axes = n.attrs.get("axes")
        return np.ascontiguousarray(np.transpose(xs[0], axes))
    if k is OpKind.RESHAPE:
        return np.reshape(xs[0], tuple(n.attrs["shape"]))
    if k is OpKind.CONST:
        return np.asarray(n.attrs["data"], dtype=DTYPE).reshape(tuple(n.attrs["shape"]))
    raise ExecutionError(f"node {n.id}: reference interpreter cannot evaluate '{k.value}'", n.id)


def check_bindings(g: TensorGraph, bindings: Mapping[int, np.ndarray]) -> None:
    for n in g.nodes:
        if n.kind is not OpKind.INPUT:
            continue
        if n.id not in bindings:
            raise ExecutionError(f"missing binding for input node {n.id}", n.id)
        arr = bindings[n.id]
        expected = n.shape if n.shape is not None else tuple(n.attrs["shape"])
        if tuple(arr.shape) != expected:
            raise ExecutionError(
                f"binding for node {n.id} has shape {tuple(arr.shape)}, expected {expected}", n.id
            )
        if arr.dtype != DTYPE:
            raise ExecutionError(f"binding for node {n.id} must be float32", n.id)


def reference_execute(
    g: TensorGraph,
    bindings: Mapping[int, np.ndarray],
    order: list[int] | None = None,
) -> dict[int, np.ndarray]:
    """Evaluate in topological order; returns one array per graph output."""
    check_bindings(g, bindings)
    env: dict[int, np.ndarray] = {}
    for nid in order if order is not None else g.topo_order():
        n = g.node(nid)
        if n.kind is OpKind.INPUT:
            env[nid] = bindings[nid]
        else:
            env[nid] = eval_node(n, [env[i] for i in n.inputs])
    return {oid: env[oid] for oid in g.outputs}
