"""Transformer-encoder graph builder, parameter count, and FLOPs estimator."""

from __future__ import annotations

from dataclasses import dataclass

from .graph import Node, OpKind, Shape, TensorGraph, infer_shapes, validate_graph

# Nodes emitted per encoder block: 6 weight inputs plus 15 ops
# (3 qkv matmuls, transpose, score matmul, softmax, context matmul,
#  output projection, residual add, layernorm, 2 ffn matmuls, gelu,
#  residual add, layernorm).
NODES_PER_BLOCK = 21


@dataclass(frozen=True)
class ArchSample:
    num_layers: int
    hidden_size: int
    ffn_size: int
    num_heads: int

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.num_heads < 1 or self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} must be divisible by num_heads {self.num_heads}"
            )
        if self.ffn_size < self.hidden_size:
            raise ValueError(
                f"ffn_size {self.ffn_size} must be >= hidden_size {self.hidden_size}"
            )


def expected_node_count(arch: ArchSample) -> int:
    """Closed-form node count of build_transformer_graph: 1 input + 21 per block."""
    return 1 + NODES_PER_BLOCK * arch.num_layers


def build_transformer_graph(arch: ArchSample, seq_len: int) -> TensorGraph:
    """Stacked encoder blocks over one (seq_len, hidden) activation; weights are inputs.

    Attention is kept head-folded: one score/context matmul pair per block, so
    metrics and FLOPs do not depend on the head split.
    """
    arch.validate()
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    h, f = arch.hidden_size, arch.ffn_size
    nodes: list[Node] = []

    def emit(kind: OpKind, inputs: tuple[int, ...] = (), **attrs) -> int:
        nid = len(nodes)
        nodes.append(Node(id=nid, kind=kind, inputs=inputs, attrs=attrs))
        return nid

    def weight(rows: int, cols: int) -> int:
        return emit(OpKind.INPUT, shape=[rows, cols])

    x = emit(OpKind.INPUT, shape=[seq_len, h])
    for _ in range(arch.num_layers):
        wq, wk, wv, wo = (weight(h, h) for _ in range(4))
        w1 = weight(h, f)
        w2 = weight(f, h)
        q = emit(OpKind.MATMUL, (x, wq))
        k = emit(OpKind.MATMUL, (x, wk))
        v = emit(OpKind.MATMUL, (x, wv))
        kt = emit(OpKind.TRANSPOSE, (k,))
        scores = emit(OpKind.MATMUL, (q, kt))
        probs = emit(OpKind.SOFTMAX, (scores,))
        ctx = emit(OpKind.MATMUL, (probs, v))
        proj = emit(OpKind.MATMUL, (ctx, wo))
        res1 = emit(OpKind.ADD, (proj, x))
        ln1 = emit(OpKind.LAYERNORM, (res1,))
        ff1 = emit(OpKind.MATMUL, (ln1, w1))
        act = emit(OpKind.GELU, (ff1,))
        ff2 = emit(OpKind.MATMUL, (act, w2))
        res2 = emit(OpKind.ADD, (ff2, ln1))
        x = emit(OpKind.LAYERNORM, (res2,))
    g = validate_graph(nodes, [x])
    return infer_shapes(g)


def param_count(arch: ArchSample) -> int:
    """Encoder weights including biases and layernorm scales; embeddings excluded."""
    h, f = arch.hidden_size, arch.ffn_size
    attn = 4 * h * h + 4 * h
    ffn = 2 * h * f + h + f
    norms = 4 * h
    return arch.num_layers * (attn + ffn + norms)


def _n_elements(shape: Shape) -> int:
    n = 1
    for d in shape:
        n *= d
    return n


def graph_flops(g: TensorGraph) -> int:
    """Total FLOPs for one inference pass: 2*M*K*N per matmul, one per element otherwise."""
    total = 0
    for n in g.nodes:
        if n.shape is None:
            raise ValueError("graph_flops requires inferred shapes")
        if n.kind is OpKind.MATMUL:
            a_shape = g.node(n.inputs[0]).shape
            assert a_shape is not None
            m, k = a_shape
            total += 2 * m * k * n.shape[1]
        elif n.kind in (OpKind.ADD, OpKind.MUL, OpKind.GELU, OpKind.SOFTMAX, OpKind.LAYERNORM):
            total += _n_elements(n.shape)
    return total


def flops_estimate(arch: ArchSample, seq_len: int) -> int:
    """FLOPs of the full stacked-block graph (multiply-add counted as 2)."""
    return graph_flops(build_transformer_graph(arch, seq_len))
