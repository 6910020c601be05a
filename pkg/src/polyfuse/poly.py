"""Polynomial expression trees over tensor leaves, with canonicalization and factoring.

Expressions are immutable. AddN/MulN are n-ary elementwise operators; MatMul is
the (M,K)x(K,N) contraction; Unary wraps pointwise functions that may appear in
fused regions (currently gelu). Leaves refer to producers outside the expression
by an integer ref: a graph node id during extraction, an input-slot index once
the expression is stored inside a fused node.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import kernels
from .graph import Shape, ShapeError, elementwise_result


@dataclass(frozen=True)
class Leaf:
    ref: int
    shape: Shape


@dataclass(frozen=True)
class AddN:
    children: tuple["Expr", ...]
    shape: Shape


@dataclass(frozen=True)
class MulN:
    children: tuple["Expr", ...]
    shape: Shape


@dataclass(frozen=True)
class MatMul:
    lhs: "Expr"
    rhs: "Expr"
    shape: Shape


@dataclass(frozen=True)
class Unary:
    fn: str
    child: "Expr"
    shape: Shape


Expr = Leaf | AddN | MulN | MatMul | Unary

_UNARY_FNS: dict[str, Callable[[np.ndarray], np.ndarray]] = {"gelu": kernels.gelu}


def _join_elementwise(shapes: list[Shape]) -> Shape:
    result = shapes[0]
    for s in shapes[1:]:
        joined = elementwise_result(result, s)
        if joined is None:
            raise ShapeError(f"elementwise shapes {result} and {s} are incompatible")
        result = joined
    return result


def add_n(children: list[Expr] | tuple[Expr, ...]) -> Expr:
    children = tuple(children)
    if len(children) == 1:
        return children[0]
    return AddN(children, _join_elementwise([c.shape for c in children]))


def mul_n(children: list[Expr] | tuple[Expr, ...]) -> Expr:
    children = tuple(children)
    if len(children) == 1:
        return children[0]
    return MulN(children, _join_elementwise([c.shape for c in children]))


def mat_mul(lhs: Expr, rhs: Expr) -> MatMul:
    a, b = lhs.shape, rhs.shape
    if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
        raise ShapeError(f"matmul shapes {a} and {b} are incompatible")
    return MatMul(lhs, rhs, (a[0], b[1]))


def unary(fn: str, child: Expr) -> Unary:
    if fn not in _UNARY_FNS:
        raise ValueError(f"unknown unary fn {fn!r}")
    return Unary(fn, child, child.shape)


def op_count(e: Expr) -> int:
    """Binary-operator applications: an n-ary node costs n-1, matmul and unary cost 1."""
    if isinstance(e, Leaf):
        return 0
    if isinstance(e, (AddN, MulN)):
        return len(e.children) - 1 + sum(op_count(c) for c in e.children)
    if isinstance(e, MatMul):
        return 1 + op_count(e.lhs) + op_count(e.rhs)
    return 1 + op_count(e.child)


def leaves(e: Expr) -> list[Leaf]:
    """All leaf occurrences in depth-first order (duplicates preserved)."""
    if isinstance(e, Leaf):
        return [e]
    if isinstance(e, (AddN, MulN)):
        out: list[Leaf] = []
        for c in e.children:
            out.extend(leaves(c))
        return out
    if isinstance(e, MatMul):
        return leaves(e.lhs) + leaves(e.rhs)
    return leaves(e.child)


def canonical_key(e: Expr) -> tuple:
    """Total order on expressions; equal keys imply structural identity."""
    if isinstance(e, Leaf):
        return (0, e.ref)
    if isinstance(e, AddN):
        return (1, tuple(canonical_key(c) for c in e.children))
    if isinstance(e, MulN):
        return (2, tuple(canonical_key(c) for c in e.children))
    if isinstance(e, MatMul):
        return (3, canonical_key(e.lhs), canonical_key(e.rhs))
    return (4, e.fn, canonical_key(e.child))


def canonicalize(e: Expr) -> Expr:
    """Flatten nested AddN/MulN and sort their children by canonical key.

    Matmul operands keep their order (not commutative). The result is a fixpoint:
    canonicalize(canonicalize(e)) == canonicalize(e).
    """
    if isinstance(e, Leaf):
        return e
    if isinstance(e, MatMul):
        return MatMul(canonicalize(e.lhs), canonicalize(e.rhs), e.shape)
    if isinstance(e, Unary):
        return Unary(e.fn, canonicalize(e.child), e.shape)
    cls = type(e)
    flat: list[Expr] = []
    for c in e.children:
        c = canonicalize(c)
        if isinstance(c, cls):
            flat.extend(c.children)
        else:
            flat.append(c)
    flat.sort(key=canonical_key)
    return cls(tuple(flat), e.shape)


def _factor_add(children: tuple[Expr, ...], shape: Shape) -> Expr:
    """One greedy factoring pass over the terms of an AddN.

    Picks the factor shared by the most MulN terms (ties to the smallest
    canonical key), pulls one occurrence out of each matching term, and recurses
    on the grouped remainder. Each step removes k-1 multiplies and adds k-1
    additions one level down, so the operator count never increases; with k >= 2
    matching terms it strictly decreases.
    """
    while True:
        freq: dict[tuple, tuple[int, Expr]] = {}
        for term in children:
            if not isinstance(term, MulN):
                continue
            seen: set[tuple] = set()
            for c in term.children:
                key = canonical_key(c)
                if key in seen:
                    continue
                seen.add(key)
                count, _ = freq.get(key, (0, c))
                freq[key] = (count + 1, c)
        best = None
        for key, (count, expr) in freq.items():
            if count >= 2 and (best is None or (-count, key) < (-best[0], best[1])):
                best = (count, key, expr)
        if best is None:
            return add_n(children) if len(children) > 1 else children[0]
        _, factor_key, factor = best
        matched_rest: list[Expr] = []
        rest_terms: list[Expr] = []
        for term in children:
            if isinstance(term, MulN) and any(
                canonical_key(c) == factor_key for c in term.children
            ):
                remaining = list(term.children)
                for i, c in enumerate(remaining):
                    if canonical_key(c) == factor_key:
                        del remaining[i]
                        break
                matched_rest.append(mul_n(remaining) if remaining else factor)
            else:
                rest_terms.append(term)
        grouped = mul_n([factor, distributive_factor(canonicalize(add_n(matched_rest)))])
        children = tuple(rest_terms) + (canonicalize(grouped),)
        if len(children) == 1:
            return children[0]
        children = canonicalize(AddN(children, shape)).children  # type: ignore[union-attr]


def distributive_factor(e: Expr) -> Expr:
    """Repeatedly factor common multiplicands out of sums, bottom-up, to a fixpoint."""
    if isinstance(e, Leaf):
        return e
    if isinstance(e, MatMul):
        return MatMul(distributive_factor(e.lhs), distributive_factor(e.rhs), e.shape)
    if isinstance(e, Unary):
        return Unary(e.fn, distributive_factor(e.child), e.shape)
    kids = tuple(distributive_factor(c) for c in e.children)
    if isinstance(e, MulN):
        return canonicalize(MulN(kids, e.shape))
    return _factor_add(canonicalize(AddN(kids, e.shape)).children, e.shape)  # type: ignore[union-attr]


def eval_expr(e: Expr, env: Mapping[int, np.ndarray]) -> np.ndarray:
    """Direct numpy evaluation with leaves looked up in env (the per-op fallback path)."""
    if isinstance(e, Leaf):
        return env[e.ref]
    if isinstance(e, AddN):
        return functools.reduce(np.add, (eval_expr(c, env) for c in e.children))
    if isinstance(e, MulN):
        return functools.reduce(np.multiply, (eval_expr(c, env) for c in e.children))
    if isinstance(e, MatMul):
        return kernels.matmul(eval_expr(e.lhs, env), eval_expr(e.rhs, env))
    return _UNARY_FNS[e.fn](eval_expr(e.child, env))


def remap_leaves(e: Expr, mapping: Mapping[int, int]) -> Expr:
    if isinstance(e, Leaf):
        return Leaf(mapping[e.ref], e.shape)
    if isinstance(e, AddN):
        return AddN(tuple(remap_leaves(c, mapping) for c in e.children), e.shape)
    if isinstance(e, MulN):
        return MulN(tuple(remap_leaves(c, mapping) for c in e.children), e.shape)
    if isinstance(e, MatMul):
        return MatMul(remap_leaves(e.lhs, mapping), remap_leaves(e.rhs, mapping), e.shape)
    return Unary(e.fn, remap_leaves(e.child, mapping), e.shape)


def contains_matmul(e: Expr) -> bool:
    if isinstance(e, Leaf):
        return False
    if isinstance(e, MatMul):
        return True
    if isinstance(e, (AddN, MulN)):
        return any(contains_matmul(c) for c in e.children)
    return contains_matmul(e.child)


def describe(e: Expr) -> str:
    """Compact stable rendering, used in reports and variant dumps."""
    if isinstance(e, Leaf):
        return f"%{e.ref}"
    if isinstance(e, AddN):
        return "(" + " + ".join(describe(c) for c in e.children) + ")"
    if isinstance(e, MulN):
        return "(" + " * ".join(describe(c) for c in e.children) + ")"
    if isinstance(e, MatMul):
        return f"({describe(e.lhs)} @ {describe(e.rhs)})"
    return f"{e.fn}({describe(e.child)})"
