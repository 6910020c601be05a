"""Numerical kernels shared by the reference interpreter and the loop engine.

Everything operates on float32 arrays and is deterministic within a process;
the loop engine relies on these being pure elementwise/row-wise maps so that
chunked evaluation is bitwise identical to whole-array evaluation.
"""

from __future__ import annotations

import numpy as np

_GELU_C0 = 0.7978845608028654  # sqrt(2 / pi)
_GELU_C1 = 0.044715
_LN_EPS = 1e-5


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh-form gaussian error linear unit."""
    inner = _GELU_C0 * (x + _GELU_C1 * (x * x * x))
    return 0.5 * x * (1.0 + np.tanh(inner))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def layernorm_rows(x: np.ndarray) -> np.ndarray:
    mu = np.mean(x, axis=-1, keepdims=True)
    d = x - mu
    var = np.mean(d * d, axis=-1, keepdims=True)
    return d / np.sqrt(var + _LN_EPS)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.matmul(a, b)
