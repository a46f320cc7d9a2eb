"""Plain-array numeric primitives."""

from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np

from ..errors import DegenerateInputWarning, DimensionError, ValidationError
from .tape import as_matrix, softmax_rows_np

KL_EPS = 1e-9


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    return softmax_rows_np(as_matrix(m))


def cosine_sim(a, b) -> float:
    """Cosine similarity of two vectors.

    A zero-norm argument yields 0 and emits ``DegenerateInputWarning``.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or a.shape != b.shape:
        raise DimensionError(f"cosine_sim of shapes {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        warnings.warn("cosine_sim of a zero vector; returning 0", DegenerateInputWarning, stacklevel=2)
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def kl_div(p, q, eps: float = KL_EPS) -> float:
    """KL(p || q) for two probability vectors, flooring q at ``eps``."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise DimensionError(f"kl_div of lengths {p.size} and {q.size}")
    for name, v in (("p", p), ("q", q)):
        if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
            raise ValidationError(f"{name} is not a probability vector")
    qf = np.maximum(q, eps)
    nz = p > 0
    return float(max(0.0, np.sum(p[nz] * (np.log(p[nz]) - np.log(qf[nz])))))


def sgd_step(params: Sequence, grads: Sequence, lr: float) -> list[np.ndarray]:
    """Return ``p - lr * g`` for every pair; inputs are not modified.

    ``lr = 0`` is accepted and leaves parameters unchanged.
    """
    if lr < 0:
        raise ValidationError("learning rate must be non-negative")
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} gradients")
    out = []
    for p, g in zip(params, grads):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise DimensionError(f"param shape {p.shape} vs grad shape {g.shape}")
        out.append(p - lr * g)
    return out
