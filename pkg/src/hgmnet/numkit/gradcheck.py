"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NumericError
from .tape import Tape, Var, as_matrix, grad_of


def grad_check(f: Callable[..., Var], params: Sequence, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` receives one ``Var`` per parameter and must return a 1x1 ``Var``.
    The error for each entry is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    base = [np.array(as_matrix(p), dtype=np.float64) for p in params]
    tape = Tape()
    leaves = [tape.param(p) for p in base]
    out = f(*leaves)
    value = out.item()
    if not np.isfinite(value):
        raise NumericError("objective is not finite at the base point")
    if out.tape is tape:
        tape.backward(out)
    analytic = [grad_of(v) for v in leaves]

    def evaluate(arrays) -> float:
        y = f(*[Var(a) for a in arrays]).item()
        if not np.isfinite(y):
            raise NumericError("objective is not finite under perturbation")
        return y

    worst = 0.0
    for k, p in enumerate(base):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            up = evaluate(base)
            p[idx] = orig - eps
            down = evaluate(base)
            p[idx] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic[k][idx]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
