"""Dense numeric core: tape autodiff, primitives, gradient checking, RNG."""

from . import tape as ad
from .gradcheck import grad_check
from .ops import KL_EPS, cosine_sim, kl_div, sgd_step, softmax_rows
from .rng import Rng
from .tape import Tape, Var, grad_of, stop_gradient

__all__ = [
    "KL_EPS",
    "Rng",
    "Tape",
    "Var",
    "ad",
    "cosine_sim",
    "grad_check",
    "grad_of",
    "kl_div",
    "sgd_step",
    "softmax_rows",
    "stop_gradient",
]
