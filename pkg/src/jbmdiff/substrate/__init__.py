"""Numerical foundation: autodiff tensors, CSR helpers, Adam and Xavier."""
from . import autograd as ag
from .autograd import Tensor
from .gradcheck import GradCheckReport, grad_check
from .optim import Parameter, TrainingAborted, adam_step, make_rng, xavier_init
from .sparse import bipartite_normalize, check_csr, csr, spmm, sym_normalize

__all__ = [
    "ag",
    "Tensor",
    "GradCheckReport",
    "grad_check",
    "Parameter",
    "TrainingAborted",
    "adam_step",
    "make_rng",
    "xavier_init",
    "bipartite_normalize",
    "check_csr",
    "csr",
    "spmm",
    "sym_normalize",
]
