from .tensor import (
    DTYPE, ShapeError, Tensor, absolute, concat, dot, exp, gather_rows, log, matmul,
    norm, parameter, relu, rowwise_matvec, sigmoid, softplus, softplus_with_slope, spmm, sqrt, square,
    zero_grad,
)
from .nn import Mlp, geometric_init
from .optim import Adam, AdamState, adam_step
from .gradcheck import grad_check
from .checkpoint import load_tensors, save_tensors

__all__ = [
    "DTYPE", "ShapeError", "Tensor", "absolute", "concat", "dot", "exp", "gather_rows", "log",
    "matmul", "norm", "parameter", "relu", "rowwise_matvec", "sigmoid", "softplus", "softplus_with_slope", "spmm",
    "sqrt", "square", "zero_grad", "Mlp", "geometric_init", "Adam", "AdamState",
    "adam_step", "grad_check", "load_tensors", "save_tensors",
]
