"""Small numpy tensor engine: reverse-mode autodiff, CNN primitives, SGD."""
from . import ops
from .gradcheck import GradCheckError, GradCheckReport, grad_check, grad_check_report
from .ops import (add, batch_norm, concat, conv2d, div, exp, global_avg_pool, linear, log, log_softmax, matmul,
                  max_pool2d, mean, mul, relu, reshape, scale, sigmoid, softmax, sqrt, sub, transpose)
from .ops import sum as reduce_sum
from .optim import SGD, ParamGroup, multistep_factor, sgd_step
from .tensor import (NonFiniteError, ShapeError, Tensor, as_tensor, backward, debug_finite, get_default_dtype, no_grad,
                     parameter, precision, set_default_dtype, topological_order, zero_grad)

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError", "GradCheckError", "GradCheckReport", "SGD", "ParamGroup",
    "add", "sub", "mul", "div", "scale", "exp", "log", "sqrt", "relu", "sigmoid", "log_softmax", "softmax",
    "matmul", "linear", "conv2d", "batch_norm", "max_pool2d", "global_avg_pool", "concat", "reshape",
    "transpose", "mean", "reduce_sum", "as_tensor", "parameter", "backward", "zero_grad", "topological_order",
    "precision", "no_grad", "debug_finite", "get_default_dtype", "set_default_dtype", "grad_check", "grad_check_report",
    "sgd_step", "multistep_factor", "ops",
]
