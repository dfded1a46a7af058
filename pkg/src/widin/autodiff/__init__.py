from widin.autodiff.check import gradcheck
from widin.autodiff.optim import OptimState, adamw_step, sgd_step, step
from widin.autodiff.tensor import (
    Tensor,
    add,
    attention,
    concat_rows,
    cross_entropy,
    gelu,
    l2_normalize,
    layer_norm,
    log_softmax,
    matmul,
    mean_all,
    mean_rows,
    mse_loss,
    mul,
    scale,
    softmax_xent_temp,
    sub,
    sum_all,
    sum_cols,
    take_rows,
    tanh,
    transpose,
)

__all__ = [
    "OptimState",
    "Tensor",
    "adamw_step",
    "add",
    "attention",
    "concat_rows",
    "cross_entropy",
    "gelu",
    "gradcheck",
    "l2_normalize",
    "layer_norm",
    "log_softmax",
    "matmul",
    "mean_all",
    "mean_rows",
    "mse_loss",
    "mul",
    "scale",
    "sgd_step",
    "softmax_xent_temp",
    "step",
    "sub",
    "sum_all",
    "sum_cols",
    "take_rows",
    "tanh",
    "transpose",
]
