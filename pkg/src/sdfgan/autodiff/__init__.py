from .conv import conv3d, conv3d_transpose, conv3d_weight_grad
from .params import ParameterStore, load_arrays, save_arrays
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    clip,
    concat,
    div,
    exp,
    gather_rows,
    getitem,
    grad,
    layer_norm,
    leaky_relu,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_record,
    norm_rows,
    power,
    relu,
    reshape,
    scatter_rows,
    segment_max,
    sqrt,
    stop_gradient,
    sub,
    sum_to,
    tabs,
    transpose,
    tsum,
)

__all__ = [
    "ParameterStore", "ShapeError", "Tape", "Tensor", "add", "as_tensor", "broadcast_to",
    "clip", "concat", "conv3d", "conv3d_transpose", "conv3d_weight_grad", "div", "exp",
    "gather_rows", "getitem", "grad", "layer_norm", "leaky_relu", "load_arrays", "log",
    "matmul", "mean", "mul", "neg", "no_record", "norm_rows", "power", "relu", "reshape",
    "save_arrays", "scatter_rows", "segment_max", "sqrt", "stop_gradient", "sub", "sum_to",
    "tabs", "transpose", "tsum",
]
