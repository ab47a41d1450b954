from .gradcheck import GradCheckReport, gradient_check
from .params import PARTITIONS, ParameterStore, adam_step
from .second_order import CGResult, conjugate_gradient_solve, hessian_vector_product
from .tensor import (
    Tensor,
    abs_,
    add,
    backward,
    concat,
    conv2d,
    gather_rows,
    grad,
    l1_loss,
    leaky_relu,
    matmul,
    mean,
    mse_loss,
    mul,
    no_trace,
    relu,
    reshape,
    scale,
    scatter_add_rows,
    slice_,
    sub,
    sum_,
    tanh,
    upsample2x,
)
