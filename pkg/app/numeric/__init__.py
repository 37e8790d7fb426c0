from app.numeric.tensor import (
    DTYPE,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    cross_entropy,
    div,
    elementwise,
    exp,
    expand_dims,
    gather_rows,
    getitem,
    log,
    logistic,
    logsumexp,
    matmul,
    maximum,
    mul,
    reduce,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    softmax,
    sqrt,
    square,
    sub,
    swapaxes,
    tanh,
)
from app.numeric.gradcheck import grad_check, grad_check_parameters
