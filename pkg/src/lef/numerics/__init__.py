from lef.numerics.tensor import (
    NEG_INF,
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    clip,
    concat,
    cos,
    exp,
    gather_rows,
    gelu,
    layer_norm,
    log,
    matmul,
    mul,
    neg,
    no_grad,
    power,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    scatter_rows,
    segment_max,
    set_debug,
    set_default_dtype,
    sigmoid,
    sin,
    smooth_l1,
    softmax,
    stop_gradient,
    sub,
    transpose,
    where,
)

__all__ = [name for name in dir() if not name.startswith("_")]
