from .autodiff import (
    NumericError,
    Tensor,
    add,
    as_tensor,
    backward,
    cross_entropy,
    embedding,
    layer_norm,
    log,
    log_softmax_np,
    matmul,
    mul,
    neg,
    relu,
    reshape,
    softmax,
    total,
    transpose,
)
from .optim import AdamState, adam_step, sgd_step
from .tools import clip_by_norm, kaiming_init, l2_norm, rng_stream

__all__ = [
    "AdamState",
    "NumericError",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "clip_by_norm",
    "cross_entropy",
    "embedding",
    "kaiming_init",
    "l2_norm",
    "layer_norm",
    "log",
    "log_softmax_np",
    "matmul",
    "mul",
    "neg",
    "relu",
    "reshape",
    "rng_stream",
    "sgd_step",
    "softmax",
    "total",
    "transpose",
]
