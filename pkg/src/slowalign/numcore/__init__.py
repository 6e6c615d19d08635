from .linalg import cholesky, cholesky_jittered, jacobi_eigh, svd_topk
from .rng import RngState, sample_mvn
from .tensor import (
    Tensor, add, as_tensor, backward, concat, div, exp, gelu, getitem, l2_norm,
    layer_norm, log, log_softmax, matmul, mean, mul, power, relu, softmax, sub,
    tanh, transpose, tsum,
)
