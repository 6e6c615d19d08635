"""Low-rank adapters on backbone linear layers.

An adapted layer computes ``x @ (W + B @ A).T + b``. There is no output scaling
on ``B @ A``. ``B`` starts at zero so attaching never changes the forward pass.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractViolation
from .nn import Linear
from .numcore import Tensor, svd_topk


class LoRALinear:
    kind = "lora"

    def __init__(self, base, rank, A, B, init="random"):
        self.weight = base.weight
        self.bias = base.bias
        self.rank = int(rank)
        self.A = A if isinstance(A, Tensor) else Tensor(A, True)
        self.B = B if isinstance(B, Tensor) else Tensor(B, True)
        self.init = init
        self.absorbed = False

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    def effective_weight(self):
        return self.weight.data + self.B.data @ self.A.data

    def __call__(self, x):
        w = self.weight + self.B @ self.A
        return x @ w.T + self.bias

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias, "A": self.A, "B": self.B}

    def describe(self):
        return {"rank": self.rank, "init": self.init}


def _select(model, selector):
    n = len(model.blocks)
    if selector == "all":
        return list(range(n))
    if selector == "attn":
        return list(range(0, n, 2))
    if selector == "mlp":
        return list(range(1, n, 2))
    idx = [int(i) for i in selector]
    if any(i < 0 or i >= n for i in idx):
        raise ContractViolation(f"layer index out of range in {selector!r}")
    return idx


def attach_lora(model, selector="all", k=4, rng=None, init="svd"):
    """Wrap the selected backbone linears with rank-``k`` adapters.

    ``init="svd"`` sets ``A`` to the top-k right singular vectors of ``W``;
    ``init="random"`` draws ``A`` from N(0, 1/d_in). ``B`` is zero either way.
    Returns the new adapters.
    """
    if init not in ("svd", "random"):
        raise ContractViolation(f"unknown LoRA init {init!r}")
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ContractViolation(f"rank must be a positive integer, got {k!r}")
    idx = _select(model, selector)
    for i in idx:
        lin = model.blocks[i].linear
        if lin.kind != "linear":
            raise ContractViolation(f"layer {i} already has an adapter")
        if k > min(lin.in_features, lin.out_features):
            raise ContractViolation(f"rank {k} exceeds min dimension of layer {i} {lin.weight.shape}")
    if init == "random" and rng is None:
        raise ContractViolation("random LoRA init needs an rng")
    adapters = []
    for i in idx:
        lin = model.blocks[i].linear
        d_out, d_in = lin.weight.shape
        A = rng.normal((k, d_in)) / np.sqrt(d_in) if init == "random" else np.zeros((k, d_in))
        ad = LoRALinear(lin, k, A, np.zeros((d_out, k)), init=init)
        if init == "svd":
            svd_init(ad)
        model.blocks[i].linear = ad
        adapters.append(ad)
    return adapters


def svd_init(adapter):
    """``A`` <- top-k rows of V^T from the SVD of the base weight; ``B`` <- 0."""
    _, V = svd_topk(adapter.weight.data, adapter.rank)
    adapter.A = Tensor(V, True)
    adapter.B = Tensor(np.zeros((adapter.out_features, adapter.rank)), True)
    adapter.init = "svd"


def absorb(adapter):
    """Plain :class:`Linear` with weight ``W + B @ A``."""
    if getattr(adapter, "kind", None) != "lora" or adapter.absorbed:
        raise ContractViolation("layer is already a plain linear")
    adapter.absorbed = True
    return Linear(Tensor(adapter.effective_weight(), True), Tensor(adapter.bias.data, True))


def absorb_all(model):
    for blk in model.blocks:
        if blk.linear.kind == "lora":
            blk.linear = absorb(blk.linear)
    return model


def adapters(model):
    return [blk.linear for blk in model.blocks if blk.linear.kind == "lora"]
