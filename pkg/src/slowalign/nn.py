"""MLP backbone, growing linear head, parameter groups and SGD."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .numcore import RngState, Tensor, as_tensor, gelu, layer_norm, relu, tanh

ACTIVATIONS = {"gelu": gelu, "relu": relu, "tanh": tanh}
HEAD_INIT_STD = 0.01


class Linear:
    """``y = x @ W.T + b`` with ``W`` of shape (out, in)."""

    kind = "linear"

    def __init__(self, weight, bias):
        self.weight = weight if isinstance(weight, Tensor) else Tensor(weight, True)
        self.bias = bias if isinstance(bias, Tensor) else Tensor(bias, True)

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    def effective_weight(self):
        return self.weight.data

    def __call__(self, x):
        return x @ self.weight.T + self.bias

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


class LayerNorm:
    def __init__(self, width):
        self.gain = Tensor(np.ones(width), True)
        self.shift = Tensor(np.zeros(width), True)

    def __call__(self, x):
        return layer_norm(x, self.gain, self.shift)

    def parameters(self):
        return {"gain": self.gain, "shift": self.shift}


class Block:
    """Linear, layer-norm, then an optional activation."""

    def __init__(self, linear, activation):
        self.linear = linear
        self.norm = LayerNorm(linear.out_features)
        self.activation = activation

    def __call__(self, x):
        h = self.norm(self.linear(x))
        return ACTIVATIONS[self.activation](h) if self.activation else h


class Model:
    """Feature extractor plus a linear head whose rows grow one task at a time.

    Head row ``j`` scores class ``head_classes[j]`` and belongs to task
    ``head_tasks[j]``. The final backbone block has no activation, so features
    are layer-normalised vectors of width ``feature_dim``.
    """

    def __init__(self, sizes, activation, blocks):
        self.sizes = list(sizes)
        self.activation = activation
        self.blocks = blocks
        self.head = None
        self.head_classes = []
        self.head_tasks = []

    @property
    def input_dim(self):
        return self.sizes[0]

    @property
    def feature_dim(self):
        return self.sizes[-1]

    @property
    def num_outputs(self):
        return len(self.head_classes)

    def backbone_parameters(self):
        out = {}
        for i, blk in enumerate(self.blocks):
            for name, p in blk.linear.parameters().items():
                out[f"backbone.{i}.linear.{name}"] = p
            for name, p in blk.norm.parameters().items():
                out[f"backbone.{i}.norm.{name}"] = p
        return out

    def parameters(self):
        out = self.backbone_parameters()
        if self.head is not None:
            out["head.weight"] = self.head
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def task_rows(self, task_id):
        return np.array([j for j, t in enumerate(self.head_tasks) if t == task_id], dtype=np.int64)

    def class_index(self):
        """Map class id to head row (class-incremental heads only)."""
        return {c: j for j, c in enumerate(self.head_classes)}


def build_model(sizes, activation="gelu", rng=None):
    """MLP backbone with Kaiming-uniform weights, zero biases and an empty head."""
    sizes = [int(s) for s in sizes]
    if len(sizes) < 3:
        raise ContractViolation("need an input width, at least one hidden width and a feature width")
    if any(s <= 0 for s in sizes):
        raise ContractViolation(f"layer widths must be positive, got {sizes}")
    if activation not in ACTIVATIONS:
        raise ContractViolation(f"unknown activation {activation!r}")
    rng = rng if rng is not None else RngState(0)
    blocks = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / fan_in)
        w = (rng.uniform(fan_out * fan_in).reshape(fan_out, fan_in) * 2.0 - 1.0) * bound
        act = activation if i < len(sizes) - 2 else None
        blocks.append(Block(Linear(w, np.zeros(fan_out)), act))
    return Model(sizes, activation, blocks)


def extend_head(model, new_classes, task_id, rng, allow_repeat=False):
    """Append one head row per new class, drawn from N(0, 0.01^2).

    ``allow_repeat`` lets a domain-incremental run add a fresh block for an
    already-registered class set; class ids must still be unique within the block.
    """
    new_classes = [int(c) for c in new_classes]
    if not new_classes:
        raise ContractViolation("extend_head needs at least one class")
    if len(set(new_classes)) != len(new_classes):
        raise ContractViolation("duplicate class id in new_classes")
    if not allow_repeat:
        dup = set(new_classes) & set(model.head_classes)
        if dup:
            raise ContractViolation(f"class ids already registered: {sorted(dup)}")
    if model.head_tasks and task_id <= max(model.head_tasks):
        raise ContractViolation("task ids must be strictly increasing")
    rows = rng.normal((len(new_classes), model.feature_dim)) * HEAD_INIT_STD
    if model.head is None:
        model.head = Tensor(rows, True)
    else:
        model.head = Tensor(np.vstack([model.head.data, rows]), True)
    model.head_classes.extend(new_classes)
    model.head_tasks.extend([int(task_id)] * len(new_classes))


def _as_input(model, batch):
    x = as_tensor(batch)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ContractViolation(f"batch shape {x.shape} does not match input width {model.input_dim}")
    return x


def forward_features(model, batch):
    h = _as_input(model, batch)
    for blk in model.blocks:
        h = blk(h)
    return h


def forward_logits(model, batch, head=None):
    """Logits over every registered head row; ``head`` overrides the model's head weights."""
    w = model.head if head is None else as_tensor(head)
    if w is None:
        raise ContractViolation("the head has no classes yet")
    return forward_features(model, batch) @ w.T


def features_numpy(model, x, batch_size=1024):
    x = np.asarray(x, dtype=np.float64)
    out = [forward_features(model, x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
    return np.vstack(out)


# parameter groups ----------------------------------------------------------

@dataclass(frozen=True)
class LearningRates:
    seqft: float = 0.005
    backbone: float = 0.0001
    hybrid: float = 0.001
    head: float = 0.01
    lora: float | None = None  # LoRA factors; None shares the hybrid rate (subset:lora uses the backbone rate)


@dataclass
class ParamGroup:
    name: str
    members: list
    lr: float

    def __post_init__(self):
        if self.lr < 0:
            raise ContractViolation(f"group {self.name!r} has a negative learning rate")


SUBSETS = ("attn", "mlp", "norm", "bias", "lora")


def _subset_members(model, subset):
    names = []
    for i, blk in enumerate(model.blocks):
        pre = f"backbone.{i}"
        if subset == "attn" and i % 2 == 0 or subset == "mlp" and i % 2 == 1:
            names.append(f"{pre}.linear.weight")
            if blk.linear.kind == "lora":
                names += [f"{pre}.linear.A", f"{pre}.linear.B"]
        elif subset == "norm":
            names += [f"{pre}.norm.gain", f"{pre}.norm.shift"]
        elif subset == "bias":
            names.append(f"{pre}.linear.bias")
        elif subset == "lora" and blk.linear.kind == "lora":
            names += [f"{pre}.linear.A", f"{pre}.linear.B"]
    return names


def make_groups(model, mode, lrs=LearningRates()):
    """Partition every parameter into named learning-rate groups.

    Modes: ``seqft``, ``sl``, ``hybrid``, ``fixed``, ``subset:<attn|mlp|norm|bias|lora>``.
    Groups reference parameters by name so they survive head growth.
    """
    backbone = list(model.backbone_parameters())
    head = ["head.weight"] if model.head is not None else []
    if mode == "seqft":
        return [ParamGroup("all", backbone + head, lrs.seqft)]
    if mode == "sl":
        return [ParamGroup("backbone", backbone, lrs.backbone), ParamGroup("head", head, lrs.head)]
    if mode == "fixed":
        return [ParamGroup("backbone", backbone, 0.0), ParamGroup("head", head, lrs.head)]
    if mode == "hybrid":
        if not any(blk.linear.kind == "lora" for blk in model.blocks):
            raise ContractViolation("hybrid mode needs LoRA adapters attached")
        frozen = [n for n in backbone if n.endswith(".linear.weight")]
        factors = [n for n in backbone if n.endswith((".linear.A", ".linear.B"))]
        active = [n for n in backbone if n not in frozen and n not in factors]
        return [ParamGroup("hybrid", active, lrs.hybrid), ParamGroup("lora", factors, lrs.hybrid if lrs.lora is None else lrs.lora),
                ParamGroup("frozen", frozen, 0.0), ParamGroup("head", head, lrs.head)]
    if mode.startswith("subset:"):
        subset = mode.split(":", 1)[1]
        if subset not in SUBSETS:
            raise ContractViolation(f"unknown subset {subset!r}; choose from {SUBSETS}")
        chosen = _subset_members(model, subset)
        if not chosen:
            raise ContractViolation(f"subset {subset!r} selects no parameters")
        lr = lrs.lora if subset == "lora" and lrs.lora is not None else lrs.backbone
        rest = [n for n in backbone if n not in chosen]
        return [ParamGroup("subset", chosen, lr), ParamGroup("frozen", rest, 0.0),
                ParamGroup("head", head, lrs.head)]
    raise ContractViolation(f"unknown group mode {mode!r}")


@dataclass
class SgdConfig:
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 20

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ContractViolation("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ContractViolation("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ContractViolation("batch_size and epochs must be positive")


def sgd_update(param, grad, lr, cfg, buffer=None, rows=None):
    """One momentum-SGD step in place; returns the new momentum buffer.

    ``p <- p - lr * (v + weight_decay * p)`` with ``v <- momentum * v + grad``.
    If ``rows`` is given only those rows of ``param`` move.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape:
        raise ContractViolation(f"gradient shape {grad.shape} does not match parameter {param.shape}")
    v = grad.copy() if buffer is None else cfg.momentum * buffer + grad
    if lr == 0:
        return v
    step = lr * (v + cfg.weight_decay * param.data) if cfg.weight_decay else lr * v
    if rows is None:
        param.data -= step
    else:
        param.data[rows] -= step[rows]
    return v


class SGD:
    """Momentum SGD over named parameter groups; buffers live as long as the optimizer."""

    def __init__(self, groups, cfg=None):
        self.groups = groups
        self.cfg = cfg or SgdConfig()
        self.buffers = {}

    def step(self, params, row_masks=None):
        row_masks = row_masks or {}
        for g in self.groups:
            for name in g.members:
                p = params[name]
                if p.grad is None:
                    continue
                buf = self.buffers.get(name)
                if buf is not None and buf.shape != p.shape:
                    buf = None
                self.buffers[name] = sgd_update(p, p.grad, g.lr, self.cfg, buf, row_masks.get(name))


def grad_norms(model, groups):
    params = model.parameters()
    out = {}
    for g in groups:
        sq = sum(float((params[n].grad ** 2).sum()) for n in g.members if params[n].grad is not None)
        out[g.name] = float(np.sqrt(sq))
    return out


# checkpoints ----------------------------------------------------------------

CHECKPOINT_FORMAT = "slowalign-checkpoint/1"


def save_checkpoint(model, path, groups=None, extra=None):
    """Write an ``.npz`` holding every parameter under its name plus a JSON ``__meta__`` entry.

    ``path`` may also be a writable binary file object.
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "sizes": model.sizes,
        "activation": model.activation,
        "head_classes": model.head_classes,
        "head_tasks": model.head_tasks,
        "adapters": {str(i): blk.linear.describe() for i, blk in enumerate(model.blocks)
                     if blk.linear.kind == "lora"},
        "groups": [{"name": g.name, "lr": g.lr, "members": g.members} for g in groups or []],
        "shapes": {n: list(p.shape) for n, p in model.parameters().items()},
        "extra": extra or {},
    }
    arrays = {n: p.data for n, p in model.parameters().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    if hasattr(path, "write"):
        np.savez(path, **arrays)
        return
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, groups, extra)``."""
    from .lora import LoRALinear

    with np.load(path) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ContractViolation(f"{path}: not a model checkpoint")
        arrays = {k: z[k].copy() for k in z.files if k != "__meta__"}
    model = build_model(meta["sizes"], meta["activation"])
    for i, blk in enumerate(model.blocks):
        pre = f"backbone.{i}"
        lin = Linear(arrays[f"{pre}.linear.weight"], arrays[f"{pre}.linear.bias"])
        info = meta["adapters"].get(str(i))
        if info is not None:
            lin = LoRALinear(lin, int(info["rank"]), arrays[f"{pre}.linear.A"], arrays[f"{pre}.linear.B"],
                             init=info.get("init", "svd"))
        blk.linear = lin
        blk.norm.gain = Tensor(arrays[f"{pre}.norm.gain"], True)
        blk.norm.shift = Tensor(arrays[f"{pre}.norm.shift"], True)
    if "head.weight" in arrays:
        model.head = Tensor(arrays["head.weight"], True)
    model.head_classes = [int(c) for c in meta["head_classes"]]
    model.head_tasks = [int(t) for t in meta["head_tasks"]]
    groups = [ParamGroup(g["name"], list(g["members"]), float(g["lr"])) for g in meta["groups"]]
    return model, groups, meta["extra"]


def clone_model(model):
    """Deep copy with fresh parameter tensors and no gradients."""
    import copy

    twin = copy.deepcopy(model)
    for p in twin.parameters().values():
        p.zero_grad()
    return twin
