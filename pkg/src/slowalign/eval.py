"""Accuracy metrics, run reports, linear probing, CKA and domain-incremental inference."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractViolation, DegenerateInputError
from .nn import SGD, ParamGroup, SgdConfig, features_numpy, forward_logits
from .numcore import RngState, Tensor, backward

from . import losses


def logits_numpy(model, x, head=None, batch_size=1024):
    x = np.asarray(x, dtype=np.float64)
    return np.vstack([forward_logits(model, x[i:i + batch_size], head).data
                      for i in range(0, len(x), batch_size)])


def argmax_by_class(logits, class_ids):
    """Predicted class id per row; ties go to the lowest class id."""
    class_ids = np.asarray(class_ids)
    order = np.argsort(class_ids, kind="stable")
    return class_ids[order][np.argmax(logits[:, order], axis=1)]


def predict(model, x, head=None):
    return argmax_by_class(logits_numpy(model, x, head), model.head_classes)


def accuracy(pred, labels):
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractViolation("accuracy of an empty set")
    return float(np.mean(np.asarray(pred) == labels))


def seen_accuracy(model, test_sets, head=None):
    """Accuracy over the union of the given test sets, without task identity."""
    if not test_sets:
        raise ContractViolation("no test sets given")
    X = np.vstack([d.inputs for d in test_sets])
    y = np.concatenate([d.labels for d in test_sets])
    return accuracy(predict(model, X, head), y)


def finalize_report(stage_acc):
    """``(last_acc, inc_acc)`` from one seen-class accuracy per stage."""
    s = [float(v) for v in stage_acc]
    if not s:
        raise ContractViolation("need at least one stage")
    return s[-1], float(np.mean(s))


@dataclass
class RunReport:
    acc_matrix: list
    seen_acc: list
    last_acc: float
    inc_acc: float
    config: dict
    fingerprint: str
    seed: int
    pre_align_seen_acc: list = field(default_factory=list)
    post_hoc_pure: bool = True
    diagnostics: dict = field(default_factory=dict)
    status: str = "ok"

    @classmethod
    def from_stages(cls, acc_matrix, seen_acc, **kw):
        last, inc = finalize_report(seen_acc)
        return cls(acc_matrix=acc_matrix, seen_acc=list(seen_acc), last_acc=last, inc_acc=inc, **kw)

    def check(self):
        """Recompute Last-Acc / Inc-Acc from the stored stages and compare exactly."""
        last, inc = finalize_report(self.seen_acc)
        for row in self.acc_matrix:
            for v in row:
                if v is not None and not 0.0 <= v <= 1.0:
                    raise ContractViolation("accuracy outside [0, 1]")
        return last == self.last_acc and inc == self.inc_acc

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def matrix_rows(self):
        """Rows are stages, columns tasks; cells for tasks not yet seen are empty."""
        T = len(self.acc_matrix)
        rows = [["stage"] + [f"task{t + 1}" for t in range(T)]]
        for s, row in enumerate(self.acc_matrix):
            rows.append([s + 1] + ["" if v is None else repr(float(v)) for v in row])
        return rows

    def write_matrix_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self.matrix_rows())


def config_fingerprint(config, seed=None):
    blob = json.dumps({"config": config, "seed": seed}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# linear probe ---------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 0.01
    epochs: int = 20
    batch_size: int = 128
    momentum: float = 0.9


def train_linear_head(features, labels, classes, cfg, rng, loss="ce", init=None, tau=0.1):
    """Fit a bias-free linear head on fixed features; returns the (C, d) weight array."""
    classes = list(classes)
    index = {c: j for j, c in enumerate(classes)}
    y = np.array([index[int(c)] for c in labels])
    d = features.shape[1]
    w = Tensor(init.copy() if init is not None else rng.normal((len(classes), d)) * 0.01, True)
    loss_fn = losses.by_name(loss, ln_cfg=losses.LogitNormConfig(tau))
    opt = SGD([ParamGroup("head", ["w"], cfg.lr)], SgdConfig(momentum=cfg.momentum, batch_size=cfg.batch_size,
                                                           epochs=cfg.epochs))
    history = []
    n = len(y)
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            w.zero_grad()
            lo = loss_fn(Tensor(features[idx]) @ w.T, y[idx])
            backward(lo)
            opt.step({"w": w})
            total += lo.item() * len(idx)
        history.append(total / n)
    return w.data.copy(), history


def linear_probe(model, train, test, cfg=ProbeConfig(), rng=None):
    """Accuracy of a fresh linear head trained jointly on frozen features of all classes."""
    rng = rng if rng is not None else RngState(0)
    classes = sorted(set(train.classes) | set(test.classes))
    ftr = features_numpy(model, train.inputs)
    fte = features_numpy(model, test.inputs)
    w, _ = train_linear_head(ftr, train.labels, classes, cfg, rng)
    return accuracy(argmax_by_class(fte @ w.T, classes), test.labels)


# CKA ---------------------------------------------------------------------------

def cka(X, Y):
    """Linear centred kernel alignment between two representations of the same n inputs."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ContractViolation(f"need matrices with equal row counts, got {X.shape} and {Y.shape}")
    if X.shape[0] < 2:
        raise ContractViolation("cka needs at least two rows")
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    nx = np.linalg.norm(Xc.T @ Xc)
    ny = np.linalg.norm(Yc.T @ Yc)
    if nx == 0 or ny == 0:
        raise DegenerateInputError("cka input has zero variance")
    return float(np.linalg.norm(Yc.T @ Xc) ** 2 / (nx * ny))


# domain-incremental --------------------------------------------------------------

def domain_average_logits(logits, head_classes):
    """Average the logits of every head block that scores the same class.

    Returns ``(averaged (n, K), class ids (K,))`` with class ids sorted.
    """
    head_classes = np.asarray(head_classes)
    classes = np.unique(head_classes)
    counts = [int((head_classes == c).sum()) for c in classes]
    if len(set(counts)) != 1:
        raise ContractViolation("domain head blocks do not cover the same class set")
    avg = np.stack([logits[:, head_classes == c].mean(axis=1) for c in classes], axis=1)
    return avg, classes


def domain_eval(model, test, head=None):
    logits = logits_numpy(model, test.inputs, head)
    avg, classes = domain_average_logits(logits, model.head_classes)
    return accuracy(argmax_by_class(avg, classes), test.labels)
