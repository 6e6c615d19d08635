"""Classification losses over logit tensors.

Labels are integer column indices into the logit matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DegenerateInputError
from .numcore import Tensor, as_tensor, l2_norm, log_softmax, mean, softmax


@dataclass(frozen=True)
class SceConfig:
    alpha: float = 0.5
    beta: float = 0.5
    log_zero_clip: float = 4.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or not self.alpha + self.beta > 0:
            raise ContractViolation("SCE weights must be non-negative with a positive sum")
        if not self.log_zero_clip > 0:
            raise ContractViolation("log_zero_clip must be positive")


@dataclass(frozen=True)
class LogitNormConfig:
    tau: float = 0.1

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractViolation("tau must be positive")


def _check_labels(logits, labels):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or labels.shape[0] != logits.shape[0]:
        raise ContractViolation(f"labels of length {labels.shape[0]} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractViolation(f"labels must lie in [0, {logits.shape[1]})")
    return labels


def _one_hot(labels, width):
    q = np.zeros((labels.shape[0], width))
    q[np.arange(labels.shape[0]), labels] = 1.0
    return q


def ce(logits, labels):
    """Mean softmax cross-entropy."""
    logits = as_tensor(logits)
    labels = _check_labels(logits, labels)
    logp = log_softmax(logits)
    picked = (logp * _one_hot(labels, logits.shape[1])).sum(axis=1)
    return -mean(picked)


def logit_norm_ce(logits, labels, cfg=LogitNormConfig()):
    """Cross-entropy on each row's logits divided by ``tau * ||row||``."""
    logits = as_tensor(logits)
    labels = _check_labels(logits, labels)
    norms = l2_norm(logits, axis=1)
    if (norms.data == 0).any():
        raise DegenerateInputError("logit_norm_ce got a zero-norm logit row")
    return ce(logits / (norms * cfg.tau), labels)


def rce(logits, labels, clip=4.0):
    """Reverse cross-entropy with ``log 0`` replaced by ``-clip``: ``clip * (1 - p_y)``."""
    logits = as_tensor(logits)
    labels = _check_labels(logits, labels)
    p = softmax(logits)
    p_y = (p * _one_hot(labels, logits.shape[1])).sum(axis=1)
    return mean((1.0 - p_y) * clip)


def sce(logits, labels, cfg=SceConfig()):
    """``alpha * CE + beta * RCE``."""
    logits = as_tensor(logits)
    loss = ce(logits, labels) * cfg.alpha
    if cfg.beta:
        loss = loss + rce(logits, labels, cfg.log_zero_clip) * cfg.beta
    return loss


def by_name(name, sce_cfg=SceConfig(), ln_cfg=LogitNormConfig()):
    if name == "ce":
        return ce
    if name == "sce":
        return lambda lg, y: sce(lg, y, sce_cfg)
    if name in ("ln", "logit_norm"):
        return lambda lg, y: logit_norm_ce(lg, y, ln_cfg)
    raise ContractViolation(f"unknown loss {name!r}")


__all__ = ["SceConfig", "LogitNormConfig", "ce", "logit_norm_ce", "rce", "sce", "by_name", "Tensor"]
