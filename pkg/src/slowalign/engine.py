"""Sequential training, class statistics and post-hoc classifier alignment."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import losses
from .data import CLASS_INCREMENTAL, DOMAIN_INCREMENTAL
from .errors import ContractViolation, NumericalFailure
from .eval import (
    ProbeConfig, RunReport, accuracy, argmax_by_class, config_fingerprint, domain_average_logits,
    logits_numpy, seen_accuracy, train_linear_head,
)
from .lora import absorb_all, attach_lora
from .nn import (
    SGD, LearningRates, ParamGroup, SgdConfig, extend_head, features_numpy, forward_features,
    grad_norms, make_groups,
)
from .numcore import RngState, Tensor, backward, sample_mvn

log = logging.getLogger(__name__)

COV_VARIANTS = ("full", "diag", "shared")


# statistics ---------------------------------------------------------------------

@dataclass
class ClassStats:
    class_id: int
    task_id: int
    count: int
    mean: np.ndarray
    cov: np.ndarray | None  # (d, d) full, (d,) diagonal, None when the store keeps a shared matrix

    def __post_init__(self):
        if self.count < 1:
            raise ContractViolation(f"class {self.class_id} has no samples")


class StatsStore:
    """Per-class mean and covariance, in one of three covariance variants.

    ``shared`` keeps a single matrix updated per class in arrival order:
    ``shared <- gamma * shared + (1 - gamma) * cov_c`` (the first class sets it).
    """

    def __init__(self, variant="full", gamma=0.9):
        if variant not in COV_VARIANTS:
            raise ContractViolation(f"unknown covariance variant {variant!r}")
        self.variant = variant
        self.gamma = float(gamma)
        self.entries = {}
        self.shared = None

    def __len__(self):
        return len(self.entries)

    def __contains__(self, class_id):
        return class_id in self.entries

    def add(self, class_id, task_id, features):
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise ContractViolation(f"class {class_id} has no samples")
        n = feats.shape[0]
        mu = feats.mean(axis=0)
        centred = feats - mu
        cov = centred.T @ centred / n
        cov = 0.5 * (cov + cov.T)
        self.add_stats(class_id, task_id, n, mu, cov)

    def add_stats(self, class_id, task_id, count, mu, cov):
        if self.variant == "diag":
            payload = np.diag(cov).copy() if cov.ndim == 2 else cov
        elif self.variant == "full":
            payload = cov
        else:
            payload = None
            self.shared = cov.copy() if self.shared is None else self.gamma * self.shared + (1.0 - self.gamma) * cov
        self.entries[int(class_id)] = ClassStats(int(class_id), int(task_id), int(count), mu, payload)

    def covariance(self, class_id):
        st = self.entries[class_id]
        return self.shared if self.variant == "shared" else st.cov

    def to_dict(self):
        return {
            "format": "slowalign-stats/1",
            "variant": self.variant,
            "gamma": self.gamma,
            "shared": None if self.shared is None else self.shared.tolist(),
            "classes": [
                {"id": s.class_id, "task": s.task_id, "count": s.count, "mean": s.mean.tolist(),
                 "cov": None if s.cov is None else s.cov.tolist()}
                for s in self.entries.values()
            ],
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, d):
        store = cls(d["variant"], d["gamma"])
        store.shared = None if d["shared"] is None else np.array(d["shared"], dtype=np.float64)
        for e in d["classes"]:
            cov = None if e["cov"] is None else np.array(e["cov"], dtype=np.float64)
            store.entries[int(e["id"])] = ClassStats(int(e["id"]), int(e["task"]), int(e["count"]),
                                                     np.array(e["mean"], dtype=np.float64), cov)
        return store

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def collect_stats(model, dataset, store, task_id, classes=None):
    """Add one entry per class of ``dataset`` using the current backbone."""
    feats = features_numpy(model, dataset.inputs)
    classes = dataset.classes if classes is None else classes
    for c in classes:
        mask = dataset.labels == c
        if not mask.any():
            raise ContractViolation(f"class {c} has no samples in the task")
        store.add(c, task_id, feats[mask])


def mean_scale(task_id, current_task, eta):
    return 1.0 / (1.0 + eta * (current_task - task_id))


def scale_means(store, current_task, eta):
    """Scaled copies ``lambda_t * mu_c`` keyed by class id; the store is not modified."""
    out = {}
    for c, s in store.entries.items():
        if s.task_id > current_task:
            raise ContractViolation(f"class {c} belongs to future task {s.task_id}")
        out[c] = mean_scale(s.task_id, current_task, eta) * s.mean
    return out


# training --------------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 64
    momentum: float = 0.9


def _minibatches(n, batch_size, rng):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def pretrain_backbone(model, dataset, cfg=PretrainConfig(), rng=None):
    """Joint CE training on the pre-training set through a temporary head, then drop the head."""
    if dataset is None or len(dataset) == 0:
        raise ContractViolation("empty pre-training set")
    if model.head is not None:
        raise ContractViolation("pretrain_backbone expects a headless model")
    rng = rng if rng is not None else RngState(0)
    classes = dataset.classes
    extend_head(model, classes, 0, rng.spawn("pretrain-head"))
    index = model.class_index()
    y = np.array([index[c] for c in dataset.labels])
    opt = SGD([ParamGroup("all", list(model.parameters()), cfg.lr)], SgdConfig(momentum=cfg.momentum))
    params = model.parameters()
    history = []
    for _ in range(cfg.epochs):
        total = 0.0
        for idx in _minibatches(len(y), cfg.batch_size, rng):
            model.zero_grad()
            feats = forward_features(model, dataset.inputs[idx])
            lo = losses.ce(feats @ model.head.T, y[idx])
            backward(lo)
            opt.step(params)
            total += lo.item() * len(idx)
        history.append(total / len(y))
    model.head, model.head_classes, model.head_tasks = None, [], []
    model.zero_grad()
    return history


@dataclass
class TrainLog:
    task_id: int
    epoch_loss: list = field(default_factory=list)
    epoch_acc: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)


def _mask_rows(head, rows):
    keep = np.zeros(head.shape[0], dtype=bool)
    keep[rows] = True
    head.grad[~keep] = 0.0


def train_task(model, dataset, groups, task_id, loss="sce", cfg=SgdConfig(), rng=None,
               sce_cfg=losses.SceConfig(), logit_scope="all"):
    """Fit the model on one task; only the head rows of ``task_id`` receive updates.

    ``logit_scope="all"`` takes the softmax over every registered head row and
    zeroes the gradient of rows from other tasks; ``"task"`` restricts the
    logits to the current task's rows.
    """
    if logit_scope not in ("all", "task"):
        raise ContractViolation(f"unknown logit_scope {logit_scope!r}")
    if dataset is None or len(dataset) == 0:
        raise ContractViolation("empty task")
    rng = rng if rng is not None else RngState(0)
    rows = model.task_rows(task_id)
    if rows.size == 0:
        raise ContractViolation(f"head has no rows for task {task_id}")
    if logit_scope == "all":
        local = {int(model.head_classes[r]): int(r) for r in rows}
    else:
        local = {int(model.head_classes[r]): j for j, r in enumerate(rows)}
    try:
        y = np.array([local[int(c)] for c in dataset.labels])
    except KeyError as exc:
        raise ContractViolation(f"label {exc.args[0]} has no head row in task {task_id}") from None
    loss_fn = losses.by_name(loss, sce_cfg=sce_cfg)
    opt = SGD(groups, cfg)
    params = model.parameters()
    masks = {"head.weight": rows}
    out = TrainLog(task_id)
    n = len(y)
    for _ in range(cfg.epochs):
        total, correct = 0.0, 0
        norms = {g.name: 0.0 for g in groups}
        steps = 0
        for idx in _minibatches(n, cfg.batch_size, rng):
            model.zero_grad()
            feats = forward_features(model, dataset.inputs[idx])
            if logit_scope == "all":
                logits = feats @ model.head.T
            else:
                logits = feats @ model.head[rows].T
            lo = loss_fn(logits, y[idx])
            backward(lo)
            _mask_rows(model.head, rows)
            for k, v in grad_norms(model, groups).items():
                norms[k] += v
            opt.step(params, masks)
            total += lo.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
            steps += 1
        out.epoch_loss.append(total / n)
        out.epoch_acc.append(correct / n)
        out.grad_norms.append({k: v / steps for k, v in norms.items()})
    return out


# alignment ---------------------------------------------------------------------

@dataclass(frozen=True)
class AlignConfig:
    samples_per_class: int = 256
    tau: float = 0.1
    eta: float = 0.02
    epochs: int = 25
    lr: float = 0.01
    batch_size: int = 128
    momentum: float = 0.9

    def __post_init__(self):
        if self.samples_per_class < 1:
            raise ContractViolation("samples_per_class must be >= 1")
        if self.eta < 0:
            raise ContractViolation("eta must be >= 0")
        losses.LogitNormConfig(self.tau)


@dataclass
class AlignResult:
    head: np.ndarray
    epoch_loss: list


def generate_features(store, classes, current_task, cfg, rng):
    """Balanced, globally shuffled draws from N(lambda_t * mu_c, cov_c) for each class."""
    means = scale_means(store, current_task, cfg.eta)
    X, y = [], []
    for c in classes:
        try:
            X.append(sample_mvn(means[c], store.covariance(c), cfg.samples_per_class, rng))
        except NumericalFailure as exc:
            raise NumericalFailure(f"class {c}: {exc}") from exc
        y.append(np.full(cfg.samples_per_class, c))
    X, y = np.vstack(X), np.concatenate(y)
    perm = rng.permutation(len(y))
    return X[perm], y[perm]


def align_classifier(model, store, cfg=AlignConfig(), rng=None, current_task=None, loss="ln"):
    """Retrain a copy of the head on features sampled from the stored class statistics.

    The model (backbone and head) is left untouched; the aligned weights are returned.
    ``loss="ce"`` disables logit normalisation.
    """
    rng = rng if rng is not None else RngState(0)
    if model.head is None:
        raise ContractViolation("model has no head to align")
    missing = [c for c in model.head_classes if c not in store]
    if missing:
        raise ContractViolation(f"no statistics for classes {missing}")
    if current_task is None:
        current_task = max(s.task_id for s in store.entries.values())
    classes = list(model.head_classes)
    X, y = generate_features(store, classes, current_task, cfg, rng)
    w, history = train_linear_head(
        X, y, classes, ProbeConfig(cfg.lr, cfg.epochs, cfg.batch_size, cfg.momentum), rng,
        loss="ln" if loss == "ln" else "ce", init=model.head.data, tau=cfg.tau)
    return AlignResult(w, history)


def backbone_digest(model):
    h = hashlib.sha256()
    for name, p in sorted(model.backbone_parameters().items()):
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


# full runs ---------------------------------------------------------------------

MODES = {
    "seqft": ("seqft", "ce", None),
    "fixed": ("fixed", "ce", None),
    "fixed+ca+ln": ("fixed", "ce", "ln"),
    "sl": ("sl", "ce", None),
    "sl+ca": ("sl", "ce", "ce"),
    "sl+ca+ln": ("sl", "ce", "ln"),
    "sl+sce": ("sl", "sce", None),
    "sl+sce+ca+ln": ("sl", "sce", "ln"),
    "hybrid": ("hybrid", "sce", None),
    "hybrid+ca+ln": ("hybrid", "sce", "ln"),
}


def parse_mode(mode):
    """``(group mode, training loss, alignment loss or None)`` for a named ablation cell.

    ``subset:<name>`` and ``subset:<name>+ca+ln`` train only one named parameter subset.
    """
    if mode in MODES:
        return MODES[mode]
    if mode.startswith("subset:"):
        base, _, rest = mode.partition("+")
        return base, "sce" if "sce" in rest else "ce", "ln" if rest.endswith("ca+ln") else ("ce" if "ca" in rest else None)
    raise ContractViolation(f"unknown mode {mode!r}; choose from {sorted(MODES)} or subset:<name>")


@dataclass
class RunConfig:
    mode: str = "sl+sce+ca+ln"
    sgd: SgdConfig = field(default_factory=SgdConfig)
    lrs: LearningRates = field(default_factory=LearningRates)
    sce: losses.SceConfig = field(default_factory=losses.SceConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    covariance: str = "full"
    gamma: float = 0.9
    lora_rank: int = 4
    lora_init: str = "svd"
    lora_layers: object = "all"
    logit_scope: str = "all"
    align_every_stage: bool = True

    def __post_init__(self):
        parse_mode(self.mode)
        if self.covariance not in COV_VARIANTS:
            raise ContractViolation(f"unknown covariance variant {self.covariance!r}")

    def to_dict(self):
        return asdict(self)


def _head_logits(model, x, head):
    return logits_numpy(model, x, head)


def _evaluate_stage(model, stream, stage, head, domain):
    tests = [t.test for t in stream.tasks[:stage]]
    row = []
    for t in stream.tasks[:stage]:
        lg = _head_logits(model, t.test.inputs, head)
        if domain:
            avg, cls = domain_average_logits(lg, model.head_classes)
            row.append(accuracy(argmax_by_class(avg, cls), t.test.labels))
        else:
            row.append(accuracy(argmax_by_class(lg, model.head_classes), t.test.labels))
    if domain:
        X = np.vstack([d.inputs for d in tests])
        y = np.concatenate([d.labels for d in tests])
        avg, cls = domain_average_logits(_head_logits(model, X, head), model.head_classes)
        seen = accuracy(argmax_by_class(avg, cls), y)
    else:
        seen = seen_accuracy(model, tests, head)
    return row, seen


def run_sequence(stream, model, cfg=RunConfig(), seed=0, on_stage=None, config_for_fingerprint=None):
    """Train through every task of ``stream`` and evaluate after each stage.

    ``model`` should already carry a (pre-trained) headless backbone and is
    modified in place. ``on_stage(stage, model, aligned_head_or_None, store)`` is
    called after each evaluation.
    """
    group_mode, train_loss, align_loss = parse_mode(cfg.mode)
    domain = stream.scenario == DOMAIN_INCREMENTAL
    if domain:
        align_loss = None  # the class set is fixed; heads are averaged instead
    rng = RngState(seed)
    fp_config = config_for_fingerprint if config_for_fingerprint is not None else cfg.to_dict()
    if group_mode == "hybrid" or group_mode == "subset:lora":
        attach_lora(model, cfg.lora_layers, cfg.lora_rank, rng.spawn("lora"), cfg.lora_init)
    store = StatsStore(cfg.covariance, cfg.gamma)
    T = len(stream)
    matrix = [[None] * T for _ in range(T)]
    seen_acc, pre_align, logs = [], [], []
    pure = True
    status = "ok"
    try:
        for stage, task in enumerate(stream.tasks, start=1):
            extend_head(model, task.classes, stage, rng.spawn(f"head-{stage}"), allow_repeat=domain)
            groups = make_groups(model, group_mode, cfg.lrs)
            tl = train_task(model, task.train, groups, stage, train_loss, cfg.sgd, rng.spawn(f"train-{stage}"), cfg.sce,
                            cfg.logit_scope)
            logs.append({"task": stage, "loss": tl.epoch_loss, "acc": tl.epoch_acc,
                         "grad_norms": tl.grad_norms[-1]})
            if not domain:
                collect_stats(model, task.train, store, stage, task.classes)
            row, seen = _evaluate_stage(model, stream, stage, None, domain)
            pre_align.append(seen)
            head = None
            if align_loss and (cfg.align_every_stage or stage == T):
                before = backbone_digest(model)
                res = align_classifier(model, store, cfg.align, rng.spawn(f"align-{stage}"), stage, align_loss)
                pure &= backbone_digest(model) == before
                head = res.head
                row, seen = _evaluate_stage(model, stream, stage, head, domain)
            matrix[stage - 1][:stage] = row
            seen_acc.append(seen)
            log.info("stage %d/%d seen-acc %.4f", stage, T, seen)
            if on_stage is not None:
                on_stage(stage, model, head, store)
    except Exception as exc:  # partial report with failure marker
        status = f"failed: {type(exc).__name__}: {exc}"
        log.error("run failed at stage %d: %s", len(seen_acc) + 1, exc)
        if not seen_acc:
            raise
    diagnostics = {"train_logs": logs}
    if group_mode in ("hybrid", "subset:lora") and status == "ok":
        probe_x = stream.tasks[-1].test.inputs[:64]
        before = _head_logits(model, probe_x, None)
        absorb_all(model)
        diagnostics["absorb_max_abs_diff"] = float(np.abs(_head_logits(model, probe_x, None) - before).max())
    report = RunReport.from_stages(
        matrix[:len(seen_acc)] if status != "ok" else matrix, seen_acc,
        config=fp_config, fingerprint=config_fingerprint(fp_config, seed), seed=seed,
        pre_align_seen_acc=pre_align, post_hoc_pure=pure, diagnostics=diagnostics, status=status)
    return report
