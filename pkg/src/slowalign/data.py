"""Datasets, synthetic generators and task streams."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, ParseError
from .numcore import RngState

CLASS_INCREMENTAL = "class-incremental"
DOMAIN_INCREMENTAL = "domain-incremental"


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    domains: np.ndarray | None = None
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.inputs.ndim != 2 or self.inputs.shape[0] == 0:
            raise ContractViolation("dataset needs a non-empty 2-d input matrix")
        if self.labels.shape[0] != self.inputs.shape[0]:
            raise ContractViolation("labels and inputs differ in length")
        if self.domains is not None:
            self.domains = np.asarray(self.domains, dtype=np.int64).reshape(-1)
            if self.domains.shape[0] != self.inputs.shape[0]:
                raise ContractViolation("domains and inputs differ in length")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def classes(self):
        return sorted(int(c) for c in np.unique(self.labels))

    def subset(self, mask):
        mask = np.asarray(mask)
        return Dataset(self.inputs[mask], self.labels[mask],
                       None if self.domains is None else self.domains[mask], self.split)


@dataclass
class Task:
    train: Dataset
    test: Dataset
    classes: list
    domain: int | None = None


@dataclass
class TaskStream:
    scenario: str
    tasks: list = field(default_factory=list)

    def __post_init__(self):
        if self.scenario not in (CLASS_INCREMENTAL, DOMAIN_INCREMENTAL):
            raise ContractViolation(f"unknown scenario {self.scenario!r}")
        self.audit()

    def __len__(self):
        return len(self.tasks)

    def audit(self):
        sets = [set(t.classes) for t in self.tasks]
        if self.scenario == CLASS_INCREMENTAL:
            seen = set()
            for s in sets:
                if s & seen:
                    raise ContractViolation("class-incremental tasks must have disjoint class sets")
                seen |= s
        elif sets and any(s != sets[0] for s in sets):
            raise ContractViolation("domain-incremental tasks must share one class set")

    @property
    def all_classes(self):
        out = []
        for t in self.tasks:
            out += [c for c in t.classes if c not in out]
        return out


# synthetic data ---------------------------------------------------------------

@dataclass(frozen=True)
class Warp:
    """Fixed random two-layer tanh map from a latent space to input space."""
    W1: np.ndarray
    W2: np.ndarray

    @classmethod
    def random(cls, latent_dim, d_in, seed, hidden=None):
        rng = RngState(seed).spawn("warp")
        hidden = hidden or 2 * d_in
        W1 = rng.normal((latent_dim, hidden)) * (1.5 / np.sqrt(latent_dim))
        W2 = rng.normal((hidden, d_in)) / np.sqrt(hidden)
        return cls(W1, W2)

    def __call__(self, z):
        return np.tanh(z @ self.W1) @ self.W2


def class_means(classes, dim, clusters_per_class, separation, rng, spread=0.5, shift=0.0):
    """Cluster centres of shape (classes, clusters, dim), all scaled by ``separation``."""
    base = rng.normal((classes, 1, dim))
    sub = rng.normal((classes, clusters_per_class, dim)) * spread if clusters_per_class > 1 else 0.0
    return separation * (base + sub) + shift


def sample_mixture(means, n_per_class, rng, noise=1.0, label_offset=0):
    classes, clusters, dim = means.shape
    z, y = [], []
    for c in range(classes):
        pick = rng.integers(clusters, n_per_class)
        z.append(means[c, pick] + rng.normal((n_per_class, dim)) * noise)
        y.append(np.full(n_per_class, c + label_offset))
    return np.vstack(z), np.concatenate(y)


def make_synthetic(classes, d_in, clusters_per_class=1, separation=3.0, n_train=100, n_test=100, seed=0,
                   *, latent_dim=None, warp=None, noise=1.0, label_offset=0, shift=0.0):
    """Gaussian-mixture classification data; returns ``(train, test)``.

    ``n_train``/``n_test`` are per class. With ``warp`` the mixture lives in a
    ``latent_dim`` space and inputs are ``warp(z)``; otherwise ``latent_dim = d_in``.
    """
    if min(classes, d_in, clusters_per_class, n_train, n_test) < 1:
        raise ContractViolation("all counts must be positive")
    rng = RngState(seed)
    dim = latent_dim or d_in
    if warp is None and dim != d_in:
        raise ContractViolation("latent_dim differs from d_in but no warp is given")
    means = class_means(classes, dim, clusters_per_class, separation, rng.spawn("means"), shift=shift)
    ztr, ytr = sample_mixture(means, n_train, rng.spawn("train"), noise, label_offset)
    zte, yte = sample_mixture(means, n_test, rng.spawn("test"), noise, label_offset)
    if warp is not None:
        ztr, zte = warp(ztr), warp(zte)
    return Dataset(ztr, ytr, split="train"), Dataset(zte, yte, split="test")


# CSV ------------------------------------------------------------------------

def load_csv(path, classes=None, split="train"):
    """Read ``label[,domain],x0,x1,...``; labels and domains are integers."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ContractViolation(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "label":
        raise ParseError("header must start with 'label'", path, 1)
    has_domain = len(header) > 1 and header[1] == "domain"
    feat = header[2:] if has_domain else header[1:]
    if not feat or any(h != f"x{i}" for i, h in enumerate(feat)):
        raise ParseError("feature columns must be named x0, x1, ...", path, 1)
    width = len(header)
    known = None if classes is None else {int(c) for c in classes}
    X, y, dom = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != width:
            raise ParseError(f"expected {width} columns, got {len(row)}", path, lineno)
        try:
            label = int(row[0])
            d = int(row[1]) if has_domain else None
            vals = [float(c) for c in row[(2 if has_domain else 1):]]
        except ValueError as exc:
            raise ParseError(f"non-numeric cell ({exc})", path, lineno) from None
        if known is not None and label not in known:
            raise ParseError(f"unknown label {label}", path, lineno)
        X.append(vals)
        y.append(label)
        dom.append(d)
    if not X:
        raise ContractViolation(f"{path}: no data rows")
    return Dataset(np.array(X), np.array(y), np.array(dom) if has_domain else None, split)


def write_csv(dataset, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        has_domain = dataset.domains is not None
        w.writerow(["label"] + (["domain"] if has_domain else []) + [f"x{i}" for i in range(dataset.inputs.shape[1])])
        for i in range(len(dataset)):
            lead = [int(dataset.labels[i])] + ([int(dataset.domains[i])] if has_domain else [])
            w.writerow(lead + [repr(float(v)) for v in dataset.inputs[i]])


# streams --------------------------------------------------------------------

def split_class_incremental(train, test, T, seed=0):
    """Randomly partition classes into ``T`` disjoint tasks.

    When the class count is not divisible by ``T`` the earliest tasks take one extra class.
    """
    classes = train.classes
    if T < 1 or T > len(classes):
        raise ContractViolation(f"cannot split {len(classes)} classes into {T} tasks")
    order = [classes[i] for i in RngState(seed).spawn("class-split").permutation(len(classes))]
    base, extra = divmod(len(classes), T)
    tasks, start = [], 0
    for t in range(T):
        size = base + (1 if t < extra else 0)
        cs = order[start:start + size]
        start += size
        tasks.append(Task(train.subset(np.isin(train.labels, cs)), test.subset(np.isin(test.labels, cs)), cs))
    return TaskStream(CLASS_INCREMENTAL, tasks)


def split_domain_incremental(domains):
    """One task per ``(train, test)`` domain pair, in the given order."""
    if not domains:
        raise ContractViolation("need at least one domain")
    universe = domains[0][0].classes
    tasks = []
    for d, (tr, te) in enumerate(domains):
        if tr.classes != universe or not set(te.classes) <= set(universe):
            raise ContractViolation(f"domain {d} does not share the class universe of domain 0")
        tasks.append(Task(tr, te, list(universe), domain=d))
    return TaskStream(DOMAIN_INCREMENTAL, tasks)


def load_manifest(path):
    """Build a stream from a JSON/YAML manifest.

    Format::

        scenario: class-incremental | domain-incremental
        tasks:
          - {train: a.csv, test: a_test.csv, classes: [0, 1]}   # classes optional
        pretrain: {train: pt.csv}                               # optional

    Relative paths resolve against the manifest's directory.
    Returns ``(stream, pretrain_dataset_or_None)``.
    """
    import yaml

    path = Path(path)
    spec = yaml.safe_load(path.read_text(encoding="utf-8"))
    if not isinstance(spec, dict) or "tasks" not in spec:
        raise ParseError("manifest must be a mapping with a 'tasks' list", path)
    root = path.parent
    scenario = spec.get("scenario", CLASS_INCREMENTAL)
    tasks = []
    for i, t in enumerate(spec["tasks"]):
        classes = t.get("classes")
        tr = load_csv(root / t["train"], classes, "train")
        te = load_csv(root / t["test"], classes, "test")
        tasks.append(Task(tr, te, list(classes) if classes else tr.classes,
                          domain=i if scenario == DOMAIN_INCREMENTAL else None))
    pre = None
    if spec.get("pretrain"):
        pre = load_csv(root / spec["pretrain"]["train"], None, "train")
    return TaskStream(scenario, tasks), pre


def write_manifest(stream, directory, pretrain=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, t in enumerate(stream.tasks):
        write_csv(t.train, directory / f"task{i}_train.csv")
        write_csv(t.test, directory / f"task{i}_test.csv")
        entries.append({"train": f"task{i}_train.csv", "test": f"task{i}_test.csv",
                        "classes": [int(c) for c in t.classes]})
    spec = {"scenario": stream.scenario, "tasks": entries}
    if pretrain is not None:
        write_csv(pretrain, directory / "pretrain.csv")
        spec["pretrain"] = {"train": "pretrain.csv"}
    out = directory / "manifest.json"
    out.write_text(json.dumps(spec, indent=2), encoding="utf-8")
    return out
