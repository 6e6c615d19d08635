"""Desk-scale benchmark: a pre-training set and a downstream task stream sharing one input warp.

All data are Gaussian mixtures in a latent space pushed through a fixed random
tanh network. Pre-training classes are drawn around a shifted mean field, so the
downstream classes are new. ``fine`` packs downstream classes closer together
with several sub-clusters per class.
"""
from __future__ import annotations

from dataclasses import dataclass

from .data import Dataset, Warp, make_synthetic, split_class_incremental
from .errors import ContractViolation
from .nn import build_model
from .numcore import RngState

PRESETS = {
    "coarse": dict(separation=1.6, clusters_per_class=1),
    "fine": dict(separation=1.2, clusters_per_class=2),
}


@dataclass(frozen=True)
class BenchmarkSpec:
    kind: str = "coarse"
    tasks: int = 10
    classes_per_task: int = 2
    d_in: int = 24
    latent_dim: int = 8
    n_train: int = 100
    n_test: int = 100
    pretrain_classes: int = 40
    pretrain_n: int = 60
    pretrain_shift: float = 0.5
    hidden: tuple = (64,)
    feature_dim: int = 16
    separation: float | None = None
    clusters_per_class: int | None = None

    def __post_init__(self):
        if self.kind not in PRESETS:
            raise ContractViolation(f"unknown benchmark kind {self.kind!r}")


@dataclass
class Benchmark:
    pretrain: Dataset
    pretrain_test: Dataset
    stream: object
    spec: BenchmarkSpec

    def model_sizes(self):
        return [self.spec.d_in, *self.spec.hidden, self.spec.feature_dim]

    def new_model(self, seed):
        return build_model(self.model_sizes(), "gelu", RngState(seed).spawn("model"))


def synthetic_benchmark(spec=BenchmarkSpec(), seed=0):
    preset = dict(PRESETS[spec.kind])
    if spec.separation is not None:
        preset["separation"] = spec.separation
    if spec.clusters_per_class is not None:
        preset["clusters_per_class"] = spec.clusters_per_class
    warp = Warp.random(spec.latent_dim, spec.d_in, seed)
    classes = spec.tasks * spec.classes_per_task
    train, test = make_synthetic(classes, spec.d_in, preset["clusters_per_class"], preset["separation"],
                                 spec.n_train, spec.n_test, seed=RngState(seed).spawn("downstream").seed,
                                 latent_dim=spec.latent_dim, warp=warp)
    pt_train, pt_test = make_synthetic(spec.pretrain_classes, spec.d_in, 1, 1.6, spec.pretrain_n, spec.pretrain_n // 2,
                                       seed=RngState(seed).spawn("pretrain").seed, latent_dim=spec.latent_dim,
                                       warp=warp, label_offset=1000, shift=spec.pretrain_shift)
    stream = split_class_incremental(train, test, spec.tasks, seed)
    return Benchmark(pt_train, pt_test, stream, spec)
