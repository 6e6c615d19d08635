"""Acceptance suite: one test per criterion, each recorded as a pass/fail line in the terminal summary.

Trend criteria (6 to 9, 11) share one set of 5-seed runs built once per session.
"""
import math
import time

import numpy as np
import pytest

from conftest import criterion
from gradcheck import max_rel_error
from slowalign.cli import build_experiment
from slowalign.config import parse_config
from slowalign.data import Dataset
from slowalign.engine import AlignConfig, StatsStore, generate_features, mean_scale, run_sequence, train_task
from slowalign.eval import ProbeConfig, RunReport, cka, finalize_report, linear_probe
from slowalign.lora import LoRALinear, absorb_all, adapters, attach_lora
from slowalign.losses import LogitNormConfig, SceConfig, ce, logit_norm_ce, rce, sce
from slowalign.nn import (
    ACTIVATIONS, Block, LayerNorm, LearningRates, Linear, build_model, clone_model, extend_head, forward_logits,
    make_groups,
)
from slowalign.numcore import RngState, Tensor
from slowalign.numcore.tensor import l2_norm

SEEDS = (0, 1, 2, 3, 4)
INSTANCES = 20


def _median(values):
    return float(np.median(values))


# 1. gradient oracle ----------------------------------------------------------------------------------

def _linear(x, w, b):
    return (Linear(w, b)(x) ** 2).sum()


def _layer_norm(x, g, s):
    ln = LayerNorm(x.shape[1])
    ln.gain, ln.shift = g, s
    return (ln(x) * Tensor(np.linspace(-1, 1, x.data.size).reshape(x.shape))).sum()


def _block(activation):
    def fn(x, w, b, g, s):
        blk = Block(Linear(w, b), activation)
        blk.norm.gain, blk.norm.shift = g, s
        out = blk(x)
        return (out * Tensor(np.linspace(-1, 1, out.data.size).reshape(out.shape))).sum()
    return fn


def _lora(x, w, b, a, bb):
    ad = LoRALinear(Linear(w, b), a.shape[0], a, bb)
    return (ad(x) ** 2).sum()


def _head(f, w):
    return ce(f @ w.T, [0, 1, 2, 0, 1])


LAYER_CASES = {
    "linear": (_linear, [(5, 4), (3, 4), (3,)]),
    "layer_norm": (_layer_norm, [(5, 6), (6,), (6,)]),
    **{f"block[{a}]": (_block(a), [(5, 4), (6, 4), (6,), (6,), (6,)]) for a in (*sorted(ACTIVATIONS), None)},
    "lora_linear": (_lora, [(5, 4), (3, 4), (3,), (2, 4), (3, 2)]),
    "head": (_head, [(5, 4), (3, 4)]),
}

LOSS_CASES = {
    "ce": lambda lg, y: ce(lg, y),
    "logit_norm_ce": lambda lg, y: logit_norm_ce(lg, y, LogitNormConfig(0.1)),
    "rce": lambda lg, y: rce(lg, y, 4.0),
    "sce": lambda lg, y: sce(lg, y, SceConfig(0.5, 0.5)),
}


def _model_case(rng):
    """Whole-model loss as a function of every weight, through two blocks and the head."""
    m = build_model((4, 5, 3), "gelu", RngState(int(rng.integers(2**31))))
    extend_head(m, [0, 1, 2], 1, RngState(int(rng.integers(2**31))))
    slots = []
    for blk in m.blocks:
        slots += [(blk.linear, "weight"), (blk.linear, "bias"), (blk.norm, "gain"), (blk.norm, "shift")]
    slots.append((m, "head"))
    assert [getattr(o, a) for o, a in slots] == list(m.parameters().values())
    x = rng.uniform(-1, 1, (6, 4))
    y = rng.integers(0, 3, 6)

    def fn(*ts):
        for (owner, attr), t in zip(slots, ts):
            setattr(owner, attr, t)
        return ce(forward_logits(m, x), y)

    return fn, [getattr(o, a).data.copy() for o, a in slots]


def test_criterion_01_gradient_oracle():
    with criterion(1, "finite-difference gradient oracle, every layer and loss") as notes:
        start = time.perf_counter()
        rng = np.random.default_rng(2024)
        worst = {}
        for name, (fn, shapes) in LAYER_CASES.items():
            errs = []
            for _ in range(INSTANCES):
                arrays = [rng.uniform(-1, 1, s) for s in shapes]
                if name == "layer_norm" or name.startswith("block"):
                    arrays[-2] = rng.uniform(0.5, 1.5, shapes[-2])
                errs.append(max_rel_error(fn, arrays))
            worst[name] = max(errs)
        for name, fn in LOSS_CASES.items():
            errs = []
            for _ in range(INSTANCES):
                lg = rng.uniform(-2, 2, (6, 4))
                y = rng.integers(0, 4, 6)
                errs.append(max_rel_error(lambda t: fn(t, y), [lg]))
            worst[name] = max(errs)
        errs = []
        for _ in range(INSTANCES):
            fn, arrays = _model_case(rng)
            errs.append(max_rel_error(fn, arrays))
        worst["model"] = max(errs)
        elapsed = time.perf_counter() - start
        notes.append(f"worst rel err {max(worst.values()):.2e} over {len(worst)} cases x {INSTANCES}")
        bad = {k: v for k, v in worst.items() if not v < 1e-5}
        assert not bad, bad
        assert elapsed < 120


# 2. LoRA identity and absorption -----------------------------------------------------------------------

def test_criterion_02_lora_identity_and_absorb():
    with criterion(2, "LoRA identity at SVD init, absorb within 1e-10, A A^T = I") as notes:
        bench_cfg = parse_config({"stream": {"tasks": 2, "n_train": 40, "n_test": 20, "pretrain_n": 20},
                                  "model": {"pretrain_epochs": 3}, "seeds": [0]})
        stream, model = build_experiment(bench_cfg, 0)
        extend_head(model, stream.tasks[0].classes, 1, RngState(1))
        rng = np.random.default_rng(0)
        x = rng.normal(size=(64, model.input_dim))
        before = forward_logits(model, x).data.tobytes()
        ads = attach_lora(model, "all", 4)
        assert forward_logits(model, x).data.tobytes() == before
        orth = max(float(np.abs(a.A.data @ a.A.data.T - np.eye(4)).max()) for a in ads)
        assert orth < 1e-8

        groups = make_groups(model, "hybrid", LearningRates(hybrid=0.01))
        train_task(model, stream.tasks[0].train, groups, 1, "sce", rng=RngState(2))
        assert any(np.abs(a.B.data).max() > 0 for a in adapters(model))
        batches = [rng.normal(size=(16, model.input_dim)) for _ in range(100)]
        adapted = [forward_logits(model, b).data for b in batches]
        absorb_all(model)
        diff = max(float(np.abs(forward_logits(model, b).data - a).max()) for b, a in zip(batches, adapted))
        notes.append(f"A A^T err {orth:.1e}; absorb diff {diff:.1e}")
        assert diff < 1e-10


# 3. logit-normalised CE ---------------------------------------------------------------------------------

def test_criterion_03_logit_norm_properties():
    with criterion(3, "logit-norm CE scale invariance, argmax, worked value") as notes:
        rng = np.random.default_rng(3)
        lg = rng.normal(size=(64, 7))
        y = rng.integers(0, 7, 64)
        base = logit_norm_ce(lg, y).item()
        drift = max(abs(logit_norm_ce(lg * c, y).item() - base) for c in (1e-3, 0.5, 2.0, 17.0, 1e3))
        assert drift < 1e-12

        rows = rng.normal(size=(10_000, 9))
        t = Tensor(rows)
        normed = (t / (l2_norm(t, axis=1) * 0.1)).data
        assert np.array_equal(rows.argmax(axis=1), normed.argmax(axis=1))

        worked = logit_norm_ce(np.array([[3.0, 4.0]]), [1], LogitNormConfig(0.1)).item()
        expected = math.log1p(math.exp(-2.0))
        notes.append(f"scale drift {drift:.1e}; worked {worked:.12f} vs {expected:.12f}")
        assert abs(worked - expected) < 1e-9


# 4. mean-scaling schedule -----------------------------------------------------------------------------------

def test_criterion_04_mean_scale_schedule():
    with criterion(4, "mean-scale schedule endpoints for T = 1..50"):
        eta = AlignConfig().eta
        assert eta == 0.02
        for T in range(1, 51):
            assert mean_scale(T, T, eta) == 1.0
            assert abs(mean_scale(1, T, eta) - 1.0 / (1.0 + 0.02 * (T - 1))) < 1e-12


# 5. sampling fidelity ----------------------------------------------------------------------------------------

def test_criterion_05_sampling_fidelity():
    with criterion(5, "1e5 draws reproduce stored 3-d mean and covariance") as notes:
        start = time.perf_counter()
        mu = np.array([1.5, -0.7, 0.2])
        L = np.array([[1.0, 0.0, 0.0], [0.6, 0.8, 0.0], [-0.3, 0.4, 0.5]])
        store = StatsStore("full")
        store.add_stats(7, 1, 500, mu, L @ L.T)
        X, y = generate_features(store, [7], 1, AlignConfig(samples_per_class=100_000), RngState(11))
        assert X.shape == (100_000, 3) and set(y.tolist()) == {7}
        mean_err = float(np.abs(X.mean(axis=0) - mu).max())
        cov_err = float(np.abs(np.cov(X.T, bias=True) - L @ L.T).max())
        elapsed = time.perf_counter() - start
        notes.append(f"mean err {mean_err:.4f}; cov err {cov_err:.4f}")
        assert mean_err <= 0.02 and cov_err <= 0.05
        assert elapsed < 30


# trend runs shared by 6 to 9 and 11 -------------------------------------------------------------------------

# Full-parameter rates follow the defaults. The hybrid group (biases, norm scales and LoRA factors) runs at the
# backbone rate here: at this width the default hybrid rate rewrites most of the representation.
HYBRID_LRS = {"hybrid": 0.0001}

TREND_RUNS = {
    # name: (preset, mode, overrides)
    "coarse/seqft": ("coarse", "seqft", {}),
    "coarse/sl": ("coarse", "sl", {}),
    "coarse/sl+ca+ln": ("coarse", "sl+ca+ln", {}),
    "coarse/sl+sce+ca+ln": ("coarse", "sl+sce+ca+ln", {}),
    "fine/sl": ("fine", "sl", {}),
    "fine/sl+ca+ln": ("fine", "sl+ca+ln", {}),
    "fine/sl+sce+ca+ln": ("fine", "sl+sce+ca+ln", {}),
}
EXTRA_RUNS = {
    "coarse/diag": ("coarse", "sl+sce+ca+ln", {"covariance": "diag"}),
    "coarse/hybrid": ("coarse", "hybrid+ca+ln", {"lr": HYBRID_LRS}),
    "coarse/hybrid-random": ("coarse", "hybrid+ca+ln", {"lr": HYBRID_LRS, "lora": {"init": "random"}}),
}


@pytest.fixture(scope="session")
def trend_results():
    """Per run name: list of RunReports over SEEDS, plus probe accuracies and runtime of the trend runs."""
    reports = {k: [] for k in {**TREND_RUNS, **EXTRA_RUNS}}
    probes = []
    trend_secs = 0.0
    for preset in ("coarse", "fine"):
        for seed in SEEDS:
            base_cfg = parse_config({"stream": {"preset": preset}, "seeds": [seed]})
            t0 = time.perf_counter()
            stream, pretrained = build_experiment(base_cfg, seed)
            setup = time.perf_counter() - t0
            trend_secs += setup
            for name, (p, mode, overrides) in {**TREND_RUNS, **EXTRA_RUNS}.items():
                if p != preset:
                    continue
                cfg = parse_config({"stream": {"preset": preset}, "mode": mode, "seeds": [seed], **overrides})
                model = clone_model(pretrained)
                t0 = time.perf_counter()
                rep = run_sequence(stream, model, cfg.run_config(mode), seed, config_for_fingerprint=cfg.fingerprint_payload(mode))
                if name in TREND_RUNS:
                    trend_secs += time.perf_counter() - t0
                assert rep.status == "ok", rep.status
                reports[name].append(rep)
                if name == "fine/sl+sce+ca+ln":
                    train = _union([t.train for t in stream.tasks])
                    test = _union([t.test for t in stream.tasks])
                    probes.append(linear_probe(model, train, test, ProbeConfig(), RngState(seed).spawn("probe")))
    return reports, probes, trend_secs


def _union(datasets):
    return Dataset(np.vstack([d.inputs for d in datasets]), np.concatenate([d.labels for d in datasets]))


def _last(reports, name):
    return _median([r.last_acc for r in reports[name]])


def test_criterion_06_trends(trend_results):
    reports, _, secs = trend_results
    with criterion(6, "trend direction over 5 seeds (median Last-Acc)") as notes:
        seqft, sl = _last(reports, "coarse/seqft"), _last(reports, "coarse/sl")
        fine_sl, fine_ca, fine_sce = (_last(reports, f"fine/{m}") for m in ("sl", "sl+ca+ln", "sl+sce+ca+ln"))
        coarse_ca, coarse_sce = _last(reports, "coarse/sl+ca+ln"), _last(reports, "coarse/sl+sce+ca+ln")
        notes.append(f"coarse seqft {seqft:.3f} sl {sl:.3f} ca+ln {coarse_ca:.3f} sce {coarse_sce:.3f}")
        notes.append(f"fine sl {fine_sl:.3f} ca+ln {fine_ca:.3f} sce {fine_sce:.3f}; {secs:.0f}s")
        assert sl - seqft >= 0.10
        assert fine_ca - fine_sl >= 0.05
        assert fine_sce >= fine_ca - 0.01
        assert coarse_sce >= coarse_ca - 0.01
        assert secs < 600


def test_criterion_07_post_hoc_purity(trend_results):
    reports, _, _ = trend_results
    with criterion(7, "backbone untouched by alignment on every trend run") as notes:
        runs = [r for name in TREND_RUNS for r in reports[name]]
        notes.append(f"{len(runs)} runs")
        assert all(r.post_hoc_pure for r in runs)


def test_criterion_08_hybrid_parity(trend_results):
    reports, _, _ = trend_results
    with criterion(8, "hybrid within 3 points of full SL+SCE+CA+LN and >= random-A init") as notes:
        full, hyb, rand = (_last(reports, n) for n in ("coarse/sl+sce+ca+ln", "coarse/hybrid", "coarse/hybrid-random"))
        absorb = max(r.diagnostics["absorb_max_abs_diff"] for r in reports["coarse/hybrid"])
        notes.append(f"full {full:.3f} hybrid {hyb:.3f} random-A {rand:.3f}")
        assert abs(hyb - full) <= 0.03
        assert hyb >= rand
        assert absorb < 1e-10


def test_criterion_09_diag_covariance(trend_results):
    reports, _, _ = trend_results
    with criterion(9, "diagonal-variance CA within 2 points of full covariance") as notes:
        full, diag = _last(reports, "coarse/sl+sce+ca+ln"), _last(reports, "coarse/diag")
        notes.append(f"full {full:.3f} diag {diag:.3f}")
        assert abs(full - diag) <= 0.02


# 10. metric arithmetic -------------------------------------------------------------------------------------

def test_criterion_10_metric_arithmetic():
    with criterion(10, "finalize_report hand values and CKA suite"):
        # every value below is exact in binary, so equality is exact
        assert finalize_report([1.0, 0.75, 0.5]) == (0.5, 0.75)
        assert finalize_report([1.0, 0.5, 0.25, 0.75]) == (0.75, 0.625)
        assert finalize_report([0.375]) == (0.375, 0.375)
        rep = RunReport.from_stages([[1.0, None], [0.5, 0.0]], [1.0, 0.25], config={}, fingerprint="", seed=0)
        assert (rep.last_acc, rep.inc_acc) == (0.25, 0.625) and rep.check()

        rng = np.random.default_rng(10)
        X = rng.normal(size=(120, 6))
        Y = rng.normal(size=(120, 4))
        Q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        assert abs(cka(X, X) - 1.0) < 1e-10
        assert abs(cka(X, X @ Q) - 1.0) < 1e-8
        assert abs(cka(X, 5.5 * X) - 1.0) < 1e-10
        assert abs(cka(X, Y) - cka(Y, X)) < 1e-12
        assert abs(cka(X, Y) - cka(X @ Q, 0.3 * Y)) < 1e-10


# 11. linear-probe gap -----------------------------------------------------------------------------------------

def test_criterion_11_probe_gap(trend_results):
    reports, probes, _ = trend_results
    with criterion(11, "linear probe >= pre-alignment seen accuracy on the fine stream") as notes:
        pre = _median([r.pre_align_seen_acc[-1] for r in reports["fine/sl+sce+ca+ln"]])
        probe = _median(probes)
        notes.append(f"probe {probe:.3f} vs pre-align {pre:.3f}")
        assert probe >= pre
