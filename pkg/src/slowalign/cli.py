"""Command-line entry point: ``slowalign run | probe | cka | report``.

``run`` writes, under the configured output directory::

    <mode>/seed<k>/report.json      per-seed run report
    <mode>/seed<k>/matrix.csv       stage x task accuracy matrix
    <mode>/seed<k>/stage<t>.npz     model checkpoint after each stage
    <mode>/aggregate.json           mean and std over seeds
    summary.txt / summary.csv       one row per mode
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .benchmark import BenchmarkSpec, synthetic_benchmark
from .config import ConfigError, load_config
from .data import Dataset, load_manifest
from .engine import PretrainConfig, parse_mode, pretrain_backbone, run_sequence
from .errors import ContractViolation, ParseError
from .eval import RunReport, accuracy, cka, config_fingerprint, linear_probe, predict
from .nn import build_model, features_numpy, load_checkpoint, make_groups, save_checkpoint
from .numcore import RngState

log = logging.getLogger("slowalign")


# file helpers -------------------------------------------------------------------

def _atomic_write(path, data):
    """Write ``data`` (str or bytes) so that ``path`` either appears complete or not at all."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(rows):
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _inside(path, root):
    path, root = Path(path).resolve(), Path(root).resolve()
    if path != root and root not in path.parents:
        raise ContractViolation(f"{path} is outside the output directory {root}")
    return path


def mode_slug(mode):
    return mode.replace(":", "-")


# experiment assembly ---------------------------------------------------------------

def build_experiment(cfg, seed):
    """``(stream, model)`` for one seed; the model is pre-trained unless disabled."""
    s, m = cfg.stream, cfg.model
    if s.source == "synthetic":
        spec = BenchmarkSpec(kind=s.preset, tasks=s.tasks, classes_per_task=s.classes_per_task, d_in=s.d_in,
                             latent_dim=s.latent_dim, n_train=s.n_train, n_test=s.n_test,
                             pretrain_classes=s.pretrain_classes, pretrain_n=s.pretrain_n,
                             hidden=tuple(m.hidden), feature_dim=m.feature_dim, separation=s.separation,
                             clusters_per_class=s.clusters_per_class)
        bench = synthetic_benchmark(spec, seed)
        stream, pretrain = bench.stream, bench.pretrain
    else:
        stream, pretrain = load_manifest(s.manifest)
    d_in = stream.tasks[0].train.inputs.shape[1]
    model = build_model([d_in, *m.hidden, m.feature_dim], m.activation, RngState(seed).spawn("model"))
    if m.pretrain:
        if pretrain is None:
            log.warning("no pre-training data in the stream; starting from a random backbone")
        else:
            pretrain_backbone(model, pretrain, PretrainConfig(epochs=m.pretrain_epochs, lr=m.pretrain_lr),
                              RngState(seed).spawn("pretrain"))
    return stream, model


def aggregate(reports):
    """Mean and sample std of Last-Acc / Inc-Acc over seeds of one configuration.

    Refuses reports whose fingerprint does not match their own config and seed,
    or that were produced by different configurations.
    """
    if not reports:
        raise ContractViolation("nothing to aggregate")
    for r in reports:
        if config_fingerprint(r.config, r.seed) != r.fingerprint:
            raise ContractViolation(f"report for seed {r.seed} has a fingerprint that does not match its config")
    base = reports[0].config
    if any(r.config != base for r in reports[1:]):
        raise ContractViolation("reports come from different configurations")
    seeds = [r.seed for r in reports]
    if len(set(seeds)) != len(seeds):
        raise ContractViolation("duplicate seeds in aggregate")

    def stat(values):
        v = np.asarray(values, dtype=np.float64)
        return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0,
                "values": [float(x) for x in v]}

    return {
        "mode": base.get("mode"),
        "config": base,
        "seeds": seeds,
        "fingerprints": {str(r.seed): r.fingerprint for r in reports},
        "last_acc": stat([r.last_acc for r in reports]),
        "inc_acc": stat([r.inc_acc for r in reports]),
        "status": "ok" if all(r.status == "ok" for r in reports) else "partial",
    }


def summary_rows(aggregates):
    rows = [["mode", "seeds", "last_mean", "last_std", "inc_mean", "inc_std", "status"]]
    for a in aggregates:
        rows.append([a["mode"], len(a["seeds"]), repr(a["last_acc"]["mean"]), repr(a["last_acc"]["std"]),
                     repr(a["inc_acc"]["mean"]), repr(a["inc_acc"]["std"]), a["status"]])
    return rows


def summary_table(aggregates):
    """Plain-text table with percentages, one row per mode."""
    width = max([len("mode")] + [len(a["mode"]) for a in aggregates])
    lines = [f"{'mode':<{width}}  {'Last-Acc (%)':>15}  {'Inc-Acc (%)':>15}  seeds"]
    for a in aggregates:
        last = f"{100 * a['last_acc']['mean']:.2f} ± {100 * a['last_acc']['std']:.2f}"
        inc = f"{100 * a['inc_acc']['mean']:.2f} ± {100 * a['inc_acc']['std']:.2f}"
        flag = "" if a["status"] == "ok" else "  (partial)"
        lines.append(f"{a['mode']:<{width}}  {last:>15}  {inc:>15}  {len(a['seeds'])}{flag}")
    return "\n".join(lines) + "\n"


# commands ---------------------------------------------------------------------------

def cmd_run(args):
    cfg = load_config(args.config)
    out = Path(args.output_dir or cfg.output_dir)
    failed = False
    per_mode = {mode: [] for mode in cfg.modes}
    for seed in cfg.seeds:
        stream, base_model = build_experiment(cfg, seed)
        for mode in cfg.modes:
            run_dir = out / mode_slug(mode) / f"seed{seed}"
            payload = cfg.fingerprint_payload(mode)

            def on_stage(stage, model, head, store, run_dir=run_dir, mode=mode, seed=seed):
                if cfg.checkpoints:
                    buf = io.BytesIO()
                    groups = make_groups(model, parse_mode(mode)[0], cfg.lr)
                    save_checkpoint(model, buf, groups, extra={"stage": stage, "seed": seed, "mode": mode,
                                                       "fingerprint": config_fingerprint(payload, seed)})
                    _atomic_write(run_dir / f"stage{stage}.npz", buf.getvalue())

            log.info("running %s seed %d", mode, seed)
            try:
                report = run_sequence(stream, copy.deepcopy(base_model), cfg.run_config(mode), seed,
                                      on_stage=on_stage, config_for_fingerprint=payload)
            except Exception as exc:
                log.error("%s seed %d failed before finishing a stage: %s", mode, seed, exc)
                failed = True
                continue
            _atomic_write(run_dir / "report.json", report.to_json() + "\n")
            _atomic_write(run_dir / "matrix.csv", _csv_text(report.matrix_rows()))
            if report.status != "ok":
                log.error("%s seed %d: %s", mode, seed, report.status)
                failed = True
            per_mode[mode].append(report)
    aggregates = []
    for mode, reports in per_mode.items():
        if not reports:
            continue
        agg = aggregate(reports)
        _atomic_write(out / mode_slug(mode) / "aggregate.json", json.dumps(agg, indent=2, sort_keys=True) + "\n")
        aggregates.append(agg)
    if aggregates:
        table = summary_table(aggregates)
        _atomic_write(out / "summary.txt", table)
        _atomic_write(out / "summary.csv", _csv_text(summary_rows(aggregates)))
        sys.stdout.write(table)
    return 1 if failed else 0


def _load_checkpoints(paths):
    missing = [p for p in paths if not Path(p).is_file()]
    if missing:
        raise ContractViolation(f"checkpoint not found: {', '.join(map(str, missing))}")
    return [load_checkpoint(p) for p in paths]


def _resolve_out(args, cfg, default_name):
    root = Path(args.output_dir or cfg.output_dir)
    return _inside(Path(args.out) if args.out else root / default_name, root)


def cmd_probe(args):
    """One row per checkpoint: probe accuracy on the classes its head has seen, next to the head's own accuracy."""
    cfg = load_config(args.config)
    out = _resolve_out(args, cfg, "probe.csv")
    ckpts = _load_checkpoints(args.checkpoints)
    stream, _ = build_experiment(cfg, args.seed)
    rows = [["checkpoint", "stage", "classes", "probe_acc", "head_acc"]]
    for path, (model, _, extra) in zip(args.checkpoints, ckpts):
        seen = set(model.head_classes)
        tasks = [t for t in stream.tasks if set(t.classes) <= seen]
        if not tasks:
            raise ContractViolation(f"{path}: head covers no complete task of the stream")
        train = _concat([t.train for t in tasks])
        test = _concat([t.test for t in tasks])
        if train.inputs.shape[1] != model.input_dim:
            raise ContractViolation(f"{path}: input width {model.input_dim} does not match data "
                                    f"width {train.inputs.shape[1]}")
        probe = linear_probe(model, train, test, rng=RngState(args.seed).spawn("probe"))
        head = accuracy(predict(model, test.inputs), test.labels)
        rows.append([str(path), extra.get("stage", ""), len(seen), repr(probe), repr(head)])
    _atomic_write(out, _csv_text(rows))
    log.info("wrote %s", out)
    return 0


def _concat(datasets):
    return Dataset(np.vstack([d.inputs for d in datasets]), np.concatenate([d.labels for d in datasets]))


def cmd_cka(args):
    """Linear CKA between final features of every pair of checkpoints on the stream's test inputs."""
    cfg = load_config(args.config)
    out = _resolve_out(args, cfg, "cka.csv")
    if len(args.checkpoints) < 2:
        raise ContractViolation("cka needs at least two checkpoints (repeat a path to compare it with itself)")
    ckpts = _load_checkpoints(args.checkpoints)
    stream, _ = build_experiment(cfg, args.seed)
    x = np.vstack([t.test.inputs for t in stream.tasks])
    feats = []
    for path, (model, _, _) in zip(args.checkpoints, ckpts):
        if model.input_dim != x.shape[1]:
            raise ContractViolation(f"{path}: input width {model.input_dim} does not match data width {x.shape[1]}")
        feats.append(features_numpy(model, x))
    rows = [["checkpoint_a", "checkpoint_b", "cka"]]
    for i in range(len(feats)):
        for j in range(i + 1, len(feats)):
            rows.append([str(args.checkpoints[i]), str(args.checkpoints[j]), repr(cka(feats[i], feats[j]))])
    _atomic_write(out, _csv_text(rows))
    log.info("wrote %s", out)
    return 0


def cmd_report(args):
    """Re-aggregate per-seed reports found under a run directory and print the summary table."""
    root = Path(args.path)
    if not root.is_dir():
        raise ContractViolation(f"{root} is not a run directory")
    aggregates = []
    for mode_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(mode_dir.glob("seed*/report.json"))
        if not files:
            continue
        reports = [RunReport.from_dict(json.loads(f.read_text(encoding="utf-8"))) for f in files]
        agg = aggregate(reports)
        stored = mode_dir / "aggregate.json"
        if stored.is_file() and json.loads(stored.read_text(encoding="utf-8"))["fingerprints"] != agg["fingerprints"]:
            raise ContractViolation(f"{stored} does not match the per-seed reports beside it")
        aggregates.append(agg)
    if not aggregates:
        raise ContractViolation(f"no reports under {root}")
    sys.stdout.write(summary_table(aggregates))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="slowalign", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train every configured mode and seed")
    r.add_argument("config")
    r.add_argument("--output-dir", help="override output_dir from the config")
    r.set_defaults(func=cmd_run)

    for name, func, helptext in (("probe", cmd_probe, "linear probe per checkpoint"),
                                 ("cka", cmd_cka, "CKA between checkpoint features")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("config", help="experiment config that produced the checkpoints")
        c.add_argument("checkpoints", nargs="+")
        c.add_argument("--seed", type=int, default=0, help="seed used to rebuild the data stream")
        c.add_argument("--out", help="CSV path inside the output directory")
        c.add_argument("--output-dir", help="override output_dir from the config")
        c.set_defaults(func=func)

    rep = sub.add_parser("report", help="print the summary table of a run directory")
    rep.add_argument("path")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ContractViolation, ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
