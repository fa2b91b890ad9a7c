"""Command-line surface: gen-data, train, eval, analyze, grad-check.

Every command is a pure function of (config file, flags, input files) to
(output files, exit code): no timestamps, no hidden state, no network.
Exit codes: 0 success, 1 usage error, 2 runtime failure (NaN, I/O,
failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, apply_overrides, config_from_dict, load_config
from .data import (
    GeneratorConfig,
    SyntheticDataset,
    generate_box,
    load_manifest,
    split_dataset,
)
from .gradcheck import run_suite
from .metrics import (
    GROUPS,
    evaluate,
    export_features,
    fmt,
    predict_dataset,
    shot_group,
    triviality_report,
    write_histograms_csv,
    write_metrics_csv,
    write_triviality_csv,
)
from .model import make_feature_fn, make_predict_fn
from .train import (
    TrainingDiverged,
    load_checkpoint,
    rrt_schedule,
    save_checkpoint,
    train_loop,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we map usage to 1
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="c2crop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, split=False):
        p.add_argument("--config", help="JSON run config (defaults apply if omitted)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--loss-mode", dest="loss_mode", help="override train.loss_mode")
        p.add_argument("--force", action="store_true", help="reuse a non-empty run dir")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override any config entry, e.g. --set generator.noise_level=0.05",
        )
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint file")
        if split:
            p.add_argument(
                "--split",
                choices=("train", "val", "all"),
                default="val",
                help="dataset split to use (default val)",
            )

    common(sub.add_parser("gen-data", help="describe the synthetic dataset"))
    common(sub.add_parser("train", help="train a model into a run directory"))
    common(sub.add_parser("eval", help="evaluate a checkpoint"), checkpoint=True, split=True)
    common(
        sub.add_parser("analyze", help="quasi-trivial-collapse diagnostics"),
        checkpoint=True,
        split=True,
    )
    common(sub.add_parser("grad-check", help="finite-difference gradient audit"))
    return parser


def _resolve_config(args) -> RunConfig:
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        raw = json.loads(path.read_text(encoding="utf-8"))
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "loss_mode", None):
        overrides.append(f"train.loss_mode={args.loss_mode}")
    if args.out:
        overrides.append(f"out_dir={args.out}")
    try:
        return config_from_dict(apply_overrides(raw, overrides))
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def _datasets(cfg: RunConfig):
    """(train, val) datasets, synthetic by default, manifest-backed if set."""
    if cfg.manifest:
        ds = load_manifest(cfg.manifest, image_size=cfg.generator.image_size)
        gen = dataclasses.replace(
            cfg.generator,
            train_size=max(len(ds) - cfg.generator.val_size, 0),
            val_size=min(cfg.generator.val_size, len(ds)),
        )
        train_idx, val_idx = split_dataset(gen)
        return _Subset(ds, train_idx), _Subset(ds, val_idx)
    train_idx, val_idx = split_dataset(cfg.generator)
    return (
        SyntheticDataset(cfg.generator, train_idx),
        SyntheticDataset(cfg.generator, val_idx),
    )


class _Subset:
    def __init__(self, dataset, indices):
        self.dataset = dataset
        self.indices = list(indices)

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i):
        return self.dataset[self.indices[i]]

    def target_matrix(self):
        full = self.dataset.target_matrix()
        return full[self.indices]


def _pick_split(cfg: RunConfig, which: str):
    train_ds, val_ds = _datasets(cfg)
    if which == "train":
        return train_ds
    if which == "val":
        return val_ds
    if cfg.manifest:
        ds = load_manifest(cfg.manifest, image_size=cfg.generator.image_size)
        return ds
    return SyntheticDataset(cfg.generator, range(cfg.generator.total_size))


def _require_out(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.out_dir
    if not out:
        raise UsageError("an output directory is required (--out or config out_dir)")
    return Path(out)


def _prepare_run_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"run directory {path} is not empty (use --force to reuse)")
    path.mkdir(parents=True, exist_ok=True)


def _print_metrics_table(report) -> None:
    width = 14
    print("".ljust(8) + "IoU".ljust(width * 4) + "BDE")
    header = "".ljust(8)
    for _ in range(2):
        for g in GROUPS:
            header += g.ljust(width)
    print(header)
    row = "model".ljust(8)
    for value in [report.iou[g] for g in GROUPS] + [report.bde[g] for g in GROUPS]:
        row += (fmt(value) or "-").ljust(width)
    print(row)
    print("counts  " + "  ".join(f"{g}={report.counts[g]}" for g in GROUPS))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = _require_out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    gen = cfg.generator
    description = {
        "generator": dataclasses.asdict(gen),
        "train_size": gen.train_size,
        "val_size": gen.val_size,
    }
    (out / "dataset.json").write_text(
        json.dumps(description, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    ratios = np.array(
        [generate_box(gen, i).size_ratio for i in range(gen.total_size)]
    )
    print(f"dataset: {gen.total_size} samples ({gen.train_size} train / {gen.val_size} val)")
    if ratios.size:
        counts, edges = np.histogram(ratios, bins=20, range=(0.0, 1.0))
        peak = counts.max() or 1
        print("size-ratio histogram:")
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            bar = "#" * int(round(40 * c / peak))
            print(f"  {lo:4.2f}-{hi:4.2f} {c:6d} {bar}")
        group_counts = {"Many": 0, "Medium": 0, "Few": 0}
        for r in ratios:
            group_counts[shot_group(float(r)).value] += 1
        print(
            "shot groups: "
            + "  ".join(f"{k}={v}" for k, v in group_counts.items())
        )
    print(f"wrote {out / 'dataset.json'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _require_out(args, cfg)
    _prepare_run_dir(out, args.force)
    (out / "config_snapshot.json").write_text(cfg.to_json(), encoding="utf-8")

    train_ds, val_ds = _datasets(cfg)
    if cfg.train.loss_mode == "rrt_inv":
        rrt = rrt_schedule(train_ds, val_ds, cfg.encoder, cfg.train, cfg.loss)
        save_checkpoint(
            out / "checkpoint_stage1.c2ck",
            rrt.stage1.params,
            cfg.encoder,
            epoch=cfg.train.epochs - 1,
            optimizer=rrt.stage1.optimizer,
        )
        result = rrt.stage2
        log = [dict(rec, stage=1) for rec in rrt.stage1.log] + [
            dict(rec, stage=2) for rec in rrt.stage2.log
        ]
    else:
        result = train_loop(train_ds, val_ds, cfg.encoder, cfg.train, cfg.loss)
        log = result.log

    with open(out / "log.jsonl", "w", encoding="utf-8") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    save_checkpoint(
        out / "checkpoint_final.c2ck",
        result.params,
        cfg.encoder,
        epoch=cfg.train.epochs - 1,
        optimizer=result.optimizer,
    )
    save_checkpoint(
        out / "checkpoint_best.c2ck",
        result.best_params,
        cfg.encoder,
        epoch=result.best_epoch,
    )
    (out / "train_stats.json").write_text(
        json.dumps(
            {
                "train_target_mean": [float(v) for v in result.train_target_mean],
                "best_epoch": result.best_epoch,
            },
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    report = evaluate(make_predict_fn(result.params, cfg.encoder), val_ds)
    write_metrics_csv(report, out / "metrics.csv")
    print(f"run directory: {out}")
    _print_metrics_table(report)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    ck = load_checkpoint(args.checkpoint)
    if ck.encoder.image_size != cfg.generator.image_size:
        raise ValueError(
            f"checkpoint image size {ck.encoder.image_size} != generator "
            f"image size {cfg.generator.image_size}"
        )
    dataset = _pick_split(cfg, args.split)
    report = evaluate(make_predict_fn(ck.model_params(False), ck.encoder), dataset)
    _print_metrics_table(report)
    if args.out or cfg.out_dir:
        out = _require_out(args, cfg)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(report, out / "metrics.csv")
        print(f"wrote {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _resolve_config(args)
    out = _require_out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    ck = load_checkpoint(args.checkpoint)
    dataset = _pick_split(cfg, args.split)
    train_ds, _ = _datasets(cfg)
    train_mean = train_ds.target_matrix().mean(axis=0)

    params = ck.model_params(False)
    preds = predict_dataset(make_predict_fn(params, ck.encoder), dataset)
    targets = np.stack(
        [np.array([s.box.left, s.box.right, s.box.top, s.box.bottom]) for s in _iter(dataset)]
    )
    report = triviality_report(preds, targets, train_mean)

    rows = [["boundary", "score", "degenerate", "trivial_mae", "model_mae", "mae_gap"]]
    print("triviality scores (1.0 = exact mean-location predictor):")
    for d, b in report.boundaries.items():
        write_triviality_csv(report, d, out / f"triviality_{d}.csv")
        write_histograms_csv(report, d, out / f"histograms_{d}.csv")
        score = "undefined" if b.score is None else fmt(b.score)
        flag = " (degenerate: zero-variance errors)" if b.degenerate else ""
        print(
            f"  {d}: score={score}{flag}  trivial_mae={fmt(b.trivial_mae)} "
            f"model_mae={fmt(b.model_mae)} gap={fmt(b.mae_gap)}"
        )
        rows.append(
            [d, fmt(b.score), int(b.degenerate), fmt(b.trivial_mae), fmt(b.model_mae), fmt(b.mae_gap)]
        )
    with open(out / "scores.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    export_features(make_feature_fn(params, ck.encoder), dataset, out / "features.csv")
    print(f"wrote per-boundary CSVs to {out}")
    return EXIT_OK


def _iter(dataset):
    for i in range(len(dataset)):
        yield dataset[i]


def cmd_grad_check(args) -> int:
    del args
    results = run_suite()
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:28s} max_rel_err={r.error:.3e}  tol={r.tolerance:g}  {status}")
    print(f"{len(results)} checks, {len(failed)} failed")
    return EXIT_OK if not failed else EXIT_RUNTIME


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    commands = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "analyze": cmd_analyze,
        "grad-check": cmd_grad_check,
    }
    try:
        return commands[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
