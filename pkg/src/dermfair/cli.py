"""Command-line entry point.

Verbs: ingest, split, train, evaluate, report, plot, synthetic, run.
The dataset root can be overridden with the DERMFAIR_DATA_ROOT environment
variable; paths in config files resolve against it.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import pandas as pd

from dermfair.backbones import BackboneSpec, load_backbone
from dermfair.errors import ConfigurationError
from dermfair.experiment import (
    ExperimentConfig,
    FAIRNESS_METRIC_BY_TASK,
    run as run_experiment,
)
from dermfair.ingest import (
    load_manifest,
    records_from_frame,
    records_to_frame,
    tone_distribution_table,
    write_tone_table,
)
from dermfair.metrics import build_report
from dermfair.records import DataSource, records_for_task
from dermfair.reporting import (
    aggregate_report_files,
    render_table,
    render_tradeoff_plot,
    save_rows,
)
from dermfair.splits import make_split_series, write_split_csv
from dermfair.synthetic import SyntheticSpec, generate
from dermfair.training import evaluate as evaluate_model
from dermfair.training import load_checkpoint, prepare_training_data, TrainConfig


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="experiment config file (YAML)")
    parser.add_argument("--task", choices=("cancer", "inflammatory"))
    parser.add_argument("--backbone", help="restrict to one backbone family")
    parser.add_argument("--variant", help="restrict to one model variant")
    parser.add_argument("--seed", type=int, help="override the base seed")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--parallel", type=int, help="max concurrent sub-runs")


def _experiment_config(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigurationError("--config is required for this verb")
    config = ExperimentConfig.from_file(args.config, out_dir=args.out)
    if args.task:
        config.task = args.task
    if args.backbone:
        config.backbones = [
            b for b in config.backbones if b.resolved().family.value == args.backbone
        ]
        if not config.backbones:
            raise ConfigurationError(f"no configured backbone matches {args.backbone!r}")
    if args.variant:
        config.variants = [v for v in config.variants if v.value == args.variant]
        if not config.variants:
            raise ConfigurationError(f"no configured variant matches {args.variant!r}")
    if args.seed is not None:
        config.base_seed = args.seed
    if args.parallel is not None:
        config.parallel = args.parallel
    config.validate()
    return config


def _cmd_ingest(args) -> int:
    out = args.out or Path("ingest_out")
    out.mkdir(parents=True, exist_ok=True)
    source = DataSource(args.source)
    records, log = load_manifest(
        source, args.manifest, image_dir=args.images, dedup_by_id=args.dedup
    )
    records_to_frame(records).to_csv(out / "records.csv", index=False)
    log.write_jsonl(out / "rejections.jsonl")
    write_tone_table(tone_distribution_table(records), out / "tone_table.csv")
    print(f"{len(records)} records emitted, {len(log)} rejected -> {out}")
    for reason, count in sorted(log.counts().items()):
        print(f"  rejected ({reason}): {count}")
    return 0


def _cmd_split(args) -> int:
    out = args.out or Path("splits_out")
    out.mkdir(parents=True, exist_ok=True)
    records = records_from_frame(pd.read_csv(args.records, dtype={"image_id": str}))
    if args.task:
        records = records_for_task(records, args.task)
    series = make_split_series(
        records,
        n_splits=args.n_splits,
        base_seed=args.seed if args.seed is not None else 0,
        reuse_test_pool=args.reuse_test_pool,
    )
    for i, split in enumerate(series):
        write_split_csv(split, out / f"split{i}.csv")
        print(f"split{i}: train={len(split.train)} val={len(split.val)} test={len(split.test)}")
    return 0


def _cmd_train(args) -> int:
    config = _experiment_config(args)
    if args.n_splits is not None:
        config.n_splits = args.n_splits
    result = run_experiment(config)
    for outcome in result.outcomes:
        status = "ok" if outcome.ok else "FAILED"
        print(f"{outcome.sub_id}: {status}")
    return 0 if result.ok else 1


def _cmd_evaluate(args) -> int:
    out = args.out or Path("evaluate_out")
    out.mkdir(parents=True, exist_ok=True)
    model, payload = load_checkpoint(args.checkpoint)
    train_config = TrainConfig.from_dict(payload["train_config"])
    backbone = load_backbone(BackboneSpec.from_dict(payload["backbone_spec"]), seed=payload["seed"])
    source = DataSource(args.source)
    records, _ = load_manifest(source, args.manifest, image_dir=args.images)
    records = records_for_task(records, train_config.task)
    data = prepare_training_data(records, train_config.task, train_config, backbone)
    predictions = evaluate_model(model, data)
    frame = pd.DataFrame(
        [
            {
                "image_id": p.image_id,
                "y_true": p.y_true,
                "y_pred": p.y_pred,
                "group": p.group,
                "scores": json.dumps(list(p.scores)),
            }
            for p in predictions
        ]
    )
    frame.to_csv(out / "predictions.csv", index=False)
    report = build_report(
        predictions,
        task=train_config.task,
        backbone=train_config.backbone.resolved().family.value,
        variant=model.config.variant.value,
        eval_set=args.eval_set,
    )
    report.save(out / "report.json")
    print(f"{len(predictions)} predictions -> {out} (EOM {report.eom:.4f}, PQD {report.pqd:.4f})")
    return 0


def _rows_from_results(results_dir: Path):
    report_files = sorted(results_dir.glob("runs/**/report_*.json"))
    if not report_files:
        raise ConfigurationError(f"no report files under {results_dir}/runs")
    return aggregate_report_files(report_files)


def _cmd_report(args) -> int:
    rows = _rows_from_results(args.results)
    out = args.out or (args.results / "reports")
    out.mkdir(parents=True, exist_ok=True)
    save_rows(rows, out / "aggregated_rows.json")
    metrics = [args.metric] if args.metric else ["eom", "pqd", "balanced_accuracy"]
    for metric in metrics:
        table = render_table(rows, metric=metric, title=metric)
        (out / f"table_{metric}.txt").write_text(table, encoding="utf-8")
        print(table)
    return 0


def _cmd_plot(args) -> int:
    rows = _rows_from_results(args.results)
    out = args.out or (args.results / "reports")
    out.mkdir(parents=True, exist_ok=True)
    metric = args.metric or "eom"
    paths = render_tradeoff_plot(rows, out / f"tradeoff_{metric}", metric=metric)
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return 0


def _cmd_synthetic(args) -> int:
    out = args.out or Path("synthetic_out")
    spec = SyntheticSpec(
        n_per_cell=args.n_per_cell,
        image_size=args.image_size,
        rho=args.rho,
        noise=args.noise,
        seed=args.seed if args.seed is not None else 0,
    )
    records = generate(spec, out)
    print(f"{len(records)} images -> {out} (rho={spec.rho}, seed={spec.seed})")
    return 0


def _cmd_run(args) -> int:
    config = _experiment_config(args)
    result = run_experiment(config)
    for outcome in result.outcomes:
        status = "ok" if outcome.ok else "FAILED"
        print(f"{outcome.sub_id}: {status}")
    if result.failures():
        print(f"{len(result.failures())} sub-run(s) failed; see {config.out_dir / 'failures.json'}")
    for kind, path in result.artifacts.items():
        print(f"{kind}: {path}")
    return 0 if result.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dermfair",
        description="Skin-tone fairness auditing and debiasing for dermatology classifiers.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("ingest", help="load a dataset manifest into validated records")
    p.add_argument("--source", required=True, choices=[s.value for s in DataSource])
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--images", type=Path)
    p.add_argument("--dedup", action="store_true", help="reject duplicate image ids")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("split", help="produce the stratified split series from a records CSV")
    p.add_argument("--records", required=True, type=Path)
    p.add_argument("--task", choices=("cancer", "inflammatory"))
    p.add_argument("--n-splits", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--reuse-test-pool", action="store_true")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="train the configured matrix (alias of run)")
    _add_common(p)
    p.add_argument("--n-splits", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--source", required=True, choices=[s.value for s in DataSource])
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--images", type=Path)
    p.add_argument("--eval-set", default="external")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="render metric tables from a results directory")
    p.add_argument("--results", required=True, type=Path)
    p.add_argument("--metric")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("plot", help="render the fairness/accuracy trade-off plot")
    p.add_argument("--results", required=True, type=Path)
    p.add_argument("--metric")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=_cmd_plot)

    p = sub.add_parser("synthetic", help="generate a tone-confounded synthetic pool")
    p.add_argument("--n-per-cell", type=int, default=50)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--rho", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=_cmd_synthetic)

    p = sub.add_parser("run", help="run the full experiment matrix from a config")
    _add_common(p)
    p.set_defaults(func=_cmd_run)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
