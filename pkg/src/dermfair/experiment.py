"""Experiment orchestration: config files, the run matrix, persisted results.

A single YAML config (with an ``include`` mechanism for shared blocks) fully
specifies task, data sources, backbones, variants, and the training protocol.
``run`` executes every (variant × backbone × split) sub-run, persists
manifests/predictions/reports under the output directory, aggregates across
splits, and renders tables and trade-off plots from the persisted files.

Results directory layout::

    out/
      data/                  synthetic pools (when generated)
      runs/<backbone>/<variant>/split<k>/
          manifest.json, best.pt,
          predictions_{internal,external}.csv,
          report_{internal,external}.json
      reports/
          aggregated_rows.json, table_<metric>.txt, tradeoff_<metric>.*
      failures.json
"""

from __future__ import annotations

import concurrent.futures
import json
import os
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd
import yaml

from dermfair.backbones import BackboneSpec, load_backbone
from dermfair.errors import ConfigurationError
from dermfair.ingest import load_manifest
from dermfair.metrics import build_report
from dermfair.models import ModelConfig, RELEVANT_WEIGHTS, Variant
from dermfair.records import (
    TONE_SCHEME_FITZPATRICK,
    DataSource,
    TASKS,
    records_for_task,
    tone_group_count,
)
from dermfair.reporting import (
    aggregate_report_files,
    render_table,
    render_tradeoff_plot,
    save_rows,
)
from dermfair.splits import SplitResult, make_split_series
from dermfair.synthetic import SyntheticSpec, generate_benchmark
from dermfair.training import (
    TrainConfig,
    evaluate,
    prepare_training_data,
    train,
)

DATA_ROOT_ENV = "DERMFAIR_DATA_ROOT"

#: Legal external test source per task; SYNTHETIC pools pair with either task.
EXTERNAL_PAIRING = {
    "cancer": {DataSource.PADUFES, DataSource.SYNTHETIC},
    "inflammatory": {DataSource.SCIN, DataSource.SYNTHETIC},
}

FAIRNESS_METRIC_BY_TASK = {"cancer": "eom", "inflammatory": "pqd"}


def _deep_merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if key in merged and isinstance(merged[key], dict) and isinstance(value, dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config_dict(path: str | Path) -> dict:
    """Parse a YAML config, resolving ``include`` blocks relative to the file.

    Included files are merged first (in order), then the file's own keys win.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    payload = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(payload, dict):
        raise ConfigurationError(f"config root must be a mapping: {path}")
    includes = payload.pop("include", [])
    if isinstance(includes, str):
        includes = [includes]
    merged: dict = {}
    for inc in includes:
        merged = _deep_merge(merged, load_config_dict(path.parent / inc))
    return _deep_merge(merged, payload)


@dataclass
class ExperimentConfig:
    task: str
    out_dir: Path
    train_source: DataSource = DataSource.SYNTHETIC
    external_source: DataSource = DataSource.SYNTHETIC
    backbones: list[BackboneSpec] = field(default_factory=list)
    variants: list[Variant] = field(default_factory=lambda: [Variant.BASELINE])
    n_splits: int = 5
    base_seed: int = 0
    parallel: int = 1
    dataset_root: Path | None = None
    manifests: dict = field(default_factory=dict)  # source value -> path
    image_dirs: dict = field(default_factory=dict)
    synthetic: SyntheticSpec = field(default_factory=lambda: SyntheticSpec(n_per_cell=40, rho=0.9))
    synthetic_test_n_per_cell: int | None = None
    train: dict = field(default_factory=dict)  # TrainConfig scalar overrides
    weights: dict = field(default_factory=dict)  # loss-weight overrides
    model: dict = field(default_factory=dict)  # head_hidden, latent_dim, ...
    tone_scheme: str = TONE_SCHEME_FITZPATRICK

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}; expected one of {sorted(TASKS)}")
        if self.external_source not in EXTERNAL_PAIRING[self.task]:
            allowed = sorted(s.value for s in EXTERNAL_PAIRING[self.task])
            raise ConfigurationError(
                f"task {self.task!r} cannot test externally on "
                f"{self.external_source.value}; allowed: {allowed}"
            )
        if self.train_source is DataSource.SYNTHETIC and self.external_source is not DataSource.SYNTHETIC:
            raise ConfigurationError("synthetic training pairs only with a synthetic external pool")
        if not self.variants:
            raise ConfigurationError("at least one model variant is required")
        if not self.backbones:
            raise ConfigurationError("at least one backbone spec is required")
        if self.n_splits < 1:
            raise ConfigurationError("n_splits must be ≥ 1")
        unknown = set(self.weights) - set(RELEVANT_WEIGHTS[Variant.BASELINE].union(*RELEVANT_WEIGHTS.values()))
        if unknown:
            raise ConfigurationError(f"unknown loss weights in config: {sorted(unknown)}")

    def data_root(self) -> Path:
        env = os.environ.get(DATA_ROOT_ENV)
        if env:
            return Path(env)
        if self.dataset_root is not None:
            return Path(self.dataset_root)
        return Path(".")

    def resolve_path(self, value: str | Path) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.data_root() / p

    @classmethod
    def from_dict(cls, payload: dict, out_dir: str | Path | None = None) -> "ExperimentConfig":
        payload = dict(payload)
        if out_dir is not None:
            payload["out_dir"] = out_dir
        if "out_dir" not in payload:
            raise ConfigurationError("config must declare out_dir (or pass --out)")
        kwargs: dict = {
            "task": payload["task"],
            "out_dir": Path(payload["out_dir"]),
        }
        if "train_source" in payload:
            kwargs["train_source"] = DataSource(payload["train_source"])
        if "external_source" in payload:
            kwargs["external_source"] = DataSource(payload["external_source"])
        if "backbones" in payload:
            kwargs["backbones"] = [BackboneSpec.from_dict(b) for b in payload["backbones"]]
        if "variants" in payload:
            kwargs["variants"] = [Variant(v) for v in payload["variants"]]
        for key in ("n_splits", "base_seed", "parallel", "tone_scheme",
                    "synthetic_test_n_per_cell"):
            if key in payload:
                kwargs[key] = payload[key]
        if "dataset_root" in payload and payload["dataset_root"]:
            kwargs["dataset_root"] = Path(payload["dataset_root"])
        for key in ("manifests", "image_dirs", "train", "weights", "model"):
            if key in payload:
                kwargs[key] = dict(payload[key])
        if "synthetic" in payload:
            kwargs["synthetic"] = SyntheticSpec(**payload["synthetic"])
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path, out_dir: str | Path | None = None) -> "ExperimentConfig":
        return cls.from_dict(load_config_dict(path), out_dir=out_dir)


@dataclass
class SubRunOutcome:
    sub_id: str
    ok: bool
    error: str = ""
    report_paths: list = field(default_factory=list)


@dataclass
class ExperimentResult:
    out_dir: Path
    outcomes: list[SubRunOutcome]
    rows: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(o.ok for o in self.outcomes)

    def failures(self) -> list[SubRunOutcome]:
        return [o for o in self.outcomes if not o.ok]


def _load_source_records(config: ExperimentConfig, source: DataSource) -> list:
    manifest = config.manifests.get(source.value)
    if manifest is None:
        raise ConfigurationError(
            f"no manifest path configured for source {source.value!r}"
        )
    image_dir = config.image_dirs.get(source.value)
    records, _ = load_manifest(
        source,
        config.resolve_path(manifest),
        image_dir=config.resolve_path(image_dir) if image_dir else None,
    )
    return records_for_task(records, config.task)


def _prepare_pools(config: ExperimentConfig):
    """Return (split series, external test records).

    Internal test records ride inside each split's test partition; for
    synthetic sources that partition is replaced by the generated ρ=0 pool.
    """
    if config.train_source is DataSource.SYNTHETIC:
        benchmark = generate_benchmark(
            config.synthetic,
            config.out_dir / "data",
            test_n_per_cell=config.synthetic_test_n_per_cell,
        )
        splits = make_split_series(
            benchmark.train, n_splits=config.n_splits, base_seed=config.base_seed
        )
        # The confounded test partition of each split is discarded: generated
        # test pools are always tone-balanced (ρ=0).
        splits = [
            SplitResult(
                train=s.train,
                val=s.val,
                test=list(benchmark.internal_test),
                seed=s.seed,
                fractions=s.fractions,
                warnings=s.warnings,
            )
            for s in splits
        ]
        return splits, benchmark.external_test

    train_records = _load_source_records(config, config.train_source)
    external_records = _load_source_records(config, config.external_source)
    splits = make_split_series(
        train_records, n_splits=config.n_splits, base_seed=config.base_seed
    )
    return splits, external_records


def _model_config(config: ExperimentConfig, variant: Variant) -> ModelConfig:
    weights = {
        name: config.weights[name]
        for name in RELEVANT_WEIGHTS[variant]
        if name in config.weights
    }
    extras = dict(config.model)
    extras.setdefault("num_classes", len(TASKS[config.task]))
    extras.setdefault("num_tone_groups", tone_group_count(config.tone_scheme))
    return ModelConfig.defaults_for(variant, **weights, **extras)


def _train_config(config: ExperimentConfig, model_config: ModelConfig,
                  backbone_spec: BackboneSpec, seed: int) -> TrainConfig:
    overrides = dict(config.train)
    image_size = overrides.pop("image_size", None)
    if image_size is None:
        image_size = (
            config.synthetic.image_size
            if config.train_source is DataSource.SYNTHETIC
            else 224
        )
    return TrainConfig(
        model=model_config,
        backbone=backbone_spec,
        task=config.task,
        seed=seed,
        tone_scheme=config.tone_scheme,
        image_size=image_size,
        **overrides,
    )


def _run_one(
    config: ExperimentConfig,
    backbone_spec: BackboneSpec,
    variant: Variant,
    split_index: int,
    split: SplitResult,
    external_records: list,
) -> SubRunOutcome:
    spec = backbone_spec.resolved()
    sub_id = f"{config.task}/{spec.family.value}/{variant.value}/split{split_index}"
    run_dir = (
        config.out_dir
        / "runs"
        / spec.family.value
        / variant.value
        / f"split{split_index}"
    )
    try:
        model_config = _model_config(config, variant)
        seed = config.base_seed * 1000 + split_index
        train_config = _train_config(config, model_config, spec, seed)
        backbone = load_backbone(spec, seed=seed)
        result = train(train_config, split, backbone, run_dir=run_dir)

        report_paths = []
        for eval_set, records in (("internal", split.test), ("external", external_records)):
            data = prepare_training_data(records, config.task, train_config, backbone)
            predictions = evaluate(result.model, data, split_index=split_index)
            frame = pd.DataFrame(
                [
                    {
                        "image_id": p.image_id,
                        "y_true": p.y_true,
                        "y_pred": p.y_pred,
                        "group": p.group,
                        "scores": json.dumps(list(p.scores)),
                        "split": p.split,
                    }
                    for p in predictions
                ]
            )
            frame.to_csv(run_dir / f"predictions_{eval_set}.csv", index=False)
            report = build_report(
                predictions,
                task=config.task,
                backbone=spec.family.value,
                variant=variant.value,
                eval_set=eval_set,
                split_index=split_index,
            )
            report_path = run_dir / f"report_{eval_set}.json"
            report.save(report_path)
            report_paths.append(report_path)
        return SubRunOutcome(sub_id=sub_id, ok=True, report_paths=report_paths)
    except Exception as exc:  # noqa: BLE001 — sub-run isolation is the contract
        detail = f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"
        return SubRunOutcome(sub_id=sub_id, ok=False, error=detail)


def run(config: ExperimentConfig) -> ExperimentResult:
    """Execute the full matrix and render reports from persisted artifacts.

    Sub-run failures are recorded in failures.json and do not stop the rest
    of the matrix; partial results stay on disk. The result's ``ok`` flag
    (and the CLI exit code) reflect whether everything succeeded.
    """
    config.out_dir.mkdir(parents=True, exist_ok=True)
    splits, external_records = _prepare_pools(config)

    jobs = [
        (backbone_spec, variant, split_index, split)
        for backbone_spec in config.backbones
        for variant in config.variants
        for split_index, split in enumerate(splits)
    ]
    outcomes: list[SubRunOutcome] = []
    if config.parallel > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=config.parallel) as pool:
            futures = [
                pool.submit(_run_one, config, b, v, i, s, external_records)
                for b, v, i, s in jobs
            ]
            outcomes = [f.result() for f in futures]
    else:
        for b, v, i, s in jobs:
            outcomes.append(_run_one(config, b, v, i, s, external_records))

    reports_dir = config.out_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    report_files = sorted(config.out_dir.glob("runs/**/report_*.json"))
    rows = aggregate_report_files(report_files) if report_files else []
    artifacts: dict = {}
    if rows:
        save_rows(rows, reports_dir / "aggregated_rows.json")
        metric = FAIRNESS_METRIC_BY_TASK[config.task]
        for name in (metric, "balanced_accuracy"):
            table = render_table(rows, metric=name, title=f"{config.task}: {name}")
            table_path = reports_dir / f"table_{name}.txt"
            table_path.write_text(table, encoding="utf-8")
            artifacts[f"table_{name}"] = table_path
        artifacts.update(
            render_tradeoff_plot(
                rows,
                reports_dir / f"tradeoff_{metric}",
                metric=metric,
                title=f"{config.task}: {metric.upper()} vs balanced accuracy",
            )
        )

    failures = [o for o in outcomes if not o.ok]
    (config.out_dir / "failures.json").write_text(
        json.dumps([{"sub_id": o.sub_id, "error": o.error} for o in failures], indent=2),
        encoding="utf-8",
    )
    return ExperimentResult(out_dir=config.out_dir, outcomes=outcomes, rows=rows, artifacts=artifacts)
