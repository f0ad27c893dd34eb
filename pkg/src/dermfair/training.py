"""Training orchestration: the fixed protocol, checkpointing, evaluation.

Protocol defaults: 10 epochs, batch size 64, Adam at 0.001 with a step decay
of γ=0.1 every 2 epochs, checkpoint chosen by best validation balanced
accuracy. Every random choice is derived from the run seed, so two runs with
identical config and data produce identical loss curves.
"""

from __future__ import annotations

import copy
import datetime as _dt
import hashlib
import json
import math
import time
import warnings as _warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

from dermfair import __version__
from dermfair.backbones import Backbone, BackboneSpec, load_backbone, weights_checksum
from dermfair.errors import ConfigurationError, NonFiniteLossError
from dermfair.losses import adaptive_resampling_weights
from dermfair.metrics import PredictionRecord, balanced_accuracy, is_absent
from dermfair.models import (
    DebiasClassifier,
    ModelConfig,
    Variant,
    batch_losses,
    tabe_aux_loss,
    tabe_main_loss,
    warmup_loss,
)
from dermfair.preprocess import (
    NORMALIZATIONS,
    Augmentations,
    PreprocessSpec,
    load_image,
    preprocess_image,
)
from dermfair.records import (
    TONE_SCHEME_FITZPATRICK,
    ImageRecord,
    coarsen_tone,
    task_label,
    tone_group_count,
)
from dermfair.splits import SplitResult, condition_balanced_batches


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    backbone: BackboneSpec
    task: str = "cancer"
    epochs: int = 10
    batch_size: int = 64
    optimizer: str = "adam"
    learning_rate: float = 0.001
    scheduler_step: int = 2
    scheduler_gamma: float = 0.1
    seed: int = 0
    batch_mode: str = "oversample"
    tone_scheme: str = TONE_SCHEME_FITZPATRICK
    image_size: int = 224
    augment: Augmentations | None = None
    #: Learning rate for the TABE auxiliary (tone-head) optimizer. Defaults to
    #: the main rate; adversarial heads often need a faster one to keep
    #: tracking the representation they are probing.
    aux_learning_rate: float | None = None
    #: Epochs trained on the task objective alone before any debias term is
    #: applied. The TABE tone head still takes its auxiliary steps throughout,
    #: so the adversary is already trained when the confusion penalty switches
    #: on. Checkpoint selection for debiased variants starts after warm-up.
    debias_warmup_epochs: int = 0

    def __post_init__(self):
        if self.optimizer.lower() != "adam":
            raise ConfigurationError(f"only the Adam family is supported, got {self.optimizer!r}")
        if self.aux_learning_rate is not None and self.aux_learning_rate <= 0:
            raise ConfigurationError("aux_learning_rate must be positive when set")
        if self.debias_warmup_epochs < 0:
            raise ConfigurationError("debias_warmup_epochs must be ≥ 0")
        if self.debias_warmup_epochs >= self.epochs and self.debias_warmup_epochs > 0:
            raise ConfigurationError(
                f"debias_warmup_epochs={self.debias_warmup_epochs} leaves no "
                f"epoch for the debias phase (epochs={self.epochs})"
            )
        expected_groups = tone_group_count(self.tone_scheme)
        if self.model.num_tone_groups != expected_groups:
            raise ConfigurationError(
                f"model declares {self.model.num_tone_groups} tone groups but "
                f"scheme {self.tone_scheme!r} has {expected_groups}"
            )

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "backbone": self.backbone.to_dict(),
            "task": self.task,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "optimizer": self.optimizer,
            "learning_rate": self.learning_rate,
            "scheduler_step": self.scheduler_step,
            "scheduler_gamma": self.scheduler_gamma,
            "seed": self.seed,
            "batch_mode": self.batch_mode,
            "tone_scheme": self.tone_scheme,
            "image_size": self.image_size,
            "aux_learning_rate": self.aux_learning_rate,
            "debias_warmup_epochs": self.debias_warmup_epochs,
            "augment": None
            if self.augment is None
            else {
                "rotation_degrees": self.augment.rotation_degrees,
                "shear_degrees": self.augment.shear_degrees,
                "horizontal_flip_prob": self.augment.horizontal_flip_prob,
                "vertical_flip_prob": self.augment.vertical_flip_prob,
                "brightness_jitter": self.augment.brightness_jitter,
            },
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        payload = dict(payload)
        payload["model"] = ModelConfig.from_dict(payload["model"])
        payload["backbone"] = BackboneSpec.from_dict(payload["backbone"])
        if payload.get("augment"):
            payload["augment"] = Augmentations(**payload["augment"])
        else:
            payload["augment"] = None
        return cls(**payload)


def expected_learning_rate(config: TrainConfig, epoch: int) -> float:
    """Closed form of the schedule: lr · γ^⌊epoch / step⌋."""
    return config.learning_rate * config.scheduler_gamma ** (epoch // config.scheduler_step)


def _tone_index(tone: int, scheme: str) -> int:
    if scheme == TONE_SCHEME_FITZPATRICK:
        return tone - 1
    return coarsen_tone(tone, scheme)


@dataclass
class TrainingData:
    """In-memory arrays for one partition, aligned with its records."""

    records: list[ImageRecord]
    mode: str  # "embeddings" or "pixels"
    inputs: np.ndarray  # embeddings: (n, d) float32; pixels: (n, H, W, 3) uint8
    class_labels: np.ndarray
    tone_indices: np.ndarray
    normalization: str = "unit"
    feature_dim: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def ids(self) -> set[str]:
        return {r.image_id for r in self.records}


def prepare_training_data(
    records,
    task: str,
    config: TrainConfig,
    backbone: Backbone | None = None,
    cache=None,
) -> TrainingData:
    """Load one partition into arrays.

    Frozen backbones produce an embedding table once (optionally via the
    cache) and the model trains an identity trunk on top; trainable backbones
    keep resized uint8 pixels and normalize (plus augment) per batch.
    """
    records = list(records)
    labels = np.asarray([task_label(r, task) for r in records], dtype=np.int64)
    tones = np.asarray(
        [_tone_index(r.tone, config.tone_scheme) for r in records], dtype=np.int64
    )
    if backbone is None:
        raise ConfigurationError("a loaded backbone is required to prepare data")
    norm_name = backbone.spec.resolved().normalization
    spec = PreprocessSpec(size=config.image_size, normalization=NORMALIZATIONS[norm_name])

    if backbone.spec.trainable:
        pixels = np.stack(
            [
                np.asarray(
                    load_image(r.image_path).resize(
                        (config.image_size, config.image_size), Image.Resampling.BILINEAR
                    ),
                    dtype=np.uint8,
                )
                for r in records
            ]
        )
        return TrainingData(
            records=records,
            mode="pixels",
            inputs=pixels,
            class_labels=labels,
            tone_indices=tones,
            normalization=norm_name,
            feature_dim=backbone.embedding_dim,
        )

    vectors = np.zeros((len(records), backbone.embedding_dim), dtype=np.float32)
    pending: list[int] = []
    for i, rec in enumerate(records):
        if cache is not None and rec.image_id in cache:
            vectors[i] = cache.get(rec.image_id)
        else:
            pending.append(i)
    if pending:
        pixels = np.stack(
            [preprocess_image(records[i].image_path, spec) for i in pending]
        )
        fresh = backbone.embed(pixels, image_ids=[records[i].image_id for i in pending])
        for row, i in enumerate(pending):
            vectors[i] = fresh[row]
            if cache is not None:
                cache.put(records[i].image_id, fresh[row])
    return TrainingData(
        records=records,
        mode="embeddings",
        inputs=vectors,
        class_labels=labels,
        tone_indices=tones,
        normalization=norm_name,
        feature_dim=backbone.embedding_dim,
    )


def _normalize_pixels(raw: np.ndarray, normalization: str) -> np.ndarray:
    norm = NORMALIZATIONS[normalization]
    arr = raw.astype(np.float32) / 255.0
    arr = (arr - np.asarray(norm.mean, dtype=np.float32)) / np.asarray(norm.std, dtype=np.float32)
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def batch_tensors(
    data: TrainingData,
    indices,
    augment: Augmentations | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Tensorize a batch; pixel mode optionally augments before normalizing."""
    idx = np.asarray(list(indices), dtype=np.int64)
    if data.mode == "embeddings":
        inputs = torch.from_numpy(data.inputs[idx])
    elif augment is not None and augment.any_enabled():
        spec = PreprocessSpec(
            size=data.inputs.shape[1],
            normalization=NORMALIZATIONS[data.normalization],
            augment=augment,
        )
        inputs = torch.from_numpy(
            np.stack(
                [preprocess_image(Image.fromarray(data.inputs[i]), spec, rng) for i in idx]
            )
        )
    else:
        inputs = torch.from_numpy(_normalize_pixels(data.inputs[idx], data.normalization))
    labels = torch.from_numpy(data.class_labels[idx])
    tones = torch.from_numpy(data.tone_indices[idx])
    return inputs, labels, tones


@dataclass
class RunManifest:
    config: dict
    split_seed: object
    dataset_checksum: str
    backbone_checksum: str
    code_version: str = __version__
    started: str = ""
    finished: str = ""
    wall_seconds: float = 0.0
    n_train: int = 0
    n_val: int = 0
    best_epoch: int = -1
    best_val_ba: float | None = None
    history: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "split_seed": self.split_seed,
            "dataset_checksum": self.dataset_checksum,
            "backbone_checksum": self.backbone_checksum,
            "code_version": self.code_version,
            "started": self.started,
            "finished": self.finished,
            "wall_seconds": self.wall_seconds,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "best_epoch": self.best_epoch,
            "best_val_ba": self.best_val_ba,
            "history": self.history,
            "notes": self.notes,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")


def dataset_checksum(records) -> str:
    digest = hashlib.sha256()
    for rec in sorted(records, key=lambda r: r.image_id):
        digest.update(f"{rec.image_id}:{rec.condition.value}:{rec.tone}\n".encode("utf-8"))
    return digest.hexdigest()


@dataclass
class TrainResult:
    model: DebiasClassifier
    manifest: RunManifest
    checkpoint_path: Path | None
    history: list


def _leakage_check(train_data: TrainingData, others: dict[str, TrainingData]) -> None:
    train_ids = train_data.ids()
    for name, other in others.items():
        overlap = train_ids & other.ids()
        if overlap:
            raise ConfigurationError(
                f"{len(overlap)} record id(s) shared between train and {name}: "
                f"{sorted(overlap)[:5]}"
            )


def _mean_components(component_log: list[dict]) -> dict:
    if not component_log:
        return {}
    keys = sorted({k for entry in component_log for k in entry})
    return {
        k: float(np.mean([entry[k] for entry in component_log if k in entry])) for k in keys
    }


def train(
    config: TrainConfig,
    split: SplitResult,
    backbone: Backbone,
    run_dir: str | Path | None = None,
    cache=None,
) -> TrainResult:
    """Run the full protocol on one split and return the best checkpoint.

    Auxiliary steps (TABE) run before the main step on every batch, on a
    disjoint parameter set. A non-finite main loss aborts the run: the last
    epoch-end state is written as ``last_good.pt`` (when run_dir is given)
    and NonFiniteLossError carries the offending batch id.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    started = time.time()
    train_data = prepare_training_data(split.train, config.task, config, backbone, cache=cache)
    val_data = prepare_training_data(split.val, config.task, config, backbone, cache=cache)
    test_ids = {r.image_id for r in split.test}
    _leakage_check(train_data, {"val": val_data})
    if train_data.ids() & test_ids:
        raise ConfigurationError("train/test id overlap detected")

    torch.manual_seed(config.seed)
    trunk = backbone.module if backbone.spec.trainable else nn.Identity()
    model = DebiasClassifier(config.model, trunk, train_data.feature_dim, seed=config.seed)
    model.check_parameter_partition()

    reshaping = (
        model.config.variant is Variant.TABE and model.config.alpha_confusion > 0
    ) or (
        model.config.variant is Variant.FAIRDISCO
        and (model.config.lambda_reversal > 0 or model.config.beta_contrastive > 0)
    )
    if reshaping and not any(p.requires_grad for p in model.trunk.parameters()):
        _warnings.warn(
            f"variant {model.config.variant.value} is training on a frozen "
            "representation (identity trunk over precomputed embeddings); its "
            "feature-reshaping terms have no parameters to act on and the "
            "task trajectory will match the baseline"
        )

    main_opt = torch.optim.Adam(model.main_parameters(), lr=config.learning_rate)
    schedulers = [
        torch.optim.lr_scheduler.StepLR(
            main_opt, step_size=config.scheduler_step, gamma=config.scheduler_gamma
        )
    ]
    aux_params = model.aux_parameters()
    aux_opt = None
    if aux_params:
        aux_lr = config.aux_learning_rate or config.learning_rate
        aux_opt = torch.optim.Adam(aux_params, lr=aux_lr)
        schedulers.append(
            torch.optim.lr_scheduler.StepLR(
                aux_opt, step_size=config.scheduler_step, gamma=config.scheduler_gamma
            )
        )

    history: list[dict] = []
    best_state = None
    best_val = -math.inf
    best_epoch = -1
    last_good = copy.deepcopy(model.state_dict())

    for epoch in range(config.epochs):
        lr_now = main_opt.param_groups[0]["lr"]
        in_warmup = epoch < config.debias_warmup_epochs
        weights = None
        if model.config.vae_active and epoch > 0 and not in_warmup:
            # Adaptive latent-space resampling: rarer latent regions get
            # larger sampling weights for the coming epoch's batches.
            latents = _latent_means(model, train_data)
            weights = adaptive_resampling_weights(latents, bins=model.config.histogram_bins)
        batch_rng = np.random.default_rng([config.seed, epoch])
        batches = condition_balanced_batches(
            train_data.records,
            config.batch_size,
            seed=batch_rng,
            mode=config.batch_mode,
            weights=weights,
        )
        augment_rng = np.random.default_rng([config.seed, epoch, 1])

        model.train()
        if not backbone.spec.trainable:
            backbone.module.eval()
        component_log: list[dict] = []
        for b, batch in enumerate(batches):
            inputs, labels, tones = batch_tensors(
                train_data, batch, augment=config.augment, rng=augment_rng
            )
            features = model.features(inputs)
            aux_value = None
            if model.config.variant is Variant.TABE and aux_opt is not None:
                # Auxiliary step first; the main objective below is computed
                # against the freshly updated tone head.
                aux = tabe_aux_loss(model, features, tones)
                aux_opt.zero_grad()
                aux.total.backward()
                aux_opt.step()
                aux_value = float(aux.total.detach())
                if in_warmup:
                    main = warmup_loss(model, features, labels)
                else:
                    main = tabe_main_loss(model, features, labels)
            elif in_warmup and model.config.variant is not Variant.BASELINE:
                main = warmup_loss(model, features, labels)
            else:
                main, _ = batch_losses(model, features, labels, tones)
            total = main.total
            if not torch.isfinite(total.detach()):
                if run_dir is not None:
                    torch.save(last_good, run_dir / "last_good.pt")
                raise NonFiniteLossError(
                    batch_id=f"epoch{epoch}/batch{b}",
                    epoch=epoch,
                    detail="main objective became non-finite; last-good checkpoint saved",
                )
            main_opt.zero_grad()
            total.backward()
            main_opt.step()
            entry = {name: float(v.detach()) for name, v in main.components.items()}
            entry["total"] = float(total.detach())
            if aux_value is not None:
                entry["tone_aux"] = aux_value
            component_log.append(entry)

        val_preds = evaluate(model, val_data, split_index=0)
        val_ba = balanced_accuracy(val_preds)
        val_value = None if is_absent(val_ba) else float(val_ba)
        history.append(
            {
                "epoch": epoch,
                "lr": lr_now,
                "train": _mean_components(component_log),
                "val_ba": val_value,
                "n_batches": len(batches),
            }
        )
        # Debiased variants only become themselves once warm-up ends; a
        # warm-up checkpoint would just be a baseline wearing their name.
        selectable = (
            model.config.variant is Variant.BASELINE or not in_warmup
        )
        if selectable and val_value is not None and val_value > best_val:
            best_val = val_value
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        last_good = copy.deepcopy(model.state_dict())
        for scheduler in schedulers:
            scheduler.step()

    if best_state is None:
        best_state = last_good
        best_epoch = config.epochs - 1
    model.load_state_dict(best_state)
    model.eval()

    manifest = RunManifest(
        config=config.to_dict(),
        split_seed=split.seed,
        dataset_checksum=dataset_checksum(split.train + split.val),
        backbone_checksum=backbone.checksum,
        started=_dt.datetime.fromtimestamp(started).isoformat(timespec="seconds"),
        finished=_dt.datetime.now().isoformat(timespec="seconds"),
        wall_seconds=round(time.time() - started, 3),
        n_train=len(train_data),
        n_val=len(val_data),
        best_epoch=best_epoch,
        best_val_ba=None if best_val == -math.inf else best_val,
        history=history,
    )

    checkpoint_path = None
    if run_dir is not None:
        checkpoint_path = run_dir / "best.pt"
        save_checkpoint(model, checkpoint_path, config)
        manifest.save(run_dir / "manifest.json")
    return TrainResult(model=model, manifest=manifest, checkpoint_path=checkpoint_path, history=history)


def _latent_means(model: DebiasClassifier, data: TrainingData, chunk: int = 256) -> np.ndarray:
    model.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, len(data), chunk):
            inputs, _, _ = batch_tensors(data, range(start, min(start + chunk, len(data))))
            mu, _ = model.vae.encode(model.features(inputs))
            outputs.append(mu.numpy())
    model.train()
    return np.concatenate(outputs)


def evaluate(
    model: DebiasClassifier,
    data: TrainingData,
    split_index: int = 0,
    chunk: int = 256,
) -> list[PredictionRecord]:
    """Deterministic evaluation pass: one PredictionRecord per input.

    Augmentation is never applied here; tone groups carry the raw Fitzpatrick
    type so metric-time coarsening stays a reporting choice.
    """
    was_training = model.training
    model.eval()
    predictions: list[PredictionRecord] = []
    with torch.no_grad():
        for start in range(0, len(data), chunk):
            idx = range(start, min(start + chunk, len(data)))
            inputs, _, _ = batch_tensors(data, idx)
            logits = model(inputs)["logits"]
            scores = model.scores(logits).numpy()
            labels = model.predict_labels(logits).numpy()
            for offset, i in enumerate(idx):
                rec = data.records[i]
                predictions.append(
                    PredictionRecord(
                        image_id=rec.image_id,
                        y_true=int(data.class_labels[i]),
                        y_pred=int(labels[offset]),
                        group=rec.tone,
                        scores=tuple(float(s) for s in scores[offset]),
                        split=split_index,
                    )
                )
    if was_training:
        model.train()
    return predictions


def extract_features(model: DebiasClassifier, data: TrainingData, chunk: int = 256) -> np.ndarray:
    """Trunk features for every record, in order — the tone probe's input."""
    was_training = model.training
    model.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, len(data), chunk):
            inputs, _, _ = batch_tensors(data, range(start, min(start + chunk, len(data))))
            outputs.append(model.features(inputs).numpy())
    if was_training:
        model.train()
    return np.concatenate(outputs)


def save_checkpoint(model: DebiasClassifier, path: str | Path, config: TrainConfig) -> None:
    payload = {
        "model_state": {k: v.cpu() for k, v in model.state_dict().items()},
        "model_config": model.config.to_dict(),
        "backbone_spec": config.backbone.to_dict(),
        "feature_dim": model.feature_dim,
        "seed": config.seed,
        "weights_checksum": weights_checksum(model),
        "train_config": config.to_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[DebiasClassifier, dict]:
    """Rebuild the model from a checkpoint; evaluation after reload is bitwise
    identical to evaluation before saving."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model_config = ModelConfig.from_dict(payload["model_config"])
    spec = BackboneSpec.from_dict(payload["backbone_spec"])
    if spec.trainable:
        trunk = load_backbone(spec, seed=payload["seed"]).module
    else:
        trunk = nn.Identity()
    model = DebiasClassifier(model_config, trunk, payload["feature_dim"], seed=payload["seed"])
    try:
        model.load_state_dict(payload["model_state"])
    except RuntimeError as exc:
        raise ConfigurationError(f"checkpoint does not match the declared model: {exc}") from exc
    expected = payload.get("weights_checksum")
    if expected and weights_checksum(model) != expected:
        raise ConfigurationError("checkpoint weights checksum mismatch after load")
    model.eval()
    return model, payload
