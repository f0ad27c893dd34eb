"""Classifier heads and the three bias-unlearning variants.

One DebiasClassifier wraps a feature trunk (a backbone module, or identity
when training on precomputed embeddings) plus the heads its variant needs:

* BASELINE  — task head only.
* TABE      — adds a tone head trained in an alternating auxiliary step; the
  main step penalizes the tone head's confidence via the confusion loss.
* FAIRDISCO — adds a tone head behind gradient reversal plus a supervised
  contrastive term over class labels.
* VAE       — adds a diagonal-Gaussian encoder/decoder; the task head reads
  the latent code and the total adds KL and reconstruction terms.

Setting every debias weight of a variant to zero reduces its loss — and its
optimization trajectory — to the baseline exactly: zero-weighted terms are
skipped, never multiplied by zero, and auxiliary modules are initialized from
a seed stream separate from the trunk and task head.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import asdict, dataclass, field, replace

import torch
import torch.nn.functional as F
from torch import nn

from dermfair.errors import ConfigurationError
from dermfair.losses import (
    DEFAULT_HISTOGRAM_BINS,
    DEFAULT_TEMPERATURE,
    LossBreakdown,
    confusion_loss,
    gradient_reversal,
    kl_diag_gaussian,
    supervised_contrastive_loss,
    task_loss,
)


class Variant(str, enum.Enum):
    BASELINE = "baseline"
    TABE = "tabe"
    FAIRDISCO = "fairdisco"
    VAE = "vae"


# Which loss weights each variant consumes; all others must be zero.
RELEVANT_WEIGHTS = {
    Variant.BASELINE: frozenset(),
    Variant.TABE: frozenset({"alpha_confusion"}),
    Variant.FAIRDISCO: frozenset({"lambda_reversal", "beta_contrastive"}),
    Variant.VAE: frozenset({"kappa_kl", "rho_recon"}),
}

DEFAULT_WEIGHTS = {
    "alpha_confusion": 1.0,
    "lambda_reversal": 1.0,
    "beta_contrastive": 0.5,
    "kappa_kl": 1.0,
    "rho_recon": 1.0,
}


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant
    num_classes: int = 2
    num_tone_groups: int = 6
    alpha_confusion: float = 0.0
    lambda_reversal: float = 0.0
    beta_contrastive: float = 0.0
    kappa_kl: float = 0.0
    rho_recon: float = 0.0
    temperature: float = DEFAULT_TEMPERATURE
    histogram_bins: int = DEFAULT_HISTOGRAM_BINS
    head_hidden: int = 128
    latent_dim: int = 32
    threshold: float = 0.5

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError(f"need ≥2 classes, got {self.num_classes}")
        if not 2 <= self.num_tone_groups <= 6:
            raise ConfigurationError(
                f"tone groups must be in [2, 6], got {self.num_tone_groups}"
            )
        for name in DEFAULT_WEIGHTS:
            value = getattr(self, name)
            if value < 0:
                raise ConfigurationError(f"{name} must be ≥ 0, got {value}")
            if value != 0.0 and name not in RELEVANT_WEIGHTS[self.variant]:
                raise ConfigurationError(
                    f"{name}={value} is not consumed by variant "
                    f"{self.variant.value}; it must be zero or omitted"
                )

    @classmethod
    def defaults_for(cls, variant: Variant, **overrides) -> "ModelConfig":
        weights = {
            name: DEFAULT_WEIGHTS[name]
            for name in RELEVANT_WEIGHTS[variant]
        }
        weights.update(overrides)
        return cls(variant=variant, **weights)

    @property
    def is_binary(self) -> bool:
        return self.num_classes == 2

    @property
    def vae_active(self) -> bool:
        return self.variant is Variant.VAE and (self.kappa_kl > 0 or self.rho_recon > 0)

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["variant"] = self.variant.value
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        payload = dict(payload)
        payload["variant"] = Variant(payload["variant"])
        return cls(**payload)


def derive_component_seed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{seed}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def _mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Module:
    if hidden <= 0:
        return nn.Linear(in_dim, out_dim)
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, out_dim))


class VaeHead(nn.Module):
    """Diagonal-Gaussian encoder and decoder over trunk features."""

    def __init__(self, feature_dim: int, hidden: int, latent_dim: int):
        super().__init__()
        width = hidden if hidden > 0 else latent_dim * 2
        self.encoder = nn.Sequential(nn.Linear(feature_dim, width), nn.ReLU(inplace=True))
        self.mu_head = nn.Linear(width, latent_dim)
        self.logvar_head = nn.Linear(width, latent_dim)
        self.decoder = nn.Sequential(
            nn.Linear(latent_dim, width), nn.ReLU(inplace=True), nn.Linear(width, feature_dim)
        )

    def encode(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        hidden = self.encoder(features)
        return self.mu_head(hidden), self.logvar_head(hidden)

    def sample(self, mu: torch.Tensor, logvar: torch.Tensor, training: bool) -> torch.Tensor:
        if not training:
            return mu
        std = (0.5 * logvar).exp()
        return mu + std * torch.randn_like(std)


class DebiasClassifier(nn.Module):
    """Trunk + task head + whatever auxiliary modules the variant needs."""

    def __init__(self, config: ModelConfig, trunk: nn.Module, feature_dim: int, seed: int = 0):
        super().__init__()
        self.config = config
        self.trunk = trunk
        self.feature_dim = feature_dim
        out_dim = 1 if config.is_binary else config.num_classes

        torch.manual_seed(derive_component_seed(seed, "task_head"))
        task_in = config.latent_dim if config.vae_active else feature_dim
        self.task_head = _mlp(task_in, config.head_hidden, out_dim)

        self.tone_head = None
        self.vae = None
        torch.manual_seed(derive_component_seed(seed, "aux"))
        if config.variant in (Variant.TABE, Variant.FAIRDISCO):
            self.tone_head = _mlp(feature_dim, config.head_hidden, config.num_tone_groups)
        elif config.vae_active:
            self.vae = VaeHead(feature_dim, config.head_hidden, config.latent_dim)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk(x)

    def forward(self, x: torch.Tensor) -> dict:
        features = self.features(x)
        out = {"features": features}
        if self.vae is not None:
            mu, logvar = self.vae.encode(features)
            z = self.vae.sample(mu, logvar, self.training)
            out.update(mu=mu, logvar=logvar, z=z, recon=self.vae.decoder(z))
            out["logits"] = self.task_head(z)
        else:
            out["logits"] = self.task_head(features)
        if self.tone_head is not None:
            out["tone_logits"] = self.tone_head(tone_head_input(features))
        return out

    def scores(self, logits: torch.Tensor) -> torch.Tensor:
        """Per-class probabilities; binary heads expand to (1−p, p)."""
        if self.config.is_binary:
            p = torch.sigmoid(logits.reshape(-1))
            return torch.stack([1.0 - p, p], dim=1)
        return F.softmax(logits, dim=1)

    def predict_labels(self, logits: torch.Tensor) -> torch.Tensor:
        if self.config.is_binary:
            p = torch.sigmoid(logits.reshape(-1))
            return (p >= self.config.threshold).long()
        return logits.argmax(dim=1)

    def main_parameters(self) -> list:
        params = [p for p in self.trunk.parameters() if p.requires_grad]
        params += list(self.task_head.parameters())
        if self.config.variant is Variant.FAIRDISCO and self.tone_head is not None:
            params += list(self.tone_head.parameters())
        if self.vae is not None:
            params += list(self.vae.parameters())
        return params

    def aux_parameters(self) -> list:
        if self.config.variant is Variant.TABE and self.tone_head is not None:
            return list(self.tone_head.parameters())
        return []

    def check_parameter_partition(self) -> None:
        main = {id(p) for p in self.main_parameters()}
        aux = {id(p) for p in self.aux_parameters()}
        if main & aux:
            raise ConfigurationError(
                "auxiliary and main optimization steps share parameters; "
                "the alternating scheme requires disjoint sets"
            )


def tone_head_input(features: torch.Tensor) -> torch.Tensor:
    """Per-sample unit normalization of everything the tone head reads.

    Without it the cheapest way to defeat the tone head is shrinking every
    feature toward zero — a uniform posterior at no rotational cost — which
    also collapses the representation the task head needs (irrecoverably so
    behind a ReLU). Normalizing closes the scale escape: adversarial pressure
    has to rotate tone information out of the feature directions instead.
    """
    return features / (features.norm(dim=1, keepdim=True) + 1e-8)


def tabe_aux_loss(
    model: DebiasClassifier, features: torch.Tensor, tone_labels: torch.Tensor
) -> LossBreakdown:
    """Auxiliary tone objective: CE of the tone head on detached features.

    Detaching means a step on this objective can only move tone-head
    parameters — the main/auxiliary parameter partition stays disjoint.
    """
    if model.config.variant is not Variant.TABE:
        raise ConfigurationError(f"tabe_aux_loss called for variant {model.config.variant.value}")
    aux_value = F.cross_entropy(
        model.tone_head(tone_head_input(features.detach())), tone_labels.long()
    )
    return LossBreakdown(
        total=aux_value, components={"tone_aux": aux_value}, weights={"tone_aux": 1.0}
    )


def tabe_main_loss(
    model: DebiasClassifier, features: torch.Tensor, class_labels: torch.Tensor
) -> LossBreakdown:
    """Main objective: task loss + α · confusion of the tone head's output.

    The confusion penalty backpropagates through the tone head into the
    trunk, but the optimizer partition keeps tone-head parameters out of the
    main step. With α = 0 the term is skipped entirely, so the objective is
    bitwise the baseline task loss.
    """
    config = model.config
    if config.variant is not Variant.TABE:
        raise ConfigurationError(f"tabe_main_loss called for variant {config.variant.value}")
    task_value = task_loss(model.task_head(features), class_labels)
    components = {"task": task_value}
    weights = {"task": 1.0}
    total = task_value
    if config.alpha_confusion > 0:
        tone_probs = F.softmax(model.tone_head(tone_head_input(features)), dim=1)
        conf = confusion_loss(tone_probs)
        components["confusion"] = conf
        weights["confusion"] = config.alpha_confusion
        total = total + config.alpha_confusion * conf
    return LossBreakdown(total=total, components=components, weights=weights)


def tabe_step_losses(
    model: DebiasClassifier,
    features: torch.Tensor,
    class_labels: torch.Tensor,
    tone_labels: torch.Tensor,
) -> tuple[LossBreakdown, LossBreakdown]:
    """(main objective, auxiliary tone objective) for one TABE batch.

    The training loop alternates auxiliary-then-main per batch, recomputing
    the main objective after the auxiliary step so the confusion penalty sees
    the updated tone head.
    """
    model.check_parameter_partition()
    aux = tabe_aux_loss(model, features, tone_labels)
    main = tabe_main_loss(model, features, class_labels)
    return main, aux


def fairdisco_loss(
    model: DebiasClassifier,
    features: torch.Tensor,
    class_labels: torch.Tensor,
    tone_labels: torch.Tensor,
) -> LossBreakdown:
    """Task CE + tone CE behind gradient reversal + supervised contrastive."""
    config = model.config
    if config.variant is not Variant.FAIRDISCO:
        raise ConfigurationError(f"fairdisco_loss called for variant {config.variant.value}")

    task_value = task_loss(model.task_head(features), class_labels)
    components = {"task": task_value}
    weights = {"task": 1.0}
    total = task_value
    if config.lambda_reversal > 0:
        reversed_features = gradient_reversal(tone_head_input(features), config.lambda_reversal)
        tone_value = F.cross_entropy(model.tone_head(reversed_features), tone_labels.long())
        components["tone_adversary"] = tone_value
        weights["tone_adversary"] = 1.0
        total = total + tone_value
    if config.beta_contrastive > 0:
        contrastive = supervised_contrastive_loss(
            features, class_labels, temperature=config.temperature
        )
        components["contrastive"] = contrastive
        weights["contrastive"] = config.beta_contrastive
        total = total + config.beta_contrastive * contrastive
    return LossBreakdown(total=total, components=components, weights=weights)


def vae_losses(
    model: DebiasClassifier,
    features: torch.Tensor,
    class_labels: torch.Tensor,
) -> LossBreakdown:
    """ρ·reconstruction + κ·KL + task CE on the latent code.

    With both κ and ρ zero the variant deliberately degenerates to the
    baseline: the task head reads trunk features directly and no VAE modules
    exist, so trajectories match the baseline bitwise.
    """
    config = model.config
    if config.variant is not Variant.VAE:
        raise ConfigurationError(f"vae_losses called for variant {config.variant.value}")
    if not config.vae_active:
        task_value = task_loss(model.task_head(features), class_labels)
        return LossBreakdown(total=task_value, components={"task": task_value}, weights={"task": 1.0})

    mu, logvar = model.vae.encode(features)
    z = model.vae.sample(mu, logvar, model.training)
    task_value = task_loss(model.task_head(z), class_labels)
    components = {"task": task_value}
    weights = {"task": 1.0}
    total = task_value
    if config.kappa_kl > 0:
        kl = kl_diag_gaussian(mu, logvar.exp())
        components["kl"] = kl
        weights["kl"] = config.kappa_kl
        total = total + config.kappa_kl * kl
    if config.rho_recon > 0:
        recon = F.mse_loss(model.vae.decoder(z), features.detach())
        components["reconstruction"] = recon
        weights["reconstruction"] = config.rho_recon
        total = total + config.rho_recon * recon
    return LossBreakdown(total=total, components=components, weights=weights)


def warmup_loss(
    model: DebiasClassifier,
    features: torch.Tensor,
    class_labels: torch.Tensor,
) -> LossBreakdown:
    """Task-only objective for the debias warm-up epochs.

    Starting the adversarial (or VAE) pressure before the trunk has any
    class-discriminative structure lets the debias terms fight the task cue
    while it is still weak, and under a strong tone confound the optimizer
    settles on predicting nothing. Warm-up trains the task alone first; the
    topology never changes — a VAE task head still reads the latent code, KL
    and reconstruction are simply omitted.
    """
    if model.vae is not None:
        mu, logvar = model.vae.encode(features)
        z = model.vae.sample(mu, logvar, model.training)
        value = task_loss(model.task_head(z), class_labels)
    else:
        value = task_loss(model.task_head(features), class_labels)
    return LossBreakdown(total=value, components={"task": value}, weights={"task": 1.0})


def batch_losses(
    model: DebiasClassifier,
    features: torch.Tensor,
    class_labels: torch.Tensor,
    tone_labels: torch.Tensor | None,
) -> tuple[LossBreakdown, LossBreakdown | None]:
    """Uniform dispatch: (main breakdown, auxiliary breakdown or None)."""
    variant = model.config.variant
    if variant is Variant.BASELINE:
        task_value = task_loss(model.task_head(features), class_labels)
        return (
            LossBreakdown(total=task_value, components={"task": task_value}, weights={"task": 1.0}),
            None,
        )
    if variant is Variant.TABE:
        main, aux = tabe_step_losses(model, features, class_labels, tone_labels)
        return main, aux
    if variant is Variant.FAIRDISCO:
        return fairdisco_loss(model, features, class_labels, tone_labels), None
    if variant is Variant.VAE:
        return vae_losses(model, features, class_labels), None
    raise ConfigurationError(f"unknown variant {variant!r}")
