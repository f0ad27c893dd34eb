"""Loss primitives shared by the debiasing variants.

Everything here is a pure function of tensors (plus one autograd.Function for
gradient reversal); the variant-specific composition lives in models.py. Each
composite returns a LossBreakdown whose total must match the weighted sum of
its components — verify() enforces that invariant at 1e-6 relative.
"""

from __future__ import annotations

import math
import warnings as _warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from dermfair.errors import NumericError

PROB_FLOOR = 1e-12
DEFAULT_TEMPERATURE = 0.1
DEFAULT_HISTOGRAM_BINS = 10


@dataclass
class LossBreakdown:
    """A total loss plus its named, unweighted components and their weights."""

    total: torch.Tensor
    components: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def verify(self, rel_tol: float = 1e-6) -> None:
        expected = sum(
            self.weights.get(name, 1.0) * float(value.detach())
            for name, value in self.components.items()
        )
        actual = float(self.total.detach())
        if abs(actual - expected) > rel_tol * max(1.0, abs(expected)):
            raise NumericError(
                f"loss breakdown mismatch: total={actual!r} but weighted sum "
                f"of components={expected!r}"
            )

    def scalar(self) -> float:
        return float(self.total.detach())

    def component(self, name: str) -> float:
        return float(self.components[name].detach())


def task_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Classification loss: single-logit sigmoid BCE for binary tasks,
    softmax cross-entropy otherwise."""
    if logits.ndim == 1 or logits.shape[-1] == 1:
        flat = logits.reshape(-1)
        label_values = labels.detach().reshape(-1)
        bad = [v for v in label_values.tolist() if v not in (0, 1)]
        if bad:
            raise ValueError(f"binary labels must be in {{0, 1}}, got {sorted(set(bad))}")
        return F.binary_cross_entropy_with_logits(flat, label_values.to(flat.dtype))
    n_classes = logits.shape[-1]
    label_values = labels.detach().reshape(-1)
    if label_values.min() < 0 or label_values.max() >= n_classes:
        raise ValueError(
            f"labels must be in [0, {n_classes}), got range "
            f"[{int(label_values.min())}, {int(label_values.max())}]"
        )
    return F.cross_entropy(logits, labels.reshape(-1).long())


def baseline_loss(logits: torch.Tensor, labels: torch.Tensor) -> LossBreakdown:
    value = task_loss(logits, labels)
    return LossBreakdown(total=value, components={"task": value}, weights={"task": 1.0})


def confusion_loss(probabilities: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of tone predictions against the uniform distribution.

    Mean over the batch of −(1/K) Σ_k log p_k; minimized at uniform rows with
    value ln K. Rows must already be distributions (sum 1 within 1e-6); zero
    probabilities are floored at 1e-12 before the log.
    """
    if probabilities.ndim != 2 or probabilities.shape[1] < 2:
        raise ValueError(f"expected batch × K (K ≥ 2), got shape {tuple(probabilities.shape)}")
    row_sums = probabilities.detach().sum(dim=1)
    if bool((row_sums - 1.0).abs().max() > 1e-6):
        raise ValueError("confusion_loss rows must each sum to 1")
    k = probabilities.shape[1]
    clamped = probabilities.clamp_min(PROB_FLOOR)
    return (-clamped.log().sum(dim=1) / k).mean()


class GradientReversalFunction(torch.autograd.Function):
    """Identity forward; backward multiplies the gradient by −λ."""

    @staticmethod
    def forward(ctx, x, lambd: float):
        ctx.lambd = lambd
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lambd, None


def gradient_reversal(x: torch.Tensor, lambd: float = 1.0) -> torch.Tensor:
    if lambd < 0:
        raise ValueError(f"reversal strength must be ≥ 0, got {lambd}")
    return GradientReversalFunction.apply(x, float(lambd))


class GradientReversal(torch.nn.Module):
    def __init__(self, lambd: float = 1.0):
        super().__init__()
        if lambd < 0:
            raise ValueError(f"reversal strength must be ≥ 0, got {lambd}")
        self.lambd = float(lambd)

    def forward(self, x):
        return gradient_reversal(x, self.lambd)

    def extra_repr(self):
        return f"lambd={self.lambd}"


def supervised_contrastive_loss(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    temperature: float = DEFAULT_TEMPERATURE,
) -> torch.Tensor:
    """Supervised contrastive loss with class-label positives.

    Embeddings are L2-normalized internally. Anchors without any positive in
    the batch are skipped; if no anchor has a positive the loss is 0 and a
    warning is emitted. With all embeddings identical every pairwise
    similarity ties, so the loss evaluates to log(n−1) exactly.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    n = embeddings.shape[0]
    labels = labels.reshape(-1)
    if labels.shape[0] != n:
        raise ValueError("embeddings and labels disagree on batch size")
    if n < 2:
        _warnings.warn("contrastive batch smaller than 2; loss is 0")
        return embeddings.sum() * 0.0

    z = F.normalize(embeddings, dim=1)
    sim = z @ z.t() / temperature
    self_mask = torch.eye(n, dtype=torch.bool, device=embeddings.device)
    sim = sim.masked_fill(self_mask, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)

    positive = labels.unsqueeze(0) == labels.unsqueeze(1)
    positive = positive & ~self_mask
    pos_counts = positive.sum(dim=1)
    anchors = pos_counts > 0
    if not bool(anchors.any()):
        _warnings.warn("no positive pair in contrastive batch; loss is 0")
        return embeddings.sum() * 0.0
    per_anchor = (log_prob.masked_fill(~positive, 0.0).sum(dim=1))[anchors] / pos_counts[anchors]
    return -(per_anchor.mean())


def kl_diag_gaussian(mu: torch.Tensor, var: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag(var)) ‖ N(0, I)) in closed form, mean over the batch.

    Per sample: ½ Σ_d (var_d + mu_d² − 1 − ln var_d). Non-positive variances
    are a fatal numeric error rather than something to clamp through.
    """
    if bool((var.detach() <= 0).any()):
        raise NumericError("posterior variance must be strictly positive")
    per_sample = 0.5 * (var + mu.pow(2) - 1.0 - var.log()).sum(dim=-1)
    return per_sample.mean()


def adaptive_resampling_weights(
    latents: np.ndarray,
    bins: int = DEFAULT_HISTOGRAM_BINS,
    eps: float = 1e-8,
) -> np.ndarray:
    """Inverse-density sampling weights over latent means, normalized to 1.

    Density at a point is the product of per-dimension histogram frequencies
    (B bins per dimension). Rare latent regions get proportionally larger
    weights; degenerate inputs (everything in one bin) fall back to uniform.
    """
    latents = np.asarray(latents, dtype=float)
    if latents.ndim == 1:
        latents = latents[:, None]
    if latents.ndim != 2 or latents.shape[0] < 1:
        raise ValueError(f"expected n × d latent means, got shape {latents.shape}")
    n, d = latents.shape
    if n == 1:
        return np.ones(1)

    density = np.ones(n)
    for dim in range(d):
        column = latents[:, dim]
        if np.ptp(column) == 0.0:
            continue  # single occupied bin: no information in this dimension
        counts, edges = np.histogram(column, bins=bins)
        idx = np.clip(np.digitize(column, edges[1:-1], right=False), 0, bins - 1)
        density *= counts[idx] / n
    raw = 1.0 / (density + eps)
    return raw / raw.sum()


def expected_uniform_confusion(k: int) -> float:
    """ln K — the analytic minimum of confusion_loss, for test convenience."""
    return math.log(k)
