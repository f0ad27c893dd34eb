"""Tone-confounded synthetic benchmark generator plus the tone probe.

Images are 2-class shapes (disc vs square lesion mask) on a background whose
base brightness encodes one of six tone levels. The class signal (shape) and
tone signal (background statistics) are separable by construction, so a
debiasing mechanism has something real to remove. The train-time class↔tone
correlation ρ is injected through cell counts with complementary rounding:
per-class and per-tone marginals stay exact for any ρ.

Tone supergroups for the confound: light = types 1–3, dark = types 4–6; the
malignant-proxy class (disc) is over-represented in the dark supergroup at
strength ρ. Test pools must always be generated at ρ=0 so measured
disparities reflect learned bias, not sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image

from dermfair.errors import ConfigurationError
from dermfair.records import Condition, DataSource, ImageRecord

#: Shape class → (manifest label, harmonized condition). Disc stands in for
#: the malignant class of the cancer task, square for benign.
SHAPE_CLASSES = (
    ("disc lesion", Condition.MALIGNANT),
    ("square lesion", Condition.BENIGN),
)

LIGHT_TONES = (1, 2, 3)
DARK_TONES = (4, 5, 6)

#: Background base brightness per Fitzpatrick-like tone level 1..6.
TONE_BRIGHTNESS = (235, 200, 165, 130, 95, 60)

#: Lesion fill, deliberately far from every background in hue so the class
#: cue (shape/extent of the red region) stays legible at all six tone levels.
_LESION_COLOR = np.array([180, 30, 40], dtype=float)


@dataclass(frozen=True)
class SyntheticSpec:
    n_per_cell: int = 50
    image_size: int = 64
    rho: float = 0.0
    noise: float = 0.05
    seed: int = 0
    tolerance: float = 0.05  # allowed |empirical φ − ρ|

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigurationError(f"confound strength must be in [0,1], got {self.rho}")
        if not 0.0 <= self.noise <= 0.5:
            raise ConfigurationError(f"noise level must be in [0, 0.5], got {self.noise}")
        if self.image_size < 16:
            raise ConfigurationError(f"image size must be ≥ 16, got {self.image_size}")
        if self.n_per_cell < 1:
            raise ConfigurationError("n_per_cell must be ≥ 1")


def cell_counts(spec: SyntheticSpec) -> dict[tuple[int, int], int]:
    """Per-(class, tone) counts realizing the confound with exact marginals.

    The favored supergroup of each class gets n+k per cell and the other
    n−k, with k = round(n·ρ); complementary rounding keeps every per-class
    and per-tone marginal at exactly 2n and 6n respectively. Empirical φ is
    then k/n, so the spec is infeasible when |k/n − ρ| exceeds the tolerance.
    """
    n = spec.n_per_cell
    k = int(round(n * spec.rho))
    phi = k / n
    if abs(phi - spec.rho) > spec.tolerance:
        minimal = math.ceil(0.5 / spec.tolerance)
        raise ConfigurationError(
            f"n_per_cell={n} cannot realize ρ={spec.rho} within ±{spec.tolerance} "
            f"(closest achievable φ={phi:.4f}); minimal feasible n_per_cell is {minimal}"
        )
    counts = {}
    for class_idx, _ in enumerate(SHAPE_CLASSES):
        # Class 0 (disc/malignant proxy) is over-represented in dark tones.
        favored = DARK_TONES if class_idx == 0 else LIGHT_TONES
        for tone in LIGHT_TONES + DARK_TONES:
            counts[(class_idx, tone)] = n + k if tone in favored else n - k
    return counts


def empirical_phi(records) -> float:
    """Class↔supergroup φ coefficient of an emitted record set."""
    a = b = c = d = 0  # rows: disc/other, cols: dark/light
    for rec in records:
        disc = rec.condition is SHAPE_CLASSES[0][1]
        dark = rec.tone in DARK_TONES
        if disc and dark:
            a += 1
        elif disc:
            b += 1
        elif dark:
            c += 1
        else:
            d += 1
    denominator = math.sqrt((a + b) * (c + d) * (a + c) * (b + d))
    if denominator == 0:
        return 0.0
    return (a * d - b * c) / denominator


def class_tone_mutual_information(records) -> float:
    """Empirical MI (nats) between condition and tone over a record set."""
    joint: dict[tuple[str, int], int] = {}
    for rec in records:
        key = (rec.condition.value, rec.tone)
        joint[key] = joint.get(key, 0) + 1
    total = sum(joint.values())
    class_marginal: dict[str, float] = {}
    tone_marginal: dict[int, float] = {}
    for (cls, tone), count in joint.items():
        class_marginal[cls] = class_marginal.get(cls, 0) + count
        tone_marginal[tone] = tone_marginal.get(tone, 0) + count
    mi = 0.0
    for (cls, tone), count in joint.items():
        p_joint = count / total
        p_product = (class_marginal[cls] / total) * (tone_marginal[tone] / total)
        mi += p_joint * math.log(p_joint / p_product)
    return mi


def _render_image(class_idx: int, tone: int, size: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    brightness = TONE_BRIGHTNESS[tone - 1]
    # Warm-tinted background so all three channels carry the tone signal.
    base = np.array([brightness, 0.84 * brightness, 0.72 * brightness])
    canvas = np.ones((size, size, 3), dtype=float) * base

    # Tight size/position jitter keeps lesion area a near-constant fraction
    # of the frame: the disc-vs-square signal must come from covered area and
    # edge geometry, not from incidental scale variation drowning it out.
    cx = size / 2 + rng.uniform(-size / 10, size / 10)
    cy = size / 2 + rng.uniform(-size / 10, size / 10)
    radius = size * 0.20 * rng.uniform(0.95, 1.05)
    yy, xx = np.mgrid[0:size, 0:size]
    if class_idx == 0:
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
    else:
        mask = (np.abs(xx - cx) <= radius) & (np.abs(yy - cy) <= radius)
    canvas[mask] = _LESION_COLOR

    canvas += rng.normal(0.0, noise * 255.0, canvas.shape)
    return np.clip(canvas, 0, 255).astype(np.uint8)


def generate(spec: SyntheticSpec, out_dir: str | Path) -> list[ImageRecord]:
    """Render one pool of images plus a manifest in the shared schema.

    Deterministic for a seed, down to image bytes: every image draws from its
    own generator keyed by (seed, class, tone, index). The manifest
    (image_id, label, fitzpatrick_scale) loads through the normal ingestion
    path with source=SYNTHETIC.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    counts = cell_counts(spec)

    records: list[ImageRecord] = []
    rows = []
    for class_idx, (label, condition) in enumerate(SHAPE_CLASSES):
        for tone in LIGHT_TONES + DARK_TONES:
            for i in range(counts[(class_idx, tone)]):
                rng = np.random.default_rng([spec.seed, class_idx, tone, i])
                pixels = _render_image(class_idx, tone, spec.image_size, spec.noise, rng)
                image_id = f"syn{spec.seed}_c{class_idx}_t{tone}_{i:05d}"
                path = image_dir / f"{image_id}.png"
                Image.fromarray(pixels).save(path)
                rows.append(
                    {"image_id": image_id, "label": label, "fitzpatrick_scale": tone}
                )
                records.append(
                    ImageRecord(
                        image_id=image_id,
                        image_path=path,
                        raw_diagnosis=label,
                        condition=condition,
                        tone=tone,
                        source=DataSource.SYNTHETIC,
                    )
                )
    pd.DataFrame(rows).to_csv(out_dir / "manifest.csv", index=False)

    phi = empirical_phi(records)
    if abs(phi - spec.rho) > spec.tolerance:
        raise ConfigurationError(
            f"emitted pool has φ={phi:.4f}, outside ±{spec.tolerance} of ρ={spec.rho}"
        )
    return records


@dataclass(frozen=True)
class SyntheticBenchmark:
    """The three pools of one benchmark instance."""

    train: list[ImageRecord]
    internal_test: list[ImageRecord]
    external_test: list[ImageRecord]
    spec: SyntheticSpec


def generate_benchmark(
    spec: SyntheticSpec,
    out_dir: str | Path,
    test_n_per_cell: int | None = None,
) -> SyntheticBenchmark:
    """Train pool at spec.rho plus two disjoint test pools at ρ=0.

    Pool seeds are derived from the spec seed so the three pools never share
    an image; both test pools are tone-balanced by construction.
    """
    out_dir = Path(out_dir)
    test_n = test_n_per_cell if test_n_per_cell is not None else max(10, spec.n_per_cell // 4)
    train = generate(replace(spec, seed=spec.seed * 10 + 1), out_dir / "train")
    internal = generate(
        replace(spec, rho=0.0, n_per_cell=test_n, seed=spec.seed * 10 + 2),
        out_dir / "internal_test",
    )
    external = generate(
        replace(spec, rho=0.0, n_per_cell=test_n, seed=spec.seed * 10 + 3),
        out_dir / "external_test",
    )
    return SyntheticBenchmark(train=train, internal_test=internal, external_test=external, spec=spec)


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    chance: float
    n_train: int
    n_eval: int

    def margin_over_chance(self) -> float:
        return self.accuracy - self.chance


def tone_probe(
    features: np.ndarray,
    tone_labels,
    seed: int = 0,
    held_out_fraction: float = 0.5,
) -> ProbeResult:
    """Linear-probe tone decodability of a frozen feature matrix.

    Fits a logistic regression on a stratified held-in half and reports
    accuracy on the held-out half, alongside the 1/K chance level. How much
    tone a representation leaks is exactly what the debiasing variants claim
    to reduce.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    features = np.asarray(features, dtype=float)
    tones = np.asarray(list(tone_labels), dtype=int)
    if features.shape[0] != tones.shape[0]:
        raise ValueError("features and tone labels disagree on length")
    unique = np.unique(tones)
    if unique.size < 2:
        raise ConfigurationError("tone probe needs at least two distinct tone labels")

    rng = np.random.default_rng([seed, 97])
    train_idx: list[int] = []
    eval_idx: list[int] = []
    for tone in unique:
        members = np.where(tones == tone)[0]
        members = members[rng.permutation(members.size)]
        n_eval = max(1, int(round(members.size * held_out_fraction)))
        n_train = members.size - n_eval
        if n_train < 1:
            raise ConfigurationError(
                f"tone {tone} has too few samples ({members.size}) for a probe split"
            )
        train_idx.extend(members[:n_train].tolist())
        eval_idx.extend(members[n_train:].tolist())

    scaler = StandardScaler()
    x_train = scaler.fit_transform(features[train_idx])
    x_eval = scaler.transform(features[eval_idx])
    probe = LogisticRegression(max_iter=2000, random_state=int(seed))
    probe.fit(x_train, tones[train_idx])
    accuracy = float(probe.score(x_eval, tones[eval_idx]))
    return ProbeResult(
        accuracy=accuracy,
        chance=1.0 / unique.size,
        n_train=len(train_idx),
        n_eval=len(eval_idx),
    )
