"""Image preprocessing: resize, seeded augmentation, pixel normalization.

Outputs are float32 CHW arrays. Augmentation draws are taken from a caller
supplied numpy Generator so a fixed seed reproduces the pipeline bitwise;
identity draws (no flip, zero rotation, brightness factor exactly 1.0) skip
the corresponding PIL call entirely, so they cannot perturb pixels through
resampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageEnhance

from dermfair.errors import ImageReadError

STANDARD_INPUT_SIZE = 224


@dataclass(frozen=True)
class PixelNormalization:
    name: str
    mean: tuple[float, float, float]
    std: tuple[float, float, float]


IMAGENET_NORMALIZATION = PixelNormalization(
    "imagenet", (0.485, 0.456, 0.406), (0.229, 0.224, 0.225)
)
CLIP_NORMALIZATION = PixelNormalization(
    "clip",
    (0.48145466, 0.4578275, 0.40821073),
    (0.26862954, 0.26130258, 0.27577711),
)
UNIT_NORMALIZATION = PixelNormalization("unit", (0.5, 0.5, 0.5), (0.5, 0.5, 0.5))

NORMALIZATIONS = {
    n.name: n for n in (IMAGENET_NORMALIZATION, CLIP_NORMALIZATION, UNIT_NORMALIZATION)
}


@dataclass(frozen=True)
class Augmentations:
    """Training-time augmentation policy. All fields default to off.

    Applied in a fixed order — rotation, shear, horizontal flip, vertical
    flip, brightness — with one rng draw per enabled op.
    """

    rotation_degrees: float = 0.0
    shear_degrees: float = 0.0
    horizontal_flip_prob: float = 0.0
    vertical_flip_prob: float = 0.0
    brightness_jitter: float = 0.0

    def any_enabled(self) -> bool:
        return (
            self.rotation_degrees > 0
            or self.shear_degrees > 0
            or self.horizontal_flip_prob > 0
            or self.vertical_flip_prob > 0
            or self.brightness_jitter > 0
        )


#: Conventional mild ranges that preserve lesion morphology.
DEFAULT_TRAINING_AUGMENTATIONS = Augmentations(
    rotation_degrees=30.0,
    shear_degrees=10.0,
    horizontal_flip_prob=0.5,
    vertical_flip_prob=0.5,
    brightness_jitter=0.2,
)


@dataclass(frozen=True)
class PreprocessSpec:
    size: int = STANDARD_INPUT_SIZE
    normalization: PixelNormalization = IMAGENET_NORMALIZATION
    augment: Augmentations | None = None


def load_image(path: str | Path) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except (OSError, ValueError) as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from exc


def _apply_augmentations(
    img: Image.Image, policy: Augmentations, rng: np.random.Generator
) -> Image.Image:
    # Draw order is part of the determinism contract; identity draws skip the
    # PIL call entirely so they cannot perturb pixels through resampling.
    if policy.rotation_degrees > 0:
        angle = float(rng.uniform(-policy.rotation_degrees, policy.rotation_degrees))
        if angle != 0.0:
            img = img.rotate(angle, resample=Image.Resampling.BILINEAR)
    if policy.shear_degrees > 0:
        shear = float(rng.uniform(-policy.shear_degrees, policy.shear_degrees))
        if shear != 0.0:
            coefficient = math.tan(math.radians(shear))
            img = img.transform(
                img.size,
                Image.Transform.AFFINE,
                (1.0, coefficient, 0.0, 0.0, 1.0, 0.0),
                resample=Image.Resampling.BILINEAR,
            )
    if policy.horizontal_flip_prob > 0:
        if rng.random() < policy.horizontal_flip_prob:
            img = img.transpose(Image.Transpose.FLIP_LEFT_RIGHT)
    if policy.vertical_flip_prob > 0:
        if rng.random() < policy.vertical_flip_prob:
            img = img.transpose(Image.Transpose.FLIP_TOP_BOTTOM)
    if policy.brightness_jitter > 0:
        factor = float(
            rng.uniform(1.0 - policy.brightness_jitter, 1.0 + policy.brightness_jitter)
        )
        if factor != 1.0:
            img = ImageEnhance.Brightness(img).enhance(factor)
    return img


def preprocess_image(
    image: str | Path | Image.Image,
    spec: PreprocessSpec,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Produce a normalized float32 CHW array for one image.

    ``rng`` is required whenever the spec enables augmentation; passing the
    same generator state reproduces the same pixels.
    """
    img = image if isinstance(image, Image.Image) else load_image(image)
    img = img.convert("RGB")
    if img.size != (spec.size, spec.size):
        img = img.resize((spec.size, spec.size), Image.Resampling.BILINEAR)
    if spec.augment is not None and spec.augment.any_enabled():
        if rng is None:
            raise ValueError("augmentation enabled but no rng provided")
        img = _apply_augmentations(img, spec.augment, rng)
        # Rotation can change the canvas; force the target size back.
        if img.size != (spec.size, spec.size):
            img = img.resize((spec.size, spec.size), Image.Resampling.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    mean = np.asarray(spec.normalization.mean, dtype=np.float32)
    std = np.asarray(spec.normalization.std, dtype=np.float32)
    arr = (arr - mean) / std
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def preprocess_batch(
    images, spec: PreprocessSpec, rng: np.random.Generator | None = None
) -> np.ndarray:
    return np.stack([preprocess_image(im, spec, rng) for im in images])
