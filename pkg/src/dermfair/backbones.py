"""Backbone families behind a single embedding interface.

Three families:

* GENERIC_CNN — a ResNet-152 trunk (torchvision) with the classification
  layer stripped; 2048-d penultimate features.
* DERM_CLIP — a compact CLIP-style vision transformer (patch embedding,
  transformer encoder, class token, linear projection into the joint space).
  Any checkpoint with the declared widths can be loaded; the run manifest
  records exactly which weights (by checksum) were used.
* SMALL_CNN — a three-conv trunk for desk-scale synthetic experiments.

Handles are read-only in eval mode; embed() always runs under no_grad and
asserts finite outputs.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from torch import nn

from dermfair.errors import ConfigurationError, NumericError
from dermfair.preprocess import NORMALIZATIONS

RANDOM_WEIGHTS = "random"


class BackboneFamily(str, enum.Enum):
    GENERIC_CNN = "generic_cnn"
    DERM_CLIP = "derm_clip"
    SMALL_CNN = "small_cnn"


DEFAULT_EMBEDDING_DIM = {
    BackboneFamily.GENERIC_CNN: 2048,
    BackboneFamily.DERM_CLIP: 128,
    BackboneFamily.SMALL_CNN: 64,
}

DEFAULT_NORMALIZATION = {
    BackboneFamily.GENERIC_CNN: "imagenet",
    BackboneFamily.DERM_CLIP: "clip",
    BackboneFamily.SMALL_CNN: "unit",
}


@dataclass(frozen=True)
class BackboneSpec:
    family: BackboneFamily
    weights_path: str = RANDOM_WEIGHTS
    embedding_dim: int | None = None
    trainable: bool = False
    normalization: str | None = None
    use_projection: bool = True  # DERM_CLIP: joint-space projection vs encoder features

    def resolved(self) -> "BackboneSpec":
        out = self
        if not isinstance(out.family, BackboneFamily):
            out = replace(out, family=BackboneFamily(out.family))
        if out.embedding_dim is None:
            dim = DEFAULT_EMBEDDING_DIM[out.family]
            if out.family is BackboneFamily.DERM_CLIP and not out.use_projection:
                dim = _CLIP_WIDTH
            out = replace(out, embedding_dim=dim)
        if out.normalization is None:
            out = replace(out, normalization=DEFAULT_NORMALIZATION[out.family])
        if out.normalization not in NORMALIZATIONS:
            raise ConfigurationError(f"unknown normalization {out.normalization!r}")
        return out

    def to_dict(self) -> dict:
        spec = self.resolved()
        return {
            "family": spec.family.value,
            "weights_path": spec.weights_path,
            "embedding_dim": spec.embedding_dim,
            "trainable": spec.trainable,
            "normalization": spec.normalization,
            "use_projection": spec.use_projection,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "BackboneSpec":
        payload = dict(payload)
        payload["family"] = BackboneFamily(payload["family"])
        return cls(**payload).resolved()


_CLIP_WIDTH = 256
_CLIP_PATCH = 32
_CLIP_LAYERS = 2
_CLIP_HEADS = 4


class DermClipImageEncoder(nn.Module):
    """Compact CLIP-style image encoder: patchify, transformer, projection."""

    def __init__(self, embedding_dim: int, use_projection: bool = True, image_size: int = 224):
        super().__init__()
        self.use_projection = use_projection
        self.patch_embed = nn.Conv2d(3, _CLIP_WIDTH, kernel_size=_CLIP_PATCH, stride=_CLIP_PATCH)
        n_patches = (image_size // _CLIP_PATCH) ** 2
        self.class_token = nn.Parameter(torch.zeros(1, 1, _CLIP_WIDTH))
        self.positional = nn.Parameter(torch.zeros(1, n_patches + 1, _CLIP_WIDTH))
        nn.init.normal_(self.class_token, std=0.02)
        nn.init.normal_(self.positional, std=0.02)
        layer = nn.TransformerEncoderLayer(
            d_model=_CLIP_WIDTH,
            nhead=_CLIP_HEADS,
            dim_feedforward=4 * _CLIP_WIDTH,
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            layer, num_layers=_CLIP_LAYERS, enable_nested_tensor=False
        )
        self.norm = nn.LayerNorm(_CLIP_WIDTH)
        self.projection = nn.Linear(_CLIP_WIDTH, embedding_dim, bias=False)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        tokens = self.patch_embed(pixels).flatten(2).transpose(1, 2)
        cls = self.class_token.expand(tokens.shape[0], -1, -1)
        x = torch.cat([cls, tokens], dim=1)
        if x.shape[1] != self.positional.shape[1]:
            raise ConfigurationError(
                f"input resolution yields {x.shape[1] - 1} patches but the "
                f"encoder was built for {self.positional.shape[1] - 1}"
            )
        x = self.encoder(x + self.positional)
        features = self.norm(x[:, 0])
        return self.projection(features) if self.use_projection else features


class SmallCnn(nn.Module):
    """Three stride-2 convolutions and global average pooling."""

    def __init__(self, embedding_dim: int = 64):
        super().__init__()
        widths = (16, 32, embedding_dim)
        layers: list[nn.Module] = []
        previous = 3
        for width in widths:
            layers += [nn.Conv2d(previous, width, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            previous = width
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.pool(self.features(pixels)).flatten(1)


def _build_module(spec: BackboneSpec) -> nn.Module:
    if spec.family is BackboneFamily.GENERIC_CNN:
        from torchvision.models import resnet152

        module = resnet152(weights=None)
        if module.fc.in_features != spec.embedding_dim:
            raise ConfigurationError(
                f"GENERIC_CNN penultimate width is {module.fc.in_features}, "
                f"spec declares {spec.embedding_dim}"
            )
        module.fc = nn.Identity()
        return module
    if spec.family is BackboneFamily.DERM_CLIP:
        return DermClipImageEncoder(spec.embedding_dim, use_projection=spec.use_projection)
    if spec.family is BackboneFamily.SMALL_CNN:
        return SmallCnn(spec.embedding_dim)
    raise ConfigurationError(f"unknown backbone family {spec.family!r}")


def weights_checksum(module: nn.Module) -> str:
    digest = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        digest.update(key.encode("utf-8"))
        digest.update(state[key].detach().cpu().numpy().tobytes())
    return digest.hexdigest()


class Backbone:
    """A loaded backbone: the torch module plus its spec and weight checksum."""

    def __init__(self, module: nn.Module, spec: BackboneSpec, checksum: str):
        self.module = module
        self.spec = spec
        self.checksum = checksum
        if not spec.trainable:
            self.freeze()

    def freeze(self) -> None:
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.module.eval()

    @property
    def embedding_dim(self) -> int:
        return self.spec.embedding_dim

    def trainable_parameters(self):
        if not self.spec.trainable:
            return []
        return list(self.module.parameters())

    def embed(self, pixels, image_ids=None, batch_size: int = 32) -> np.ndarray:
        """Extract embeddings in eval mode; fatal on non-finite outputs."""
        tensor = torch.as_tensor(np.asarray(pixels, dtype=np.float32))
        if tensor.ndim == 3:
            tensor = tensor.unsqueeze(0)
        was_training = self.module.training
        self.module.eval()
        chunks = []
        with torch.no_grad():
            for start in range(0, tensor.shape[0], batch_size):
                chunks.append(self.module(tensor[start : start + batch_size]))
        if was_training and self.spec.trainable:
            self.module.train()
        out = torch.cat(chunks).cpu().numpy()
        if not np.isfinite(out).all():
            bad_rows = np.where(~np.isfinite(out).all(axis=1))[0]
            if image_ids is not None:
                names = [image_ids[i] for i in bad_rows]
            else:
                names = [f"batch index {i}" for i in bad_rows]
            raise NumericError(f"non-finite embeddings for: {names[:10]}")
        return out

    def save_weights(self, path: str | Path) -> None:
        torch.save(self.module.state_dict(), path)


def load_backbone(spec: BackboneSpec, seed: int | None = None) -> Backbone:
    """Construct a backbone per spec and resolve its weights.

    ``weights_path`` may be the literal ``"random"`` (fresh initialization,
    optionally seeded), or a filesystem path to a saved state dict. A missing
    or shape-incompatible checkpoint is fatal.
    """
    spec = spec.resolved()
    if seed is not None:
        torch.manual_seed(seed)
    module = _build_module(spec)
    if spec.weights_path != RANDOM_WEIGHTS:
        path = Path(spec.weights_path)
        if not path.exists():
            raise ConfigurationError(f"backbone weights not found: {path}")
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
            module.load_state_dict(state)
        except (RuntimeError, KeyError, ValueError) as exc:
            raise ConfigurationError(
                f"cannot load {spec.family.value} weights from {path}: {exc}"
            ) from exc
    module.eval()
    return Backbone(module, spec, weights_checksum(module))


class EmbeddingCache:
    """Disk cache for frozen-backbone embeddings.

    Vectors live in one binary file of float32 rows; the index is a CSV of
    (image_id, file, offset, dim, checksum). The cache key should encode the
    weights checksum and preprocessing so stale entries can never match.
    """

    def __init__(self, directory: str | Path, key: str):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.key = key
        self.bin_path = self.directory / f"{key}.bin"
        self.index_path = self.directory / f"{key}.index.csv"
        self._index: dict[str, tuple[int, int]] = {}
        if self.index_path.exists():
            frame = pd.read_csv(self.index_path, dtype={"image_id": str})
            for _, row in frame.iterrows():
                self._index[str(row["image_id"])] = (int(row["offset"]), int(row["dim"]))

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._index

    def __len__(self) -> int:
        return len(self._index)

    def put(self, image_id: str, vector: np.ndarray) -> None:
        vector = np.ascontiguousarray(vector, dtype=np.float32).reshape(-1)
        offset = self.bin_path.stat().st_size if self.bin_path.exists() else 0
        with open(self.bin_path, "ab") as fh:
            fh.write(vector.tobytes())
        row = pd.DataFrame(
            [
                {
                    "image_id": image_id,
                    "file": self.bin_path.name,
                    "offset": offset,
                    "dim": vector.shape[0],
                    "checksum": hashlib.sha256(vector.tobytes()).hexdigest()[:16],
                }
            ]
        )
        header = not self.index_path.exists()
        row.to_csv(self.index_path, mode="a", header=header, index=False)
        self._index[image_id] = (offset, vector.shape[0])

    def get(self, image_id: str) -> np.ndarray:
        if image_id not in self._index:
            raise KeyError(image_id)
        offset, dim = self._index[image_id]
        with open(self.bin_path, "rb") as fh:
            fh.seek(offset)
            data = fh.read(4 * dim)
        return np.frombuffer(data, dtype=np.float32).copy()
