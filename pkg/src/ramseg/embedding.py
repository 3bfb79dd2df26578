"""Unit-normalized image embeddings via pluggable backbones.

Normalization happens in exactly one place, :func:`embed`, so vectors are unit
length both when building the index and when querying it. Backbones are
stateless and deterministic; a seeded projection backbone keeps the whole
pipeline testable without model weights.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .data import adaptive_avg_pool
from .errors import NonFiniteOutput, SchemaViolation, ShapeMismatch

log = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-5

DINO_CHECKPOINT_ENV = "RAMSEG_DINO_CHECKPOINT"


@dataclass(frozen=True)
class Embedding:
    """Unit-norm float vector summarizing one image."""

    vector: np.ndarray
    source_id: str | None = None

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float32)
        object.__setattr__(self, "vector", v)
        if v.ndim != 1:
            raise ShapeMismatch(f"embedding vector must be 1D, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise NonFiniteOutput("embedding contains non-finite components")
        norm = float(np.linalg.norm(v.astype(np.float64)))
        if abs(norm - 1.0) > NORM_TOLERANCE:
            raise SchemaViolation(f"embedding norm {norm} deviates from 1 by more than {NORM_TOLERANCE}")

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])

    def with_id(self, source_id: str) -> "Embedding":
        return Embedding(self.vector, source_id=source_id)


class EmbeddingBackbone:
    """Interface: a deterministic map from a HxWx3 tensor to a raw feature vector."""

    dim: int
    name: str

    def validate_input(self, tensor: np.ndarray) -> None:
        tensor = np.asarray(tensor)
        if tensor.ndim != 3 or tensor.shape[2] != 3:
            raise ShapeMismatch(f"{self.name}: expected HxWx3 tensor, got shape {tensor.shape}")

    def forward(self, tensor: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def embed(backbone: EmbeddingBackbone, image_tensor: np.ndarray) -> Embedding:
    """Run the backbone and L2-normalize its raw feature to unit length."""
    backbone.validate_input(image_tensor)
    raw = np.asarray(backbone.forward(image_tensor), dtype=np.float64).reshape(-1)
    if raw.shape[0] != backbone.dim:
        raise ShapeMismatch(f"{backbone.name}: produced dim {raw.shape[0]}, declared {backbone.dim}")
    if not np.isfinite(raw).all():
        raise NonFiniteOutput(f"{backbone.name}: non-finite feature values")
    norm = np.linalg.norm(raw)
    if norm == 0.0:
        raise NonFiniteOutput(f"{backbone.name}: zero-norm feature cannot be normalized")
    return Embedding((raw / norm).astype(np.float32))


def embed_batch(backbone: EmbeddingBackbone, images: list[np.ndarray]) -> list[Embedding]:
    """Order-preserving batch embedding; failures carry the offending index."""
    out = []
    for i, tensor in enumerate(images):
        try:
            out.append(embed(backbone, tensor))
        except Exception as exc:
            raise type(exc)(f"batch item {i}: {exc}") from exc
    return out


class ProjectionBackbone(EmbeddingBackbone):
    """Seeded test backbone: pool to a fixed 16x16 grid, project to dim."""

    POOL = 16

    def __init__(self, seed: int, dim: int = 384):
        if dim < 2:
            raise SchemaViolation(f"backbone dim must be >= 2, got {dim}")
        self.seed = int(seed)
        self.dim = int(dim)
        self.name = f"test:{seed}"
        rng = np.random.Generator(np.random.PCG64(self.seed))
        self._weights = rng.standard_normal((self.POOL * self.POOL * 3, self.dim))

    def forward(self, tensor: np.ndarray) -> np.ndarray:
        pooled = adaptive_avg_pool(np.asarray(tensor, dtype=np.float64), (self.POOL, self.POOL))
        return pooled.reshape(-1) @ self._weights


def make_test_backbone(seed: int, dim: int = 384) -> EmbeddingBackbone:
    return ProjectionBackbone(seed, dim=dim)


class DinoV2Backbone(EmbeddingBackbone):
    """Adapter over a locally stored ViT-S/14-with-registers checkpoint.

    The checkpoint directory (a HuggingFace-format model folder) is resolved
    from the explicit argument or the RAMSEG_DINO_CHECKPOINT environment
    variable. torch/transformers are imported lazily on first use.
    feature_mode selects the global descriptor: "cls" (default) or
    "mean-patch" (mean over patch tokens, register tokens excluded).
    """

    dim = 384

    def __init__(self, checkpoint: str | None = None, feature_mode: str = "cls"):
        if feature_mode not in ("cls", "mean-patch"):
            raise SchemaViolation(f"unknown feature_mode {feature_mode!r}")
        self.checkpoint = checkpoint or os.environ.get(DINO_CHECKPOINT_ENV)
        self.feature_mode = feature_mode
        self.name = "dinov2-vits14-reg"
        self._model = None

    def validate_input(self, tensor: np.ndarray) -> None:
        super().validate_input(tensor)
        tensor = np.asarray(tensor)
        if tensor.shape[0] % 14 != 0 or tensor.shape[1] % 14 != 0:
            raise ShapeMismatch(
                f"{self.name}: input sides must be multiples of 14, got {tensor.shape[:2]}"
            )

    def _load(self):
        if self._model is not None:
            return self._model
        import torch
        from transformers import AutoModel

        model = AutoModel.from_pretrained(self.checkpoint)
        model.eval()
        self._model = (torch, model)
        return self._model

    def forward(self, tensor: np.ndarray) -> np.ndarray:
        torch, model = self._load()
        batch = torch.from_numpy(
            np.ascontiguousarray(np.asarray(tensor, dtype=np.float32).transpose(2, 0, 1))[None]
        )
        with torch.no_grad():
            out = model(pixel_values=batch)
        hidden = out.last_hidden_state[0]
        if self.feature_mode == "cls":
            feat = hidden[0]
        else:
            num_registers = int(getattr(model.config, "num_register_tokens", 0))
            feat = hidden[1 + num_registers :].mean(dim=0)
        return feat.cpu().numpy().astype(np.float64)


def get_backbone(name: str, feature_mode: str = "cls", checkpoint: str | None = None) -> EmbeddingBackbone:
    """Resolve a backbone by registry name: 'test:<seed>' or 'dinov2-vits14-reg'.

    The checkpoint comes from the explicit argument (config-file plumbing) or
    the RAMSEG_DINO_CHECKPOINT environment variable. The pretrained backbone
    degrades to the seeded test backbone (with a logged diagnostic) when no
    checkpoint is available, so weight-free environments stay functional.
    """
    if name.startswith("test:"):
        seed = int(name.split(":", 1)[1])
        return make_test_backbone(seed)
    if name == "dinov2-vits14-reg":
        checkpoint = checkpoint or os.environ.get(DINO_CHECKPOINT_ENV)
        if checkpoint and os.path.exists(checkpoint):
            return DinoV2Backbone(checkpoint, feature_mode=feature_mode)
        log.warning(
            "backbone %r requested but no checkpoint found (set %s); "
            "falling back to the deterministic test backbone test:0",
            name,
            DINO_CHECKPOINT_ENV,
        )
        return make_test_backbone(0)
    raise SchemaViolation(f"unknown backbone name {name!r}")
