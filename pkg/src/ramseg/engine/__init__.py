"""Segmentation engines and the engine-generic pipeline operations."""

from __future__ import annotations

from ..errors import SchemaViolation
from .base import (
    FeatureMap,
    MemoryBank,
    MemoryEntry,
    SegEngine,
    SegmentationResult,
    binarize_logits,
    decode_mask,
    encode_image_features,
    encode_memory,
    memory_attention,
    merge_class_masks,
    resolve_classes,
    save_segmentation,
    segment_image,
    segment_volume,
)
from .pretrained import PretrainedEngine, make_pretrained_engine
from .toy import ToyEngine, make_toy_engine
from .transfer import TransferEngine, make_transfer_engine

__all__ = [
    "FeatureMap",
    "MemoryBank",
    "MemoryEntry",
    "SegEngine",
    "SegmentationResult",
    "binarize_logits",
    "decode_mask",
    "encode_image_features",
    "encode_memory",
    "get_engine",
    "make_pretrained_engine",
    "make_toy_engine",
    "make_transfer_engine",
    "memory_attention",
    "merge_class_masks",
    "PretrainedEngine",
    "resolve_classes",
    "save_segmentation",
    "segment_image",
    "segment_volume",
    "ToyEngine",
    "TransferEngine",
]


def get_engine(name: str) -> SegEngine:
    """Resolve an engine from its selection string: pretrained | toy:<seed> | transfer."""
    if name == "pretrained":
        return make_pretrained_engine()
    if name == "transfer":
        return make_transfer_engine()
    if name.startswith("toy:"):
        try:
            return make_toy_engine(int(name.split(":", 1)[1]))
        except ValueError as exc:
            raise SchemaViolation(f"bad toy engine seed in {name!r}") from exc
    raise SchemaViolation(f"unknown engine {name!r}")
