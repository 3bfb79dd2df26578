"""Transfer engine: predicts the rank-1 exemplar's mask, resized to the query.

A trivially-correct oracle for end-to-end pipeline tests: when the query has
an exact duplicate in the database the prediction equals that duplicate's
mask bit for bit, so protocol-level Dice must be exactly 1.0.
"""

from __future__ import annotations

import numpy as np

from ..data import adaptive_avg_pool, resize_mask
from ..errors import ShapeMismatch
from .base import (
    FeatureMap,
    MemoryBank,
    MemoryEntry,
    SegEngine,
    check_binary_mask,
    require_bank,
)


class TransferEngine(SegEngine):
    name = "transfer"
    stride = 16

    def encode_image_features(self, image_tensor: np.ndarray, native_hw=None) -> FeatureMap:
        x = np.asarray(image_tensor, dtype=np.float32)
        if x.ndim != 3 or x.shape[2] != 3:
            raise ShapeMismatch(f"{self.name}: expected HxWx3 tensor, got {x.shape}")
        if x.shape[0] % self.stride or x.shape[1] % self.stride:
            raise ShapeMismatch(
                f"{self.name}: input sides must be multiples of {self.stride}, got {x.shape[:2]}"
            )
        grid_hw = (x.shape[0] // self.stride, x.shape[1] // self.stride)
        grid = adaptive_avg_pool(x.mean(axis=2), grid_hw).astype(np.float32)[:, :, None]
        return FeatureMap(
            grid=grid,
            stride=self.stride,
            skips={},
            native_hw=tuple(native_hw) if native_hw else (x.shape[0], x.shape[1]),
        )

    def encode_memory(
        self,
        features: FeatureMap,
        binary_mask: np.ndarray,
        *,
        source_sample_id: str = "",
        retrieval_rank: int = 0,
        class_label: int = 1,
    ) -> MemoryEntry:
        mask = check_binary_mask(binary_mask)
        if features.native_hw and mask.shape != tuple(features.native_hw):
            raise ShapeMismatch(
                f"mask {mask.shape} does not match feature native resolution {features.native_hw}"
            )
        soft = adaptive_avg_pool(mask.astype(np.float64), features.grid_hw).astype(np.float32)
        return MemoryEntry(
            memory_grid=soft[:, :, None],
            source_sample_id=source_sample_id,
            retrieval_rank=retrieval_rank,
            class_label=class_label,
            payload={"exact_mask": mask.copy()},
        )

    def memory_attention(self, query_features: FeatureMap, bank: MemoryBank) -> FeatureMap:
        require_bank(bank)
        # Rank-1 is defined by retrieval rank, not bank position.
        top = min(bank.entries, key=lambda e: e.retrieval_rank)
        aux = dict(query_features.aux)
        aux["rank1_mask"] = top.payload["exact_mask"]
        return FeatureMap(
            grid=query_features.grid,
            stride=query_features.stride,
            skips=query_features.skips,
            native_hw=query_features.native_hw,
            aux=aux,
        )

    def decode_mask(self, conditioned: FeatureMap, skips=None) -> tuple[np.ndarray, np.ndarray]:
        if "rank1_mask" not in conditioned.aux:
            raise ShapeMismatch(f"{self.name}: decode needs memory-conditioned features")
        source = conditioned.aux["rank1_mask"]
        native = conditioned.native_hw or source.shape
        mask = resize_mask(source.astype(np.uint8), tuple(native)).astype(bool)
        logits = np.where(mask, np.float32(1.0), np.float32(-1.0))
        return mask, logits


def make_transfer_engine() -> TransferEngine:
    return TransferEngine()
