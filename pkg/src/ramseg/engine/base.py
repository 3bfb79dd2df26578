"""Memory-conditioned segmentation: shared types and the engine-generic pipeline.

An engine turns an image tensor into a feature pyramid, fuses exemplar
features with their (soft-downsampled) masks into memory entries, conditions
query features on a bank of such memories through attention, and decodes a
binary mask with no point or box prompts. The bank is the only guidance the
decoder gets, so an empty bank is an error, not a fallback.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..data import (
    ImageSlice,
    PreprocessSpec,
    SampleRecord,
    preprocess_for_embedding,
    preprocess_for_segmentation,
    save_mask_array,
)
from ..embedding import EmbeddingBackbone, embed
from ..errors import (
    EmptyIndex,
    EmptyMemoryBank,
    InvalidK,
    NonBinaryMask,
    RamsegError,
    SchemaViolation,
    ShapeMismatch,
    UnknownClass,
)
from ..index import FlatIndex, RetrievalHit, query, random_sample


@dataclass
class FeatureMap:
    """Feature grid at a fixed stride plus higher-resolution skip maps.

    ``native_hw`` is the resolution masks should be decoded at; ``aux`` is an
    engine-private payload that rides along with the features.
    """

    grid: np.ndarray
    stride: int
    skips: dict[int, np.ndarray] = field(default_factory=dict)
    native_hw: tuple[int, int] | None = None
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid)
        if self.grid.ndim != 3:
            raise ShapeMismatch(f"feature grid must be h x w x C, got {self.grid.shape}")
        if not np.isfinite(self.grid).all():
            raise ShapeMismatch("feature grid contains non-finite values")

    @property
    def grid_hw(self) -> tuple[int, int]:
        return (int(self.grid.shape[0]), int(self.grid.shape[1]))


@dataclass
class MemoryEntry:
    """One exemplar fused into a spatial memory for a single class.

    ``payload`` is engine-private (e.g. the exact exemplar mask kept by the
    transfer engine); only ``memory_grid`` participates in bank invariants.
    """

    memory_grid: np.ndarray
    source_sample_id: str
    retrieval_rank: int
    class_label: int
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        self.memory_grid = np.asarray(self.memory_grid)
        if self.memory_grid.ndim != 3:
            raise ShapeMismatch(f"memory grid must be h x w x C, got {self.memory_grid.shape}")


@dataclass
class MemoryBank:
    """Ordered set of memories sharing one class; order carries no meaning."""

    entries: list[MemoryEntry]
    capacity: int
    class_label: int

    def __post_init__(self):
        if self.capacity < 1:
            raise SchemaViolation(f"bank capacity must be >= 1, got {self.capacity}")
        if len(self.entries) > self.capacity:
            raise SchemaViolation(f"{len(self.entries)} entries exceed capacity {self.capacity}")
        dims = {e.memory_grid.shape for e in self.entries}
        if len(dims) > 1:
            raise ShapeMismatch(f"bank entries disagree on dims: {sorted(dims)}")
        labels = {e.class_label for e in self.entries}
        if labels - {self.class_label}:
            raise SchemaViolation(f"bank for class {self.class_label} holds entries for {labels}")

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class SegmentationResult:
    """Per-class binary masks, score maps, provenance, and stage timings."""

    class_masks: dict[int, np.ndarray]
    class_scores: dict[int, np.ndarray]
    exemplar_ids: dict[int, list[str]]
    timing: dict[str, float]
    k: int = 0
    strategy: str = "embedding"

    def confidence(self, class_label: int) -> float:
        """Scalar confidence: mean sigmoid of the class logit map."""
        logits = np.asarray(self.class_scores[class_label], dtype=np.float64)
        return float(np.mean(1.0 / (1.0 + np.exp(-logits))))


class SegEngine:
    """Interface every segmentation engine implements."""

    name: str = "abstract"
    stride: int = 16

    @property
    def checkpoint_loaded(self) -> bool:
        return True

    def encode_image_features(self, image_tensor: np.ndarray, native_hw=None) -> FeatureMap:
        raise NotImplementedError

    def encode_memory(
        self,
        features: FeatureMap,
        binary_mask: np.ndarray,
        *,
        source_sample_id: str = "",
        retrieval_rank: int = 0,
        class_label: int = 1,
    ) -> MemoryEntry:
        raise NotImplementedError

    def memory_attention(self, query_features: FeatureMap, bank: MemoryBank) -> FeatureMap:
        raise NotImplementedError

    def decode_mask(self, conditioned: FeatureMap, skips=None) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def check_binary_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeMismatch(f"mask must be 2D, got {mask.shape}")
    if mask.dtype == bool:
        return mask
    values = np.unique(mask)
    if not np.isin(values, (0, 1)).all():
        raise NonBinaryMask(f"mask holds labels {values.tolist()}, expected subset of {{0,1}}")
    return mask.astype(bool)


def binarize_logits(logits: np.ndarray) -> np.ndarray:
    """Threshold at logit 0 (sigmoid 0.5); exact zeros fall to background."""
    return np.asarray(logits) > 0


def require_bank(bank: MemoryBank) -> None:
    if len(bank) == 0:
        raise EmptyMemoryBank(
            "memory bank is empty: promptless decoding needs at least one exemplar memory"
        )


# ---------------------------------------------------------------------------
# engine-generic operations (the public surface)
# ---------------------------------------------------------------------------

def encode_image_features(engine: SegEngine, image_tensor: np.ndarray, native_hw=None) -> FeatureMap:
    return engine.encode_image_features(image_tensor, native_hw=native_hw)


def encode_memory(
    engine: SegEngine,
    features: FeatureMap,
    binary_mask: np.ndarray,
    *,
    source_sample_id: str = "",
    retrieval_rank: int = 0,
    class_label: int = 1,
) -> MemoryEntry:
    return engine.encode_memory(
        features,
        binary_mask,
        source_sample_id=source_sample_id,
        retrieval_rank=retrieval_rank,
        class_label=class_label,
    )


def memory_attention(engine: SegEngine, query_features: FeatureMap, bank: MemoryBank) -> FeatureMap:
    require_bank(bank)
    return engine.memory_attention(query_features, bank)


def decode_mask(engine: SegEngine, conditioned: FeatureMap, skips=None) -> tuple[np.ndarray, np.ndarray]:
    return engine.decode_mask(conditioned, skips=skips)


def resolve_classes(classes, class_map: dict[int, str]) -> list[int]:
    """Map class names or integer labels onto validated integer labels."""
    if classes is None:
        return sorted(class_map)
    by_name = {v: k for k, v in class_map.items()}
    labels = []
    for c in classes:
        if isinstance(c, str) and c in by_name:
            labels.append(by_name[c])
        elif isinstance(c, (int, np.integer)) and int(c) in class_map:
            labels.append(int(c))
        else:
            raise UnknownClass(f"class {c!r} not in class map {class_map}")
    return labels


def parse_strategy(strategy: str) -> tuple[str, int | None]:
    if strategy == "embedding":
        return "embedding", None
    if strategy.startswith("random:"):
        try:
            return "random", int(strategy.split(":", 1)[1])
        except ValueError as exc:
            raise SchemaViolation(f"bad random strategy seed in {strategy!r}") from exc
    raise SchemaViolation(f"unknown retrieval strategy {strategy!r}")


def _retrieve(
    index: FlatIndex,
    image: ImageSlice,
    k: int,
    strategy: str,
    backbone: EmbeddingBackbone | None,
    spec: PreprocessSpec,
) -> list[RetrievalHit]:
    kind, seed = parse_strategy(strategy)
    if kind == "random":
        return random_sample(index, k, seed)
    if backbone is None:
        raise SchemaViolation("strategy 'embedding' requires a backbone (backbone=...)")
    q = embed(backbone, preprocess_for_embedding(image, spec))
    return query(index, q, k)


def segment_image(
    engine: SegEngine,
    index: FlatIndex,
    samples,
    image: ImageSlice,
    k: int = 16,
    classes=None,
    strategy: str = "embedding",
    *,
    backbone: EmbeddingBackbone | None = None,
    preprocess: PreprocessSpec | None = None,
) -> SegmentationResult:
    """Retrieve k exemplars, build one memory bank per class, decode each class.

    The same retrieval hit list conditions every class; per-class banks differ
    only in which binary mask is fused. k larger than the database clamps to
    the database size with a warning.
    """
    t_start = time.perf_counter()
    if len(index) == 0:
        raise EmptyIndex("segmentation requires a non-empty retrieval index")
    if k < 1:
        raise InvalidK(f"k must be >= 1, got {k}")
    spec = preprocess or PreprocessSpec()
    labels = resolve_classes(classes, samples.class_map)
    if k > len(index):
        warnings.warn(
            f"k={k} exceeds database size {len(index)}; clamping to {len(index)}",
            RuntimeWarning,
            stacklevel=2,
        )
        k = len(index)

    t0 = time.perf_counter()
    hits = _retrieve(index, image, k, strategy, backbone, spec)
    t_retrieve = time.perf_counter() - t0

    # Exemplar features are shared across classes; encode each hit once.
    t0 = time.perf_counter()
    exemplar_feats: dict[str, FeatureMap] = {}
    exemplar_records: dict[str, SampleRecord] = {}
    for hit in hits:
        rec = samples.get(hit.id)
        exemplar_records[hit.id] = rec
        tensor = preprocess_for_segmentation(rec.image, spec)
        exemplar_feats[hit.id] = engine.encode_image_features(
            tensor, native_hw=(rec.image.height, rec.image.width)
        )
    banks: dict[int, MemoryBank] = {}
    for lbl in labels:
        entries = [
            engine.encode_memory(
                exemplar_feats[hit.id],
                exemplar_records[hit.id].mask.binary(lbl),
                source_sample_id=hit.id,
                retrieval_rank=hit.rank,
                class_label=lbl,
            )
            for hit in hits
        ]
        banks[lbl] = MemoryBank(entries=entries, capacity=k, class_label=lbl)
    t_memory = time.perf_counter() - t0

    t0 = time.perf_counter()
    qtensor = preprocess_for_segmentation(image, spec)
    qfeatures = engine.encode_image_features(qtensor, native_hw=(image.height, image.width))
    class_masks: dict[int, np.ndarray] = {}
    class_scores: dict[int, np.ndarray] = {}
    exemplar_ids: dict[int, list[str]] = {}
    for lbl in labels:
        conditioned = memory_attention(engine, qfeatures, banks[lbl])
        mask, logits = engine.decode_mask(conditioned)
        class_masks[lbl] = mask
        class_scores[lbl] = logits
        exemplar_ids[lbl] = [hit.id for hit in hits]
    t_decode = time.perf_counter() - t0

    timing = {
        "embed_retrieve_ms": t_retrieve * 1000.0,
        "memory_encode_ms": t_memory * 1000.0,
        "attend_decode_ms": t_decode * 1000.0,
        "total_ms": (time.perf_counter() - t_start) * 1000.0,
    }
    return SegmentationResult(
        class_masks=class_masks,
        class_scores=class_scores,
        exemplar_ids=exemplar_ids,
        timing=timing,
        k=k,
        strategy=strategy,
    )


def segment_volume(
    engine: SegEngine,
    index: FlatIndex,
    samples,
    volume: np.ndarray,
    k: int = 16,
    classes=None,
    strategy: str = "embedding",
    *,
    backbone: EmbeddingBackbone | None = None,
    preprocess: PreprocessSpec | None = None,
    subject_id: str = "volume",
    modality: str = "volume",
) -> list[SegmentationResult]:
    """Segment a DxHxW volume slice by slice; results keep slice order."""
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ShapeMismatch(f"expected 3D volume, got {volume.shape}")
    if len(index) == 0:
        raise EmptyIndex("segmentation requires a non-empty retrieval index")
    results = []
    for z in range(volume.shape[0]):
        image = ImageSlice(volume[z], subject_id=subject_id, slice_index=z, modality=modality)
        try:
            results.append(
                segment_image(
                    engine,
                    index,
                    samples,
                    image,
                    k=k,
                    classes=classes,
                    strategy=strategy,
                    backbone=backbone,
                    preprocess=preprocess,
                )
            )
        except RamsegError as exc:
            raise type(exc)(f"slice {z}: {exc}") from exc
    return results


def merge_class_masks(result: SegmentationResult) -> np.ndarray:
    """Merge per-class binary masks into one label map.

    A pixel claimed by several classes goes to the class with the higher
    decoder logit; residual ties go to the smaller class label.
    """
    labels = sorted(result.class_masks)
    if not labels:
        raise SchemaViolation("result holds no class masks")
    shape = result.class_masks[labels[0]].shape
    out = np.zeros(shape, dtype=np.int32)
    best = np.full(shape, -np.inf, dtype=np.float64)
    for lbl in labels:
        mask = result.class_masks[lbl]
        logits = np.asarray(result.class_scores[lbl], dtype=np.float64)
        take = mask & (logits > best)
        out[take] = lbl
        best[take] = logits[take]
    return out


def save_segmentation(result: SegmentationResult, path: Path) -> tuple[Path, Path]:
    """Write the merged label map as integer PNG plus a JSON sidecar."""
    path = Path(path)
    label_map = merge_class_masks(result)
    png_path = save_mask_array(label_map, path.with_suffix(".png"))
    sidecar = {
        "exemplar_ids": {str(k): v for k, v in result.exemplar_ids.items()},
        "timings": result.timing,
        "k": result.k,
        "strategy": result.strategy,
    }
    sidecar_path = path.with_suffix(".json")
    sidecar_path.write_text(json.dumps(sidecar, indent=2))
    return png_path, sidecar_path
