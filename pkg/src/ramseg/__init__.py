"""ramseg: retrieval-augmented few-shot segmentation workbench.

Embed a query slice, retrieve its nearest annotated exemplars from a small
database, encode them as spatial memories, and condition a promptless mask
decoder on that memory bank. Ships an exact flat L2 index, pluggable
embedding backbones, three segmentation engines, a Dice evaluation harness,
and an annotation service whose accepted corrections enrich the live index.
"""

from .data import (
    DatasetManifest,
    ImageSlice,
    LabelMask,
    PreprocessSpec,
    SampleRecord,
    SampleStore,
    load_manifest,
    preprocess_for_embedding,
    preprocess_for_segmentation,
    resize_mask,
    slice_volume,
)
from .embedding import Embedding, embed, embed_batch, get_backbone, make_test_backbone
from .engine import (
    FeatureMap,
    MemoryBank,
    MemoryEntry,
    SegmentationResult,
    get_engine,
    make_toy_engine,
    make_transfer_engine,
    merge_class_masks,
    segment_image,
    segment_volume,
)
from .evaluation import (
    DiceRecord,
    EvalConfig,
    EvalReport,
    benchmark_pipeline,
    dice,
    run_ablation,
    run_protocol,
    stratify_by_size,
    write_report,
)
from .index import FlatIndex, RetrievalHit, build_index, load, query, random_sample, save

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest",
    "DiceRecord",
    "Embedding",
    "EvalConfig",
    "EvalReport",
    "FeatureMap",
    "FlatIndex",
    "ImageSlice",
    "LabelMask",
    "MemoryBank",
    "MemoryEntry",
    "PreprocessSpec",
    "RetrievalHit",
    "SampleRecord",
    "SampleStore",
    "SegmentationResult",
    "benchmark_pipeline",
    "build_index",
    "dice",
    "embed",
    "embed_batch",
    "get_backbone",
    "get_engine",
    "load",
    "load_manifest",
    "make_test_backbone",
    "make_toy_engine",
    "make_transfer_engine",
    "merge_class_masks",
    "preprocess_for_embedding",
    "preprocess_for_segmentation",
    "query",
    "random_sample",
    "resize_mask",
    "run_ablation",
    "run_protocol",
    "save",
    "segment_image",
    "segment_volume",
    "slice_volume",
    "stratify_by_size",
    "write_report",
]
