"""Dice metrics, protocol runners, ablation grids, stratification, and timing."""

from __future__ import annotations

import json
import statistics
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import PreprocessSpec, SampleStore, load_manifest, load_sample, preprocess_for_embedding
from .embedding import embed, get_backbone
from .engine import get_engine, segment_image
from .engine.base import check_binary_mask
from .errors import IoError, SchemaViolation, ShapeMismatch, SubjectLeakage
from .index import build_index

DEFAULT_SIZE_THRESHOLD_PX = 200


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Overlap coefficient 2|A n B| / (|A| + |B|); both masks empty gives 1.0."""
    p = check_binary_mask(pred)
    g = check_binary_mask(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"pred {p.shape} vs gt {g.shape}")
    a = int(p.sum())
    b = int(g.sum())
    if a + b == 0:
        return 1.0
    inter = int(np.logical_and(p, g).sum())
    return 2.0 * inter / (a + b)


@dataclass(frozen=True)
class DiceRecord:
    class_label: int
    dice: float
    gt_pixels: int
    sample_id: str

    def __post_init__(self):
        if not 0.0 <= self.dice <= 1.0:
            raise SchemaViolation(f"dice {self.dice} outside [0,1]")
        if self.gt_pixels < 0:
            raise SchemaViolation(f"gt_pixels {self.gt_pixels} < 0")


@dataclass
class EvalConfig:
    engine: str
    index_manifest: str
    test_manifest: str
    backbone: str = "test:0"
    k: int = 16
    strategy: str = "embedding"
    classes: list | None = None
    seed: int = 0
    embed_resolution: int = 518
    seg_resolution: int = 1024
    size_threshold_px: int = DEFAULT_SIZE_THRESHOLD_PX
    dino_checkpoint: str | None = None
    sam2_checkpoint: str | None = None

    def preprocess_spec(self) -> PreprocessSpec:
        return PreprocessSpec(
            embed_resolution=self.embed_resolution, seg_resolution=self.seg_resolution
        )

    def resolved_strategy(self) -> str:
        # Bare "random" picks up the config seed.
        if self.strategy == "random":
            return f"random:{self.seed}"
        return self.strategy

    @classmethod
    def from_json(cls, path: Path) -> "EvalConfig":
        raw = json.loads(Path(path).read_text())
        return cls(**raw)


@dataclass
class EvalReport:
    per_class_mean: dict[int, float]
    records: list[DiceRecord]
    config: dict
    class_names: dict[int, str] = field(default_factory=dict)
    stratified: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    @classmethod
    def compute(cls, records, config, class_names, timing, size_threshold_px) -> "EvalReport":
        per_class: dict[int, list[float]] = {}
        for r in records:
            per_class.setdefault(r.class_label, []).append(r.dice)
        means = {lbl: float(np.mean(v)) for lbl, v in sorted(per_class.items())}
        return cls(
            per_class_mean=means,
            records=list(records),
            config=config,
            class_names=dict(class_names),
            stratified=stratify_by_size(records, threshold_px=size_threshold_px),
            timing=dict(timing),
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_class_mean": {str(k): v for k, v in self.per_class_mean.items()},
                "records": [asdict(r) for r in self.records],
                "config": self.config,
                "class_names": {str(k): v for k, v in self.class_names.items()},
                "stratified": {str(k): v for k, v in self.stratified.items()},
                "timing": self.timing,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls(
            per_class_mean={int(k): v for k, v in raw["per_class_mean"].items()},
            records=[DiceRecord(**r) for r in raw["records"]],
            config=raw["config"],
            class_names={int(k): v for k, v in raw["class_names"].items()},
            stratified={int(k): v for k, v in raw["stratified"].items()},
            timing=raw["timing"],
        )


def stratify_by_size(records, threshold_px: int = DEFAULT_SIZE_THRESHOLD_PX) -> dict:
    """Per-class means split at a ground-truth pixel count; empty strata are absent."""
    out: dict[int, dict] = {}
    by_class: dict[int, list[DiceRecord]] = {}
    for r in records:
        by_class.setdefault(r.class_label, []).append(r)
    for lbl, recs in sorted(by_class.items()):
        small = [r.dice for r in recs if r.gt_pixels < threshold_px]
        large = [r.dice for r in recs if r.gt_pixels >= threshold_px]
        cell: dict = {"threshold_px": threshold_px}
        if small:
            cell["small_mean"] = float(np.mean(small))
            cell["small_count"] = len(small)
        if large:
            cell["large_mean"] = float(np.mean(large))
            cell["large_count"] = len(large)
        out[lbl] = cell
    return out


def _build_database(config: EvalConfig):
    db_manifest = load_manifest(config.index_manifest)
    test_manifest = load_manifest(config.test_manifest)
    overlap = db_manifest.subject_ids & test_manifest.subject_ids
    if overlap:
        raise SubjectLeakage(f"subjects present in both manifests: {sorted(overlap)}")
    store = SampleStore.from_manifest(db_manifest)
    spec = config.preprocess_spec()
    backbone = get_backbone(config.backbone, checkpoint=config.dino_checkpoint)
    embeddings = [
        embed(backbone, preprocess_for_embedding(rec.image, spec)).with_id(rec.id)
        for rec in store.records()
    ]
    index = build_index(embeddings)
    if config.engine == "pretrained" and config.sam2_checkpoint:
        from .engine import make_pretrained_engine

        engine = make_pretrained_engine(checkpoint=config.sam2_checkpoint)
    else:
        engine = get_engine(config.engine)
    return engine, backbone, index, store, test_manifest, spec


def run_protocol(config: EvalConfig) -> EvalReport:
    """Segment every test sample against the database manifest and aggregate Dice.

    Subject sets of the two manifests must be disjoint. Deterministic for a
    fixed config and seed.
    """
    engine, backbone, index, store, test_manifest, spec = _build_database(config)
    from .engine import resolve_classes

    labels = resolve_classes(config.classes, store.class_map)
    records: list[DiceRecord] = []
    stage_times: dict[str, list[float]] = {}
    for entry in test_manifest.entries:
        sample = load_sample(test_manifest, entry.id)
        result = segment_image(
            engine,
            index,
            store,
            sample.image,
            k=config.k,
            classes=labels,
            strategy=config.resolved_strategy(),
            backbone=backbone,
            preprocess=spec,
        )
        for lbl in labels:
            gt = sample.mask.binary(lbl)
            records.append(
                DiceRecord(
                    class_label=lbl,
                    dice=dice(result.class_masks[lbl], gt),
                    gt_pixels=int(gt.sum()),
                    sample_id=sample.id,
                )
            )
        for stage, ms in result.timing.items():
            stage_times.setdefault(stage, []).append(ms)
    timing = {stage: float(np.mean(v)) for stage, v in stage_times.items()}
    return EvalReport.compute(
        records,
        config=asdict(config),
        class_names=store.class_map,
        timing=timing,
        size_threshold_px=config.size_threshold_px,
    )


def ablation_cell_seed(base_seed: int, strategy: str, k: int) -> int:
    # Stable per-cell seed so random retrieval differs across cells but not runs.
    return zlib.crc32(f"{base_seed}|{strategy}|{k}".encode()) & 0x7FFFFFFF


def run_ablation(base_config: EvalConfig, strategies: list[str], k_values: list[int]) -> dict:
    """One EvalReport per (strategy, k) cell."""
    grid: dict[tuple[str, int], EvalReport] = {}
    for strategy in strategies:
        for k in k_values:
            cell = EvalConfig(**{**asdict(base_config), "k": k, "strategy": strategy})
            if strategy == "random":
                cell.strategy = f"random:{ablation_cell_seed(base_config.seed, strategy, k)}"
            grid[(strategy, k)] = run_protocol(cell)
    return grid


def benchmark_pipeline(config: EvalConfig, repetitions: int, warmup: int = 3) -> dict:
    """Mean/std per pipeline stage over repeated runs of one query; warm-up excluded."""
    engine, backbone, index, store, test_manifest, spec = _build_database(config)
    sample = load_sample(test_manifest, test_manifest.entries[0].id)

    def run_once():
        return segment_image(
            engine,
            index,
            store,
            sample.image,
            k=config.k,
            classes=config.classes,
            strategy=config.resolved_strategy(),
            backbone=backbone,
            preprocess=spec,
        )

    for _ in range(warmup):
        run_once()
    stage_times: dict[str, list[float]] = {}
    for _ in range(repetitions):
        result = run_once()
        for stage, ms in result.timing.items():
            stage_times.setdefault(stage, []).append(ms)
    stats = {}
    for stage, values in stage_times.items():
        stats[stage] = {
            "mean_ms": float(np.mean(values)),
            "std_ms": float(statistics.stdev(values)) if len(values) > 1 else None,
            "reps": len(values),
        }
    stats["k"] = config.k
    return stats


def write_report(report: EvalReport, path: Path, format: str = "json") -> Path:
    """Serialize a report as json, csv (one row per sample-class), or a markdown table."""
    path = Path(path)
    try:
        if format == "json":
            path.write_text(report.to_json())
        elif format == "csv":
            lines = ["sample_id,class_label,class_name,dice,gt_pixels"]
            for r in report.records:
                name = report.class_names.get(r.class_label, str(r.class_label))
                lines.append(f"{r.sample_id},{r.class_label},{name},{r.dice:.6f},{r.gt_pixels}")
            path.write_text("\n".join(lines) + "\n")
        elif format == "markdown-table":
            path.write_text(_markdown_report(report))
        else:
            raise SchemaViolation(f"unknown report format {format!r}")
    except OSError as exc:
        raise IoError(f"cannot write report to {path}: {exc}") from exc
    return path


def _markdown_report(report: EvalReport) -> str:
    labels = sorted(report.per_class_mean)
    names = [report.class_names.get(lbl, str(lbl)) for lbl in labels]
    lines = ["## Configuration", "```json", json.dumps(report.config, indent=2), "```", ""]
    lines.append("## Mean DSC")
    lines.append("| Method | " + " | ".join(names) + " |")
    lines.append("|---" * (len(labels) + 1) + "|")
    cells = " | ".join(f"{report.per_class_mean[lbl]:.4f}" for lbl in labels)
    lines.append(f"| {report.config.get('engine', 'engine')} | {cells} |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# episode protocol (1-way 1-shot style)
# ---------------------------------------------------------------------------

def run_episode_protocol(episodes_path: Path, engine: str, backbone: str = "test:0",
                         embed_resolution: int = 518, seg_resolution: int = 1024) -> dict:
    """Episode-based protocol: per episode the database holds exactly the
    support slice(s), and each query is segmented for the episode class.

    Episode file schema::

        {"manifest": "path/relative/to/this/file.json",
         "folds": [{"name": "fold0",
                    "episodes": [{"class": 1, "support_ids": [...], "query_ids": [...]}]}]}
    """
    episodes_path = Path(episodes_path)
    raw = json.loads(episodes_path.read_text())
    manifest = load_manifest(episodes_path.parent / raw["manifest"])
    store = SampleStore.from_manifest(manifest)
    spec = PreprocessSpec(embed_resolution=embed_resolution, seg_resolution=seg_resolution)
    bb = get_backbone(backbone)
    eng = get_engine(engine)
    from .engine import resolve_classes

    fold_results: dict[str, dict[int, float]] = {}
    for fold in raw["folds"]:
        scores: dict[int, list[float]] = {}
        for episode in fold["episodes"]:
            lbl = resolve_classes([episode["class"]], store.class_map)[0]
            support = [store.get(sid) for sid in episode["support_ids"]]
            embeddings = [
                embed(bb, preprocess_for_embedding(rec.image, spec)).with_id(rec.id)
                for rec in support
            ]
            episode_index = build_index(embeddings)
            for qid in episode["query_ids"]:
                q = store.get(qid)
                result = segment_image(
                    eng,
                    episode_index,
                    store,
                    q.image,
                    k=len(support),
                    classes=[lbl],
                    strategy="embedding",
                    backbone=bb,
                    preprocess=spec,
                )
                scores.setdefault(lbl, []).append(dice(result.class_masks[lbl], q.mask.binary(lbl)))
        fold_results[fold["name"]] = {lbl: float(np.mean(v)) for lbl, v in sorted(scores.items())}
    all_scores = [v for fold in fold_results.values() for v in fold.values()]
    return {"folds": fold_results, "mean": float(np.mean(all_scores)) if all_scores else None}
