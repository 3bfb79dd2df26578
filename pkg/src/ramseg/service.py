"""HTTP facade for the annotation workbench.

Retrieval preview, promptless segmentation, and the accept-correction loop
that embeds user-approved samples straight into the live index. Accepted
samples persist to a spool directory plus an append-only journal; replaying
the journal over the base index reconstructs the live state after a restart.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel

from . import rle
from .data import (
    ImageSlice,
    LabelMask,
    PreprocessSpec,
    SampleRecord,
    SampleStore,
    load_manifest,
    preprocess_for_embedding,
    save_mask_array,
)
from .embedding import EmbeddingBackbone, embed, get_backbone
from .engine import SegEngine, get_engine, resolve_classes, segment_image
from .errors import (
    DuplicateId,
    EmptyIndex,
    MissingFile,
    RamsegError,
    SchemaViolation,
    ShapeMismatch,
)
from .index import FlatIndex, build_index, load, query, save
from .embedding import Embedding

JOURNAL_NAME = "journal.jsonl"
SPOOL_DIR = "accepted"


class QueueFull(RamsegError):
    code = "QUEUE_FULL"
    http_status = 503


class EngineLane:
    """Single in-flight inference lane with a bounded wait queue."""

    def __init__(self, queue_limit: int = 16):
        self._slots = threading.BoundedSemaphore(queue_limit)
        self._lock = threading.Lock()

    @contextmanager
    def acquire(self):
        if not self._slots.acquire(blocking=False):
            raise QueueFull("inference queue is full, retry later")
        try:
            with self._lock:
                yield
        finally:
            self._slots.release()


@dataclass
class ServiceConfig:
    samples_dir: Path
    index_path: Path | None = None
    manifest_path: Path | None = None
    engine: str = "transfer"
    backbone: str = "test:0"
    default_k: int = 16
    embed_resolution: int = 518
    seg_resolution: int = 1024
    queue_limit: int = 16
    static_dir: Path | None = None


class SessionState:
    """Live index + sample store + journal; one instance per service process."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.samples_dir = Path(config.samples_dir)
        self.samples_dir.mkdir(parents=True, exist_ok=True)
        self.journal_path = self.samples_dir / JOURNAL_NAME
        self.spool_dir = self.samples_dir / SPOOL_DIR

        self.engine: SegEngine = get_engine(config.engine)
        self.backbone: EmbeddingBackbone = get_backbone(config.backbone)
        self.spec = PreprocessSpec(
            embed_resolution=config.embed_resolution, seg_resolution=config.seg_resolution
        )
        self.lane = EngineLane(config.queue_limit)
        self._accept_lock = threading.Lock()

        self.store = SampleStore()
        self.artifact_paths: dict[str, tuple[Path, Path]] = {}
        self.accepted_count = 0

        manifest_path = config.manifest_path
        if manifest_path is None and (self.samples_dir / "manifest.json").exists():
            manifest_path = self.samples_dir / "manifest.json"
        if manifest_path is not None:
            self._load_base_samples(Path(manifest_path))

        if config.index_path and Path(config.index_path).exists():
            self.index = load(config.index_path)
        elif manifest_path is not None and len(self.store):
            self.index = self._index_from_store()
        else:
            self.index = FlatIndex(self.backbone.dim)

        self._replay_journal()

    # -- startup ----------------------------------------------------------

    def _load_base_samples(self, manifest_path: Path) -> None:
        manifest = load_manifest(manifest_path)
        self.store = SampleStore.from_manifest(manifest)
        self.artifact_paths = {}
        for entry in manifest.entries:
            self.artifact_paths[entry.id] = (
                manifest.root / entry.image_path,
                manifest.root / entry.mask_path,
            )

    def _index_from_store(self) -> FlatIndex:
        embeddings = [
            embed(self.backbone, preprocess_for_embedding(rec.image, self.spec)).with_id(rec.id)
            for rec in self.store.records()
        ]
        return build_index(embeddings)

    def _replay_journal(self) -> None:
        if not self.journal_path.exists():
            return
        for line in self.journal_path.read_text().splitlines():
            if not line.strip():
                continue
            entry = json.loads(line)
            sample_id = entry["id"]
            image_path = self.spool_dir / f"{sample_id}.image.png"
            mask_path = self.spool_dir / f"{sample_id}.mask.png"
            pixels = np.asarray(Image.open(image_path)).astype(np.float32)
            labels = np.asarray(Image.open(mask_path)).astype(np.int32)
            record = SampleRecord(
                id=sample_id,
                image=ImageSlice(pixels, subject_id=f"accepted:{sample_id}"),
                mask=LabelMask(labels, class_map=self.store.class_map),
                provenance="user-accepted",
            )
            if sample_id not in self.store:
                self.store.add(record)
            self.artifact_paths[sample_id] = (image_path, mask_path)
            # idempotent: an index file saved after accepts already holds the row
            if sample_id not in self.index:
                emb = embed(self.backbone, preprocess_for_embedding(record.image, self.spec))
                self.index.add(emb, sample_id)
            self.accepted_count += 1

    # -- operations ----------------------------------------------------------

    def build(self, manifest_path: str, backbone: str | None = None) -> dict:
        if backbone:
            self.backbone = get_backbone(backbone)
        self._load_base_samples(Path(manifest_path))
        self.index = (
            self._index_from_store() if len(self.store) else FlatIndex(self.backbone.dim)
        )
        self.accepted_count = 0
        self._replay_journal()
        if self.config.index_path:
            save(self.index, self.config.index_path)
        return {"count": len(self.index), "dim": self.index.dim, "version": self.index.version}

    def query_embedding(self, image: ImageSlice | None, sample_id: str | None) -> Embedding:
        if sample_id is not None:
            return Embedding(self.index.vector_for(sample_id), source_id=sample_id)
        if image is None:
            raise SchemaViolation("request needs either an image or a sample_id")
        return embed(self.backbone, preprocess_for_embedding(image, self.spec))

    def retrieve(self, image: ImageSlice | None, sample_id: str | None, k: int) -> list[dict]:
        q = self.query_embedding(image, sample_id)
        hits = query(self.index, q, k)
        return [
            {
                "id": h.id,
                "distance": h.distance,
                "rank": h.rank,
                "thumbnail_url": f"/api/samples/{h.id}/image",
                "mask_url": f"/api/samples/{h.id}/mask",
            }
            for h in hits
        ]

    def segment(self, image: ImageSlice, k: int, classes, strategy: str) -> dict:
        with self.lane.acquire():
            result = segment_image(
                self.engine,
                self.index,
                self.store,
                image,
                k=k,
                classes=classes,
                strategy=strategy,
                backbone=self.backbone,
                preprocess=self.spec,
            )
        masks = {}
        exemplar_ids = {}
        for lbl, mask in result.class_masks.items():
            name = self.store.class_map.get(lbl, str(lbl))
            encoded = rle.encode_mask(mask)
            encoded["label"] = lbl
            masks[name] = encoded
            exemplar_ids[name] = result.exemplar_ids[lbl]
        return {
            "masks": masks,
            "exemplar_ids": exemplar_ids,
            "timings_ms": result.timing,
            "k": result.k,
            "strategy": result.strategy,
            "index_version": self.index.version,
        }

    def accept(self, image: ImageSlice, labels: np.ndarray, proposed_id: str) -> dict:
        if labels.shape != image.pixels.shape:
            raise ShapeMismatch(
                f"mask {labels.shape} does not match image {image.pixels.shape}"
            )
        with self._accept_lock:
            if proposed_id in self.store or proposed_id in self.index:
                raise DuplicateId(f"sample id {proposed_id!r} already exists")
            self.spool_dir.mkdir(parents=True, exist_ok=True)
            image_path = self.spool_dir / f"{proposed_id}.image.png"
            mask_path = self.spool_dir / f"{proposed_id}.mask.png"
            pixels = np.clip(image.pixels, 0, 65535)
            dtype = np.uint8 if pixels.max() < 256 else np.uint16
            Image.fromarray(np.round(pixels).astype(dtype)).save(image_path)
            save_mask_array(labels, mask_path)
            # canonicalize through the persisted raster so journal replay
            # reproduces the live index rows bit for bit
            stored_pixels = np.asarray(Image.open(image_path)).astype(np.float32)
            record = SampleRecord(
                id=proposed_id,
                image=ImageSlice(stored_pixels, subject_id=f"accepted:{proposed_id}"),
                mask=LabelMask(labels, class_map=self.store.class_map),
                provenance="user-accepted",
            )
            emb = embed(self.backbone, preprocess_for_embedding(record.image, self.spec))
            self.store.add(record)
            self.artifact_paths[proposed_id] = (image_path, mask_path)
            self.index.add(emb, proposed_id)
            with self.journal_path.open("a") as fh:
                fh.write(
                    json.dumps(
                        {"id": proposed_id, "timestamp": time.time(), "source": "user-accepted"}
                    )
                    + "\n"
                )
            self.accepted_count += 1
            return {"id": proposed_id, "index_version": self.index.version}

    def stats(self) -> dict:
        return {
            "count": len(self.index),
            "dim": self.index.dim,
            "version": self.index.version,
            "accepted_count": self.accepted_count,
        }

    def artifact_bytes(self, sample_id: str, kind: str) -> bytes:
        if sample_id not in self.artifact_paths:
            raise MissingFile(f"sample {sample_id!r} has no stored artifacts")
        image_path, mask_path = self.artifact_paths[sample_id]
        path = image_path if kind == "image" else mask_path
        if not Path(path).exists():
            raise MissingFile(f"artifact file missing: {path}")
        return Path(path).read_bytes()


# ---------------------------------------------------------------------------
# wire helpers
# ---------------------------------------------------------------------------

def decode_image_b64(data: str, subject_id: str = "query") -> ImageSlice:
    try:
        blob = base64.b64decode(data, validate=True)
        img = Image.open(io.BytesIO(blob))
        arr = np.asarray(img)
    except Exception as exc:
        raise SchemaViolation(f"cannot decode base64 raster: {exc}") from exc
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return ImageSlice(arr.astype(np.float32), subject_id=subject_id)


def masks_to_labels(masks: dict, class_map: dict[int, str], shape: tuple[int, int]) -> np.ndarray:
    """Per-class RLE dict -> label map; higher labels win residual overlaps."""
    by_name = {v: k for k, v in class_map.items()}
    resolved: list[tuple[int, np.ndarray]] = []
    for key, payload in masks.items():
        if isinstance(key, str) and key in by_name:
            lbl = by_name[key]
        else:
            try:
                lbl = int(key)
            except (TypeError, ValueError):
                raise SchemaViolation(f"unknown mask class key {key!r}") from None
            if lbl not in class_map:
                raise SchemaViolation(f"unknown class label {lbl}")
        mask = rle.decode_mask(payload)
        if mask.shape != shape:
            raise ShapeMismatch(f"mask for {key!r} is {mask.shape}, image is {shape}")
        resolved.append((lbl, mask))
    labels = np.zeros(shape, dtype=np.int32)
    for lbl, mask in sorted(resolved, key=lambda pair: pair[0]):
        labels[mask] = lbl
    return labels


# ---------------------------------------------------------------------------
# FastAPI app
# ---------------------------------------------------------------------------

class BuildRequest(BaseModel):
    manifest_path: str
    backbone: str | None = None


class RetrieveRequest(BaseModel):
    image: str | None = None
    sample_id: str | None = None
    k: int = 16


class SegmentRequest(BaseModel):
    image: str | None = None
    sample_id: str | None = None
    k: int | None = None
    classes: list[str] | None = None
    strategy: str | None = None


class AcceptRequest(BaseModel):
    image: str
    masks: dict
    proposed_id: str


def create_app(state: SessionState) -> FastAPI:
    app = FastAPI(title="ramseg annotation service", openapi_url="/api/spec")
    app.state.session = state

    @app.exception_handler(RamsegError)
    async def ramseg_error_handler(request: Request, exc: RamsegError):
        return JSONResponse(
            status_code=exc.http_status,
            content={"code": exc.code, "message": str(exc), "http_status": exc.http_status},
            headers={"X-Index-Version": str(state.index.version)},
        )

    @app.middleware("http")
    async def index_version_header(request: Request, call_next):
        response = await call_next(request)
        response.headers.setdefault("X-Index-Version", str(state.index.version))
        return response

    @app.post("/api/index/build")
    def build(req: BuildRequest):
        return state.build(req.manifest_path, req.backbone)

    @app.post("/api/retrieve")
    def retrieve(req: RetrieveRequest):
        image = decode_image_b64(req.image) if req.image else None
        return state.retrieve(image, req.sample_id, req.k)

    @app.post("/api/segment")
    def segment(req: SegmentRequest):
        if len(state.index) == 0:
            raise EmptyIndex("segmentation requires a non-empty index")
        if req.sample_id is not None:
            image = state.store.get(req.sample_id).image
        elif req.image:
            image = decode_image_b64(req.image)
        else:
            raise SchemaViolation("request needs either an image or a sample_id")
        classes = resolve_classes(req.classes, state.store.class_map) if req.classes else None
        return state.segment(
            image,
            k=req.k or state.config.default_k,
            classes=classes,
            strategy=req.strategy or "embedding",
        )

    @app.post("/api/annotations/accept")
    def accept(req: AcceptRequest):
        image = decode_image_b64(req.image, subject_id=f"accepted:{req.proposed_id}")
        labels = masks_to_labels(
            req.masks, state.store.class_map, tuple(image.pixels.shape)
        )
        return state.accept(image, labels, req.proposed_id)

    @app.get("/api/samples/{sample_id}/image")
    def sample_image(sample_id: str):
        blob = state.artifact_bytes(sample_id, "image")
        return Response(
            content=blob,
            media_type="image/png",
            headers={"ETag": hashlib.sha1(blob).hexdigest()},
        )

    @app.get("/api/samples/{sample_id}/mask")
    def sample_mask(sample_id: str):
        blob = state.artifact_bytes(sample_id, "mask")
        return Response(
            content=blob,
            media_type="image/png",
            headers={"ETag": hashlib.sha1(blob).hexdigest()},
        )

    @app.get("/api/index/stats")
    def stats():
        return state.stats()

    @app.get("/api/health")
    def health():
        return {"engine": state.engine.name, "checkpoint_loaded": state.engine.checkpoint_loaded}

    static_dir = state.config.static_dir
    if static_dir and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="workbench")
    return app


def serve(config: ServiceConfig, host: str = "127.0.0.1", port: int = 8080):
    import uvicorn

    state = SessionState(config)
    app = create_app(state)
    uvicorn.run(app, host=host, port=port, log_level="info")
