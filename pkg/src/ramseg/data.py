"""Dataset records, manifests, volume slicing, and deterministic preprocessing.

All resizing and pooling is implemented here on plain numpy so the pipeline is
bit-reproducible across library versions: half-pixel-center nearest/bilinear
resampling plus adaptive box averaging. Masks always travel through nearest
neighbor so the integer label set is preserved.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import (
    DuplicateId,
    MissingFile,
    NonFiniteInput,
    SchemaViolation,
    ShapeMismatch,
)

# Published normalization constants of the ImageNet-pretrained backbones.
BACKBONE_MEAN = (0.485, 0.456, 0.406)
BACKBONE_STD = (0.229, 0.224, 0.225)

MANIFEST_VERSION = 1

PROVENANCE_DATASET = "dataset"
PROVENANCE_ACCEPTED = "user-accepted"


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class ImageSlice:
    """One 2D intensity slice, the unit the whole pipeline operates on."""

    pixels: np.ndarray
    subject_id: str
    slice_index: int = 0
    modality: str = "unknown"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2 or self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ShapeMismatch(f"image pixels must be 2D HxW, got shape {self.pixels.shape}")
        if self.slice_index < 0:
            raise SchemaViolation(f"slice_index must be >= 0, got {self.slice_index}")
        if not np.isfinite(self.pixels).all():
            raise NonFiniteInput(f"image {self.subject_id}[{self.slice_index}] contains non-finite pixels")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


@dataclass
class LabelMask:
    """Integer label map paired with an ImageSlice. Background is label 0."""

    labels: np.ndarray
    class_map: dict[int, str]

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ShapeMismatch(f"mask labels must be 2D HxW, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise SchemaViolation(f"mask labels must be integers, got dtype {self.labels.dtype}")
        self.class_map = {int(k): str(v) for k, v in self.class_map.items()}
        present = set(int(v) for v in np.unique(self.labels)) - {0}
        missing = present - set(self.class_map)
        if missing:
            raise SchemaViolation(f"labels {sorted(missing)} present in mask but absent from class_map")

    def binary(self, class_label: int) -> np.ndarray:
        """Binary foreground mask for one class."""
        return (self.labels == int(class_label))


@dataclass
class SampleRecord:
    """An annotated slice: the unit stored in the retrieval database."""

    id: str
    image: ImageSlice
    mask: LabelMask
    provenance: str = PROVENANCE_DATASET

    def __post_init__(self):
        if self.image.pixels.shape != self.mask.labels.shape:
            raise ShapeMismatch(
                f"sample {self.id}: image {self.image.pixels.shape} vs mask {self.mask.labels.shape}"
            )
        if self.provenance not in (PROVENANCE_DATASET, PROVENANCE_ACCEPTED):
            raise SchemaViolation(f"unknown provenance {self.provenance!r}")


@dataclass
class ManifestEntry:
    id: str
    image_path: str
    mask_path: str
    subject_id: str
    slice_index: int
    modality: str


@dataclass
class DatasetManifest:
    """Validated dataset listing. Paths are relative to the manifest file."""

    entries: list[ManifestEntry]
    class_map: dict[int, str]
    root: Path
    format_version: int = MANIFEST_VERSION

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise DuplicateId(f"duplicate sample id {e.id!r} in manifest")
            seen.add(e.id)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    @property
    def subject_ids(self) -> set[str]:
        return {e.subject_id for e in self.entries}

    def get(self, sample_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == sample_id:
                return e
        raise MissingFile(f"sample id {sample_id!r} not in manifest")

    def load_sample(self, sample_id: str) -> SampleRecord:
        return load_sample(self, sample_id)


@dataclass(frozen=True)
class PreprocessSpec:
    """Resolution and intensity handling for both backbone inputs."""

    embed_resolution: int = 518
    seg_resolution: int = 1024
    intensity_mode: str = "minmax"
    channel_mode: str = "replicate3"

    def __post_init__(self):
        if self.embed_resolution % 14 != 0 or self.embed_resolution <= 0:
            raise SchemaViolation(
                f"embed_resolution must be a positive multiple of 14, got {self.embed_resolution}"
            )
        if self.seg_resolution <= 0:
            raise SchemaViolation(f"seg_resolution must be > 0, got {self.seg_resolution}")
        if self.intensity_mode not in ("minmax", "zscore"):
            raise SchemaViolation(f"unknown intensity_mode {self.intensity_mode!r}")
        if self.channel_mode != "replicate3":
            raise SchemaViolation(f"unknown channel_mode {self.channel_mode!r}")


# ---------------------------------------------------------------------------
# resampling primitives
# ---------------------------------------------------------------------------

def _nearest_src_indices(src: int, dst: int) -> np.ndarray:
    # Half-pixel centers; exact identity when src == dst.
    idx = np.floor((np.arange(dst) + 0.5) * (src / dst)).astype(np.int64)
    return np.clip(idx, 0, src - 1)


def resize_mask(labels: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of an integer label map (used both directions)."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeMismatch(f"mask must be 2D, got {labels.shape}")
    rows = _nearest_src_indices(labels.shape[0], out_hw[0])
    cols = _nearest_src_indices(labels.shape[1], out_hw[1])
    return labels[np.ix_(rows, cols)]


def bilinear_resize(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize (half-pixel centers, edge clamped) of HxW or HxWxC floats."""
    arr = np.asarray(arr, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeMismatch(f"expected HxW or HxWxC array, got {arr.shape}")
    src_h, src_w = arr.shape[:2]
    out_h, out_w = out_hw

    def axis_weights(src: int, dst: int):
        pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
        lo = np.floor(pos).astype(np.int64)
        frac = pos - lo
        lo0 = np.clip(lo, 0, src - 1)
        lo1 = np.clip(lo + 1, 0, src - 1)
        return lo0, lo1, frac

    r0, r1, rf = axis_weights(src_h, out_h)
    c0, c1, cf = axis_weights(src_w, out_w)
    rf = rf[:, None, None]
    cf = cf[None, :, None]

    top = arr[r0][:, c0] * (1.0 - cf) + arr[r0][:, c1] * cf
    bot = arr[r1][:, c0] * (1.0 - cf) + arr[r1][:, c1] * cf
    out = top * (1.0 - rf) + bot * rf
    return out[:, :, 0] if squeeze else out


def adaptive_avg_pool(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Box-average HxW(xC) down to out_hw; bin i spans [floor(i*S/n), ceil((i+1)*S/n))."""
    arr = np.asarray(arr, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    src_h, src_w = arr.shape[:2]
    out_h, out_w = out_hw

    def bins(src: int, dst: int):
        start = (np.arange(dst) * src) // dst
        end = -((-(np.arange(1, dst + 1) * src)) // dst)  # ceil division
        return start, end

    hs, he = bins(src_h, out_h)
    ws, we = bins(src_w, out_w)
    csum = np.zeros((src_h + 1, src_w + 1, arr.shape[2]), dtype=np.float64)
    csum[1:, 1:] = arr.cumsum(axis=0).cumsum(axis=1)

    total = (
        csum[he[:, None], we[None, :]]
        - csum[hs[:, None], we[None, :]]
        - csum[he[:, None], ws[None, :]]
        + csum[hs[:, None], ws[None, :]]
    )
    area = ((he - hs)[:, None] * (we - ws)[None, :]).astype(np.float64)
    out = total / area[:, :, None]
    return out[:, :, 0] if squeeze else out


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def _scale_intensity(pixels: np.ndarray, mode: str) -> np.ndarray:
    x = pixels.astype(np.float64)
    if mode == "minmax":
        lo = x.min()
        hi = x.max()
        if hi > lo:
            return (x - lo) / (hi - lo)
        return np.zeros_like(x)
    # zscore
    mu = x.mean()
    sd = x.std()
    if sd > 0:
        return (x - mu) / sd
    return np.zeros_like(x)


def _preprocess(image: ImageSlice, resolution: int, spec: PreprocessSpec) -> np.ndarray:
    if not np.isfinite(image.pixels).all():
        raise NonFiniteInput(f"image {image.subject_id}[{image.slice_index}] contains non-finite pixels")
    scaled = _scale_intensity(image.pixels, spec.intensity_mode)
    resized = bilinear_resize(scaled, (resolution, resolution))
    three = np.repeat(resized[:, :, None], 3, axis=2)
    mean = np.asarray(BACKBONE_MEAN, dtype=np.float64)
    std = np.asarray(BACKBONE_STD, dtype=np.float64)
    return ((three - mean) / std).astype(np.float32)


def preprocess_for_embedding(image: ImageSlice, spec: PreprocessSpec | None = None) -> np.ndarray:
    """Intensity-scale, replicate to 3 channels, resize, standardize. Returns HxWx3 float32."""
    spec = spec or PreprocessSpec()
    return _preprocess(image, spec.embed_resolution, spec)


def preprocess_for_segmentation(image: ImageSlice, spec: PreprocessSpec | None = None) -> np.ndarray:
    """Same pipeline as embedding preprocessing at the segmentation resolution."""
    spec = spec or PreprocessSpec()
    return _preprocess(image, spec.seg_resolution, spec)


def prescale_intensity(image: ImageSlice, spec: PreprocessSpec | None = None) -> np.ndarray:
    """Intensity scaling only (the value in [0,1] a pixel holds pre-standardization)."""
    spec = spec or PreprocessSpec()
    return _scale_intensity(image.pixels, spec.intensity_mode)


# ---------------------------------------------------------------------------
# volumes
# ---------------------------------------------------------------------------

def slice_volume(
    volume: np.ndarray,
    masks: np.ndarray,
    subject_id: str,
    class_map: dict[int, str] | None = None,
    modality: str = "volume",
) -> list[SampleRecord]:
    """Split a DxHxW volume and its label volume into per-slice records."""
    volume = np.asarray(volume)
    masks = np.asarray(masks)
    if volume.ndim != 3 or masks.ndim != 3:
        raise ShapeMismatch(f"expected 3D arrays, got {volume.shape} and {masks.shape}")
    if volume.shape != masks.shape:
        raise ShapeMismatch(f"volume {volume.shape} and masks {masks.shape} differ")
    if class_map is None:
        present = set(int(v) for v in np.unique(masks)) - {0}
        class_map = {c: f"class{c}" for c in sorted(present)}
    records = []
    for z in range(volume.shape[0]):
        records.append(
            SampleRecord(
                id=f"{subject_id}_{z:04d}",
                image=ImageSlice(volume[z], subject_id=subject_id, slice_index=z, modality=modality),
                mask=LabelMask(masks[z], class_map=class_map),
            )
        )
    return records


def stack_records(records: Sequence[SampleRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of slice_volume: restack slices into (volume, masks)."""
    return (
        np.stack([r.image.pixels for r in records], axis=0),
        np.stack([r.mask.labels for r in records], axis=0),
    )


# ---------------------------------------------------------------------------
# raster / array IO
# ---------------------------------------------------------------------------

def load_image_array(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"image file not found: {path}")
    if path.suffix == ".npy":
        return np.load(path).astype(np.float32)
    with Image.open(path) as img:
        return np.asarray(img).astype(np.float32)


def load_mask_array(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"mask file not found: {path}")
    if path.suffix == ".npy":
        arr = np.load(path)
    else:
        with Image.open(path) as img:
            arr = np.asarray(img)
    if not np.issubdtype(arr.dtype, np.integer):
        raise SchemaViolation(f"mask at {path} is not integer typed ({arr.dtype})")
    return arr.astype(np.int32)


def save_image_array(arr: np.ndarray, path: Path) -> Path:
    """Lossless save: uint8/uint16 as PNG, anything else as .npy."""
    path = Path(path)
    arr = np.asarray(arr)
    path.parent.mkdir(parents=True, exist_ok=True)
    if arr.dtype in (np.uint8, np.uint16) and path.suffix == ".png":
        Image.fromarray(arr).save(path)
        return path
    path = path.with_suffix(".npy")
    np.save(path, arr.astype(np.float32))
    return path


def save_mask_array(labels: np.ndarray, path: Path) -> Path:
    path = Path(path)
    labels = np.asarray(labels)
    path.parent.mkdir(parents=True, exist_ok=True)
    max_label = int(labels.max()) if labels.size else 0
    if max_label < 0:
        raise SchemaViolation("mask labels must be non-negative")
    dtype = np.uint8 if max_label < 256 else np.uint16
    Image.fromarray(labels.astype(dtype)).save(path)
    return path


# ---------------------------------------------------------------------------
# manifest IO
# ---------------------------------------------------------------------------

_ENTRY_KEYS = ("id", "image_path", "mask_path", "subject_id", "slice_index", "modality")


def load_manifest(path: Path) -> DatasetManifest:
    """Load and validate a manifest JSON file; referenced files must exist."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaViolation(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise SchemaViolation(f"manifest {path}: top level must be an object")
    if raw.get("format_version") != MANIFEST_VERSION:
        raise SchemaViolation(
            f"manifest {path}: unsupported format_version {raw.get('format_version')!r}"
        )
    class_map_raw = raw.get("class_map")
    if not isinstance(class_map_raw, dict):
        raise SchemaViolation(f"manifest {path}: class_map must be an object")
    try:
        class_map = {int(k): str(v) for k, v in class_map_raw.items()}
    except ValueError as exc:
        raise SchemaViolation(f"manifest {path}: class_map keys must be integers") from exc
    entries_raw = raw.get("entries")
    if not isinstance(entries_raw, list):
        raise SchemaViolation(f"manifest {path}: entries must be a list")

    root = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for i, item in enumerate(entries_raw):
        if not isinstance(item, dict) or not all(k in item for k in _ENTRY_KEYS):
            raise SchemaViolation(f"manifest {path}: entry {i} missing required keys {_ENTRY_KEYS}")
        entry = ManifestEntry(
            id=str(item["id"]),
            image_path=str(item["image_path"]),
            mask_path=str(item["mask_path"]),
            subject_id=str(item["subject_id"]),
            slice_index=int(item["slice_index"]),
            modality=str(item["modality"]),
        )
        if entry.id in seen:
            raise DuplicateId(f"manifest {path}: duplicate id {entry.id!r}")
        seen.add(entry.id)
        for rel in (entry.image_path, entry.mask_path):
            if not (root / rel).exists():
                raise MissingFile(f"manifest {path}: referenced file missing: {rel}")
        entries.append(entry)
    return DatasetManifest(entries=entries, class_map=class_map, root=root)


def write_manifest(manifest: DatasetManifest, path: Path) -> Path:
    path = Path(path)
    payload = {
        "format_version": manifest.format_version,
        "class_map": {str(k): v for k, v in manifest.class_map.items()},
        "entries": [
            {
                "id": e.id,
                "image_path": e.image_path,
                "mask_path": e.mask_path,
                "subject_id": e.subject_id,
                "slice_index": e.slice_index,
                "modality": e.modality,
            }
            for e in manifest.entries
        ],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2))
    return path


def load_sample(manifest: DatasetManifest, sample_id: str) -> SampleRecord:
    entry = manifest.get(sample_id)
    pixels = load_image_array(manifest.root / entry.image_path)
    labels = load_mask_array(manifest.root / entry.mask_path)
    return SampleRecord(
        id=entry.id,
        image=ImageSlice(
            pixels, subject_id=entry.subject_id, slice_index=entry.slice_index, modality=entry.modality
        ),
        mask=LabelMask(labels, class_map=manifest.class_map),
    )


class SampleStore:
    """In-memory id -> SampleRecord lookup backed by a manifest, extended at runtime."""

    def __init__(self, class_map: dict[int, str] | None = None):
        self.class_map: dict[int, str] = {int(k): str(v) for k, v in (class_map or {}).items()}
        self._records: dict[str, SampleRecord] = {}

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "SampleStore":
        store = cls(class_map=manifest.class_map)
        for entry in manifest.entries:
            store.add(load_sample(manifest, entry.id))
        return store

    def add(self, record: SampleRecord) -> None:
        if record.id in self._records:
            raise DuplicateId(f"sample id {record.id!r} already in store")
        self._records[record.id] = record

    def get(self, sample_id: str) -> SampleRecord:
        try:
            return self._records[sample_id]
        except KeyError:
            raise MissingFile(f"sample id {sample_id!r} not in store") from None

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._records

    def __len__(self) -> int:
        return len(self._records)

    @property
    def ids(self) -> list[str]:
        return list(self._records)

    def records(self) -> Iterable[SampleRecord]:
        return self._records.values()
