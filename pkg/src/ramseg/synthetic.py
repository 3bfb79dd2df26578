"""Deterministic synthetic shape datasets for demos and weight-free testing.

Each sample is a noisy grayscale slice containing a bright disc (class 1) and
a dimmer rectangle (class 2) at seeded random positions. Generation is pure
PCG64, so a (seed, size, index) triple always yields the same pixels.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import (
    DatasetManifest,
    ImageSlice,
    LabelMask,
    ManifestEntry,
    SampleRecord,
    save_image_array,
    save_mask_array,
    write_manifest,
)

CLASS_MAP = {1: "disc", 2: "box"}


def make_record(seed: int, index: int, subject_id: str, size: int = 96) -> SampleRecord:
    rng = np.random.Generator(np.random.PCG64((int(seed) << 20) + int(index)))
    yy, xx = np.mgrid[0:size, 0:size]

    image = rng.normal(80.0, 6.0, (size, size))
    labels = np.zeros((size, size), dtype=np.int32)

    cy, cx = rng.integers(size // 4, 3 * size // 4, size=2)
    radius = rng.integers(size // 10, size // 5)
    disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    image[disc] += 90.0
    labels[disc] = 1

    for _ in range(8):  # keep the rectangle clear of the disc
        y0 = int(rng.integers(0, size - size // 4))
        x0 = int(rng.integers(0, size - size // 4))
        hh = int(rng.integers(size // 10, size // 4))
        ww = int(rng.integers(size // 10, size // 4))
        box = np.zeros_like(disc)
        box[y0 : y0 + hh, x0 : x0 + ww] = True
        if not (box & disc).any():
            image[box] += 50.0
            labels[box] = 2
            break

    image = np.clip(image, 0, 255).astype(np.uint8)
    return SampleRecord(
        id=f"{subject_id}_{index:03d}",
        image=ImageSlice(image.astype(np.float32), subject_id=subject_id, slice_index=index, modality="synthetic"),
        mask=LabelMask(labels, class_map=CLASS_MAP),
    )


def make_records(n: int, seed: int = 0, size: int = 96, subject_prefix: str = "syn") -> list[SampleRecord]:
    # A subject per 5 slices, mirroring multi-slice subjects in real manifests.
    return [make_record(seed, i, f"{subject_prefix}{i // 5:02d}", size=size) for i in range(n)]


def write_dataset(records: list[SampleRecord], out_dir: Path, manifest_name: str = "manifest.json") -> Path:
    """Write records as PNG pairs plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    entries = []
    for rec in records:
        image_rel = f"images/{rec.id}.png"
        mask_rel = f"masks/{rec.id}.png"
        save_image_array(rec.image.pixels.astype(np.uint8), out_dir / image_rel)
        save_mask_array(rec.mask.labels, out_dir / mask_rel)
        entries.append(
            ManifestEntry(
                id=rec.id,
                image_path=image_rel,
                mask_path=mask_rel,
                subject_id=rec.image.subject_id,
                slice_index=rec.image.slice_index,
                modality=rec.image.modality,
            )
        )
    manifest = DatasetManifest(entries=entries, class_map=dict(CLASS_MAP), root=out_dir)
    return write_manifest(manifest, out_dir / manifest_name)


def write_synthetic_dataset(out_dir: Path, n: int = 50, seed: int = 0, size: int = 96) -> Path:
    return write_dataset(make_records(n, seed=seed, size=size), out_dir)


def write_self_inclusion_pair(
    out_dir: Path, n_db: int = 30, n_test: int = 10, seed: int = 0, size: int = 96
) -> tuple[Path, Path]:
    """Database manifest plus a test manifest whose items are pixel-exact
    duplicates of database items under disjoint subject ids.

    The duplicate test entries reference the same raster files, so retrieval
    at distance zero and an exact mask copy are guaranteed by construction.
    """
    out_dir = Path(out_dir)
    records = make_records(n_db, seed=seed, size=size, subject_prefix="db")
    db_manifest_path = write_dataset(records, out_dir, manifest_name="db_manifest.json")

    test_entries = []
    for j in range(n_test):
        src = records[j % n_db]
        test_entries.append(
            ManifestEntry(
                id=f"test_{j:03d}",
                image_path=f"images/{src.id}.png",
                mask_path=f"masks/{src.id}.png",
                subject_id=f"tsubj{j:02d}",
                slice_index=src.image.slice_index,
                modality=src.image.modality,
            )
        )
    test_manifest = DatasetManifest(entries=test_entries, class_map=dict(CLASS_MAP), root=out_dir)
    test_manifest_path = write_manifest(test_manifest, out_dir / "test_manifest.json")
    return db_manifest_path, test_manifest_path
