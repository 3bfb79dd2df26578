"""Exact flat nearest-neighbor index over unit-norm embeddings.

Search is a full linear scan with squared L2 distance computed in float64,
ties broken by insertion order, so results are exactly reproducible and
directly comparable against a brute-force oracle.

On-disk format (little endian throughout)::

    magic   8 bytes   b"RAMIDX1\\0"  (6-byte family tag + version digit + NUL)
    dim     u32
    count   u64
    rows    count*dim float32, C order
    idslen  u64
    ids     UTF-8 JSON array of strings, idslen bytes
    crc     u32, CRC32 of every preceding byte

Loading verifies the CRC before trusting any header field, so any corrupted
byte surfaces as CorruptFile; VersionUnsupported is reserved for intact files
written by a newer format version.
"""

from __future__ import annotations

import json
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedding import Embedding
from .errors import (
    CorruptFile,
    DimMismatch,
    DuplicateId,
    EmptyIndex,
    InvalidK,
    IoError,
    MissingFile,
    NotNormalized,
    VersionUnsupported,
)

MAGIC_FAMILY = b"RAMIDX"
MAGIC = MAGIC_FAMILY + b"1\0"
ROW_NORM_TOLERANCE = 1e-4

RANDOM_SAMPLE_DISTANCE = -1.0


@dataclass(frozen=True)
class RetrievalHit:
    id: str
    distance: float
    rank: int


class _Snapshot:
    """Immutable (rows, ids) view handed to readers; swapped atomically on write."""

    __slots__ = ("rows", "ids", "id_set", "version")

    def __init__(self, rows: np.ndarray, ids: tuple[str, ...], version: int):
        self.rows = rows
        self.ids = ids
        self.id_set = frozenset(ids)
        self.version = version


def _check_row(vector: np.ndarray, dim: int, what: str) -> np.ndarray:
    row = np.asarray(vector, dtype=np.float32).reshape(-1)
    if row.shape[0] != dim:
        raise DimMismatch(f"{what}: dim {row.shape[0]} does not match index dim {dim}")
    norm = float(np.linalg.norm(row.astype(np.float64)))
    if abs(norm - 1.0) > ROW_NORM_TOLERANCE:
        raise NotNormalized(f"{what}: norm {norm} deviates from 1 by more than {ROW_NORM_TOLERANCE}")
    return row


class FlatIndex:
    """Dense float32 matrix of unit-norm rows with insertion-ordered string ids.

    Concurrency: mutations are serialized by an internal lock and publish a
    fresh snapshot (copy-on-write), so concurrent readers always observe
    either the pre-add or post-add state, never a torn one.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise DimMismatch(f"index dim must be >= 1, got {dim}")
        self.dim = int(dim)
        self._lock = threading.Lock()
        self._state = _Snapshot(np.empty((0, self.dim), dtype=np.float32), (), 0)

    # -- introspection -----------------------------------------------------

    def __len__(self) -> int:
        return len(self._state.ids)

    @property
    def count(self) -> int:
        return len(self._state.ids)

    @property
    def version(self) -> int:
        return self._state.version

    @property
    def ids(self) -> tuple[str, ...]:
        return self._state.ids

    def rows_copy(self) -> np.ndarray:
        return self._state.rows.copy()

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._state.id_set

    def vector_for(self, sample_id: str) -> np.ndarray:
        snap = self._state
        try:
            i = snap.ids.index(sample_id)
        except ValueError:
            raise MissingFile(f"id {sample_id!r} not in index") from None
        return snap.rows[i].copy()

    # -- mutation ------------------------------------------------------------

    def add(self, embedding: Embedding, sample_id: str | None = None) -> "FlatIndex":
        sample_id = sample_id if sample_id is not None else embedding.source_id
        if not sample_id:
            raise DuplicateId("add requires an id (argument or embedding.source_id)")
        row = _check_row(embedding.vector, self.dim, f"add({sample_id!r})")
        with self._lock:
            snap = self._state
            if sample_id in snap.id_set:
                raise DuplicateId(f"id {sample_id!r} already in index")
            rows = np.vstack([snap.rows, row[None, :]])
            self._state = _Snapshot(rows, snap.ids + (sample_id,), snap.version + 1)
        return self


def build_index(embeddings: Sequence[Embedding], ids: Sequence[str] | None = None) -> FlatIndex:
    """Build an index from embeddings, preserving order. Ids default to source_id."""
    embeddings = list(embeddings)
    if ids is None:
        ids = [getattr(e, "source_id", None) for e in embeddings]
    ids = [str(i) if i is not None else None for i in ids]
    if len(ids) != len(embeddings):
        raise DimMismatch(f"{len(ids)} ids for {len(embeddings)} embeddings")
    if not embeddings:
        return FlatIndex(384)
    vectors = [np.asarray(e.vector, dtype=np.float32).reshape(-1) for e in embeddings]
    dim = vectors[0].shape[0]
    for i, v in enumerate(vectors):
        if v.shape[0] != dim:
            raise DimMismatch(f"embedding {ids[i]!r}: dim {v.shape[0]} does not match {dim}")
    for i, sample_id in enumerate(ids):
        if sample_id is None:
            raise DuplicateId(f"embedding {i} has no id")
    if len(set(ids)) != len(ids):
        dup = next(s for s in ids if ids.count(s) > 1)
        raise DuplicateId(f"duplicate id {dup!r}")
    rows = np.stack(vectors)
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > ROW_NORM_TOLERANCE)
    if bad.size:
        i = int(bad[0])
        raise NotNormalized(
            f"embedding {ids[i]!r}: norm {norms[i]} deviates from 1 by more than {ROW_NORM_TOLERANCE}"
        )
    index = FlatIndex(dim)
    index._state = _Snapshot(rows, tuple(ids), 0)
    return index


def query(index: FlatIndex, q: Embedding, k: int) -> list[RetrievalHit]:
    """Top-k by ascending squared L2; ties broken by insertion order.

    Semantically identical to a full linear scan: distances are computed for
    every row in float64 and sorted stably.
    """
    snap = index._state
    if len(snap.ids) == 0:
        raise EmptyIndex("cannot query an empty index")
    if k < 1:
        raise InvalidK(f"k must be >= 1, got {k}")
    qrow = _check_row(q.vector, index.dim, "query")
    diffs = snap.rows.astype(np.float64) - qrow.astype(np.float64)
    dists = np.sum(diffs * diffs, axis=1)
    order = np.argsort(dists, kind="stable")[: min(k, len(snap.ids))]
    return [
        RetrievalHit(id=snap.ids[i], distance=float(dists[i]), rank=r + 1)
        for r, i in enumerate(order)
    ]


def random_sample(index: FlatIndex, k: int, seed: int) -> list[RetrievalHit]:
    """Uniform sample without replacement; deterministic per seed. Distances are -1."""
    snap = index._state
    if k < 1 or k > len(snap.ids):
        raise InvalidK(f"k must be in [1, {len(snap.ids)}], got {k}")
    # spawn_key namespaces the sampler's stream away from other uses of the seed
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=int(seed), spawn_key=(1,))))
    chosen = rng.choice(len(snap.ids), size=k, replace=False)
    return [
        RetrievalHit(id=snap.ids[int(i)], distance=RANDOM_SAMPLE_DISTANCE, rank=r + 1)
        for r, i in enumerate(chosen)
    ]


def save(index: FlatIndex, path: Path) -> Path:
    path = Path(path)
    snap = index._state
    rows = np.ascontiguousarray(snap.rows, dtype=np.float32)
    ids_blob = json.dumps(list(snap.ids)).encode("utf-8")
    body = b"".join(
        [
            MAGIC,
            struct.pack("<I", index.dim),
            struct.pack("<Q", rows.shape[0]),
            rows.astype("<f4").tobytes(order="C"),
            struct.pack("<Q", len(ids_blob)),
            ids_blob,
        ]
    )
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as exc:
        raise IoError(f"cannot write index to {path}: {exc}") from exc
    return path


def load(path: Path) -> FlatIndex:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read index from {path}: {exc}") from exc

    min_len = len(MAGIC) + 4 + 8 + 8 + 4
    if len(blob) < min_len:
        raise CorruptFile(f"{path}: file too short ({len(blob)} bytes)")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CorruptFile(f"{path}: checksum mismatch")
    if blob[: len(MAGIC_FAMILY)] != MAGIC_FAMILY:
        raise CorruptFile(f"{path}: bad magic bytes")
    if blob[len(MAGIC_FAMILY) : len(MAGIC)] != b"1\0":
        raise VersionUnsupported(f"{path}: format version {blob[len(MAGIC_FAMILY):len(MAGIC)]!r}")

    off = len(MAGIC)
    dim = struct.unpack_from("<I", blob, off)[0]
    off += 4
    count = struct.unpack_from("<Q", blob, off)[0]
    off += 8
    if dim < 1:
        raise CorruptFile(f"{path}: invalid dim {dim}")
    rows_bytes = count * dim * 4
    if off + rows_bytes + 8 + 4 > len(blob):
        raise CorruptFile(f"{path}: truncated rows block")
    rows = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=off).reshape(count, dim).copy()
    off += rows_bytes
    ids_len = struct.unpack_from("<Q", blob, off)[0]
    off += 8
    if off + ids_len + 4 != len(blob):
        raise CorruptFile(f"{path}: ids block length mismatch")
    try:
        ids = json.loads(blob[off : off + ids_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: undecodable ids block: {exc}") from exc
    if not isinstance(ids, list) or len(ids) != count or not all(isinstance(s, str) for s in ids):
        raise CorruptFile(f"{path}: ids block does not match row count")
    if len(set(ids)) != len(ids):
        raise CorruptFile(f"{path}: duplicate ids")
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    if count and np.abs(norms - 1.0).max() > ROW_NORM_TOLERANCE:
        raise NotNormalized(f"{path}: stored rows are not unit-norm")

    index = FlatIndex(dim)
    index._state = _Snapshot(rows, tuple(ids), 0)
    return index
