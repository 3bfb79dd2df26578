"""Run-length encoding for binary masks on the JSON wire.

Format: ``{"size": [H, W], "order": "row-major", "counts": [...],
"foreground_pixels": n}``. Counts alternate background/foreground runs over
the row-major flattened mask, always starting with a (possibly zero-length)
background run. ``foreground_pixels`` doubles as a decode checksum for
clients.
"""

from __future__ import annotations

import numpy as np

from .errors import SchemaViolation, ShapeMismatch

RLE_ORDER = "row-major"


def encode_mask(mask: np.ndarray) -> dict:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeMismatch(f"mask must be 2D, got {mask.shape}")
    flat = mask.astype(bool).reshape(-1)
    counts: list[int] = []
    if flat.size == 0:
        counts = [0]
    else:
        changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        bounds = np.concatenate([[0], changes, [flat.size]])
        runs = np.diff(bounds).tolist()
        if flat[0]:
            counts = [0] + runs
        else:
            counts = runs
    return {
        "size": [int(mask.shape[0]), int(mask.shape[1])],
        "order": RLE_ORDER,
        "counts": [int(c) for c in counts],
        "foreground_pixels": int(flat.sum()),
    }


def decode_mask(obj: dict) -> np.ndarray:
    try:
        h, w = int(obj["size"][0]), int(obj["size"][1])
        counts = [int(c) for c in obj["counts"]]
        order = obj.get("order", RLE_ORDER)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaViolation(f"bad RLE object: {exc}") from exc
    if order != RLE_ORDER:
        raise SchemaViolation(f"unsupported RLE order {order!r}")
    if any(c < 0 for c in counts):
        raise SchemaViolation("negative run length")
    total = sum(counts)
    if total != h * w:
        raise SchemaViolation(f"run lengths sum to {total}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for run in counts:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    mask = flat.reshape(h, w)
    expected = obj.get("foreground_pixels")
    if expected is not None and int(expected) != int(mask.sum()):
        raise SchemaViolation(
            f"foreground checksum mismatch: decoded {int(mask.sum())}, declared {expected}"
        )
    return mask
