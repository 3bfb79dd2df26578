"""Seeded, randomly-initialized miniature engine.

Small patch-embed encoder, two attention blocks (self-attention over query
tokens, then cross-attention to the memory tokens), and a convolutional
decoder with one high-resolution skip connection. Pure numpy, so outputs are
bitwise reproducible per seed. Memory entries are canonically ordered before
cross-attention, which makes the conditioning exactly invariant to bank
permutation.
"""

from __future__ import annotations

import hashlib

import numpy as np

from ..data import adaptive_avg_pool, bilinear_resize
from ..errors import ShapeMismatch
from .base import (
    FeatureMap,
    MemoryBank,
    MemoryEntry,
    SegEngine,
    binarize_logits,
    check_binary_mask,
    require_bank,
)


def _rms_norm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + np.float32(1e-6))


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    scale = np.float32(1.0 / np.sqrt(q.shape[-1]))
    return _softmax((q @ k.T) * scale) @ v


def _patch_embed(x: np.ndarray, patch: int, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    h, w = x.shape[0] // patch, x.shape[1] // patch
    cols = (
        x.reshape(h, patch, w, patch, x.shape[2])
        .transpose(0, 2, 1, 3, 4)
        .reshape(h * w, patch * patch * x.shape[2])
    )
    return (cols @ weight + bias).reshape(h, w, weight.shape[1])


def _conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    h, w, _ = x.shape
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(bias, (h, w, weight.shape[3])).astype(np.float32).copy()
    for dy in range(3):
        for dx in range(3):
            out += padded[dy : dy + h, dx : dx + w] @ weight[dy, dx]
    return out


class ToyEngine(SegEngine):
    stride = 16
    skip_stride = 4
    feature_dim = 16
    memory_dim = 16
    skip_dim = 8
    num_blocks = 2

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.name = f"toy:{seed}"
        rng = np.random.Generator(np.random.PCG64(self.seed))

        def mat(rows, cols, fan_in=None):
            scale = 1.0 / np.sqrt(fan_in if fan_in is not None else rows)
            return (rng.standard_normal((rows, cols)) * scale).astype(np.float32)

        def vec(n):
            return (rng.standard_normal(n) * 0.01).astype(np.float32)

        c, cm, cs = self.feature_dim, self.memory_dim, self.skip_dim
        self.w_patch = mat(self.stride * self.stride * 3, c)
        self.b_patch = vec(c)
        self.w_enc = mat(9 * c, c).reshape(3, 3, c, c)
        self.b_enc = vec(c)
        self.w_skip = mat(self.skip_stride * self.skip_stride * 3, cs)
        self.b_skip = vec(cs)

        self.w_mem = mat(c, cm)
        self.b_mem = vec(cm)
        self.v_mask = (rng.standard_normal(cm)).astype(np.float32)
        self.w_mix = mat(9 * cm, cm).reshape(3, 3, cm, cm)
        self.b_mix = vec(cm)

        self.blocks = []
        for _ in range(self.num_blocks):
            self.blocks.append(
                {
                    "wq": mat(c, c),
                    "wk": mat(c, c),
                    "wv": mat(c, c),
                    "wo": mat(c, c),
                    "wq2": mat(c, c),
                    "wkm": mat(cm, c, fan_in=cm),
                    "wvm": mat(cm, c, fan_in=cm),
                    "wo2": mat(c, c),
                    "w1": mat(c, 2 * c),
                    "w2": mat(2 * c, c),
                }
            )

        self.w_dec = mat(c, c)
        self.b_dec = vec(c)
        self.w_skipproj = mat(cs, c)
        self.w_refine = mat(9 * c, c).reshape(3, 3, c, c)
        self.b_refine = vec(c)
        self.w_logit = mat(c, 1)
        self.b_logit = np.zeros(1, dtype=np.float32)

    # -- encoder --------------------------------------------------------

    def encode_image_features(self, image_tensor: np.ndarray, native_hw=None) -> FeatureMap:
        x = np.asarray(image_tensor, dtype=np.float32)
        if x.ndim != 3 or x.shape[2] != 3:
            raise ShapeMismatch(f"{self.name}: expected HxWx3 tensor, got {x.shape}")
        if x.shape[0] % self.stride or x.shape[1] % self.stride:
            raise ShapeMismatch(
                f"{self.name}: input sides must be multiples of {self.stride}, got {x.shape[:2]}"
            )
        g = np.tanh(_patch_embed(x, self.stride, self.w_patch, self.b_patch))
        grid = g + _conv3x3(g, self.w_enc, self.b_enc)
        skip = np.tanh(_patch_embed(x, self.skip_stride, self.w_skip, self.b_skip))
        return FeatureMap(
            grid=grid.astype(np.float32),
            stride=self.stride,
            skips={self.skip_stride: skip.astype(np.float32)},
            native_hw=tuple(native_hw) if native_hw else (x.shape[0], x.shape[1]),
        )

    # -- memory ------------------------------------------------------------

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
        fused = features.grid @ self.w_mem + self.b_mem + soft[:, :, None] * self.v_mask
        mixed = fused + _conv3x3(np.tanh(fused), self.w_mix, self.b_mix)
        return MemoryEntry(
            memory_grid=mixed.astype(np.float32),
            source_sample_id=source_sample_id,
            retrieval_rank=retrieval_rank,
            class_label=class_label,
        )

    # -- attention -----------------------------------------------------------

    @staticmethod
    def _canonical_entries(bank: MemoryBank) -> list[MemoryEntry]:
        # Order-free conditioning: entries sort on a content-derived key, so a
        # permuted bank builds a bitwise identical token matrix.
        def key(e: MemoryEntry):
            digest = hashlib.sha256(np.ascontiguousarray(e.memory_grid).tobytes()).hexdigest()
            return (e.source_sample_id, e.class_label, digest)

        return sorted(bank.entries, key=key)

    def memory_attention(self, query_features: FeatureMap, bank: MemoryBank) -> FeatureMap:
        require_bank(bank)
        grid = query_features.grid.astype(np.float32)
        if grid.shape[2] != self.feature_dim:
            raise ShapeMismatch(f"{self.name}: feature dim {grid.shape[2]} != {self.feature_dim}")
        for e in bank.entries:
            if e.memory_grid.shape != (*query_features.grid_hw, self.memory_dim):
                raise ShapeMismatch(
                    f"memory grid {e.memory_grid.shape} incompatible with query grid "
                    f"{query_features.grid_hw} and memory dim {self.memory_dim}"
                )
        entries = self._canonical_entries(bank)
        mem = np.concatenate(
            [e.memory_grid.reshape(-1, self.memory_dim) for e in entries], axis=0
        ).astype(np.float32)
        mem_n = _rms_norm(mem)

        h, w, c = grid.shape
        x = grid.reshape(h * w, c)
        for blk in self.blocks:
            xn = _rms_norm(x)
            x = x + _attention(xn @ blk["wq"], xn @ blk["wk"], xn @ blk["wv"]) @ blk["wo"]
            xn = _rms_norm(x)
            x = x + _attention(xn @ blk["wq2"], mem_n @ blk["wkm"], mem_n @ blk["wvm"]) @ blk["wo2"]
            xn = _rms_norm(x)
            x = x + np.maximum(xn @ blk["w1"], 0) @ blk["w2"]
        return FeatureMap(
            grid=x.reshape(h, w, c).astype(np.float32),
            stride=query_features.stride,
            skips=query_features.skips,
            native_hw=query_features.native_hw,
            aux=dict(query_features.aux),
        )

    # -- decoder ---------------------------------------------------------------

    def decode_mask(self, conditioned: FeatureMap, skips=None) -> tuple[np.ndarray, np.ndarray]:
        skips = skips if skips is not None else conditioned.skips
        if self.skip_stride not in skips:
            raise ShapeMismatch(f"{self.name}: missing stride-{self.skip_stride} skip map")
        skip = np.asarray(skips[self.skip_stride], dtype=np.float32)
        up_factor = conditioned.stride // self.skip_stride
        d = np.tanh(conditioned.grid @ self.w_dec + self.b_dec)
        up = np.repeat(np.repeat(d, up_factor, axis=0), up_factor, axis=1)
        if up.shape[:2] != skip.shape[:2]:
            raise ShapeMismatch(f"skip map {skip.shape[:2]} does not align with {up.shape[:2]}")
        z = up + skip @ self.w_skipproj
        z = np.tanh(z + _conv3x3(z, self.w_refine, self.b_refine))
        logits_coarse = (z @ self.w_logit + self.b_logit)[:, :, 0]
        native = conditioned.native_hw or logits_coarse.shape
        logits = bilinear_resize(logits_coarse, tuple(native)).astype(np.float32)
        return binarize_logits(logits), logits


def make_toy_engine(seed: int) -> ToyEngine:
    return ToyEngine(seed)
