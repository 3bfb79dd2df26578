"""Adapter over a pretrained promptable video-segmentation checkpoint.

Consumes the upstream `sam2` package and a Hiera-large checkpoint; nothing is
retrained or finetuned. Retrieved exemplars are encoded through the
checkpoint's memory encoder and attended to as conditioning frames (temporal
slot 0 for every memory, since retrieved exemplars carry no temporal order);
the mask decoder runs without point, box, or mask prompts.

torch and sam2 are imported lazily; without the package or the checkpoint
file every operation raises CheckpointMissing with a remediation hint.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import CheckpointMissing, ShapeMismatch
from .base import (
    FeatureMap,
    MemoryBank,
    MemoryEntry,
    SegEngine,
    check_binary_mask,
    require_bank,
)

SAM2_CHECKPOINT_ENV = "RAMSEG_SAM2_CHECKPOINT"
SAM2_CONFIG_ENV = "RAMSEG_SAM2_CONFIG"
DEFAULT_MODEL_CONFIG = "configs/sam2.1/sam2.1_hiera_l.yaml"

_REMEDIATION = (
    "pretrained engine needs model assets: pip install the 'sam2' package, download the "
    "Hiera-large checkpoint, and point the "
    f"{SAM2_CHECKPOINT_ENV} environment variable (or the checkpoint argument) at the .pt file"
)


class PretrainedEngine(SegEngine):
    name = "pretrained"
    stride = 16

    def __init__(self, checkpoint: str | None = None, model_config: str | None = None, device: str = "cpu"):
        self.checkpoint = checkpoint or os.environ.get(SAM2_CHECKPOINT_ENV)
        self.model_config = model_config or os.environ.get(SAM2_CONFIG_ENV, DEFAULT_MODEL_CONFIG)
        self.device = device
        self._model = None

    @property
    def checkpoint_loaded(self) -> bool:
        return self._model is not None

    def _load(self):
        if self._model is not None:
            return self._model
        if not self.checkpoint or not os.path.exists(self.checkpoint):
            raise CheckpointMissing(f"checkpoint not found at {self.checkpoint!r}; {_REMEDIATION}")
        try:
            import torch  # noqa: F401
            from sam2.build_sam import build_sam2
        except ImportError as exc:
            raise CheckpointMissing(f"sam2/torch import failed ({exc}); {_REMEDIATION}") from exc
        model = build_sam2(self.model_config, self.checkpoint, device=self.device)
        model.eval()
        self._model = model
        return model

    def _torch(self):
        import torch

        return torch

    # -- encoder ---------------------------------------------------------

    def encode_image_features(self, image_tensor: np.ndarray, native_hw=None) -> FeatureMap:
        model = self._load()
        torch = self._torch()
        x = np.asarray(image_tensor, dtype=np.float32)
        if x.ndim != 3 or x.shape[2] != 3:
            raise ShapeMismatch(f"{self.name}: expected HxWx3 tensor, got {x.shape}")
        if x.shape[0] != model.image_size or x.shape[1] != model.image_size:
            raise ShapeMismatch(
                f"{self.name}: expected {model.image_size}x{model.image_size} input, got {x.shape[:2]}"
            )
        batch = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1))[None]).to(self.device)
        with torch.no_grad():
            backbone_out = model.forward_image(batch)
            _, vision_feats, vision_pos_embeds, feat_sizes = model._prepare_backbone_features(
                backbone_out
            )
        h, w = feat_sizes[-1]
        grid = (
            vision_feats[-1].permute(1, 2, 0).reshape(1, -1, h, w)[0].permute(1, 2, 0).cpu().numpy()
        )
        return FeatureMap(
            grid=grid.astype(np.float32),
            stride=model.image_size // h,
            skips={},
            native_hw=tuple(native_hw) if native_hw else (x.shape[0], x.shape[1]),
            aux={
                "vision_feats": vision_feats,
                "vision_pos_embeds": vision_pos_embeds,
                "feat_sizes": feat_sizes,
            },
        )

    # -- memory -------------------------------------------------------------

    def encode_memory(
        self,
        features: FeatureMap,
        binary_mask: np.ndarray,
        *,
        source_sample_id: str = "",
        retrieval_rank: int = 0,
        class_label: int = 1,
    ) -> MemoryEntry:
        model = self._load()
        torch = self._torch()
        mask = check_binary_mask(binary_mask)
        vision_feats = features.aux["vision_feats"]
        feat_sizes = features.aux["feat_sizes"]
        h, w = feat_sizes[-1]
        pix_feat = vision_feats[-1].permute(1, 2, 0).reshape(1, -1, h, w)
        mask_t = torch.from_numpy(mask.astype(np.float32))[None, None].to(self.device)
        mask_hr = torch.nn.functional.interpolate(
            mask_t, size=(model.image_size, model.image_size), mode="bilinear", align_corners=False
        )
        # The checkpoint's memory encoder expects sigmoid-domain masks; a hard
        # binary mask is already in [0, 1], apply the model's scale/bias knobs.
        mask_for_mem = mask_hr
        scale = getattr(model, "sigmoid_scale_for_mem_enc", 1.0)
        bias = getattr(model, "sigmoid_bias_for_mem_enc", 0.0)
        if scale != 1.0:
            mask_for_mem = mask_for_mem * scale
        if bias != 0.0:
            mask_for_mem = mask_for_mem + bias
        with torch.no_grad():
            out = model.memory_encoder(pix_feat, mask_for_mem, skip_mask_sigmoid=True)
        mem_feats = out["vision_features"]
        mem_pos = out["vision_pos_enc"][-1]
        grid = mem_feats[0].permute(1, 2, 0).cpu().numpy()
        return MemoryEntry(
            memory_grid=grid.astype(np.float32),
            source_sample_id=source_sample_id,
            retrieval_rank=retrieval_rank,
            class_label=class_label,
            payload={"mem_features": mem_feats, "mem_pos": mem_pos},
        )

    # -- attention --------------------------------------------------------------

    def memory_attention(self, query_features: FeatureMap, bank: MemoryBank) -> FeatureMap:
        model = self._load()
        torch = self._torch()
        require_bank(bank)
        vision_feats = query_features.aux["vision_feats"]
        vision_pos_embeds = query_features.aux["vision_pos_embeds"]
        feat_sizes = query_features.aux["feat_sizes"]
        h, w = feat_sizes[-1]

        memories, memory_pos = [], []
        for entry in bank.entries:
            feats = entry.payload["mem_features"]
            pos = entry.payload["mem_pos"]
            tokens = feats.flatten(2).permute(2, 0, 1)
            pos_tokens = pos.flatten(2).permute(2, 0, 1).clone()
            # Conditioning-frame temporal slot (t_pos = 0) for every retrieved
            # memory: exemplars are an unordered set, not a video history.
            pos_tokens = pos_tokens + model.maskmem_tpos_enc[model.num_maskmem - 1]
            memories.append(tokens)
            memory_pos.append(pos_tokens)
        memory = torch.cat(memories, dim=0)
        memory_pos_embed = torch.cat(memory_pos, dim=0)
        with torch.no_grad():
            conditioned = model.memory_attention(
                curr=vision_feats[-1:],
                curr_pos=vision_pos_embeds[-1:],
                memory=memory,
                memory_pos=memory_pos_embed,
                num_obj_ptr_tokens=0,
            )
        grid = conditioned.permute(1, 2, 0).reshape(1, -1, h, w)[0].permute(1, 2, 0).cpu().numpy()
        aux = dict(query_features.aux)
        aux["conditioned_feats"] = conditioned
        return FeatureMap(
            grid=grid.astype(np.float32),
            stride=query_features.stride,
            skips=query_features.skips,
            native_hw=query_features.native_hw,
            aux=aux,
        )

    # -- decoder -----------------------------------------------------------------

    def decode_mask(self, conditioned: FeatureMap, skips=None) -> tuple[np.ndarray, np.ndarray]:
        model = self._load()
        torch = self._torch()
        if "conditioned_feats" not in conditioned.aux:
            raise ShapeMismatch(f"{self.name}: decode needs memory-conditioned features")
        vision_feats = conditioned.aux["vision_feats"]
        feat_sizes = conditioned.aux["feat_sizes"]
        h, w = feat_sizes[-1]
        pix_feat = conditioned.aux["conditioned_feats"].permute(1, 2, 0).reshape(1, -1, h, w)
        high_res_features = [
            feat.permute(1, 2, 0).reshape(1, -1, *size)
            for feat, size in zip(vision_feats[:-1], feat_sizes[:-1])
        ]
        with torch.no_grad():
            sam_outputs = model._forward_sam_heads(
                backbone_features=pix_feat,
                point_inputs=None,
                mask_inputs=None,
                high_res_features=high_res_features,
                multimask_output=False,
            )
        high_res_masks = sam_outputs[2]
        native = conditioned.native_hw or (model.image_size, model.image_size)
        logits_t = torch.nn.functional.interpolate(
            high_res_masks, size=tuple(native), mode="bilinear", align_corners=False
        )
        logits = logits_t[0, 0].cpu().numpy().astype(np.float32)
        return logits > 0, logits


def make_pretrained_engine(
    checkpoint: str | None = None, model_config: str | None = None, device: str = "cpu"
) -> PretrainedEngine:
    return PretrainedEngine(checkpoint=checkpoint, model_config=model_config, device=device)
