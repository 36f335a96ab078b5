"""Gradient-weighted class-activation maps and a leaf-overlap score that
quantifies whether the classifier's evidence sits on the leaf or on the
background."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import CLASS_NAMES, CLASS_TO_INDEX


@dataclass
class EvidenceMap:
    heat: np.ndarray  # HxW in [0,1]; all zeros when all_zero is set
    target_class: str
    all_zero: bool = False


def gradcam_map(
    img: np.ndarray,
    model: nn.Module,
    cls: str | int,
    *,
    target_layer: nn.Module | None = None,
    device: str = "cpu",
) -> EvidenceMap:
    """Heat = rectified, channel-weighted sum of the target conv layer's
    activations; channel weights are the spatially averaged gradients of the
    pre-softmax class score. Upsampled bilinearly to input resolution and
    normalized to max 1 (all-zero maps are flagged, not normalized).
    """
    cls_idx = CLASS_TO_INDEX[cls] if isinstance(cls, str) else int(cls)
    cls_name = CLASS_NAMES[cls_idx] if 0 <= cls_idx < len(CLASS_NAMES) else str(cls_idx)
    if target_layer is None:
        target_layer = model.last_conv

    captured: dict[str, torch.Tensor] = {}

    def fwd_hook(_m, _i, out):
        captured["act"] = out

    def bwd_hook(_m, _gi, gout):
        captured["grad"] = gout[0]

    h1 = target_layer.register_forward_hook(fwd_hook)
    h2 = target_layer.register_full_backward_hook(bwd_hook)
    try:
        model.eval()
        dev = torch.device(device)
        x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
        logits = model.logit_scores(x.to(dev))
        model.zero_grad(set_to_none=True)
        logits[0, cls_idx].backward()
    finally:
        h1.remove()
        h2.remove()

    acts, grads = captured["act"].detach(), captured["grad"].detach()
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * acts).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=img.shape[:2], mode="bilinear", align_corners=False)
    heat = cam[0, 0].cpu().numpy()
    peak = float(heat.max())
    if peak <= 0.0:
        return EvidenceMap(np.zeros_like(heat), cls_name, all_zero=True)
    return EvidenceMap(heat / peak, cls_name)


def overlap_score(emap: EvidenceMap, mask: np.ndarray) -> float:
    """Fraction of total heat lying inside the binary mask; 0 for all-zero maps."""
    heat = emap.heat
    if heat.shape != mask.shape:
        raise ValueError(f"shape mismatch: {heat.shape} vs {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask is not binary")
    total = float(heat.sum())
    if total <= 0.0:
        return 0.0
    return float((heat * mask).sum()) / total


def overlay(img: np.ndarray, emap: EvidenceMap, alpha: float = 0.5) -> np.ndarray:
    """Blend the input with a red-yellow rendering of the heat (for PNG export)."""
    heat = emap.heat
    colored = np.stack([heat, heat**2, np.zeros_like(heat)], axis=-1)
    return np.clip((1 - alpha) * img + alpha * colored, 0.0, 1.0)
