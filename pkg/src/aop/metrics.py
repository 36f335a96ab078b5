"""Scalar objectives and evaluation metrics.

Losses are torch functions (differentiable, usable directly in training);
count-based evaluation metrics are plain numpy. Loss functions accept
numpy arrays or torch tensors in HxW / HxWxC / NxCxHxW form.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .config import CLASS_NAMES, CLASS_TO_INDEX, SSIMConfig

LOG_EPS = 1e-7


def _as_batch(x) -> torch.Tensor:
    """Coerce to a float NxCxHxW tensor (no copy for torch inputs); float64
    inputs stay float64 so high-precision checks are possible."""
    if isinstance(x, np.ndarray):
        arr = np.ascontiguousarray(x)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        x = torch.from_numpy(arr)
    if not torch.is_tensor(x):
        raise ValueError(f"expected numpy array or torch tensor, got {type(x)}")
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:  # HxWxC
        return x.permute(2, 0, 1)[None]
    if x.dim() == 4:
        return x
    raise ValueError(f"unsupported tensor rank {x.dim()}")


def mae_loss(pred, target) -> torch.Tensor:
    p, t = _as_batch(pred), _as_batch(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
    return (p - t).abs().mean()


def gaussian_window(size: int, sigma: float, dtype=torch.float32) -> torch.Tensor:
    """Normalized 2-d Gaussian kernel."""
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(x, y, cfg: SSIMConfig = SSIMConfig()) -> torch.Tensor:
    """Structural similarity: Gaussian-weighted local moments, per-window
    luminance/contrast/structure comparison averaged over windows (and over
    channels for multi-channel images). Symmetric, in [-1, 1], and
    differentiable in both arguments.
    """
    xb, yb = _as_batch(x), _as_batch(y)
    if xb.shape != yb.shape:
        raise ValueError(f"shape mismatch: {tuple(xb.shape)} vs {tuple(yb.shape)}")
    n, c, h, w = xb.shape
    if h < cfg.window_size or w < cfg.window_size:
        raise ValueError(
            f"image {h}x{w} smaller than SSIM window {cfg.window_size}"
        )
    dtype = xb.dtype if xb.is_floating_point() else torch.float32
    xb, yb = xb.to(dtype), yb.to(dtype)
    win = gaussian_window(cfg.window_size, cfg.window_sigma, dtype=dtype)
    win = win.expand(c, 1, cfg.window_size, cfg.window_size)

    mu_x = F.conv2d(xb, win, groups=c)
    mu_y = F.conv2d(yb, win, groups=c)
    mu_x2, mu_y2, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    sigma_x2 = F.conv2d(xb * xb, win, groups=c) - mu_x2
    sigma_y2 = F.conv2d(yb * yb, win, groups=c) - mu_y2
    sigma_xy = F.conv2d(xb * yb, win, groups=c) - mu_xy

    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2
    ssim_map = ((2 * mu_xy + c1) * (2 * sigma_xy + c2)) / (
        (mu_x2 + mu_y2 + c1) * (sigma_x2 + sigma_y2 + c2)
    )
    return ssim_map.mean()


def ssim_loss(pred, target, cfg: SSIMConfig = SSIMConfig()) -> torch.Tensor:
    """1 - ssim; zero iff structurally identical, bounded by [0, 2]."""
    return 1.0 - ssim(pred, target, cfg)


def adversarial_losses(d_real, d_fake, eps: float = LOG_EPS) -> tuple[torch.Tensor, torch.Tensor]:
    """Conditional-GAN objectives on patch probabilities.

    Returns (g_adv, d_loss):
      d_loss = -mean(log d_real) - mean(log(1 - d_fake))
      g_adv  = -mean(log d_fake)
    Probabilities are clamped to [eps, 1-eps] before the logs.
    """
    dr = _as_batch(d_real).clamp(eps, 1.0 - eps)
    df = _as_batch(d_fake).clamp(eps, 1.0 - eps)
    d_loss = -dr.log().mean() - (1.0 - df).log().mean()
    g_adv = -df.log().mean()
    return g_adv, d_loss


def precision_recall_f1(pred_mask: np.ndarray, true_mask: np.ndarray) -> tuple[float, float, float]:
    """Pixel-level precision/recall/F1 of a binary mask.

    Empty denominators resolve to 0 (pessimistic convention), so F1 is
    always defined.
    """
    pred = np.asarray(pred_mask)
    true = np.asarray(true_mask)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    for name, m in (("pred", pred), ("true", true)):
        if not np.all((m == 0) | (m == 1)):
            raise ValueError(f"{name} mask is not binary")
    tp = float(np.sum((pred == 1) & (true == 1)))
    fp = float(np.sum((pred == 1) & (true == 0)))
    fn = float(np.sum((pred == 0) & (true == 1)))
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def _label_indices(labels) -> np.ndarray:
    out = []
    for lab in labels:
        if isinstance(lab, str):
            out.append(CLASS_TO_INDEX[lab])
        else:
            idx = int(lab)
            if not 0 <= idx < len(CLASS_NAMES):
                raise ValueError(f"label index {idx} out of range")
            out.append(idx)
    return np.asarray(out, dtype=np.int64)


def accuracy(preds, truths) -> float:
    """Fraction of exact label matches."""
    p, t = _label_indices(preds), _label_indices(truths)
    if len(p) != len(t):
        raise ValueError(f"length mismatch: {len(p)} vs {len(t)}")
    if len(p) == 0:
        raise ValueError("empty label lists")
    return float(np.mean(p == t))


def confusion_matrix(preds, truths) -> np.ndarray:
    """8x8 count matrix, rows = true class, columns = predicted class."""
    p, t = _label_indices(preds), _label_indices(truths)
    if len(p) != len(t):
        raise ValueError(f"length mismatch: {len(p)} vs {len(t)}")
    if len(p) == 0:
        raise ValueError("empty label lists")
    n = len(CLASS_NAMES)
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return counts
