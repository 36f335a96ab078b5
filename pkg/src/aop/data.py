"""Dataset ingestion: image primitives plus the two on-disk dataset layouts.

Images are float32 numpy arrays, H x W x C (or H x W for masks), values
in [0, 1]. 8-bit files are normalized by exact division by 255.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .config import CLASS_NAMES, CLASS_TO_INDEX, SPLITS, SplitSpec

log = logging.getLogger(__name__)

SUPPORTED_EXTENSIONS = (".png", ".jpg", ".jpeg")
MASK_BINARY_TOL = 1e-3


class IngestionError(ValueError):
    """Raised when on-disk data violates the expected layout or encoding."""


def validate_image(img: np.ndarray) -> None:
    if img.ndim == 3 and img.shape[2] not in (1, 3):
        raise ValueError(f"image must have 1 or 3 channels, got shape {img.shape}")
    if img.ndim not in (2, 3):
        raise ValueError(f"image must be HxW or HxWxC, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image must be at least 1x1, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError(f"pixel values outside [0,1]: [{img.min()}, {img.max()}]")


def center_crop_square(img: np.ndarray) -> np.ndarray:
    """Square center crop with the short side as side length.

    Odd margins drop the extra row/column from the bottom/right.
    """
    h, w = img.shape[:2]
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    return img[top : top + side, left : left + side].copy()


def resize_image(img: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resize (half-pixel centers, no corner alignment). Identity
    resizes return a bit-exact copy."""
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target dims must be >= 1, got {target_h}x{target_w}")
    if img.shape[:2] == (target_h, target_w):
        return img.copy()
    squeeze = img.ndim == 2
    arr = img[:, :, None] if squeeze else img
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(target_h, target_w), mode="bilinear", align_corners=False)
    res = out[0].permute(1, 2, 0).numpy()
    res = np.clip(res, 0.0, 1.0)
    return res[:, :, 0] if squeeze else res


def resize_mask(mask: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Nearest-neighbor resize; binary masks stay binary."""
    if mask.shape == (target_h, target_w):
        return mask.copy()
    t = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float32))[None, None]
    out = F.interpolate(t, size=(target_h, target_w), mode="nearest-exact")
    return out[0, 0].numpy()


def is_binary_mask(mask: np.ndarray) -> bool:
    return bool(np.all((mask == 0.0) | (mask == 1.0)))


def load_image_file(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def load_mask_file(path: str | Path) -> np.ndarray:
    """Single-channel mask file, 0 = background / 255 = foreground.

    Values not within MASK_BINARY_TOL of {0, 1} after normalization are
    treated as data corruption.
    """
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    near0 = arr <= MASK_BINARY_TOL
    near1 = arr >= 1.0 - MASK_BINARY_TOL
    if not np.all(near0 | near1):
        bad = arr[~(near0 | near1)]
        raise IngestionError(
            f"mask {path} has non-binary values (e.g. {float(bad.flat[0]):.4f}); "
            f"expected 0 or 255"
        )
    return near1.astype(np.float32)


@dataclass
class SegmentationPair:
    image: np.ndarray  # HxWx3
    mask: np.ndarray  # HxW binary
    name: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(
                f"image/mask dimensions disagree: {self.image.shape[:2]} vs {self.mask.shape}"
            )


@dataclass
class LabeledExample:
    image: np.ndarray  # HxWx3
    label: str
    split: str
    name: str = ""

    def __post_init__(self):
        if self.label not in CLASS_TO_INDEX:
            raise ValueError(f"unknown label {self.label!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    @property
    def label_index(self) -> int:
        return CLASS_TO_INDEX[self.label]


def _listed_images(d: Path) -> list[Path]:
    files = [p for p in sorted(d.iterdir()) if p.suffix.lower() in SUPPORTED_EXTENSIONS]
    skipped = [p for p in sorted(d.iterdir()) if p.is_file() and p.suffix.lower() not in SUPPORTED_EXTENSIONS]
    for p in skipped:
        log.info("skipping non-image file %s", p)
    return files


def load_segmentation_dataset(
    root: str | Path, spec: SplitSpec, image_size: int = 316
) -> tuple[list[SegmentationPair], list[SegmentationPair]]:
    """Load `root/images/*` with paired `root/masks/<name>.png`, center-crop,
    resize to image_size, and split train/test deterministically by seed."""
    root = Path(root)
    images_dir = root / "images"
    masks_dir = root / "masks"
    if not images_dir.is_dir():
        raise IngestionError(f"missing images directory {images_dir}")
    if not masks_dir.is_dir():
        raise IngestionError(f"missing masks directory {masks_dir}")

    pairs = []
    for img_path in _listed_images(images_dir):
        mask_path = masks_dir / (img_path.stem + ".png")
        if not mask_path.exists():
            raise IngestionError(f"missing mask for image {img_path}: expected {mask_path}")
        img = load_image_file(img_path)
        mask = load_mask_file(mask_path)
        if img.shape[:2] != mask.shape:
            raise IngestionError(
                f"image/mask size mismatch for {img_path.name}: {img.shape[:2]} vs {mask.shape}"
            )
        img = resize_image(center_crop_square(img), image_size, image_size)
        mask = resize_mask(center_crop_square(mask), image_size, image_size)
        pairs.append(SegmentationPair(img, mask, name=img_path.stem))

    rng = np.random.default_rng(spec.rng_seed)
    order = rng.permutation(len(pairs))
    n_train = int(round(spec.seg_train_fraction * len(pairs)))
    train = [pairs[i] for i in order[:n_train]]
    test = [pairs[i] for i in order[n_train:]]
    return train, test


@dataclass
class ClassificationDataset:
    examples: list[LabeledExample]
    per_class_counts: dict[str, dict[str, int]]  # split -> class -> count
    warnings: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def split(self, name: str) -> list[LabeledExample]:
        return [ex for ex in self.examples if ex.split == name]

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)


def load_classification_dataset(root: str | Path, image_size: int = 224) -> ClassificationDataset:
    """Load `root/<split>/<ClassName>/*` resized to image_size."""
    root = Path(root)
    examples: list[LabeledExample] = []
    counts: dict[str, dict[str, int]] = {}
    warnings: list[str] = []
    skipped: list[str] = []

    for split in SPLITS:
        split_dir = root / split
        if not split_dir.is_dir():
            raise IngestionError(f"missing split directory {split_dir}")
        counts[split] = {name: 0 for name in CLASS_NAMES}
        for class_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            if class_dir.name not in CLASS_TO_INDEX:
                raise IngestionError(f"unknown class directory {class_dir}")
            for f in sorted(class_dir.iterdir()):
                if not f.is_file():
                    continue
                if f.suffix.lower() not in SUPPORTED_EXTENSIONS:
                    skipped.append(str(f))
                    log.info("skipping non-image file %s", f)
                    continue
                img = load_image_file(f)
                img = resize_image(center_crop_square(img), image_size, image_size)
                examples.append(
                    LabeledExample(img, class_dir.name, split, name=f"{split}/{class_dir.name}/{f.name}")
                )
                counts[split][class_dir.name] += 1
        for name in CLASS_NAMES:
            if split == "training" and counts[split][name] == 0:
                warnings.append(f"training class {name} is empty")

    return ClassificationDataset(examples, counts, warnings, skipped)
