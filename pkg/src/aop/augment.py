"""Online data augmentation for the two training stages.

All transforms are pure functions of (input, rng state); parallel workers
each own an independent rng stream.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .config import AugmentationRecipe, AOPVariant
from .data import LabeledExample, SegmentationPair


def gamma_correct(img: np.ndarray, gamma: float) -> np.ndarray:
    """Power-law intensity transform x -> x**gamma; identity for gamma == 1."""
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    if gamma == 1.0:
        return img.copy()
    return np.power(img, gamma, dtype=img.dtype if img.dtype.kind == "f" else np.float32)


def rotate(img: np.ndarray, angle_deg: float, *, nearest: bool = False) -> np.ndarray:
    """Rotate counterclockwise about the image center.

    Multiples of 90 degrees are lossless index permutations; other angles
    use bilinear interpolation with zero padding outside the original
    support (nearest=True for binary masks).
    """
    angle = float(angle_deg) % 360.0
    if angle % 90.0 == 0.0:
        return np.ascontiguousarray(np.rot90(img, k=int(angle // 90), axes=(0, 1)))
    return ndimage.rotate(
        img,
        angle,
        axes=(1, 0),
        reshape=False,
        order=0 if nearest else 1,
        mode="constant",
        cval=0.0,
        prefilter=False,
    )


def mirror(img: np.ndarray) -> np.ndarray:
    """Horizontal flip; an involution."""
    return np.ascontiguousarray(img[:, ::-1])


def crop_offsets(h: int, w: int, size: int, rng: np.random.Generator) -> tuple[int, int]:
    if size > min(h, w):
        raise ValueError(f"crop size {size} exceeds image dims {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return top, left


def crop_at(img: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    return img[top : top + size, left : left + size].copy()


def random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """size x size crop at an offset drawn uniformly over valid positions."""
    top, left = crop_offsets(img.shape[0], img.shape[1], size, rng)
    return crop_at(img, top, left, size)


def _geometric_draw(recipe: AugmentationRecipe, rng: np.random.Generator) -> tuple[float, bool]:
    angle = float(rng.choice(recipe.angles))
    flip = bool(recipe.mirror and rng.integers(0, 2))
    return angle, flip


def augment_for_aop(
    pair: SegmentationPair,
    recipe: AugmentationRecipe,
    variant: AOPVariant,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """One training draw for the pretreatment stage.

    Rotation/mirror/crop are applied identically to image and mask; gamma
    perturbs the generator INPUT only, so the target keeps the original
    brightness and the generator learns brightness normalization.

    Returns (input image, target), where the target is the mask for
    probability-map variants and the mask-zeroed image otherwise.
    """
    img, mask = pair.image, pair.mask
    angle, flip = _geometric_draw(recipe, rng)
    if flip:
        img, mask = mirror(img), mirror(mask)
    if angle != 0.0:
        img = rotate(img, angle)
        mask = rotate(mask, angle, nearest=True)
    if recipe.crop_size is not None:
        top, left = crop_offsets(img.shape[0], img.shape[1], recipe.crop_size, rng)
        img = crop_at(img, top, left, recipe.crop_size)
        mask = crop_at(mask, top, left, recipe.crop_size)

    gamma = float(rng.choice(recipe.gamma_choices))
    inp = gamma_correct(img, gamma)
    if variant.output_mode == "probability_map":
        target = mask
    else:
        target = img * mask[:, :, None]
    return inp, target


def augment_for_classifier(
    ex: LabeledExample, recipe: AugmentationRecipe, rng: np.random.Generator
) -> np.ndarray:
    """One training draw for the classification stage; the label never changes."""
    img = ex.image
    angle, flip = _geometric_draw(recipe, rng)
    if flip:
        img = mirror(img)
    if angle != 0.0:
        img = rotate(img, angle)
    if recipe.crop_size is not None:
        img = random_crop(img, recipe.crop_size, rng)
    gamma = float(rng.choice(recipe.gamma_choices))
    return gamma_correct(img, gamma)
