"""Deterministic synthetic corpus with a controllable background confound.

Backgrounds are procedural textures; in the training/validation splits a
class's texture is its canonical one with probability rho, otherwise a
distractor. Test backgrounds follow the configured policy: `shuffled`
re-pairs canonical textures across classes (the different-farm condition),
`held_out_textures` uses textures never seen in training. Class identity is
carried solely by the symptom pattern inside the leaf; every image comes
with an exact leaf mask re-derivable from the manifest's curve parameters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .config import CLASS_NAMES, SPLITS, SynthConfig
from .data import IngestionError

# texture id ranges
CANONICAL_IDS = tuple(range(8))
DISTRACTOR_IDS = tuple(range(8, 12))
HELD_OUT_IDS = tuple(range(12, 16))

_SPLIT_KINDS = {"training": 0, "validation": 1, "test": 2, "segmentation": 3}

MANIFEST_COLUMNS = ("filename", "split", "class", "texture_id", "curve_params", "gamma_applied", "seed")


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def _stripes(coord: np.ndarray, period: float, phase: float) -> np.ndarray:
    return 0.5 + 0.5 * np.sin(2 * np.pi * (coord / period + phase))


def _two_tone(field: np.ndarray, c_a, c_b) -> np.ndarray:
    f = field[:, :, None]
    return f * np.asarray(c_a)[None, None] + (1 - f) * np.asarray(c_b)[None, None]


def _coarse_noise(size: int, cells: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random field in [0,1] from a bilinearly upsampled coarse grid."""
    g = rng.random((cells, cells))
    return np.clip(ndimage.zoom(g, size / cells, order=1, grid_mode=True, mode="nearest"), 0, 1)


def render_texture(texture_id: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Procedural background texture, float HxWx3 in [0,1]. Per-image phase
    and offset jitter comes from rng; the texture family is the class cue."""
    yy, xx = _grid(size)
    p = rng.uniform(0.0, 1.0)  # phase jitter
    if texture_id == 0:  # vertical red/white stripes
        return _two_tone(_stripes(xx, size / 8, p), (0.90, 0.10, 0.10), (0.98, 0.95, 0.95))
    if texture_id == 1:  # horizontal blue/white stripes
        return _two_tone(_stripes(yy, size / 8, p), (0.10, 0.25, 0.90), (0.95, 0.96, 0.99))
    if texture_id == 2:  # coarse magenta/yellow checkerboard
        b = max(2, size // 8)
        f = (((xx + int(p * b)) // b + (yy + int(p * b)) // b) % 2).astype(np.float64)
        return _two_tone(f, (0.85, 0.15, 0.75), (0.95, 0.85, 0.15))
    if texture_id == 3:  # diagonal orange/black sawtooth
        f = ((xx + yy) / (size / 5) + p) % 1.0
        return _two_tone(f, (0.95, 0.55, 0.05), (0.08, 0.05, 0.02))
    if texture_id == 4:  # bright dot lattice on dark gray
        cell = max(4, size // 8)
        cx = (xx + p * cell) % cell - cell / 2
        cy = (yy + p * cell) % cell - cell / 2
        f = ((cx**2 + cy**2) <= (0.32 * cell) ** 2).astype(np.float64)
        return _two_tone(f, (0.95, 0.95, 0.90), (0.20, 0.20, 0.22))
    if texture_id == 5:  # salt-and-pepper gray noise
        f = (rng.random((size, size)) > 0.5).astype(np.float64)
        return _two_tone(f, (0.85, 0.85, 0.85), (0.25, 0.25, 0.25))
    if texture_id == 6:  # cyan radial rings
        cx, cy = size / 2 + rng.uniform(-3, 3), size / 2 + rng.uniform(-3, 3)
        r = np.hypot(xx - cx, yy - cy)
        return _two_tone(_stripes(r, size / 7, p), (0.10, 0.85, 0.85), (0.05, 0.25, 0.30))
    if texture_id == 7:  # blocky purple/green noise
        b = max(2, size // 8)
        cells = size // b + 1
        g = rng.random((cells, cells)) > 0.5
        f = np.kron(g, np.ones((b, b)))[:size, :size].astype(np.float64)
        return _two_tone(f, (0.55, 0.20, 0.70), (0.25, 0.70, 0.25))
    if texture_id == 8:  # muted brown vertical gradient
        f = yy / size
        base = _two_tone(f, (0.45, 0.33, 0.22), (0.62, 0.50, 0.36))
        return np.clip(base + rng.normal(0, 0.015, (size, size, 1)), 0, 1)
    if texture_id == 9:  # low-contrast green mottle
        f = _coarse_noise(size, 6, rng)
        return _two_tone(f, (0.35, 0.48, 0.30), (0.50, 0.62, 0.42))
    if texture_id == 10:  # plain gray with vignette
        cx = cy = size / 2
        r = np.hypot(xx - cx, yy - cy) / size
        f = np.clip(0.62 - 0.25 * r + rng.normal(0, 0.01, (size, size)), 0, 1)
        return np.repeat(f[:, :, None], 3, axis=2)
    if texture_id == 11:  # blue-gray horizontal gradient
        f = xx / size
        return _two_tone(f, (0.40, 0.45, 0.55), (0.60, 0.66, 0.72))
    if texture_id == 12:  # held out: teal/white diagonal stripes
        return _two_tone(_stripes(xx - yy, size / 6, p), (0.05, 0.55, 0.50), (0.92, 0.97, 0.95))
    if texture_id == 13:  # held out: dark dots on tan
        cell = max(4, size // 6)
        cx = (xx + p * cell) % cell - cell / 2
        cy = (yy + p * cell) % cell - cell / 2
        f = ((cx**2 + cy**2) <= (0.3 * cell) ** 2).astype(np.float64)
        return _two_tone(f, (0.15, 0.12, 0.10), (0.85, 0.75, 0.55))
    if texture_id == 14:  # held out: wavy interference
        f = 0.5 + 0.5 * np.sin(2 * np.pi * (xx / (size / 6) + 0.8 * np.sin(2 * np.pi * yy / (size / 4)) + p))
        return _two_tone(f, (0.75, 0.40, 0.15), (0.15, 0.20, 0.45))
    if texture_id == 15:  # held out: pink smooth blobs
        f = _coarse_noise(size, 4, rng)
        return _two_tone(f, (0.90, 0.55, 0.70), (0.98, 0.90, 0.93))
    raise ValueError(f"unknown texture id {texture_id}")


def sample_leaf_curve(size: int, rng: np.random.Generator) -> np.ndarray:
    """Random smooth closed curve: radius r(theta) = R*(1 + sum a_k cos(k theta + phi_k)),
    k = 2..5. Returns [cx, cy, R, a2, phi2, a3, phi3, a4, phi4, a5, phi5]."""
    cx = size / 2 + rng.uniform(-0.05, 0.05) * size
    cy = size / 2 + rng.uniform(-0.05, 0.05) * size
    base_r = rng.uniform(0.26, 0.33) * size
    params = [cx, cy, base_r]
    for _k in range(2, 6):
        params.append(rng.uniform(-0.08, 0.08))
        params.append(rng.uniform(0, 2 * np.pi))
    return np.array(params, dtype=np.float64)


def rasterize_leaf_mask(params: np.ndarray, size: int) -> np.ndarray:
    """Exact rasterization: pixel (y,x) is leaf iff its center lies inside
    the curve. Pure function of (params, size)."""
    cx, cy, base_r = params[0], params[1], params[2]
    yy, xx = _grid(size)
    dx, dy = xx - cx, yy - cy
    theta = np.arctan2(dy, dx)
    r_curve = np.full_like(theta, 1.0)
    for i, k in enumerate(range(2, 6)):
        a, phi = params[3 + 2 * i], params[4 + 2 * i]
        r_curve += a * np.cos(k * theta + phi)
    inside = np.hypot(dx, dy) <= base_r * r_curve
    return inside.astype(np.float32)


def _disc(yy, xx, cx, cy, r) -> np.ndarray:
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r**2


def _spot_centers(n, mask, rng, margin=2) -> list[tuple[float, float]]:
    """Rejection-sample spot centers inside the mask."""
    size = mask.shape[0]
    eroded = ndimage.binary_erosion(mask > 0, iterations=margin) if margin else mask > 0
    ys, xs = np.nonzero(eroded)
    if len(ys) == 0:
        ys, xs = np.nonzero(mask > 0)
    if len(ys) == 0:
        return []
    picks = rng.integers(0, len(ys), size=n)
    return [(float(ys[i]), float(xs[i])) for i in picks]


def render_symptom(
    class_idx: int, leaf: np.ndarray, mask: np.ndarray, size: int, rng: np.random.Generator
) -> np.ndarray:
    """Apply the class's symptom recipe inside the leaf. Symptom pixels are
    confined to the mask support exactly."""
    yy, xx = _grid(size)
    img = leaf.copy()
    m = mask > 0

    def paint(region: np.ndarray, color, strength=0.9):
        reg = region & m
        img[reg] = (1 - strength) * img[reg] + strength * np.asarray(color)[None]

    name = CLASS_NAMES[class_idx]
    if name == "MYSV":  # many small yellow spots
        n = int(rng.integers(8, 16))
        r = rng.uniform(0.022, 0.035) * size
        region = np.zeros((size, size), dtype=bool)
        for cy, cx in _spot_centers(n, mask, rng):
            region |= _disc(yy, xx, cx, cy, r)
        paint(region, (0.95, 0.82, 0.10))
    elif name == "ZYMV":  # light/dark green mosaic
        field = _coarse_noise(size, int(rng.integers(5, 8)), rng)
        s = 1.0 / (1.0 + np.exp(-(field - 0.5) * 10))
        light = np.clip(leaf * 1.7 + 0.08, 0, 1)
        dark = leaf * 0.55
        blend = dark * (1 - s[:, :, None]) + light * s[:, :, None]
        img[m] = blend[m]
    elif name == "CMV":  # diagonal yellow-green stripes
        period = rng.uniform(0.09, 0.13) * size
        u = (xx + yy) / np.sqrt(2.0)
        region = np.sin(2 * np.pi * (u / period + rng.uniform())) > 0.25
        paint(region, (0.58, 0.88, 0.20), 0.85)
    elif name == "WMV":  # pale concentric rings
        cx, cy = np.mean(np.nonzero(m)[1]), np.mean(np.nonzero(m)[0])
        period = rng.uniform(0.10, 0.14) * size
        r = np.hypot(xx - cx, yy - cy)
        region = np.sin(2 * np.pi * (r / period + rng.uniform())) > 0.35
        paint(region, (0.93, 0.95, 0.62), 0.85)
    elif name == "BrownSpot":  # a few large brown discs
        n = int(rng.integers(3, 7))
        region = np.zeros((size, size), dtype=bool)
        for cy, cx in _spot_centers(n, mask, rng):
            region |= _disc(yy, xx, cx, cy, rng.uniform(0.05, 0.085) * size)
        paint(region, (0.42, 0.24, 0.08))
    elif name == "DownyMildew":  # blocky ochre patches
        b = max(2, size // 8)
        cells = size // b + 1
        g = rng.random((cells, cells)) > 0.55
        region = np.kron(g, np.ones((b, b), dtype=bool))[:size, :size]
        paint(region, (0.72, 0.58, 0.16), 0.8)
    elif name == "PowderyMildew":  # fine white speckle
        region = rng.random((size, size)) > 0.72
        paint(region, (0.97, 0.97, 0.97), 0.85)
    elif name == "Healthy":
        pass
    else:
        raise ValueError(f"no symptom recipe for class {name}")
    return img


def render_leaf_base(mask: np.ndarray, params: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    green = rng.uniform(0.42, 0.58)
    base = np.array([0.42 * green + 0.04, green, 0.33 * green + 0.03])
    yy, xx = _grid(size)
    r = np.hypot(xx - params[0], yy - params[1]) / max(params[2], 1e-6)
    shade = (1.0 - 0.18 * np.clip(r, 0, 1.3) ** 2)[:, :, None]
    return np.clip(base[None, None] * shade, 0, 1)


def render_example(
    class_idx: int,
    texture_id: int,
    size: int,
    rng: np.random.Generator,
    gamma: float = 1.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render one (image, mask, curve_params) triple."""
    params = sample_leaf_curve(size, rng)
    mask = rasterize_leaf_mask(params, size)
    leaf = render_leaf_base(mask, params, size, rng)
    leaf = render_symptom(class_idx, leaf, mask, size, rng)
    img = render_texture(texture_id, size, rng)
    m = mask > 0
    img[m] = leaf[m]
    if gamma != 1.0:
        img = np.power(img, gamma)
    return img.astype(np.float32), mask, params


def _image_rng(cfg_seed: int, kind: int, class_idx: int, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(cfg_seed, spawn_key=(kind, class_idx, index))
    return np.random.default_rng(ss)


def _derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def _pick_texture(
    split: str, class_idx: int, rho: float, policy: str, perm: np.ndarray, rng: np.random.Generator
) -> int:
    if split in ("training", "validation"):
        if rng.random() < rho:
            return class_idx
        return int(rng.choice(DISTRACTOR_IDS))
    # test split
    if policy == "held_out_textures":
        return int(rng.choice(HELD_OUT_IDS))
    if rng.random() < rho:
        return int(perm[class_idx])
    return int(rng.choice(DISTRACTOR_IDS))


def _save_png(img: np.ndarray, path: Path) -> None:
    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr).save(path, format="PNG")


def _save_mask_png(mask: np.ndarray, path: Path) -> None:
    arr = (mask > 0).astype(np.uint8) * 255
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr, mode="L").save(path, format="PNG")


def _fmt_params(params: np.ndarray) -> str:
    return ";".join(repr(float(v)) for v in params)


def parse_curve_params(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(";")], dtype=np.float64)


@dataclass
class ManifestRow:
    filename: str
    split: str
    class_name: str
    texture_id: int
    curve_params: str
    gamma_applied: float
    seed: str


def generate_corpus(cfg: SynthConfig, out_root: str | Path) -> tuple[Path, Path]:
    """Write both dataset layouts plus the manifest; returns
    (classification_root, segmentation_root). Byte-identical for equal
    (config, seed)."""
    out_root = Path(out_root)
    cls_root = out_root / "classification"
    seg_root = out_root / "segmentation"
    out_root.mkdir(parents=True, exist_ok=True)

    perm_rng = np.random.default_rng(np.random.SeedSequence(cfg.rng_seed, spawn_key=(99,)))
    perm = _derangement(cfg.n_classes, perm_rng)

    rows: list[ManifestRow] = []
    per_split = {
        "training": cfg.train_per_class,
        "validation": cfg.val_per_class,
        "test": cfg.test_per_class,
    }
    gamma_lo, gamma_hi = np.log(0.8), np.log(1.8)
    for split in SPLITS:
        kind = _SPLIT_KINDS[split]
        for class_idx, class_name in enumerate(CLASS_NAMES[: cfg.n_classes]):
            for i in range(per_split[split]):
                rng = _image_rng(cfg.rng_seed, kind, class_idx, i)
                tid = _pick_texture(split, class_idx, cfg.confound_strength, cfg.test_background_policy, perm, rng)
                gamma = float(np.exp(rng.uniform(gamma_lo, gamma_hi)))
                img, _mask, params = render_example(class_idx, tid, cfg.image_size, rng, gamma)
                rel = Path("classification") / split / class_name / f"{class_name}_{i:05d}.png"
                _save_png(img, out_root / rel)
                rows.append(
                    ManifestRow(str(rel), split, class_name, tid, _fmt_params(params), gamma, f"{kind}:{class_idx}:{i}")
                )

    seg_kind = _SPLIT_KINDS["segmentation"]
    for i in range(cfg.seg_pairs):
        rng = _image_rng(cfg.rng_seed, seg_kind, 0, i)
        class_idx = int(rng.integers(0, cfg.n_classes))
        tid = int(rng.choice(CANONICAL_IDS + DISTRACTOR_IDS))
        img, mask, params = render_example(class_idx, tid, cfg.image_size, rng, gamma=1.0)
        rel_img = Path("segmentation") / "images" / f"seg_{i:05d}.png"
        rel_mask = Path("segmentation") / "masks" / f"seg_{i:05d}.png"
        _save_png(img, out_root / rel_img)
        _save_mask_png(mask, out_root / rel_mask)
        rows.append(
            ManifestRow(
                str(rel_img), "segmentation", CLASS_NAMES[class_idx], tid, _fmt_params(params), 1.0, f"{seg_kind}:{class_idx}:{i}"
            )
        )

    with open(out_root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for r in rows:
            w.writerow([r.filename, r.split, r.class_name, r.texture_id, r.curve_params, repr(r.gamma_applied), r.seed])
    return cls_root, seg_root


def load_manifest(path: str | Path) -> list[ManifestRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_COLUMNS:
            raise IngestionError(f"manifest {path} has unexpected columns {reader.fieldnames}")
        for rec in reader:
            rows.append(
                ManifestRow(
                    rec["filename"],
                    rec["split"],
                    rec["class"],
                    int(rec["texture_id"]),
                    rec["curve_params"],
                    float(rec["gamma_applied"]),
                    rec["seed"],
                )
            )
    return rows


def plug_in_mutual_information(pairs: list[tuple[int, int]]) -> float:
    """Plug-in MI (nats) between two discrete variables given joint samples."""
    if not pairs:
        return 0.0
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    n = len(pairs)
    mi = 0.0
    for av in np.unique(a):
        for bv in np.unique(b):
            p_ab = np.mean((a == av) & (b == bv))
            if p_ab == 0:
                continue
            p_a = np.mean(a == av)
            p_b = np.mean(b == bv)
            mi += p_ab * np.log(p_ab / (p_a * p_b))
    return float(mi)


def corpus_confound_audit(root: str | Path, manifest: str | Path) -> dict[str, float]:
    """Mutual information (nats) between background texture id and class
    label, per split, computed from the manifest. Verifies that every
    manifest file exists under root."""
    root = Path(root)
    rows = load_manifest(manifest)
    missing = [r.filename for r in rows if not (root / r.filename).exists()]
    if missing:
        raise IngestionError(
            f"manifest/corpus mismatch: {len(missing)} files missing (first: {missing[0]})"
        )
    out: dict[str, float] = {}
    for split in set(r.split for r in rows):
        pairs = [
            (r.texture_id, CLASS_NAMES.index(r.class_name))
            for r in rows
            if r.split == split
        ]
        out[split] = plug_in_mutual_information(pairs)
    return out
