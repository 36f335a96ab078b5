"""Run configuration: one declarative document that fully determines a run.

Every stage reads its parameters from a dataclass section here; all
randomness flows from the named seeds. Two runs with equal configs and
seeds produce equal results within the documented tolerances.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

# Fixed 8-way label set with a stable integer encoding, so confusion
# matrices are comparable across runs.
CLASS_NAMES = (
    "MYSV",
    "ZYMV",
    "CMV",
    "WMV",
    "BrownSpot",
    "DownyMildew",
    "PowderyMildew",
    "Healthy",
)
CLASS_TO_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}
SPLITS = ("training", "validation", "test")

VARIANT_NAMES = ("MAE_prob", "MAE", "SSIM")


@dataclass
class SplitSpec:
    """Train/test split of the segmentation dataset."""

    seg_train_fraction: float = 0.8
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.seg_train_fraction < 1.0:
            raise ValueError(f"seg_train_fraction must be in (0,1), got {self.seg_train_fraction}")


@dataclass
class AugmentationRecipe:
    """Online augmentation parameters for one training stage."""

    rotation_step_deg: float = 90.0
    mirror: bool = True
    crop_size: int | None = 256
    gamma_choices: tuple[float, ...] = (0.8, 1.0, 1.5, 2.0, 2.2)

    def __post_init__(self):
        self.gamma_choices = tuple(float(g) for g in self.gamma_choices)
        if any(g <= 0 for g in self.gamma_choices):
            raise ValueError("gamma_choices must all be > 0")
        if self.rotation_step_deg <= 0 or 360.0 % self.rotation_step_deg != 0:
            raise ValueError("rotation_step_deg must divide 360")

    @property
    def angles(self) -> tuple[float, ...]:
        n = int(round(360.0 / self.rotation_step_deg))
        return tuple(i * self.rotation_step_deg for i in range(n))


def aop_recipe() -> AugmentationRecipe:
    return AugmentationRecipe(90.0, True, 256, (0.8, 1.0, 1.5, 2.0, 2.2))


def classifier_recipe() -> AugmentationRecipe:
    return AugmentationRecipe(10.0, True, None, (0.5, 1.0, 1.5))


@dataclass
class SSIMConfig:
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError("window_size must be odd and >= 3")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be > 0")


@dataclass
class GeneratorSpec:
    """U-net generator: stride-2 encoder, resize-convolution decoder, skips always on."""

    depth: int = 8
    base_channels: int = 64
    output_mode: str = "rgb_image"  # or "probability_map"

    def __post_init__(self):
        if self.output_mode not in ("rgb_image", "probability_map"):
            raise ValueError(f"unknown output_mode {self.output_mode!r}")
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError("depth and base_channels must be >= 1")

    @property
    def out_channels(self) -> int:
        return 1 if self.output_mode == "probability_map" else 3


@dataclass
class DiscriminatorSpec:
    """Patch discriminator over the concatenated (input, candidate) pair."""

    depth: int = 5
    base_channels: int = 64

    def __post_init__(self):
        if self.depth < 3:
            raise ValueError("discriminator needs at least 3 conv layers")


@dataclass(frozen=True)
class AOPVariant:
    """One of the three pretreatment configurations."""

    name: str
    content_loss: str  # "mae" | "ssim"
    output_mode: str  # "probability_map" | "rgb_image"
    mask_threshold: float = 0.5


_VARIANTS = {
    "MAE_prob": AOPVariant("MAE_prob", "mae", "probability_map"),
    "MAE": AOPVariant("MAE", "mae", "rgb_image"),
    "SSIM": AOPVariant("SSIM", "ssim", "rgb_image"),
}


def variant_from_name(name: str) -> AOPVariant:
    try:
        return _VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown AOP variant {name!r}; expected one of {VARIANT_NAMES}") from None


@dataclass
class TrainConfigAOP:
    lr: float = 2e-4
    beta1: float = 0.5
    batch_size: int = 16
    epochs: int = 100
    content_weight: float = 100.0

    def __post_init__(self):
        if min(self.lr, self.batch_size, self.epochs, self.content_weight) <= 0:
            raise ValueError("all AOP training parameters must be positive")


@dataclass
class ClassifierSpec:
    """VGG-16-shaped conv stack (13 convs, 5 blocks) with a reduced FC head."""

    width_mult: float = 1.0
    input_size: int = 224
    head_dims: tuple[int, ...] = (1024, 32)
    n_classes: int = 8
    init: str = "random"  # or "pretrained"
    pretrained_weights: str | None = None

    def __post_init__(self):
        self.head_dims = tuple(int(d) for d in self.head_dims)
        if self.init not in ("random", "pretrained"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.init == "pretrained" and not self.pretrained_weights:
            raise ValueError("pretrained init requires a pretrained_weights path")
        if self.input_size % 32 != 0:
            raise ValueError("input_size must be divisible by 32 (5 pooling stages)")


@dataclass
class TrainConfigCls:
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 100
    augment: bool = True

    def __post_init__(self):
        if min(self.lr, self.batch_size, self.epochs) <= 0:
            raise ValueError("all classifier training parameters must be positive")


@dataclass
class SynthConfig:
    """Synthetic confounded corpus: class-specific backgrounds in train/val,
    decorrelated (or permuted) backgrounds in test."""

    n_classes: int = 8
    image_size: int = 64
    train_per_class: int = 400
    val_per_class: int = 80
    test_per_class: int = 120
    seg_pairs: int = 1000
    confound_strength: float = 1.0  # rho
    test_background_policy: str = "shuffled"  # or "held_out_textures"
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.confound_strength <= 1.0:
            raise ValueError("confound_strength must be in [0,1]")
        if self.test_background_policy not in ("shuffled", "held_out_textures"):
            raise ValueError(f"unknown test_background_policy {self.test_background_policy!r}")
        if min(self.train_per_class, self.val_per_class, self.test_per_class, self.seg_pairs) < 0:
            raise ValueError("counts must be >= 0")


@dataclass
class Seeds:
    split: int = 11
    augment: int = 22
    init: int = 33
    shuffle: int = 44
    synth: int = 55


@dataclass
class DataConfig:
    seg_image_size: int = 316
    seg_train_fraction: float = 0.8


@dataclass
class EvalConfig:
    mask_threshold: float = 0.5
    # rgb-output variants derive an evaluation mask by thresholding the
    # channel-max; background trains toward exact zero so a low floor works.
    rgb_mask_threshold: float = 0.1
    gradcam_images: int = 100
    gradcam_class_mode: str = "predicted"  # or "true"


@dataclass
class PathsConfig:
    corpus_dir: str = "runs/corpus"
    out_dir: str = "runs/out"


@dataclass
class RunConfig:
    seeds: Seeds = field(default_factory=Seeds)
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    aop_augment: AugmentationRecipe = field(default_factory=aop_recipe)
    cls_augment: AugmentationRecipe = field(default_factory=classifier_recipe)
    ssim: SSIMConfig = field(default_factory=SSIMConfig)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    aop_train: TrainConfigAOP = field(default_factory=TrainConfigAOP)
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)
    cls_train: TrainConfigCls = field(default_factory=TrainConfigCls)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def aop_work_size(self) -> int:
        """Spatial resolution the generator sees (training crop, or full frame)."""
        return self.aop_augment.crop_size or self.data.seg_image_size

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        return dict_hash(self.to_dict())

    def classifier_protocol_hash(self) -> str:
        """Hash of everything that defines a classifier arm except pretreatment.

        The four comparison arms must agree on this value.
        """
        d = self.to_dict()
        keep = {k: d[k] for k in ("seeds", "cls_augment", "classifier", "cls_train")}
        return dict_hash(keep)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        sections = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in (doc or {}).items():
            if key not in sections:
                raise ValueError(f"unknown config section {key!r}")
            section_cls = _SECTION_TYPES[key]
            if not isinstance(value, dict):
                raise ValueError(f"config section {key!r} must be a mapping")
            names = {f.name for f in dataclasses.fields(section_cls)}
            unknown = set(value) - names
            if unknown:
                raise ValueError(f"unknown keys in config section {key!r}: {sorted(unknown)}")
            kwargs[key] = section_cls(**value)
        return cls(**kwargs)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "RunConfig":
        with open(path) as fh:
            doc = yaml.safe_load(fh)
        return cls.from_dict(doc or {})

    def to_yaml(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(_jsonable(self.to_dict()), fh, sort_keys=False)


_SECTION_TYPES = {
    "seeds": Seeds,
    "paths": PathsConfig,
    "data": DataConfig,
    "aop_augment": AugmentationRecipe,
    "cls_augment": AugmentationRecipe,
    "ssim": SSIMConfig,
    "generator": GeneratorSpec,
    "discriminator": DiscriminatorSpec,
    "aop_train": TrainConfigAOP,
    "classifier": ClassifierSpec,
    "cls_train": TrainConfigCls,
    "synth": SynthConfig,
    "eval": EvalConfig,
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def dict_hash(doc: dict) -> str:
    """Stable sha256 of a nested dict (canonical JSON)."""
    payload = json.dumps(_jsonable(doc), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()
