"""Anti-overfitting pretreatment (AOP): adversarial leaf-region segmentation
and brightness calibration in front of an image-based plant disease
classifier, plus the harness that measures the in-domain/out-of-domain
accuracy gap it closes."""

__version__ = "0.1.0"

from .config import (  # noqa: F401
    CLASS_NAMES,
    CLASS_TO_INDEX,
    SPLITS,
    AOPVariant,
    AugmentationRecipe,
    ClassifierSpec,
    DiscriminatorSpec,
    GeneratorSpec,
    RunConfig,
    SplitSpec,
    SSIMConfig,
    SynthConfig,
    TrainConfigAOP,
    TrainConfigCls,
    variant_from_name,
)
