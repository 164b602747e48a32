"""Cross-sensor cloud detection: Landsat-8 to Proba-V harmonisation and
cycle-consistent domain adaptation."""

__version__ = "0.1.0"

from .config import CloudTrainConfig, ConfigError, DAConfig, da_preset, load_config
from .raster import (
    BANDS,
    CloudMask,
    Domain,
    MultispectralImage,
    PatchSet,
    QualityMask,
    RasterError,
    extract_patches,
    load_image,
    save_image,
)

__all__ = [
    "BANDS",
    "CloudMask",
    "CloudTrainConfig",
    "ConfigError",
    "DAConfig",
    "Domain",
    "MultispectralImage",
    "PatchSet",
    "QualityMask",
    "RasterError",
    "da_preset",
    "extract_patches",
    "load_config",
    "load_image",
    "save_image",
]
