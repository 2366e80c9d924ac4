"""Device-independent OCT processing: B-scan enhancement, 3D ONH tissue
segmentation with an ensemble of CNNs, quality and overlap metrics, and
peripapillary thickness extraction."""

from .clinical import extract_parameters, icc, onh_center, thickness, thickness_profile
from .enhance import DigitalEnhancer, EnhanceConfig, clahe, compensate, digital_enhance, spatial_average
from .qmetrics import ssim, uiqi
from .segeval import paired_ttest, score_all, score_tissue
from .volcore import (BScan, LabelVolume, OctVolume, VoxelSpacing, load_labels, load_volume,
                      resize_labels, resize_volume, save_labels, save_volume)

__version__ = "0.1.0"

__all__ = [
    "BScan", "DigitalEnhancer", "EnhanceConfig", "LabelVolume", "OctVolume", "VoxelSpacing",
    "clahe", "compensate", "digital_enhance", "extract_parameters", "icc", "load_labels",
    "load_volume", "onh_center", "paired_ttest", "resize_labels", "resize_volume", "save_labels",
    "save_volume", "score_all", "score_tissue", "spatial_average", "ssim", "thickness",
    "thickness_profile", "uiqi",
]
