"""Wavelet-downsampling attention U-Net for CT lesion segmentation."""

__version__ = "0.1.0"

from .model import HESUNet, ModelConfig, parameter_manifest, stage_shapes

__all__ = ["HESUNet", "ModelConfig", "parameter_manifest", "stage_shapes", "__version__"]
