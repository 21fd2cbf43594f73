"""3D ultrasound localization microscopy: from beamformed IQ blocks to
super-resolved density and velocity maps, with a phantom generator and
resolution metrology."""
from .core import (AcquisitionGeometry, CorruptionError, DegenerateInputError, Detection,
                   FormatError, GridSpec, IQVolumeBlock, NumericalError, ScalarVolume, ShapeError,
                   UlmError, UnsupportedError, wavelength_mm)
from .config import PipelineConfig
from .estimators import (BubbleLocalizer, BubbleTracker, ClutterFilter, DriftCorrector, SpatialTgc,
                         SvdClutterFilter, UlmRenderer)
from .track import Track

__version__ = "0.1.0"

__all__ = [
    "AcquisitionGeometry", "CorruptionError", "DegenerateInputError", "Detection", "FormatError",
    "GridSpec", "IQVolumeBlock", "NumericalError", "ScalarVolume", "ShapeError", "UlmError",
    "UnsupportedError", "wavelength_mm", "PipelineConfig", "BubbleLocalizer", "BubbleTracker",
    "ClutterFilter", "DriftCorrector", "SpatialTgc", "SvdClutterFilter", "UlmRenderer", "Track",
]
