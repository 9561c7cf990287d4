"""Sub-pixel Bragg peak localization on area-detector frames.

Two localizers over a shared segmentation front-end: conventional 2D
pseudo-Voigt fitting (Levenberg-Marquardt, analytic Jacobian) and a small
convolutional regression network with an optional non-local attention
block, trained on synthetic frames with exact ground truth.
"""

from .frame_io import Frame, FrameStack, PeakRecord, read_frames, read_peaks, write_frames, write_peaks
from .peaknet import ArchSpec, ModelWeights, forward, init_weights, load_weights, save_weights
from .segment import Patch, Region, extract_candidates, label_components, threshold, to_frame_coords
from .synth import PeakParams, SceneConfig, poissonize, pv_value, render_scene
from .trainer import AugmentConfig, Dataset, TrainConfig, train
from .voigtfit import FitResult, LMOptions, fit_patch

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "AugmentConfig", "Dataset", "FitResult", "Frame", "FrameStack",
    "LMOptions", "ModelWeights", "Patch", "PeakParams", "PeakRecord", "Region",
    "SceneConfig", "TrainConfig", "extract_candidates", "fit_patch", "forward",
    "init_weights", "label_components", "load_weights", "poissonize", "pv_value",
    "read_frames", "read_peaks", "render_scene", "save_weights", "threshold",
    "to_frame_coords", "train", "write_frames", "write_peaks",
]
