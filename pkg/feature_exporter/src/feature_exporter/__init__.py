"""Bridge pretrained CNN classifiers to RFFS1 feature files."""

from .datasets import NORMALIZATION, load_npz, parse_normalization
from .export import ExportSpec, export_features, export_perturbed, fgsm_inputs
from .flows import (
    DetectorLayer,
    FlowFileError,
    TorchFlow,
    load_detector_layers,
    read_torch_flow,
)
from .models import (
    MODEL_NAMES,
    ExportError,
    UnknownTapError,
    build_model,
    resolve_taps,
    spatial_mean_taps,
    tap_channels,
)
from .rffs import write_rffs

__version__ = "0.1.0"

__all__ = [
    "DetectorLayer",
    "ExportError",
    "ExportSpec",
    "FlowFileError",
    "MODEL_NAMES",
    "NORMALIZATION",
    "TorchFlow",
    "UnknownTapError",
    "build_model",
    "export_features",
    "export_perturbed",
    "fgsm_inputs",
    "load_detector_layers",
    "load_npz",
    "parse_normalization",
    "read_torch_flow",
    "resolve_taps",
    "spatial_mean_taps",
    "tap_channels",
    "write_rffs",
    "__version__",
]
