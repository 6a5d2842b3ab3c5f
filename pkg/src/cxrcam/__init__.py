"""Small CNN training and Grad-CAM explanation toolkit for 4-class chest X-ray style images.

Subpackages are plain modules: :mod:`cxrcam.tensor` (kernels), :mod:`cxrcam.graph`
(layer graph and backprop), :mod:`cxrcam.templates`, :mod:`cxrcam.trainer`,
:mod:`cxrcam.gradcam`, :mod:`cxrcam.metrics`, :mod:`cxrcam.dataio`,
:mod:`cxrcam.modelio` and :mod:`cxrcam.cli`.
"""

from .dataio import CLASSES, gen_fixture, load_split, scan_dataset
from .gradcam import batch_explain, grad_cam, overlay
from .graph import ModelGraph, ParamStore, backward, forward, freeze, param_count
from .metrics import auc_ovr, confusion, report
from .templates import TEMPLATES, build_model
from .trainer import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "CLASSES", "ModelGraph", "ParamStore", "TEMPLATES", "TrainConfig",
    "auc_ovr", "backward", "batch_explain", "build_model", "confusion", "fit",
    "forward", "freeze", "gen_fixture", "grad_cam", "load_split", "overlay",
    "param_count", "report", "scan_dataset",
]
