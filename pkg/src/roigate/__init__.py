"""Gated multi-layer convolutional RoI feature extraction, desk scale.

A small numpy/scipy library providing:

* a reverse-mode autodiff tensor core (`roigate.tensor`),
* the neural layers needed for region-based detection (`roigate.layers`),
* squeeze units and spatial/channel gate units with per-RoI fusion
  (`roigate.gating`),
* a miniature trainable detection pipeline (`roigate.detector`),
* FPPI / log-average miss-rate evaluation (`roigate.evaluation`),
* synthetic dataset generation and file formats (`roigate.data`),
* parameter/MAC accounting, experiment orchestration and a CLI
  (`roigate.cost`, `roigate.experiment`, `roigate.cli`).
"""

from .boxes import RoiBox, iou
from .tensor import Tensor, backward, finite_diff_check, no_grad, workspace

__all__ = [
    "RoiBox",
    "Tensor",
    "backward",
    "finite_diff_check",
    "iou",
    "no_grad",
    "workspace",
]

__version__ = "0.1.0"
