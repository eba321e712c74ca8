"""Cross-domain document object detection at desk scale.

A numpy reverse-mode autodiff core drives a small FPN detector trained with
three domain-alignment losses (pyramid, region and rendering-layer), plus a
synthetic two-domain page generator, mask pipeline, mAP evaluation and CLI.
"""

from .alignment import DomainAdaptiveModel, LossReport, LossWeights, combined_loss
from .detector import CLASS_NAMES, Detection, Detector
from .docgen import DOMAINS, generate_dataset, generate_page
from .evaluation import EvalReport, mean_ap
from .training import TrainConfig, evaluate, load_model, save_model, train

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "DOMAINS",
    "Detection",
    "Detector",
    "DomainAdaptiveModel",
    "EvalReport",
    "LossReport",
    "LossWeights",
    "TrainConfig",
    "combined_loss",
    "evaluate",
    "generate_dataset",
    "generate_page",
    "load_model",
    "mean_ap",
    "save_model",
    "train",
]
