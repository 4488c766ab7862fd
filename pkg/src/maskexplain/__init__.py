"""Per-class attribution masks for frozen multi-label image classifiers.

A mask network is trained against a frozen classifier with a four-term
loss (masked-input classification, complement entropy, area bounding,
total variation) and evaluated with segmentation-style metrics,
class-specific masking confusion, masked-classification reports and
activation-based class ranking.
"""

__version__ = "0.1.0"

from .classifier import Explanandum, InputSpec, build_small_classifier, finetune_classifier
from .data import LabeledImage, MultiLabelDataset, ShapesConfig, generate_shapes_dataset
from .explainer import ExplainerConfig, MaskExplainer, build_explainer
from .losses import LossBreakdown, LossConfig
from .training import TrainConfig, train_explainer

__all__ = [
    "Explanandum",
    "ExplainerConfig",
    "InputSpec",
    "LabeledImage",
    "LossBreakdown",
    "LossConfig",
    "MaskExplainer",
    "MultiLabelDataset",
    "ShapesConfig",
    "TrainConfig",
    "build_explainer",
    "build_small_classifier",
    "finetune_classifier",
    "generate_shapes_dataset",
    "train_explainer",
]
