"""Dense context-aware segmentation networks (DCA module, Cascade-DCA, Pyramid-DCA)."""
from .config import ExperimentConfig, LossWeights, ModelConfig, SynthSpec, TrainConfig
from .dca import DCAModule, DcaConfig, compute_mask, context_pool, update_context, update_spatial
from .estimator import DCASegmenter
from .metrics import ConfusionMatrix, mean_iou, pixel_accuracy
from .network import DCANet, build_model, class_balanced_ce, total_loss
from .structures import CASCADE_SCALES, PYRAMID_SCALES, CascadeDCA, CRSBaseline, PyramidDCA

__all__ = [
    "CASCADE_SCALES", "PYRAMID_SCALES", "CRSBaseline", "CascadeDCA", "ConfusionMatrix", "DCAModule",
    "DCANet", "DCASegmenter", "DcaConfig", "ExperimentConfig", "LossWeights", "ModelConfig", "PyramidDCA",
    "SynthSpec", "TrainConfig", "build_model", "class_balanced_ce", "compute_mask", "context_pool",
    "mean_iou", "pixel_accuracy", "total_loss", "update_context", "update_spatial",
]
__version__ = "0.1.0"
