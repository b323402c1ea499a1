"""scikit-learn style estimator wrapping the DCA segmentation network."""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import IGNORE_INDEX, check_images, check_images_and_labels
from .config import DataConfig, EvalConfig, ExperimentConfig, LossWeights, ModelConfig, SynthSpec, TrainConfig
from .data import SegmentationSample, present_vector
from .metrics import ConfusionMatrix, mean_iou
from .network import DCANet
from .structures import CASCADE_SCALES, PYRAMID_SCALES
from .training import build_seeded_model, load_checkpoint, predict_proba, save_checkpoint, train


class DCASegmenter(ClassifierMixin, BaseEstimator):
    """Dense context-aware semantic segmenter.

    ``X`` is an image batch ``[n, 3, H, W]`` (float, roughly in [0, 1]);
    ``y`` is a label-map batch ``[n, H, W]`` with class ids in ``0..K-1`` and
    255 for ignored pixels. ``structure`` selects ``"cascade"``,
    ``"pyramid"``, ``"crs"`` (residual ablation) or ``"none"`` (plain FCN).

    Attributes
    ----------
    model_ : DCANet
        The trained network (inference mode).
    n_classes_ : int
    history_ : list of dict
        Per-iteration loss/learning-rate records.
    """

    def __init__(self, structure="cascade", num_classes=None, width=64, schedule=CASCADE_SCALES,
                 branch_scales=PYRAMID_SCALES, modules_per_branch=2, final_tap="context",
                 backbone="toy", backbone_channels=(16, 32, 64, 128), semantic_supervision=True,
                 aux_head=True, max_iter=1000, batch_size=8, base_lr=0.01, power=0.9, momentum=0.9,
                 weight_decay=1e-4, loss_weights=(1.0, 0.2, 0.05), mirror=True, scale_range=(0.5, 2.0),
                 rotation_range=(0.0, 0.0), blur=False, crop_size=64, class_balance="median",
                 test_scales=(1.0,), random_state=0):
        self.structure = structure
        self.num_classes = num_classes
        self.width = width
        self.schedule = schedule
        self.branch_scales = branch_scales
        self.modules_per_branch = modules_per_branch
        self.final_tap = final_tap
        self.backbone = backbone
        self.backbone_channels = backbone_channels
        self.semantic_supervision = semantic_supervision
        self.aux_head = aux_head
        self.max_iter = max_iter
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.power = power
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.loss_weights = loss_weights
        self.mirror = mirror
        self.scale_range = scale_range
        self.rotation_range = rotation_range
        self.blur = blur
        self.crop_size = crop_size
        self.class_balance = class_balance
        self.test_scales = test_scales
        self.random_state = random_state

    def to_config(self, num_classes: int) -> ExperimentConfig:
        model = ModelConfig(
            backbone=self.backbone, backbone_channels=tuple(self.backbone_channels),
            structure=self.structure, width=self.width, schedule=tuple(self.schedule),
            branch_scales=tuple(self.branch_scales), modules_per_branch=self.modules_per_branch,
            final_tap=self.final_tap, num_classes=num_classes,
            semantic_supervision=self.semantic_supervision, aux_head=self.aux_head,
        )
        train_cfg = TrainConfig(
            base_lr=self.base_lr, power=self.power, max_iter=self.max_iter, batch_size=self.batch_size,
            momentum=self.momentum, weight_decay=self.weight_decay, seed=self.random_state,
            mirror=self.mirror, scale_range=tuple(self.scale_range),
            rotation_range=tuple(self.rotation_range), blur=self.blur, crop_size=self.crop_size,
            class_balance=self.class_balance, loss_weights=LossWeights(*self.loss_weights),
        )
        return ExperimentConfig(model=model, train=train_cfg,
                                data=DataConfig(synth=SynthSpec(num_classes=num_classes)),
                                eval=EvalConfig(scales=tuple(self.test_scales)))

    def fit(self, X, y):
        X, y = check_images_and_labels(X, y)
        k = self.num_classes
        if k is None:
            valid = y[y != IGNORE_INDEX]
            k = int(valid.max()) + 1 if valid.size else 1
        if (y[y != IGNORE_INDEX] >= k).any():
            raise ValueError(f"labels contain values >= num_classes={k}")
        self.config_ = self.to_config(k)
        samples = [SegmentationSample(img, lab, present_vector(lab, k)) for img, lab in zip(X, y)]
        self.model_ = build_seeded_model(self.config_.model, self.random_state)
        result = train(self.model_, samples, self.config_.train, experiment=self.config_)
        self.history_ = result.log
        self.class_weights_ = result.class_weights
        self.n_classes_ = k
        self.classes_ = np.arange(k)
        return self

    def predict_proba(self, X, scales=None):
        """Per-pixel class probabilities ``[n, K, H, W]`` averaged over ``scales``."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        return predict_proba(self.model_, X, self.test_scales if scales is None else scales)

    def predict(self, X, scales=None):
        return self.predict_proba(X, scales).argmax(axis=1)

    def score(self, X, y, sample_weight=None):
        """Mean IoU of the predictions against ``y`` (ignore index excluded)."""
        X, y = check_images_and_labels(X, y)
        cm = ConfusionMatrix(self.n_classes_).update(self.predict(X), y)
        return mean_iou(cm)[0]

    @torch.no_grad()
    def transform(self, X):
        """Context-refined feature maps fed to the classifier, ``[n, C, H/8, W/8]``."""
        check_is_fitted(self, "model_")
        x = torch.from_numpy(check_images(X))
        self.model_.eval()
        _, feats = self.model_.backbone(x)
        if self.model_.structure is not None:
            feats = self.model_.structure(feats).features
        return feats.numpy()

    @torch.no_grad()
    def attention_masks(self, X) -> list:
        """One ``[n, C, H/8, W/8]`` array per DCA module, in structure order."""
        check_is_fitted(self, "model_")
        self.model_.eval()
        out = self.model_(torch.from_numpy(check_images(X)))
        return [m.numpy() for m in out.masks]

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_checkpoint(path, self.model_, self.config_, self.config_.train.max_iter)

    @classmethod
    def from_checkpoint(cls, path) -> "DCASegmenter":
        model, config, _ = load_checkpoint(path)
        est = cls.from_config(config)
        est.model_, est.config_ = model, config
        est.n_classes_ = config.model.num_classes
        est.classes_ = np.arange(est.n_classes_)
        est.history_ = []
        return est

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> "DCASegmenter":
        m, t = config.model, config.train
        return cls(
            structure=m.structure, num_classes=m.num_classes, width=m.width, schedule=m.schedule,
            branch_scales=m.branch_scales, modules_per_branch=m.modules_per_branch, final_tap=m.final_tap,
            backbone=m.backbone, backbone_channels=m.backbone_channels,
            semantic_supervision=m.semantic_supervision, aux_head=m.aux_head, max_iter=t.max_iter,
            batch_size=t.batch_size, base_lr=t.base_lr, power=t.power, momentum=t.momentum,
            weight_decay=t.weight_decay,
            loss_weights=(t.loss_weights.main, t.loss_weights.aux, t.loss_weights.sem),
            mirror=t.mirror, scale_range=t.scale_range, rotation_range=t.rotation_range, blur=t.blur,
            crop_size=t.crop_size, class_balance=t.class_balance, test_scales=config.eval.scales,
            random_state=t.seed,
        )
