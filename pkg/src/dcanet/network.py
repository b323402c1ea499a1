"""Backbone + long-range structure + segmentation/auxiliary heads, and the composite loss."""
from __future__ import annotations

import logging
import math
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._validation import IGNORE_INDEX
from .config import LossWeights, ModelConfig
from .dca import ConvBNReLU, resize
from .structures import CascadeDCA, CRSBaseline, PyramidDCA

logger = logging.getLogger(__name__)

OUTPUT_STRIDE = 8
DILATIONS = (2, 4)


class BasicBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, dilation: int = 1):
        super().__init__()
        self.conv1 = ConvBNReLU(in_channels, out_channels, 3, stride=stride, dilation=dilation)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=dilation, dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(self.bn2(self.conv2(self.conv1(x))) + identity)


class ToyBackbone(nn.Module):
    """Small dilated residual network with output stride 8.

    Stem (two stride-2 convs) -> stage1 -> stage2 (stride 2) -> stage3
    (dilation 2) -> stage4 (dilation 4). ``aux`` is the stage-3 output.
    """

    def __init__(self, channels: Sequence[int] = (32, 64, 128, 256)):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.stem = nn.Sequential(
            ConvBNReLU(3, max(c1 // 2, 1), 3, stride=2),
            ConvBNReLU(max(c1 // 2, 1), c1, 3, stride=2),
        )
        self.layer1 = BasicBlock(c1, c1)
        self.layer2 = BasicBlock(c1, c2, stride=2)
        self.layer3 = BasicBlock(c2, c3, dilation=DILATIONS[0])
        self.layer4 = BasicBlock(c3, c4, dilation=DILATIONS[1])
        self.aux_channels = c3
        self.out_channels = c4
        self.dilations = DILATIONS

    def forward(self, x):
        x = self.layer2(self.layer1(self.stem(x)))
        aux = self.layer3(x)
        return aux, self.layer4(aux)


class ResNetBackbone(nn.Module):
    """Dilated torchvision ResNet (no pretrained weights): stride 8, last two stages dilated 2 and 4."""

    def __init__(self, depth: int = 101):
        super().__init__()
        import torchvision

        ctor = {50: torchvision.models.resnet50, 101: torchvision.models.resnet101}[depth]
        net = ctor(weights=None, replace_stride_with_dilation=[False, True, True])
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4
        self.aux_channels = 1024
        self.out_channels = 2048
        self.dilations = DILATIONS

    def forward(self, x):
        x = self.layer2(self.layer1(self.stem(x)))
        aux = self.layer3(x)
        return aux, self.layer4(aux)


def make_backbone(cfg: ModelConfig) -> nn.Module:
    if cfg.backbone == "toy":
        return ToyBackbone(cfg.backbone_channels)
    return ResNetBackbone(50 if cfg.backbone == "resnet50" else 101)


class SegmentationHead(nn.Module):
    """1x1 classifier followed by bilinear upsampling to the output size."""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.classifier = nn.Conv2d(in_channels, num_classes, 1)

    def forward(self, features, out_size):
        return resize(self.classifier(features), out_size)


class AuxHead(nn.Module):
    def __init__(self, in_channels: int, width: int, num_classes: int):
        super().__init__()
        self.block = ConvBNReLU(in_channels, width, 3)
        self.classifier = nn.Conv2d(width, num_classes, 1)

    def forward(self, features, out_size):
        return resize(self.classifier(self.block(features)), out_size)


class ModelOutput(NamedTuple):
    scores: torch.Tensor
    aux_scores: Optional[torch.Tensor]
    masks: list
    sem_logits: list


class DCANet(nn.Module):
    """Full segmentation network. ``structure="none"`` is the plain FCN baseline."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = make_backbone(cfg)
        c_in = self.backbone.out_channels
        k = cfg.num_classes
        if cfg.structure == "cascade":
            self.structure = CascadeDCA(c_in, cfg.width, cfg.schedule, cfg.final_tap, k,
                                        cfg.semantic_supervision, cfg.semantic_width)
            head_in = cfg.width
        elif cfg.structure == "pyramid":
            self.structure = PyramidDCA(c_in, cfg.width, cfg.branch_scales, cfg.modules_per_branch, k,
                                        cfg.semantic_supervision, cfg.semantic_width)
            head_in = cfg.width
        elif cfg.structure == "crs":
            self.structure = CRSBaseline(c_in, cfg.width, cfg.crs_depth)
            head_in = cfg.width
        else:
            self.structure = None
            head_in = c_in
        self.head = SegmentationHead(head_in, k)
        self.aux_head = AuxHead(self.backbone.aux_channels, cfg.aux_width, k) if cfg.aux_head else None

    def forward(self, images: torch.Tensor) -> ModelOutput:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected images [n, 3, H, W], got {tuple(images.shape)}")
        size = tuple(images.shape[-2:])
        aux, main = self.backbone(images)
        masks, sems = [], []
        if self.structure is not None:
            main, masks, sems = self.structure(main)
        scores = self.head(main, size)
        aux_scores = self.aux_head(aux, size) if self.aux_head is not None else None
        return ModelOutput(scores, aux_scores, masks, sems)


def build_model(cfg: ModelConfig) -> DCANet:
    return DCANet(cfg)


# ----------------------------------------------------------------------------
# losses


def median_frequency_weights(label_maps: np.ndarray, num_classes: int, clip=(0.1, 10.0),
                             ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """weight_k = median(freq) / freq_k over classes that occur, clipped.

    Classes that never occur get weight 1.
    """
    labels = np.asarray(label_maps).ravel()
    labels = labels[labels != ignore_index]
    counts = np.bincount(labels, minlength=num_classes)[:num_classes].astype(np.float64)
    freq = counts / max(counts.sum(), 1.0)
    weights = np.ones(num_classes)
    seen = freq > 0
    if seen.any():
        weights[seen] = np.median(freq[seen]) / freq[seen]
    return np.clip(weights, *clip)


class LossTerms(NamedTuple):
    total: torch.Tensor
    main: torch.Tensor
    aux: torch.Tensor
    sem: torch.Tensor


def class_balanced_ce(scores: torch.Tensor, labels: torch.Tensor, ignore_index: int = IGNORE_INDEX,
                      class_weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean over non-ignored pixels of the class-weighted negative log-likelihood.

    The per-pixel weights are not renormalised: the loss is
    ``sum_p w[y_p] * nll_p / #valid``. Returns 0 (and logs a warning) when
    every pixel is ignored.
    """
    if scores.dim() != 4 or labels.dim() != 3:
        raise ValueError("expected scores [n, K, H, W] and labels [n, H, W]")
    valid = labels != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        logger.warning("class_balanced_ce: every pixel is ignored; loss defined as 0")
        return scores.sum() * 0.0
    logp = F.log_softmax(scores, dim=1)
    safe = torch.where(valid, labels, torch.zeros_like(labels))
    nll = -logp.gather(1, safe.unsqueeze(1)).squeeze(1)
    if class_weights is not None:
        nll = nll * class_weights.to(nll.dtype)[safe]
    return (nll * valid).sum() / n_valid


def semantic_bce(logits: torch.Tensor, present: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy summed over classes, averaged over the batch."""
    bce = F.binary_cross_entropy_with_logits(logits, present.to(logits.dtype), reduction="none")
    return bce.sum(dim=1).mean()


def total_loss(l_m, l_a, l_s_list, weights: LossWeights):
    """L = main * l_m + aux * l_a + sem * sum(l_s_list)."""
    terms = [l_m, l_a, *l_s_list]
    for t in terms:
        v = float(t.detach()) if isinstance(t, torch.Tensor) else float(t)
        if not math.isfinite(v) or v < 0:
            raise ValueError(f"component losses must be finite and >= 0, got {v}")
    l_s = sum(l_s_list) if l_s_list else 0.0 * l_m
    return weights.main * l_m + weights.aux * l_a + weights.sem * l_s


def compute_losses(output: ModelOutput, labels: torch.Tensor, present: torch.Tensor,
                   weights: LossWeights, class_weights: Optional[torch.Tensor] = None) -> LossTerms:
    l_m = class_balanced_ce(output.scores, labels, class_weights=class_weights)
    zero = output.scores.sum() * 0.0
    l_a = class_balanced_ce(output.aux_scores, labels, class_weights=class_weights) \
        if output.aux_scores is not None else zero
    l_s_list = [semantic_bce(s, present) for s in output.sem_logits]
    total = total_loss(l_m, l_a, l_s_list, weights)
    l_s = sum(l_s_list) if l_s_list else zero
    return LossTerms(total, l_m, l_a, l_s)
