"""Dense Context-Aware (DCA) module.

A DCA module takes two aligned feature maps, a contextual input ``fc`` and a
spatial input ``fs``, and returns an updated pair::

    g        = context_transform(context_pool(fc, r))      # [n, width, h, w]
    mask     = sigmoid(g)
    fs_hat   = mask * spatial_transform(fs) + residual
    fc_hat   = concat(g, fs_hat)                            # [n, 2*width, h, w]

``g`` is computed once and shared by the mask and the contextual update.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import nn

from ._validation import check_feature_map, check_positive_int, check_same_shape


@dataclass(frozen=True)
class DcaConfig:
    """Hyperparameters of a single DCA module."""

    in_channels_context: int
    in_channels_spatial: int
    width: int
    context_scale: int
    semantic_supervision: bool = False
    num_classes: int = 0
    semantic_width: int = 256

    def __post_init__(self):
        check_positive_int(self.in_channels_context, "in_channels_context")
        check_positive_int(self.in_channels_spatial, "in_channels_spatial")
        check_positive_int(self.width, "width")
        check_positive_int(self.context_scale, "context_scale")
        if self.semantic_supervision:
            check_positive_int(self.num_classes, "num_classes")
            check_positive_int(self.semantic_width, "semantic_width")


def _bin_matrix(size: int, r: int, dtype, device):
    # Row i selects [floor(i*size/r), floor((i+1)*size/r)), widened to one
    # cell when r > size would otherwise leave the bin empty. Returns the 0/1
    # indicator and the bin lengths so the mean is a sum followed by a divide.
    m = torch.zeros(r, size, dtype=dtype, device=device)
    counts = torch.zeros(r, dtype=dtype, device=device)
    for i in range(r):
        lo = (i * size) // r
        hi = max(((i + 1) * size) // r, lo + 1)
        m[i, lo:hi] = 1.0
        counts[i] = hi - lo
    return m, counts


def context_pool(f: torch.Tensor, r: int) -> torch.Tensor:
    """Average-pool ``f`` onto an ``r x r`` grid of adaptive bins.

    ``r = 1`` is global average pooling. ``r`` may exceed the input size, in
    which case each bin covers a single input cell.
    """
    if isinstance(r, bool) or not isinstance(r, int) or r < 1:
        raise ValueError(f"context scale r must be a positive integer, got {r!r}")
    check_feature_map(f, "context input")
    h, w = f.shape[-2:]
    ph, ch = _bin_matrix(h, r, f.dtype, f.device)
    pw, cw = _bin_matrix(w, r, f.dtype, f.device)
    sums = torch.einsum("ih,nchw,jw->ncij", ph, f, pw)
    return sums / (ch[:, None] * cw[None, :])


def compute_mask(g: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(g)


def update_spatial(fs: torch.Tensor, mask: torch.Tensor, fs_transformed: torch.Tensor) -> torch.Tensor:
    """Gate the transformed spatial features and add the residual ``fs``."""
    check_same_shape(("residual", fs), ("mask", mask), ("transformed", fs_transformed))
    return mask * fs_transformed + fs


def update_context(g: torch.Tensor, fs_hat: torch.Tensor) -> torch.Tensor:
    """Stack ``g`` and the updated spatial features along channels (``g`` first)."""
    if g.dim() != 4 or fs_hat.dim() != 4:
        raise ValueError("update_context expects rank-4 feature maps")
    if g.shape[0] != fs_hat.shape[0] or g.shape[2:] != fs_hat.shape[2:]:
        raise ValueError(
            f"cannot concatenate {tuple(g.shape)} and {tuple(fs_hat.shape)}: batch/spatial dims differ"
        )
    return torch.cat([g, fs_hat], dim=1)


def resize(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize without corner alignment; identity when sizes already match."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1, dilation: int = 1):
        padding = dilation * (kernel_size // 2)
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=padding,
                      dilation=dilation, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=False),
        )


class ContextTransform(nn.Module):
    """conv_c: 1x1 channel reduction, then 3x3 at ``width`` followed by resizing."""

    def __init__(self, in_channels: int, width: int):
        super().__init__()
        self.in_channels = in_channels
        self.reduce = ConvBNReLU(in_channels, width, kernel_size=1)
        self.mix = ConvBNReLU(width, width, kernel_size=3)

    def forward(self, fc_pooled: torch.Tensor, target_size: tuple[int, int]) -> torch.Tensor:
        check_feature_map(fc_pooled, "pooled context", self.in_channels)
        return resize(self.mix(self.reduce(fc_pooled)), target_size)


class SpatialTransform(nn.Module):
    """conv_s: two 3x3 layers. Also returns the residual operand for the gated update.

    When the input width differs from ``width`` the residual is taken after
    the first (channel-changing) layer so that the sum is well defined.
    """

    def __init__(self, in_channels: int, width: int):
        super().__init__()
        self.in_channels = in_channels
        self.width = width
        self.conv1 = ConvBNReLU(in_channels, width, kernel_size=3)
        self.conv2 = ConvBNReLU(width, width, kernel_size=3)

    def forward(self, fs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        check_feature_map(fs, "spatial input", self.in_channels)
        h = self.conv1(fs)
        residual = fs if self.in_channels == self.width else h
        return self.conv2(h), residual


class SemanticHead(nn.Module):
    """Multi-label class-presence logits from the contextual output."""

    def __init__(self, in_channels: int, num_classes: int, width: int = 256):
        super().__init__()
        self.reduce = ConvBNReLU(in_channels, width, kernel_size=1)
        self.fc = nn.Linear(width, num_classes)

    def forward(self, fc_out: torch.Tensor) -> torch.Tensor:
        x = self.reduce(fc_out).mean(dim=(2, 3))
        return self.fc(x)


class DcaOutput(NamedTuple):
    context: torch.Tensor
    spatial: torch.Tensor
    mask: torch.Tensor
    semantic_logits: Optional[torch.Tensor]


class DCAModule(nn.Module):
    """One dense context-aware module.

    Parameters
    ----------
    cfg : DcaConfig
        Channel widths, context grid size and semantic-supervision switch.

    Attributes
    ----------
    force_mask : float or None
        When set, the attention mask is replaced by this constant. Used to
        probe degenerate behaviour (e.g. a zero mask reduces the spatial
        update to its residual).
    """

    def __init__(self, cfg: DcaConfig):
        super().__init__()
        self.cfg = cfg
        self.context_transform = ContextTransform(cfg.in_channels_context, cfg.width)
        self.spatial_transform = SpatialTransform(cfg.in_channels_spatial, cfg.width)
        self.semantic_head = (
            SemanticHead(2 * cfg.width, cfg.num_classes, cfg.semantic_width)
            if cfg.semantic_supervision else None
        )
        self.force_mask: Optional[float] = None

    def forward(self, fc: torch.Tensor, fs: torch.Tensor) -> DcaOutput:
        check_feature_map(fc, "context input", self.cfg.in_channels_context)
        check_feature_map(fs, "spatial input", self.cfg.in_channels_spatial)
        if fc.shape[0] != fs.shape[0] or fc.shape[2:] != fs.shape[2:]:
            raise ValueError(
                f"pathways are not aligned: context {tuple(fc.shape)} vs spatial {tuple(fs.shape)}"
            )
        size = tuple(fs.shape[-2:])
        g = self.context_transform(context_pool(fc, self.cfg.context_scale), size)
        mask = compute_mask(g)
        if self.force_mask is not None:
            mask = torch.full_like(mask, self.force_mask)
        fs_t, residual = self.spatial_transform(fs)
        fs_hat = update_spatial(residual, mask, fs_t)
        fc_hat = update_context(g, fs_hat)
        sem = self.semantic_head(fc_hat) if self.semantic_head is not None else None
        return DcaOutput(fc_hat, fs_hat, mask, sem)
