"""Cascade-DCA, Pyramid-DCA and the cascaded-residual (CRS) ablation baseline."""
from __future__ import annotations

from typing import NamedTuple, Sequence

import torch
from torch import nn

from ._validation import check_feature_map, check_positive_int
from .dca import ConvBNReLU, DCAModule, DcaConfig

CASCADE_SCALES = (1, 4, 8, 16)
PYRAMID_SCALES = (1, 2, 3, 6)
PYRAMID_MODULES_PER_BRANCH = 2


def check_schedule(scales: Sequence[int], name: str = "schedule") -> tuple[int, ...]:
    scales = tuple(scales)
    if not scales:
        raise ValueError(f"{name} must contain at least one scale")
    for r in scales:
        if isinstance(r, bool) or not isinstance(r, int) or r < 1:
            raise ValueError(f"{name} entries must be positive integers, got {r!r}")
    return scales


class StructureOutput(NamedTuple):
    features: torch.Tensor
    masks: list
    sem_logits: list


class CascadeDCA(nn.Module):
    """DCA modules in sequence; the input feeds both pathways of the first module.

    ``final_tap="context"`` takes the last module's concatenated output
    (``2 * width`` channels) into the closing 1x1 convolution;
    ``final_tap="spatial"`` takes its spatial output (``width`` channels).
    Only the last module carries a semantic head.
    """

    def __init__(self, in_channels: int, width: int, schedule: Sequence[int] = CASCADE_SCALES,
                 final_tap: str = "context", num_classes: int = 0,
                 semantic_supervision: bool = False, semantic_width: int = 256):
        super().__init__()
        check_positive_int(in_channels, "in_channels")
        check_positive_int(width, "width")
        self.schedule = check_schedule(schedule)
        if final_tap not in ("context", "spatial"):
            raise ValueError(f"final_tap must be 'context' or 'spatial', got {final_tap!r}")
        self.in_channels = in_channels
        self.width = width
        self.final_tap = final_tap
        modules = []
        for i, r in enumerate(self.schedule):
            last = i == len(self.schedule) - 1
            modules.append(DCAModule(DcaConfig(
                in_channels_context=in_channels if i == 0 else 2 * width,
                in_channels_spatial=in_channels if i == 0 else width,
                width=width,
                context_scale=r,
                semantic_supervision=semantic_supervision and last,
                num_classes=num_classes,
                semantic_width=semantic_width,
            )))
        self.blocks = nn.ModuleList(modules)
        tap_channels = 2 * width if final_tap == "context" else width
        self.project = ConvBNReLU(tap_channels, width, kernel_size=1)
        _check_chain(self.blocks, width)

    def forward(self, x: torch.Tensor) -> StructureOutput:
        check_feature_map(x, "cascade input", self.in_channels)
        fc, fs = x, x
        masks, sems = [], []
        for block in self.blocks:
            fc, fs, mask, sem = block(fc, fs)
            masks.append(mask)
            if sem is not None:
                sems.append(sem)
        tap = fc if self.final_tap == "context" else fs
        return StructureOutput(self.project(tap), masks, sems)


def _check_chain(blocks: Sequence[DCAModule], width: int) -> None:
    for i, block in enumerate(blocks[1:], start=2):
        if block.cfg.in_channels_context != 2 * width or block.cfg.in_channels_spatial != width:
            raise ValueError(
                f"channel plumbing broken at DCA module {i}: context "
                f"{block.cfg.in_channels_context} (expected {2 * width}), spatial "
                f"{block.cfg.in_channels_spatial} (expected {width})"
            )


class PyramidDCA(nn.Module):
    """Parallel cascaded-DCA branches, one context scale per branch.

    A shared 3x3 reduction maps the input to ``width`` channels. The spatial
    outputs of all branches are concatenated and fused by a 1x1 convolution.
    """

    def __init__(self, in_channels: int, width: int, branch_scales: Sequence[int] = PYRAMID_SCALES,
                 modules_per_branch: int = PYRAMID_MODULES_PER_BRANCH, num_classes: int = 0,
                 semantic_supervision: bool = False, semantic_width: int = 256):
        super().__init__()
        check_positive_int(in_channels, "in_channels")
        check_positive_int(width, "width")
        check_positive_int(modules_per_branch, "modules_per_branch")
        self.branch_scales = check_schedule(branch_scales, "branch_scales")
        self.in_channels = in_channels
        self.width = width
        self.modules_per_branch = modules_per_branch
        self.reduce = ConvBNReLU(in_channels, width, kernel_size=3)
        branches = []
        for r in self.branch_scales:
            branch = nn.ModuleList(
                DCAModule(DcaConfig(
                    in_channels_context=width if j == 0 else 2 * width,
                    in_channels_spatial=width,
                    width=width,
                    context_scale=r,
                    semantic_supervision=semantic_supervision and j == modules_per_branch - 1,
                    num_classes=num_classes,
                    semantic_width=semantic_width,
                ))
                for j in range(modules_per_branch)
            )
            _check_chain(branch, width)
            branches.append(branch)
        self.branches = nn.ModuleList(branches)
        self.fuse = ConvBNReLU(len(self.branch_scales) * width, width, kernel_size=1)

    def run_branch(self, index: int, x: torch.Tensor):
        """Run one branch on the reduced input; returns (spatial output, masks, logits)."""
        fc, fs = x, x
        masks, sems = [], []
        for block in self.branches[index]:
            fc, fs, mask, sem = block(fc, fs)
            masks.append(mask)
            if sem is not None:
                sems.append(sem)
        return fs, masks, sems

    def forward(self, x: torch.Tensor, order: Sequence[int] | None = None) -> StructureOutput:
        check_feature_map(x, "pyramid input", self.in_channels)
        reduced = self.reduce(x)
        n = len(self.branches)
        order = range(n) if order is None else order
        results = {}
        for i in order:
            results[i] = self.run_branch(i, reduced)
        spatial = [results[i][0] for i in range(n)]
        masks = [m for i in range(n) for m in results[i][1]]
        sems = [s for i in range(n) for s in results[i][2]]
        return StructureOutput(self.fuse(torch.cat(spatial, dim=1)), masks, sems)

    def concat_channels(self) -> int:
        return len(self.branch_scales) * self.width


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            ConvBNReLU(width, width, kernel_size=3),
            nn.Conv2d(width, width, 3, padding=1, bias=False),
            nn.BatchNorm2d(width),
        )

    def forward(self, x):
        return x + self.body(x)


class CRSBaseline(nn.Module):
    """Cascaded residual structure: the DCA modules replaced by plain residual blocks."""

    def __init__(self, in_channels: int, width: int, depth: int = len(CASCADE_SCALES)):
        super().__init__()
        check_positive_int(in_channels, "in_channels")
        check_positive_int(width, "width")
        check_positive_int(depth, "depth")
        self.in_channels = in_channels
        self.reduce = ConvBNReLU(in_channels, width, kernel_size=1)
        self.blocks = nn.Sequential(*[ResidualBlock(width) for _ in range(depth)])

    def forward(self, x: torch.Tensor) -> StructureOutput:
        check_feature_map(x, "CRS input", self.in_channels)
        return StructureOutput(self.blocks(self.reduce(x)), [], [])
