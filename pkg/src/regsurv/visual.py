"""Multi-scale visual encoding: backbone feature pyramid, ROI align, and the
region-feature encoder that turns 29 boxes + a global slot into fixed-width
vectors, then groups them per report sentence.

ROI align samples one bilinear point at the center of each output cell,
half-pixel aligned, with border replication at map edges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import GLOBAL_INDEX, ModelConfig
from .data import RegionSet
from .errors import ContractError, ShapeError


@dataclass
class FeaturePyramid:
    """Five feature maps (C_l, H_l, W_l) with strictly decreasing extent."""

    maps: list

    def validate(self, channels=None, input_size: int = None):
        if len(self.maps) != 5:
            raise ShapeError(f"pyramid must have 5 levels, got {len(self.maps)}")
        sizes = []
        for level, fmap in enumerate(self.maps):
            if fmap.dim() != 3:
                raise ShapeError(f"level {level + 1} must be (C,H,W), got {tuple(fmap.shape)}")
            sizes.append(fmap.shape[-1])
            if channels is not None and fmap.shape[0] != channels[level]:
                raise ShapeError(
                    f"level {level + 1} has {fmap.shape[0]} channels, expected {channels[level]}"
                )
        if any(b >= a for a, b in zip(sizes, sizes[1:])):
            raise ShapeError(f"spatial sizes must strictly decrease, got {sizes}")
        if input_size is not None and sizes[-1] != input_size // 32:
            raise ShapeError(
                f"final map must be {input_size // 32} wide at input size {input_size}, got {sizes[-1]}"
            )


class ConvBackbone(nn.Module):
    """Five stride-2 stages with configurable channel widths.

    A stand-in for a pretrained residual network: it reproduces the pyramid
    geometry (each stage halves the spatial extent) so downstream shapes are
    the published ones. Pretrained weights can be adapted in by a plug-in.
    """

    def __init__(self, channels=(64, 256, 512, 1024, 2048), seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        stages = []
        in_ch = 1
        for level, out_ch in enumerate(channels):
            kernel, pad = (7, 3) if level == 0 else (3, 1)
            stages.append(nn.Sequential(
                nn.Conv2d(in_ch, out_ch, kernel, stride=2, padding=pad),
                nn.ReLU(),
            ))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.channels = tuple(channels)

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        if image.dim() != 2:
            raise ShapeError(f"expected a 2-d image grid, got shape {tuple(image.shape)}")
        x = image.unsqueeze(0).unsqueeze(0)
        maps = []
        for stage in self.stages:
            x = stage(x)
            maps.append(x.squeeze(0))
        return FeaturePyramid(maps)


def roi_align(fmap: torch.Tensor, box, out_size: int) -> torch.Tensor:
    """Bilinear ROI align of one normalized box on a (C,H,W) map."""
    if out_size < 1:
        raise ShapeError(f"out_size must be >= 1, got {out_size}")
    if not (box.x1 < box.x2 and box.y1 < box.y2):
        raise ShapeError(f"degenerate box: {box}")
    boxes = torch.tensor([[box.x1, box.y1, box.x2, box.y2]], dtype=fmap.dtype)
    return roi_align_many(fmap, boxes, out_size)[0]


def roi_align_many(fmap: torch.Tensor, boxes: torch.Tensor, out_size: int) -> torch.Tensor:
    """Vectorized ROI align: (C,H,W) map + (N,4) boxes -> (N,C,S,S)."""
    if fmap.dim() != 3:
        raise ShapeError(f"feature map must be (C,H,W), got {tuple(fmap.shape)}")
    C, H, W = fmap.shape
    n = boxes.shape[0]
    x_lo, y_lo = boxes[:, 0] * W, boxes[:, 1] * H
    x_hi, y_hi = boxes[:, 2] * W, boxes[:, 3] * H

    steps = (torch.arange(out_size, dtype=fmap.dtype) + 0.5) / out_size
    # sample coordinates in pixel-center space (continuous coord - 0.5)
    xs = x_lo[:, None] + steps[None, :] * (x_hi - x_lo)[:, None] - 0.5   # (N,S)
    ys = y_lo[:, None] + steps[None, :] * (y_hi - y_lo)[:, None] - 0.5

    def gather(iy, ix):
        flat = fmap.reshape(C, H * W)
        idx = (iy * W + ix).reshape(-1)                       # (N*S*S)
        return flat[:, idx].reshape(C, n, out_size, out_size).permute(1, 0, 2, 3)

    x0 = torch.floor(xs)
    y0 = torch.floor(ys)
    wx = (xs - x0).clamp(0.0, 1.0)
    wy = (ys - y0).clamp(0.0, 1.0)
    ix0 = x0.long().clamp(0, W - 1)
    ix1 = (x0.long() + 1).clamp(0, W - 1)
    iy0 = y0.long().clamp(0, H - 1)
    iy1 = (y0.long() + 1).clamp(0, H - 1)

    ix0g, ix1g = ix0[:, None, :].expand(n, out_size, out_size), ix1[:, None, :].expand(n, out_size, out_size)
    iy0g, iy1g = iy0[:, :, None].expand(n, out_size, out_size), iy1[:, :, None].expand(n, out_size, out_size)
    wxg = wx[:, None, :].unsqueeze(1)                         # (N,1,1,S)
    wyg = wy[:, :, None].unsqueeze(1)                         # (N,1,S,1)

    top = gather(iy0g, ix0g) * (1 - wxg) + gather(iy0g, ix1g) * wxg
    bottom = gather(iy1g, ix0g) * (1 - wxg) + gather(iy1g, ix1g) * wxg
    return top * (1 - wyg) + bottom * wyg


@dataclass
class RegionPatches:
    """Flattened ROI patches per scale plus the pooled global vector.

    With a frozen backbone and fixed boxes these are constant per sample,
    so training loops cache them and only re-run the projections.
    """

    per_scale: list   # 5 tensors of shape (29, C_l * S_l * S_l)
    pooled: torch.Tensor  # (C_5,)


def stack_patches(patch_list) -> RegionPatches:
    """Batch per-sample RegionPatches into (B,29,flat) / (B,C) tensors."""
    per_scale = [
        torch.stack([p.per_scale[level] for p in patch_list])
        for level in range(len(patch_list[0].per_scale))
    ]
    pooled = torch.stack([p.pooled for p in patch_list])
    return RegionPatches(per_scale, pooled)


class RegionFeatureEncoder(nn.Module):
    """Projects per-scale ROI patches to a fixed width and concatenates them
    into one vector per region, plus a 30th vector from the pooled last map.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.config = config
        widths = [c * s * s for c, s in zip(config.backbone_channels, config.roi_sizes)]
        self.scale_projections = nn.ModuleList(
            nn.Linear(w, config.roi_proj_width) for w in widths
        )
        self.global_projection = nn.Linear(config.backbone_channels[-1],
                                           config.region_feature_width)
        self.flat_widths = widths

    def extract_patches(self, pyramid: FeaturePyramid, regions: RegionSet) -> RegionPatches:
        if not regions.all_detected():
            raise ContractError("region completion must run before feature extraction")
        boxes = torch.tensor(regions.coords, dtype=pyramid.maps[0].dtype)
        per_scale = []
        for fmap, size in zip(pyramid.maps, self.config.roi_sizes):
            patches = roi_align_many(fmap, boxes, size)
            per_scale.append(patches.reshape(boxes.shape[0], -1))
        pooled = pyramid.maps[-1].mean(dim=(1, 2))
        return RegionPatches(per_scale, pooled)

    def forward(self, patches: RegionPatches) -> torch.Tensor:
        """-> (30, W) region features, or (B, 30, W) for batched patches.

        Rows 0..28 are regional, row 29 is the global feature.
        """
        projected = [proj(p) for proj, p in zip(self.scale_projections, patches.per_scale)]
        regional = torch.cat(projected, dim=-1)
        global_feature = self.global_projection(patches.pooled).unsqueeze(-2)
        return torch.cat([regional, global_feature], dim=-2)

    def encode(self, pyramid: FeaturePyramid, regions: RegionSet) -> torch.Tensor:
        return self(self.extract_patches(pyramid, regions))


def aggregate_sentence_features(features: torch.Tensor, group_table: dict) -> list:
    """Concatenate each sentence group's region features in ascending region
    order. ``features`` is the (30, W) output of RegionFeatureEncoder;
    group indices are 1-based with 30 = global.
    """
    if features.shape[0] != GLOBAL_INDEX:
        raise ShapeError(f"expected {GLOBAL_INDEX} region features, got {features.shape[0]}")
    out = []
    for i in sorted(group_table):
        members = group_table[i]
        if any(not 1 <= j <= GLOBAL_INDEX for j in members):
            raise ShapeError(f"group {i} has region index outside 1..{GLOBAL_INDEX}")
        rows = [features[j - 1] for j in sorted(members)]
        out.append(torch.cat(rows))
    return out
