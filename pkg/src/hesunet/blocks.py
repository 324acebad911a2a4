"""Building blocks of the segmentation network.

Each block is a self-contained ``nn.Module`` with an exact shape
contract, built from the operations in :mod:`hesunet.ops`:

* :class:`GHPA` - grouped Hadamard-product attention, a linear-cost
  stand-in for multi-axis attention,
* :class:`CBAM` - sequential channel and spatial attention gating,
* :class:`MDB` - multi-directional downsampling via Haar subbands,
* :class:`EncoderBlock` - feature extraction + attention + downsampling,
* :class:`DeepBridge` - the GHPA+CBAM stage that doubles the deepest
  encoder features,
* :class:`MAB` - multi-scale aggregation of all encoder levels into one
  global feature map,
* :class:`MUB` - multi-scale upsampling that redistributes the global
  feature to every decoder level,
* :class:`GAM` - global attention fusing encoder features, the global
  stream, and the running prediction,
* :class:`DecoderBlock` - channel halving, 2x upsampling, and a
  single-channel prediction head.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from . import ops

GRID_INIT_STD = 0.02


@dataclass(frozen=True)
class StageShapeSpec:
    """Expected shapes at pyramid level ``i`` for base width ``c0`` and input ``(h, w)``.

    With ``c0=32`` and 512x512 inputs these reduce to the reference
    channel ladder [32, 64, 128, 256, 512].
    """

    level: int
    encoder: tuple[int, int, int]
    global_feature: tuple[int, int, int]
    prediction: tuple[int, int, int]

    @classmethod
    def for_level(cls, level: int, c0: int, h: int, w: int) -> "StageShapeSpec":
        if not 1 <= level <= 5:
            raise ValueError(f"level must be in [1, 5], got {level}")
        if h % 64 or w % 64:
            raise ValueError(f"input size {h}x{w} must be divisible by 64")
        return cls(
            level=level,
            encoder=(c0 * 2 ** (level - 1), h >> level, w >> level),
            global_feature=(c0 * 2**level, h >> (level + 1), w >> (level + 1)),
            prediction=(1, h >> level, w >> level),
        )


class ChannelLayerNorm(nn.Module):
    """Layer normalization over the channel axis at each spatial location."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class GHPA(nn.Module):
    """Grouped Hadamard-product attention.

    The input is normalized (one norm group per branch) and split into
    four channel groups. Three groups are modulated by learnable grids
    resized to the feature map: a full 2-D grid, a height profile
    broadcast over width, and a width profile broadcast over height.
    Every group then passes through a depthwise 3x3 convolution, and a
    1x1 convolution mixes the concatenated branches to the output width.
    Parameter count stays linear in the grid size and channel count, with
    no dense spatial attention term.
    """

    def __init__(self, in_channels: int, out_channels: int, grid: int = 8):
        super().__init__()
        if in_channels % 4:
            raise ValueError(f"GHPA needs in_channels divisible by 4, got {in_channels}")
        q = in_channels // 4
        self.norm = nn.GroupNorm(4, in_channels)
        self.grid_hw = nn.Parameter(torch.empty(q, grid, grid).normal_(std=GRID_INIT_STD))
        self.grid_h = nn.Parameter(torch.empty(q, grid).normal_(std=GRID_INIT_STD))
        self.grid_w = nn.Parameter(torch.empty(q, grid).normal_(std=GRID_INIT_STD))
        self.depthwise = nn.ModuleList(nn.Conv2d(q, q, 3, padding=1, groups=q) for _ in range(4))
        self.mix = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2], x.shape[-1]
        x1, x2, x3, x4 = torch.chunk(self.norm(x), 4, dim=-3)
        plane = ops.bilinear_resize(self.grid_hw, h, w)
        rows = ops.bilinear_resize(self.grid_h.unsqueeze(-1), h, 1)
        cols = ops.bilinear_resize(self.grid_w.unsqueeze(-2), 1, w)
        branches = (
            self.depthwise[0](x1 * plane),
            self.depthwise[1](x2 * rows),
            self.depthwise[2](x3 * cols),
            self.depthwise[3](x4),
        )
        return self.mix(ops.concat(branches))


class CBAM(nn.Module):
    """Channel attention followed by spatial attention, both sigmoid gated."""

    def __init__(self, channels: int):
        super().__init__()
        if channels < 2:
            raise ValueError(f"CBAM needs at least 2 channels, got {channels}")
        reduction = min(16, channels // 2)
        hidden = max(1, channels // reduction)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(),
            nn.Conv2d(hidden, channels, 1),
        )
        self.spatial = nn.Conv2d(2, 1, 7, padding=3)

    def forward(self, x: Tensor) -> Tensor:
        avg = x.mean(dim=(-2, -1), keepdim=True)
        peak = x.amax(dim=(-2, -1), keepdim=True)
        x = x * torch.sigmoid(self.mlp(avg) + self.mlp(peak))
        pooled = torch.cat([x.mean(dim=-3, keepdim=True), x.amax(dim=-3, keepdim=True)], dim=-3)
        return x * torch.sigmoid(self.spatial(pooled))


class MDB(nn.Module):
    """Multi-directional downsampling block.

    A Haar transform folds each 2x2 neighborhood into four half-resolution
    subbands (approximation plus vertical, horizontal, and diagonal
    detail). Unlike max pooling, the stacked subbands still determine the
    input exactly; a 1x1 convolution then selects across them, followed by
    batch norm and ReLU.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.mix = nn.Conv2d(4 * channels, channels, 1)
        self.bn = nn.BatchNorm2d(channels, eps=1e-5, momentum=0.1)

    def subbands(self, x: Tensor) -> Tensor:
        """The lossless pre-convolution representation: [LL, LV, LH, LD] stacked."""
        ll, lh, lv, ld = ops.haar_dwt2(x)
        return ops.concat((ll, lv, lh, ld))

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.mix(self.subbands(x))))


class EncoderBlock(nn.Module):
    """One encoder level: feature extraction, CBAM, then 2x downsampling.

    Level 1 extracts features with a plain 3x3 convolution (depthwise
    attention is weak on raw intensities); deeper levels use GHPA. The
    downsampler is an MDB, or 2x2 max pooling when ablated.
    """

    def __init__(self, level: int, in_channels: int, out_channels: int, grid: int = 8, use_mdb: bool = True):
        super().__init__()
        self.level = level
        if level == 1:
            self.feature: nn.Module = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        else:
            self.feature = GHPA(in_channels, out_channels, grid)
        self.cbam = CBAM(out_channels)
        self.mdb = MDB(out_channels) if use_mdb else None

    def forward(self, x: Tensor) -> Tensor:
        x = self.cbam(self.feature(x))
        if self.mdb is not None:
            return self.mdb(x)
        return ops.max_pool2x2(x)


class DeepBridge(nn.Module):
    """GHPA + CBAM applied to the deepest encoder output, doubling its width."""

    def __init__(self, in_channels: int, out_channels: int, grid: int = 8):
        super().__init__()
        self.ghpa = GHPA(in_channels, out_channels, grid)
        self.cbam = CBAM(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.cbam(self.ghpa(x))


class MAB(nn.Module):
    """Multi-scale aggregation block.

    Every encoder level is adaptively pooled to the deepest spatial size,
    projected to the shared width with a 1x1 convolution, and summed
    together with the bridged deep features into one global feature map.
    """

    def __init__(self, c0: int, out_channels: int):
        super().__init__()
        self.project = nn.ModuleList(nn.Conv2d(c0 * 2**i, out_channels, 1) for i in range(5))

    def forward(self, encoder_feats: list[Tensor], bridged: Tensor) -> Tensor:
        h, w = bridged.shape[-2], bridged.shape[-1]
        total = bridged
        for project, feat in zip(self.project, encoder_feats):
            total = total + project(ops.adaptive_avg_pool(feat, h, w))
        return total


class MUB(nn.Module):
    """Multi-scale upsampling block.

    The trunk expands the global feature fourfold in channels with two
    GHPA stages and trades the extra channels for a 2x larger grid via
    pixel shuffle. Two gradient-friendly side paths (GHPA without shuffle,
    and an identity skip) are summed at the original resolution, bilinearly
    upsampled, and added to the trunk. Per-level 1x1 heads plus bilinear
    resizing then emit one global stream per pyramid level.
    """

    def __init__(self, channels: int, c0: int, grid: int = 8):
        super().__init__()
        self.expand1 = GHPA(channels, 2 * channels, grid)
        self.expand2 = GHPA(2 * channels, 4 * channels, grid)
        self.refine = GHPA(channels, channels, grid)
        self.heads = nn.ModuleList(nn.Conv2d(channels, c0 * 2**i, 1) for i in range(1, 6))

    def merged(self, f: Tensor) -> Tensor:
        """Trunk + upsampled side paths, before the per-level heads."""
        trunk = ops.pixel_shuffle(self.expand2(self.expand1(f)), 2)
        side = self.refine(f) + f
        return trunk + ops.bilinear_resize(side, trunk.shape[-2], trunk.shape[-1])

    def forward(self, f: Tensor, out_sizes: list[tuple[int, int]]) -> list[Tensor]:
        merged = self.merged(f)
        return [
            ops.bilinear_resize(head(merged), h, w)
            for head, (h, w) in zip(self.heads, out_sizes)
        ]


class GAM(nn.Module):
    """Global attention module for one pyramid level.

    The global stream is projected to the encoder width and resized to the
    encoder grid. Both maps are split into four channel groups; each group
    is concatenated with the running prediction logits, layer normalized,
    and passed through a 3x3 convolution with a group-specific dilation so
    the four groups see different receptive fields. A 1x1 convolution
    fuses the groups back to the encoder width.
    """

    def __init__(self, channels: int, global_channels: int, dilations: tuple[int, int, int, int] = (1, 2, 3, 4)):
        super().__init__()
        if channels % 4:
            raise ValueError(f"GAM needs channels divisible by 4, got {channels}")
        if len(dilations) != 4:
            raise ValueError("GAM needs exactly 4 dilation rates")
        mixed = 2 * (channels // 4) + 1
        self.adjust = nn.Conv2d(global_channels, channels, 1)
        self.norms = nn.ModuleList(ChannelLayerNorm(mixed) for _ in range(4))
        self.dilated = nn.ModuleList(
            nn.Conv2d(mixed, mixed, 3, padding=d, dilation=d) for d in dilations
        )
        self.fuse = nn.Conv2d(4 * mixed, channels, 1)

    def group_features(self, encoder_feat: Tensor, global_feat: Tensor, prediction: Tensor) -> list[Tensor]:
        """Per-group features before fusion (group j only sees its own slice)."""
        h, w = encoder_feat.shape[-2], encoder_feat.shape[-1]
        adjusted = ops.bilinear_resize(self.adjust(global_feat), h, w)
        enc_groups = torch.chunk(encoder_feat, 4, dim=-3)
        glob_groups = torch.chunk(adjusted, 4, dim=-3)
        outputs = []
        for j in range(4):
            mixed = ops.concat((enc_groups[j], glob_groups[j], prediction))
            outputs.append(self.dilated[j](self.norms[j](mixed)))
        return outputs

    def forward(self, encoder_feat: Tensor, global_feat: Tensor, prediction: Tensor) -> Tensor:
        return self.fuse(ops.concat(self.group_features(encoder_feat, global_feat, prediction)))


class DecoderBlock(nn.Module):
    """One decoder level: halve channels, upsample 2x, and predict.

    Level 1 uses a plain 3x3 convolution, deeper levels GHPA. The
    prediction head emits raw logits; consumers apply the sigmoid.
    """

    def __init__(self, level: int, in_channels: int, grid: int = 8):
        super().__init__()
        if not 1 <= level <= 6:
            raise ValueError(f"decoder level must be in [1, 6], got {level}")
        self.level = level
        out_channels = in_channels // 2
        if level == 1:
            self.feature: nn.Module = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        else:
            self.feature = GHPA(in_channels, out_channels, grid)
        self.head = nn.Conv2d(out_channels, 1, 1)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        y = self.feature(x)
        upsampled = ops.bilinear_resize(y, 2 * y.shape[-2], 2 * y.shape[-1])
        return upsampled, self.head(upsampled)
