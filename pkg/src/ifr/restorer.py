"""Restoration branch: recognizer-feature fusion, RCAN-lite trunk, reconstruction head."""

import torch
import torch.nn as nn
import torch.nn.functional as F

RRF_MODES = ("on", "detach", "off")


def validate_stages(stages):
    stages = tuple(int(s) for s in stages)
    if len(stages) != 3 or len(set(stages)) != 3:
        raise ValueError(f"fusion needs exactly three distinct stages, got {stages}")
    if any(not 1 <= s <= 5 for s in stages):
        raise ValueError(f"fusion stages must lie in 1..5, got {stages}")
    return tuple(sorted(stages))


class Fusion(nn.Module):
    """Fuse a shallow image feature with upsampled recognizer stage features.

    ``mode="detach"`` blocks gradients into the recognizer; ``mode="off"``
    additionally zeroes the recognizer contribution so only the shallow
    feature reaches the projection.
    """

    def __init__(self, stage_channels, channels=64, stages=(1, 3, 5), mode="on"):
        super().__init__()
        if channels % 4:
            raise ValueError(f"restorer width must be a multiple of 4, got {channels}")
        if mode not in RRF_MODES:
            raise ValueError(f"fusion mode must be one of {RRF_MODES}, got {mode!r}")
        self.stages = validate_stages(stages)
        self.mode = mode
        self.shallow = nn.Conv2d(1, channels, 3, 1, 1)
        self.reduce = nn.ModuleDict({
            str(s): nn.Conv2d(stage_channels[s - 1], channels // 4, 1) for s in self.stages})
        self.project = nn.Conv2d(channels + 3 * (channels // 4), channels, 1)

    def forward(self, img, feats):
        size = img.shape[-2:]
        maps = []
        for s in self.stages:
            f = feats[s - 1]
            if self.mode != "on":
                f = f.detach()
            m = F.interpolate(self.reduce[str(s)](f), size=size, mode="bilinear",
                              align_corners=False)
            if self.mode == "off":
                m = torch.zeros_like(m)
            maps.append(m)
        maps.append(self.shallow(img))
        return self.project(torch.cat(maps, dim=1))


class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction=4):
        super().__init__()
        self.squeeze = nn.Conv2d(channels, channels // reduction, 1)
        self.relu = nn.ReLU()
        self.excite = nn.Conv2d(channels // reduction, channels, 1)

    def scales(self, x):
        y = F.adaptive_avg_pool2d(x, 1)
        return torch.sigmoid(self.excite(self.relu(self.squeeze(y))))

    def forward(self, x):
        return x * self.scales(x)


class RCAB(nn.Module):
    """Residual channel attention block."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.relu = nn.ReLU()
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.attention = ChannelAttention(channels, reduction)

    def forward(self, x):
        return x + self.attention(self.conv2(self.relu(self.conv1(x))))


class ResidualGroup(nn.Module):
    def __init__(self, channels, n_blocks=2, reduction=4):
        super().__init__()
        self.blocks = nn.Sequential(*[RCAB(channels, reduction) for _ in range(n_blocks)])

    def forward(self, x):
        return x + self.blocks(x)


class Restorer(nn.Module):
    def __init__(self, stage_channels, channels=64, stages=(1, 3, 5), mode="on", n_groups=2,
                 n_blocks=2, long_skip=True):
        super().__init__()
        self.fusion = Fusion(stage_channels, channels, stages, mode)
        self.groups = nn.Sequential(*[ResidualGroup(channels, n_blocks) for _ in range(n_groups)])
        self.long_skip = long_skip
        self.head = nn.Conv2d(channels, 1, 3, 1, 1)

    def fuse(self, img, feats):
        return self.fusion(img, feats)

    def restore(self, fused):
        x = self.groups(fused)
        if self.long_skip:
            x = x + fused
        return torch.sigmoid(self.head(x))

    def forward(self, img, feats):
        return self.restore(self.fuse(img, feats))


def pixel_loss(restored, hq, norm="l1"):
    """Per-pixel error between each restored step and ``hq``, averaged over steps."""
    if isinstance(restored, torch.Tensor):
        restored = [restored]
    if not restored:
        raise ValueError("pixel_loss needs at least one restored image")
    if norm not in ("l1", "l2"):
        raise ValueError(f"pixel norm must be 'l1' or 'l2', got {norm!r}")
    total = 0.0
    for r in restored:
        if r.shape != hq.shape:
            raise ValueError(f"shape mismatch: restored {tuple(r.shape)} vs hq {tuple(hq.shape)}")
        diff = hq - r
        total = total + (diff.abs() if norm == "l1" else diff * diff).mean()
    return total / len(restored)
