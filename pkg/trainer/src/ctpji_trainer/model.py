"""Split-attention CNN for single-channel 188x188 patches.

Each block splits its channels into ``radix`` groups per cardinal
group, pools the sum, and reweights the splits with per-channel softmax
attention before the residual add. With radix 1 the attention
degenerates to a sigmoid gate over the single split. Global average
pooling ahead of the classifier head keeps the network valid for any
input size.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn


class InvalidConfig(ValueError):
    """Model configuration violates its constraints."""


@dataclass(frozen=True)
class ModelConfig:
    radix: int = 2
    cardinality: int = 1
    stem_channels: int = 16
    stem_pool: bool = False  # extra stride-2 max pool after the stem
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    stage_blocks: tuple[int, ...] = (1, 1, 1, 1)
    input_size: int = 188
    num_classes: int = 2

    def validate(self) -> None:
        if self.radix < 1 or self.cardinality < 1:
            raise InvalidConfig("radix and cardinality must be >= 1")
        if len(self.stage_channels) != len(self.stage_blocks):
            raise InvalidConfig("stage_channels and stage_blocks must align")
        if not self.stage_channels:
            raise InvalidConfig("at least one stage is required")
        if min(self.stage_channels) < 1 or min(self.stage_blocks) < 1:
            raise InvalidConfig("stage sizes must be positive")
        if self.num_classes < 2:
            raise InvalidConfig("num_classes must be >= 2")


class SplitAttentionConv2d(nn.Module):
    """3x3 grouped conv producing ``radix`` splits, recombined by attention.

    The most recent attention weights are kept (detached) in
    ``last_attention`` with shape ``(batch, radix, channels)`` so the
    softmax-normalization invariant can be asserted from outside.
    """

    def __init__(self, in_channels, channels, radix, cardinality, stride=1):
        super().__init__()
        self.radix = radix
        self.channels = channels
        self.conv = nn.Conv2d(
            in_channels,
            channels * radix,
            kernel_size=3,
            stride=stride,
            padding=1,
            groups=cardinality * radix,
            bias=False,
        )
        self.bn = nn.BatchNorm2d(channels * radix)
        inter = max(channels // 2, 8)
        self.fc1 = nn.Conv2d(channels, inter, kernel_size=1, groups=cardinality)
        self.bn1 = nn.BatchNorm2d(inter)
        self.fc2 = nn.Conv2d(inter, channels * radix, kernel_size=1, groups=cardinality)
        self.last_attention: torch.Tensor | None = None

    def forward(self, x):
        x = F.relu(self.bn(self.conv(x)))
        batch = x.shape[0]
        if self.radix > 1:
            splits = x.view(batch, self.radix, self.channels, *x.shape[2:])
            gap = splits.sum(dim=1)
        else:
            gap = x
        gap = F.adaptive_avg_pool2d(gap, 1)
        att = self.fc2(F.relu(self.bn1(self.fc1(gap))))
        if self.radix > 1:
            att = att.view(batch, self.radix, self.channels)
            att = F.softmax(att, dim=1)
            self.last_attention = att.detach()
            out = (splits * att.view(batch, self.radix, self.channels, 1, 1)).sum(dim=1)
        else:
            att = torch.sigmoid(att)
            self.last_attention = att.detach().view(batch, 1, self.channels)
            out = x * att
        return out


class SplitAttnBlock(nn.Module):
    """Residual bottleneck with the split-attention conv in the middle."""

    def __init__(self, in_channels, channels, stride, radix, cardinality):
        super().__init__()
        # grouped split conv needs its width divisible by radix * cardinality
        group = radix * cardinality
        mid = max(channels // 2, 8)
        mid = ((mid + group - 1) // group) * group
        self.conv1 = nn.Conv2d(in_channels, mid, kernel_size=1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.attn = SplitAttentionConv2d(mid, mid, radix, cardinality, stride=stride)
        self.conv3 = nn.Conv2d(mid, channels, kernel_size=1, bias=False)
        self.bn3 = nn.BatchNorm2d(channels)
        if stride != 1 or in_channels != channels:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, channels, kernel_size=1, stride=stride, bias=False),
                nn.BatchNorm2d(channels),
            )
        else:
            self.downsample = None

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.attn(out)
        out = self.bn3(self.conv3(out))
        return F.relu(out + identity)


class SplitAttnNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        stem_layers = [
            nn.Conv2d(1, cfg.stem_channels, kernel_size=3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(cfg.stem_channels),
            nn.ReLU(inplace=True),
        ]
        if cfg.stem_pool:
            stem_layers.append(nn.MaxPool2d(kernel_size=3, stride=2, padding=1))
        self.stem = nn.Sequential(*stem_layers)
        stages = []
        in_ch = cfg.stem_channels
        for stage_index, (channels, blocks) in enumerate(
            zip(cfg.stage_channels, cfg.stage_blocks)
        ):
            for block_index in range(blocks):
                stride = 2 if (block_index == 0 and stage_index > 0) else 1
                stages.append(
                    SplitAttnBlock(in_ch, channels, stride, cfg.radix, cfg.cardinality)
                )
                in_ch = channels
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(in_ch, cfg.num_classes)

    @property
    def last_stage(self) -> nn.Module:
        """Default target layer for class-activation maps."""
        return self.stages[-1]

    def forward(self, x):
        x = self.stem(x)
        x = self.stages(x)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.head(x)

    def attention_modules(self):
        return [m for m in self.modules() if isinstance(m, SplitAttentionConv2d)]


def build_model(cfg: ModelConfig) -> SplitAttnNet:
    cfg.validate()
    return SplitAttnNet(cfg)


def tiny_config(**overrides) -> ModelConfig:
    """A minimal config for smoke tests and quick experiments."""
    defaults = dict(
        radix=2,
        cardinality=1,
        stem_channels=8,
        stage_channels=(8, 16),
        stage_blocks=(1, 1),
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


def save_checkpoint(model: SplitAttnNet, path: Path, extra: dict | None = None) -> None:
    payload = {
        "model_config": asdict(model.cfg),
        "state_dict": model.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path: Path) -> tuple[SplitAttnNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    raw_cfg = dict(payload["model_config"])
    raw_cfg["stage_channels"] = tuple(raw_cfg["stage_channels"])
    raw_cfg["stage_blocks"] = tuple(raw_cfg["stage_blocks"])
    model = build_model(ModelConfig(**raw_cfg))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})
