"""Coarse stage: reference encoder, style vector and AdaIN-driven gray-image decoder."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import REF_STRIDES, VGG_STAGE_CONVS, ModelConfig

ADAIN_EPS = 1e-5


@dataclass
class FeaturePyramid:
    levels: list[torch.Tensor]
    source_tag: str = "reference"

    def __getitem__(self, i):
        return self.levels[i]

    def __len__(self):
        return len(self.levels)

    @property
    def shapes(self):
        return [tuple(t.shape[1:]) for t in self.levels]


@dataclass
class StyleVector:
    """Per-site AdaIN parameters; ``scales[i]`` and ``biases[i]`` are ``(B, C_i)``."""

    scales: list[torch.Tensor]
    biases: list[torch.Tensor]

    @classmethod
    def split(cls, flat: torch.Tensor, channels) -> "StyleVector":
        scales, biases = [], []
        offset = 0
        for c in channels:
            scales.append(flat[:, offset : offset + c])
            biases.append(flat[:, offset + c : offset + 2 * c])
            offset += 2 * c
        if offset != flat.shape[1]:
            raise ValueError(f"style vector has {flat.shape[1]} entries, sites need {offset}")
        return cls(scales, biases)


def adain(x: torch.Tensor, y_s: torch.Tensor, y_b: torch.Tensor, eps: float = ADAIN_EPS) -> torch.Tensor:
    """Renormalize each channel of ``x`` (B, C, H, W) to scale ``y_s`` and shift ``y_b`` (B, C).

    Statistics are taken over spatial positions only.
    """
    if y_s.shape != y_b.shape or y_s.shape[-1] != x.shape[1]:
        raise ValueError(f"AdaIN parameters {tuple(y_s.shape)} do not match {x.shape[1]} channels")
    mu = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    return y_s[..., None, None] * (x - mu) / torch.sqrt(var + eps) + y_b[..., None, None]


class ResidualBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1)
        self.skip = nn.Conv2d(c_in, c_out, 1, stride) if (stride != 1 or c_in != c_out) else nn.Identity()

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), 0.2)
        return F.leaky_relu(self.conv2(h) + self.skip(x), 0.2)


class ResidualEncoder(nn.Module):
    """Six residual blocks; level spatial sizes 1, 1/2, 1/4, 1/4, 1/8, 1/8 of the input."""

    def __init__(self, in_channels: int, widths, tag: str = "reference"):
        super().__init__()
        self.in_channels = in_channels
        self.tag = tag
        blocks, c = [], in_channels
        for w, s in zip(widths, REF_STRIDES):
            blocks.append(ResidualBlock(c, w, s))
            c = w
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor, tag: str | None = None) -> FeaturePyramid:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"encoder expects (B, {self.in_channels}, H, W) input, got {tuple(x.shape)}")
        levels = []
        for block in self.blocks:
            x = block(x)
            levels.append(x)
        return FeaturePyramid(levels, tag or self.tag)


class StyleMLP(nn.Module):
    """Pooled last pyramid level -> concatenated (scale, bias) per AdaIN site."""

    def __init__(self, c_in: int, site_channels, hidden: int = 256):
        super().__init__()
        self.site_channels = tuple(site_channels)
        out = 2 * sum(self.site_channels)
        self.net = nn.Sequential(
            nn.Linear(c_in, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, out)
        )
        last = self.net[-1]
        with torch.no_grad():
            last.weight.mul_(0.1)
            last.bias.copy_(self.identity_bias())

    def identity_bias(self) -> torch.Tensor:
        parts = []
        for c in self.site_channels:
            parts += [torch.ones(c), torch.zeros(c)]
        return torch.cat(parts)

    def forward(self, last_level: torch.Tensor) -> torch.Tensor:
        return self.net(last_level.mean(dim=(2, 3)))


def style_from_features(pyramid: FeaturePyramid, mlp: StyleMLP) -> StyleVector:
    return StyleVector.split(mlp(pyramid[-1]), mlp.site_channels)


class VGGGrayEncoder(nn.Module):
    """VGG19-style conv stages on a single luminance channel.

    Returns the activations at the stage cut points (full, 1/2, 1/4, 1/8, 1/16).
    """

    def __init__(self, widths):
        super().__init__()
        stages, c = [], 1
        for w, n in zip(widths, VGG_STAGE_CONVS):
            layers = []
            for _ in range(n):
                layers += [nn.Conv2d(c, w, 3, 1, 1), nn.ReLU()]
                c = w
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)

    def forward(self, gray):
        feats, x = [], gray
        for i, stage in enumerate(self.stages):
            if i:
                x = F.max_pool2d(x, 2)
            x = stage(x)
            feats.append(x)
        return feats


class AdaINDecoder(nn.Module):
    """Mirror of the gray encoder; AdaIN follows every convolution."""

    def __init__(self, widths):
        super().__init__()
        widths = tuple(widths)
        convs = []
        c = widths[-1]
        for skip in reversed(widths[:-1]):
            convs.append(nn.Conv2d(c + skip, skip, 3, 1, 1))
            c = skip
        self.convs = nn.ModuleList(convs)
        self.site_channels = tuple(conv.out_channels for conv in self.convs)
        self.head = nn.Conv2d(c, 2, 1)

    def forward(self, feats, style: StyleVector):
        x = feats[-1]
        for i, (conv, skip) in enumerate(zip(self.convs, reversed(feats[:-1]))):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = conv(torch.cat([x, skip], 1))
            x = F.relu(adain(x, style.scales[i], style.biases[i]))
        return torch.tanh(self.head(x))


class GlobalColorTransfer(nn.Module):
    def __init__(self, config: ModelConfig, ref_last_channels: int):
        super().__init__()
        self.encoder = VGGGrayEncoder(config.vgg_widths)
        self.decoder = AdaINDecoder(config.vgg_widths)
        self.style_mlp = StyleMLP(ref_last_channels, self.decoder.site_channels, config.mlp_hidden)

    def forward(self, target_L: torch.Tensor, style: StyleVector) -> torch.Tensor:
        """Coarse normalized ab planes ``(B, 2, H, W)`` for normalized luminance ``(B, 1, H, W)``."""
        return self.decoder(self.encoder(target_L), style)
