"""Multi-scale feature extraction from 2D slices.

A small trainable convolutional backbone stands in for the heavy
pretrained extractors common in few-shot segmentation pipelines: a
stride-4 stem followed by stride-2 pooled stages, each conv + group
norm + GELU. An adapter accepts externally precomputed pyramids so a
stronger extractor can be dropped in without touching the rest of the
pipeline.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .errors import ConfigError, InputError


@dataclass
class FeaturePyramid:
    """Per-scale feature maps of one slice.

    levels[j] has shape (channels[j], H/strides[j], W/strides[j]);
    strides are strictly increasing.
    """

    levels: list[torch.Tensor]
    strides: tuple[int, ...]

    def __post_init__(self):
        if len(self.levels) != len(self.strides):
            raise InputError("one stride per pyramid level required")
        if any(s2 <= s1 for s1, s2 in zip(self.strides, self.strides[1:])):
            raise InputError("pyramid strides must be strictly increasing")


@dataclass
class PooledDescriptor:
    """Global average of the deepest pyramid level, L2-normalized.

    ``zero_norm`` flags the degenerate all-zero input, in which case the
    vector is left as zeros instead of dividing by zero.
    """

    vector: np.ndarray
    zero_norm: bool = False


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(channels, 8), channels)


class ToyBackbone(nn.Module):
    """Stride-4 stem + stride-2 stages, emitting one feature map per stage."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config.channels
        self.stem = nn.Sequential(
            nn.Conv2d(config.in_channels, c[0], 3, stride=2, padding=1),
            group_norm(c[0]),
            nn.GELU(),
            nn.Conv2d(c[0], c[0], 3, stride=2, padding=1),
            group_norm(c[0]),
            nn.GELU(),
        )
        stages = []
        for c_in, c_out in zip(c, c[1:]):
            stages.append(nn.Sequential(
                nn.AvgPool2d(2),
                nn.Conv2d(c_in, c_out, 3, padding=1),
                group_norm(c_out),
                nn.GELU(),
            ))
        self.stages = nn.ModuleList(stages)

    def forward(self, img: torch.Tensor) -> FeaturePyramid:
        """Extract the feature pyramid of one slice.

        ``img`` is (H, W) or (C, H, W); grayscale input is replicated to
        the channel count the stem expects.
        """
        if img.dim() == 2:
            img = img.unsqueeze(0)
        if img.shape[0] == 1 and self.config.in_channels > 1:
            img = img.expand(self.config.in_channels, -1, -1)
        if img.shape[0] != self.config.in_channels:
            raise ConfigError(
                f"expected {self.config.in_channels} input channels, got {img.shape[0]}"
            )
        h, w = img.shape[-2:]
        if h != self.config.input_size or w != self.config.input_size:
            raise ConfigError(
                f"input is {h}x{w}, configured size is {self.config.input_size}"
            )
        if not torch.isfinite(img).all():
            raise InputError("input image contains non-finite values")

        x = self.stem(img.unsqueeze(0))
        levels = [x.squeeze(0)]
        for stage in self.stages:
            x = stage(x)
            levels.append(x.squeeze(0))
        return FeaturePyramid(levels=levels, strides=self.config.strides)


class PrecomputedBackbone(nn.Module):
    """Adapter: serves externally computed pyramids keyed by the caller.

    ``lookup`` maps an image (by ``id()`` of the array/tensor the caller
    registered) to its pyramid. Lets real pretrained features replace the
    toy backbone without changing downstream modules.
    """

    def __init__(self, strides: tuple[int, ...]):
        super().__init__()
        self.strides = strides
        self._table: dict[int, FeaturePyramid] = {}

    def register(self, img, pyramid: FeaturePyramid) -> None:
        if pyramid.strides != self.strides:
            raise ConfigError("registered pyramid strides do not match adapter config")
        self._table[id(img)] = pyramid

    def forward(self, img) -> FeaturePyramid:
        try:
            return self._table[id(img)]
        except KeyError:
            raise InputError("no precomputed pyramid registered for this image") from None


def pooled_descriptor(pyr: FeaturePyramid) -> PooledDescriptor:
    """Spatial mean of the deepest level, L2-normalized.

    Used for cosine-similarity retrieval; computed without gradients.
    """
    if not pyr.levels:
        raise InputError("empty pyramid")
    with torch.no_grad():
        v = pyr.levels[-1].mean(dim=(-2, -1))
        norm = torch.linalg.vector_norm(v)
        if norm == 0:
            return PooledDescriptor(vector=v.cpu().numpy().astype(np.float32), zero_norm=True)
        v = v / norm
    return PooledDescriptor(vector=v.cpu().numpy().astype(np.float32), zero_norm=False)


def cosine_similarity(a: PooledDescriptor, b: PooledDescriptor) -> float:
    return float(np.dot(a.vector.astype(np.float64), b.vector.astype(np.float64)))
