"""Multi-surrogate fusion of per-support mask features.

Four symmetric aggregations over the n 2-channel mask features --
soft intersection (coherence), soft union (diversity), channel
attention, and plain averaging -- are stacked along a depth axis and
collapsed by a 3D convolution into one fused feature map. Every
surrogate is invariant to the order of the supports.
"""

import torch
from torch import nn

from .backbone import group_norm
from .errors import InputError


def _stack(masks) -> torch.Tensor:
    if isinstance(masks, torch.Tensor):
        if masks.dim() != 4:
            raise InputError("expected a stack of (2, h, w) mask features")
        stacked = masks
    else:
        masks = list(masks)
        if not masks:
            raise InputError("at least one mask feature is required")
        stacked = torch.stack(masks, dim=0)
    if stacked.shape[0] == 0:
        raise InputError("at least one mask feature is required")
    return stacked


def coherence(masks) -> torch.Tensor:
    """Element-wise product of channel-softmaxed masks across supports."""
    m = _stack(masks)
    return torch.softmax(m, dim=1).prod(dim=0)


def diversity(masks) -> torch.Tensor:
    """Element-wise sum of channel-softmaxed masks across supports."""
    m = _stack(masks)
    return torch.softmax(m, dim=1).sum(dim=0)


def channel_attention(masks) -> torch.Tensor:
    """Per-support global channel weighting, averaged over supports.

    Each mask feature is pooled spatially to a 2-vector, softmaxed over
    the channel axis, and broadcast-multiplied back onto itself; the n
    reweighted maps are then averaged.
    """
    m = _stack(masks)
    weights = torch.softmax(m.mean(dim=(2, 3)), dim=1)      # (n, 2)
    return (m * weights[:, :, None, None]).mean(dim=0)


def average(masks) -> torch.Tensor:
    """Arithmetic mean of the raw mask-feature logits."""
    return _stack(masks).mean(dim=0)


def surrogate_bundle(masks) -> torch.Tensor:
    """Stack the four surrogate maps along a new depth axis.

    Returns (2, 4, h, w): channel dim first, depth = [coherence,
    diversity, channel attention, average].
    """
    m = _stack(masks)
    parts = [coherence(m), diversity(m), channel_attention(m), average(m)]
    return torch.stack(parts, dim=1)


class SurrogateFusion(nn.Module):
    """3D convolution collapsing the surrogate depth axis into features.

    The kernel spans the full depth (4) with no depth padding, so the
    output is a single (out_channels, h, w) map.
    """

    def __init__(self, out_channels: int = 16, spatial_kernel: int = 3):
        super().__init__()
        pad = spatial_kernel // 2
        self.conv = nn.Conv3d(2, out_channels, (4, spatial_kernel, spatial_kernel),
                              padding=(0, pad, pad))
        self.norm = group_norm(out_channels)
        self.act = nn.GELU()

    def forward(self, bundle: torch.Tensor) -> torch.Tensor:
        if bundle.shape[:2] != (2, 4):
            raise InputError("bundle must be (2, 4, h, w)")
        x = self.conv(bundle.unsqueeze(0)).squeeze(2)  # (1, c_f, h, w)
        return self.act(self.norm(x)).squeeze(0)

    def fuse(self, masks) -> torch.Tensor:
        """Mask features -> fused map, in one call."""
        return self.forward(surrogate_bundle(masks))
