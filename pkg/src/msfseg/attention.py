"""Cross attention between query features and support feature/mask pairs.

Every pixel of a feature map is one token. Keys come from support
features, values from the support masks; slices of a support sequence
are concatenated token-wise, so one attention call aggregates over the
whole sequence. Per-scale attention maps are upsampled to the working
stride, summed, and refined by a small conv head into a 2-channel
(fg/bg) mask feature.
"""

import math
from functools import lru_cache

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FeaturePyramid, group_norm
from .errors import InputError


@lru_cache(maxsize=64)
def _sinusoid_table(length: int, dim: int) -> torch.Tensor:
    """(length, dim) sin/cos table with geometric frequencies, float64."""
    i = torch.arange(dim, dtype=torch.float64)
    freq = torch.pow(torch.tensor(10000.0, dtype=torch.float64), -(i // 2 * 2) / max(dim, 1))
    ang = torch.arange(length, dtype=torch.float64)[:, None] * freq[None, :]
    return torch.where(i % 2 == 0, torch.sin(ang), torch.cos(ang))


@lru_cache(maxsize=64)
def position_encoding(h: int, w: int, dim: int) -> torch.Tensor:
    """(h*w, dim) 2D sinusoidal encoding; first half rows, second half columns.

    Token order is row-major, matching the flattening of feature maps.
    """
    d_row = dim // 2
    d_col = dim - d_row
    rows = _sinusoid_table(h, d_row)
    cols = _sinusoid_table(w, d_col)
    pe = torch.empty(h * w, dim, dtype=torch.float64)
    pe[:, :d_row] = rows[:, None, :].expand(h, w, d_row).reshape(h * w, d_row)
    pe[:, d_row:] = cols[None, :, :].expand(h, w, d_col).reshape(h * w, d_col)
    return pe


@lru_cache(maxsize=256)
def slice_offset_encoding(slice_index: int, dim: int) -> torch.Tensor:
    """(dim,) sinusoidal offset distinguishing slices within a sequence."""
    return _sinusoid_table(slice_index + 1, dim)[slice_index]


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    rows, dim = x.shape
    if dim % heads != 0:
        raise InputError(f"embedding width {dim} not divisible by heads={heads}")
    return x.reshape(rows, heads, dim // heads).transpose(0, 1)  # (heads, rows, d_h)


def attention_weights(Q: torch.Tensor, K: torch.Tensor, heads: int) -> torch.Tensor:
    """Per-head softmax(QK^T/sqrt(d_h)) as a (heads, rows_q, rows_k) tensor."""
    if Q.shape[1] != K.shape[1]:
        raise InputError("Q and K must share embedding width")
    qh, kh = _split_heads(Q, heads), _split_heads(K, heads)
    scores = qh @ kh.transpose(-2, -1) / math.sqrt(qh.shape[-1])
    return torch.softmax(scores, dim=-1)


def scaled_attention(
    Q: torch.Tensor,
    K: torch.Tensor,
    V: torch.Tensor,
    heads: int,
    out_proj: nn.Module | None = None,
    chunk: int = 4096,
) -> torch.Tensor:
    """Multi-head scaled dot-product attention merged to one value per query.

    Q: (rows_q, dim), K: (rows_k, dim), V: (rows_k, dim). Rows of the
    per-head attention are convex combinations of the corresponding V
    head slices. Heads are merged by ``out_proj`` (dim -> 1); with
    ``out_proj=None`` they are merged by averaging, which keeps outputs
    inside [min V, max V] when V carries a broadcast scalar per token.
    Queries are processed in chunks to bound memory on large maps.
    """
    if Q.shape[1] != K.shape[1]:
        raise InputError("Q and K must share embedding width")
    if V.shape[0] != K.shape[0]:
        raise InputError("V must have one row per K row")
    qh = _split_heads(Q, heads)
    kh = _split_heads(K, heads)
    vh = _split_heads(V, heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    outs = []
    for start in range(0, Q.shape[0], chunk):
        scores = qh[:, start:start + chunk] @ kh.transpose(-2, -1) * scale
        attn = torch.softmax(scores, dim=-1)
        outs.append(attn @ vh)                        # (heads, chunk, d_h)
    merged = torch.cat(outs, dim=1).transpose(0, 1).reshape(Q.shape[0], -1)
    if out_proj is None:
        return merged.mean(dim=1)
    return out_proj(merged).squeeze(-1)


class ScaleAttention(nn.Module):
    """Token construction and attention at one pyramid scale."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.channels = channels
        self.heads = heads
        self.q_proj = nn.Linear(channels, channels, bias=False)
        self.k_proj = nn.Linear(channels, channels, bias=False)
        # Mask values are scalars per token; this lifts them to the
        # per-head value width. Bias-free so background stays exactly 0.
        self.value_proj = nn.Linear(1, channels, bias=False)
        self.out_proj = nn.Linear(channels, 1)

    def build_tokens(self, query_feat, support_feats, support_masks):
        """Project features/masks into (Q, K, V) token matrices.

        query_feat: (c, h, w); support_feats: list over sequence slices of
        (c, h, w); support_masks: list of binary (H, W) masks at any
        resolution (resampled here to h x w by area averaging).
        Positional encoding is added before projection; key tokens of
        slice s additionally carry a slice-index offset.
        """
        if len(support_feats) != len(support_masks):
            raise InputError("one mask per support slice required")
        if len(support_feats) == 0:
            raise InputError("support sequence is empty")
        c, h, w = query_feat.shape
        dtype = query_feat.dtype
        pe = position_encoding(h, w, c).to(dtype)

        q_tokens = query_feat.reshape(c, h * w).T + pe
        keys, values = [], []
        for s, (feat, mask) in enumerate(zip(support_feats, support_masks)):
            if feat.shape != (c, h, w):
                raise InputError("support features must match the query feature shape")
            m = torch.as_tensor(mask, dtype=dtype)
            bad = (m != 0) & (m != 1)
            if bad.any():
                raise InputError("support masks must be binary")
            if m.shape != (h, w):
                m = F.interpolate(m[None, None], size=(h, w), mode="area")[0, 0]
            offset = slice_offset_encoding(s, c).to(dtype)
            keys.append(feat.reshape(c, h * w).T + pe + offset)
            values.append(m.reshape(h * w, 1))
        Q = self.q_proj(q_tokens)
        K = self.k_proj(torch.cat(keys, dim=0))
        V = self.value_proj(torch.cat(values, dim=0))
        return Q, K, V

    def forward(self, query_feat, support_feats, support_masks) -> torch.Tensor:
        """(h, w) attention map for one support sequence at this scale."""
        h, w = query_feat.shape[-2:]
        Q, K, V = self.build_tokens(query_feat, support_feats, support_masks)
        out = scaled_attention(Q, K, V, self.heads, self.out_proj)
        return out.reshape(h, w)


class MaskAttention(nn.Module):
    """Per-support mask feature: multi-scale attention + conv refinement.

    Attention maps from all scales are bilinearly upsampled to the
    working resolution (the finest stride), summed, and passed through
    two 3x3 conv blocks plus a 1x1 projection to fg/bg logits.
    """

    def __init__(self, channels: tuple[int, ...], heads: int, head_channels: int):
        super().__init__()
        self.scales = nn.ModuleList(ScaleAttention(c, heads) for c in channels)
        hc = head_channels
        self.head = nn.Sequential(
            nn.Conv2d(1, hc, 3, padding=1), group_norm(hc), nn.GELU(),
            nn.Conv2d(hc, hc, 3, padding=1), group_norm(hc), nn.GELU(),
            nn.Conv2d(hc, 2, 1),
        )

    def aggregate(self, query_pyr: FeaturePyramid, support_pyrs, support_masks) -> torch.Tensor:
        """Upsample-and-sum per-scale attention maps to the working grid."""
        if len(query_pyr.levels) != len(self.scales):
            raise InputError(
                f"pyramid has {len(query_pyr.levels)} levels, attention expects {len(self.scales)}"
            )
        target = query_pyr.levels[0].shape[-2:]
        acc = None
        for j, scale in enumerate(self.scales):
            qf = query_pyr.levels[j]
            sf = [p.levels[j] for p in support_pyrs]
            amap = scale(qf, sf, support_masks)
            up = F.interpolate(amap[None, None], size=target, mode="bilinear", align_corners=False)
            acc = up if acc is None else acc + up
        return acc  # (1, 1, h', w')

    def forward(self, query_pyr: FeaturePyramid, support_pyrs, support_masks) -> torch.Tensor:
        """(2, h', w') mask-feature logits for one support sequence."""
        return self.head(self.aggregate(query_pyr, support_pyrs, support_masks)).squeeze(0)
