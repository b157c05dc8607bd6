"""End-to-end few-shot segmentation network.

Backbone pyramids for query and supports, one attention mask feature
per support, multi-surrogate fusion, then a skip-connected decoder that
upsamples the fused map from the working stride back to full
resolution. The decoder input concatenates the fused features with the
query's finest-level features and the support finest-level features
averaged over slices and supports (which keeps the whole forward pass
invariant to support order).
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import MaskAttention
from .backbone import FeaturePyramid, ToyBackbone, group_norm
from .config import ModelConfig
from .data import SupportSequence
from .errors import InputError, TrainingDiverged
from .fusion import SurrogateFusion, surrogate_bundle


@dataclass
class QueryPrediction:
    """Full-resolution prediction for one query slice.

    logits channel 0 is foreground; ``mask`` is the channel argmax and
    ``fg_confidence`` the mean foreground probability over predicted
    foreground pixels (0 when the prediction is empty).
    """

    logits: np.ndarray          # (2, h, w) float32
    mask: np.ndarray            # (h, w) bool
    fg_confidence: float


def _up_block(c_in: int, c_out: int, mode: str) -> nn.Sequential:
    if mode == "deconv":
        up: nn.Module = nn.ConvTranspose2d(c_in, c_in, 2, stride=2)
    else:
        up = nn.Upsample(scale_factor=2, mode="nearest")
    return nn.Sequential(
        up,
        nn.Conv2d(c_in, c_out, 3, padding=1),
        group_norm(c_out),
        nn.GELU(),
    )


class MSFSegNet(nn.Module):
    """Query mask prediction from n support slices or sequences."""

    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone = ToyBackbone(config)
        self.mask_attention = MaskAttention(config.channels, config.heads,
                                            config.head_channels)
        self.fusion = SurrogateFusion(config.fused_channels, config.fusion_kernel)
        dec_in = config.fused_channels + 2 * config.channels[0]
        d1, d2 = config.decoder_channels
        self.decoder = nn.Sequential(
            _up_block(dec_in, d1, config.upsample),
            _up_block(d1, d2, config.upsample),
            nn.Conv2d(d2, 2, 1),
        )

    # -- tensor path ------------------------------------------------------

    def _as_input(self, arr) -> torch.Tensor:
        dtype = next(self.parameters()).dtype
        return torch.as_tensor(np.asarray(arr), dtype=dtype)

    def support_pyramids(self, support: SupportSequence):
        pyrs = [self.backbone(self._as_input(support.slices[k]))
                for k in range(support.d)]
        masks = [support.masks[k] for k in range(support.d)]
        return pyrs, masks

    def mask_features(self, query_pyr: FeaturePyramid, supports) -> torch.Tensor:
        """(n, 2, h', w') stack of per-support mask features."""
        feats = []
        for sup in supports:
            pyrs, masks = self.support_pyramids(sup)
            feats.append(self.mask_attention(query_pyr, pyrs, masks))
        return torch.stack(feats, dim=0)

    def forward(self, query, supports: list[SupportSequence]) -> torch.Tensor:
        """Differentiable forward pass; returns (2, h, w) logits."""
        if not supports:
            raise InputError("at least one support is required")
        q = self._as_input(query)
        query_pyr = self.backbone(q)

        mask_feats = []
        skip_feats = []
        for sup in supports:
            pyrs, masks = self.support_pyramids(sup)
            mask_feats.append(self.mask_attention(query_pyr, pyrs, masks))
            skip_feats.append(torch.stack([p.levels[0] for p in pyrs]).mean(dim=0))
        fused = self.fusion(surrogate_bundle(torch.stack(mask_feats)))

        skip_q = query_pyr.levels[0]
        skip_s = torch.stack(skip_feats).mean(dim=0)
        x = torch.cat([fused, skip_q, skip_s], dim=0).unsqueeze(0)
        logits = self.decoder(x).squeeze(0)
        if logits.shape[-2:] != q.shape[-2:]:
            # Non-power-of-two working grids never occur with stride-4
            # inputs, but keep the contract size explicit.
            logits = F.interpolate(logits.unsqueeze(0), size=q.shape[-2:],
                                   mode="bilinear", align_corners=False).squeeze(0)
        return logits

    # -- numpy path ---------------------------------------------------------

    @torch.no_grad()
    def predict(self, query, supports: list[SupportSequence]) -> QueryPrediction:
        logits = self.forward(query, supports)
        return prediction_from_logits(logits)


def prediction_from_logits(logits: torch.Tensor) -> QueryPrediction:
    probs = torch.softmax(logits, dim=0)
    mask = logits[0] > logits[1]
    conf = float(probs[0][mask].mean()) if bool(mask.any()) else 0.0
    return QueryPrediction(
        logits=logits.detach().cpu().numpy().astype(np.float32),
        mask=mask.cpu().numpy(),
        fg_confidence=conf,
    )


def segmentation_loss(
    logits: torch.Tensor,
    gt_mask,
    ce_weight: float = 1.0,
    dice_weight: float = 1.0,
    smooth: float = 1.0,
) -> torch.Tensor:
    """Cross-entropy plus soft Dice on the foreground probability."""
    gt = torch.as_tensor(np.asarray(gt_mask), dtype=logits.dtype)
    if gt.shape != logits.shape[-2:]:
        raise InputError("ground-truth mask shape must match the logits")
    if ((gt != 0) & (gt != 1)).any():
        raise InputError("ground-truth mask must be binary")
    target = (1 - gt).long()                      # channel 0 is foreground
    ce = F.cross_entropy(logits.unsqueeze(0), target.unsqueeze(0))
    p_fg = torch.softmax(logits, dim=0)[0]
    inter = (p_fg * gt).sum()
    dice = 1 - (2 * inter + smooth) / (p_fg.sum() + gt.sum() + smooth)
    return ce_weight * ce + dice_weight * dice


def train_episode(model: MSFSegNet, batch, optimizer,
                  ce_weight: float = 1.0, dice_weight: float = 1.0) -> float:
    """One optimization step over a batch of (query, supports, gt) episodes."""
    if not batch:
        raise InputError("empty episode batch")
    optimizer.zero_grad(set_to_none=True)
    total = None
    for query, supports, gt in batch:
        loss = segmentation_loss(model(query, supports), gt, ce_weight, dice_weight)
        total = loss if total is None else total + loss
    total = total / len(batch)
    if not torch.isfinite(total):
        raise TrainingDiverged(f"non-finite loss {total.detach().item()!r}; aborting step")
    total.backward()
    optimizer.step()
    return float(total.detach())
