"""Episodic optimization loop and support augmentation.

``pseudo_nshot`` turns one labeled support into n by flips, small
affine warps, and intensity jitter; masks follow the identical
geometric transform and are never touched by intensity changes.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from scipy import ndimage

from .config import TrainConfig
from .data import Corpus, SupportSequence, sample_episode
from .errors import InputError
from .model import MSFSegNet, train_episode


@dataclass(frozen=True)
class AugmentSpec:
    """One sampled augmentation; geometry applies equally to slice and mask."""

    flip: bool = False
    angle_deg: float = 0.0
    scale: float = 1.0
    shift: tuple[float, float] = (0.0, 0.0)     # fraction of (h, w)
    gain: float = 1.0                           # intensity-only

    @property
    def is_identity_geometry(self) -> bool:
        return (not self.flip and self.angle_deg == 0.0 and self.scale == 1.0
                and self.shift == (0.0, 0.0))


def sample_augment(rng: np.random.Generator,
                   flip_p: float = 0.5,
                   max_angle: float = 15.0,
                   scale_range: tuple[float, float] = (0.9, 1.1),
                   max_shift: float = 0.05,
                   jitter: float = 0.1) -> AugmentSpec:
    return AugmentSpec(
        flip=bool(rng.random() < flip_p),
        angle_deg=float(rng.uniform(-max_angle, max_angle)),
        scale=float(rng.uniform(*scale_range)),
        shift=(float(rng.uniform(-max_shift, max_shift)),
               float(rng.uniform(-max_shift, max_shift))),
        gain=float(rng.uniform(1 - jitter, 1 + jitter)),
    )


def _inverse_affine(spec: AugmentSpec, shape):
    """Output->input coordinate map (matrix, offset) for scipy warping."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = math.radians(spec.angle_deg)
    rot = np.array([[math.cos(th), -math.sin(th)],
                    [math.sin(th), math.cos(th)]])
    fwd = rot * spec.scale
    if spec.flip:
        fwd = fwd @ np.array([[1.0, 0.0], [0.0, -1.0]])
    shift = np.array([spec.shift[0] * h, spec.shift[1] * w])
    inv = np.linalg.inv(fwd)
    center = np.array([cy, cx])
    # forward: y = fwd (x - c) + c + shift  =>  x = inv (y - c - shift) + c
    offset = center - inv @ (center + shift)
    return inv, offset


def warp_image(img: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    """Geometric warp of an intensity slice (bilinear)."""
    img = np.asarray(img, dtype=np.float32)
    if spec.is_identity_geometry:
        return img.copy()
    m, off = _inverse_affine(spec, img.shape)
    return ndimage.affine_transform(img, m, offset=off, order=1,
                                    mode="nearest").astype(np.float32)


def warp_mask(mask: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    """Geometric warp of a binary mask (nearest neighbor, background fill)."""
    mask = np.asarray(mask, dtype=np.uint8)
    if spec.is_identity_geometry:
        return mask.copy()
    m, off = _inverse_affine(spec, mask.shape)
    return ndimage.affine_transform(mask, m, offset=off, order=0,
                                    mode="constant", cval=0).astype(np.uint8)


def augment_support(support: SupportSequence, spec: AugmentSpec) -> SupportSequence:
    slices = np.stack([np.clip(warp_image(s, spec) * spec.gain, 0.0, 1.0)
                       for s in support.slices])
    masks = np.stack([warp_mask(m, spec) for m in support.masks])
    return SupportSequence(slices=slices, masks=masks,
                           volume_id=support.volume_id,
                           slice_indices=support.slice_indices,
                           sequence_id=support.sequence_id)


def pseudo_nshot(support: SupportSequence, n: int, seed: int = 0,
                 **aug_kwargs) -> list[SupportSequence]:
    """[original] + (n-1) augmented copies of a single support."""
    if n < 1:
        raise InputError("n must be >= 1")
    rng = np.random.default_rng(seed)
    out = [support]
    for _ in range(n - 1):
        out.append(augment_support(support, sample_augment(rng, **aug_kwargs)))
    return out


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    model: MSFSegNet
    losses: list[float]
    config: TrainConfig


def train_model(corpus: Corpus, cfg: TrainConfig,
                model: MSFSegNet | None = None,
                on_step=None, on_episode=None) -> TrainResult:
    """Episodic training on the corpus' train classes.

    Deterministic given cfg.seed: parameter init, episode sampling, and
    per-episode n all derive from it. Passing ``model`` resumes training
    from its current parameters; ``on_episode(episode)`` observes every
    sampled episode (e.g. to write a manifest).
    """
    cfg.validate()
    torch.manual_seed(cfg.seed)
    if model is None:
        model = MSFSegNet(cfg.model)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    classes = list(corpus.train_classes)
    if not classes:
        raise InputError("corpus declares no train classes")

    losses: list[float] = []
    model.train()
    for step in range(cfg.steps):
        batch = []
        for _ in range(cfg.batch_size):
            cls = int(classes[rng.integers(len(classes))])
            n = cfg.n if cfg.n_min is None else int(rng.integers(cfg.n_min, cfg.n + 1))
            ep = sample_episode(corpus, cls, n=1 if cfg.pseudo else n, d=cfg.d,
                                setting=cfg.setting, rng=rng,
                                size=cfg.model.input_size)
            if on_episode is not None:
                on_episode(ep)
            supports = ep.supports
            if cfg.pseudo and n > 1:
                supports = pseudo_nshot(supports[0], n,
                                        seed=int(rng.integers(2 ** 31)))
            batch.append((ep.query_image, supports, ep.query_mask))
        loss = train_episode(model, batch, optimizer, cfg.ce_weight, cfg.dice_weight)
        losses.append(loss)
        if on_step is not None:
            on_step(step, loss)
    model.eval()
    return TrainResult(model=model, losses=losses, config=cfg)


def evaluate_episodes(model: MSFSegNet, corpus: Corpus, class_id: int,
                      n: int, d: int = 1, episodes: int = 20,
                      seed: int = 0) -> list[float]:
    """Per-episode Dice of the model on freshly sampled episodes."""
    from .metrics import dice

    rng = np.random.default_rng(seed)
    scores = []
    for _ in range(episodes):
        ep = sample_episode(corpus, class_id, n=n, d=d, rng=rng,
                            size=model.config.input_size)
        pred = model.predict(ep.query_image, ep.supports)
        scores.append(dice(pred.mask, ep.query_mask))
    return scores
