"""Segmentation metrics: Dice, region Jaccard, boundary F-measure.

Conventions: two empty regions (or two empty boundaries) score 1.0;
exactly one empty boundary scores 0.0. Volume-level Dice/Jaccard are
computed over stacked voxels; boundary F is averaged over slices. The
default boundary tolerance is 0.8% of the image diagonal, rounded up.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InputError

_CROSS = ndimage.generate_binary_structure(2, 1)


def _pair(pred, gt):
    a = np.asarray(pred).astype(bool)
    b = np.asarray(gt).astype(bool)
    if a.shape != b.shape:
        raise InputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(pred, gt) -> float:
    """2|A∩B| / (|A|+|B|); both masks empty scores 1.0."""
    a, b = _pair(pred, gt)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def jaccard(pred, gt) -> float:
    """|A∩B| / |A∪B|; both masks empty scores 1.0."""
    a, b = _pair(pred, gt)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def mask_boundary(mask) -> np.ndarray:
    """1-pixel-thick boundary; pixels outside the image count as background."""
    m = np.asarray(mask).astype(bool)
    if not m.any():
        return np.zeros_like(m)
    return m & ~ndimage.binary_erosion(m, structure=_CROSS, border_value=0)


def _disk(tol: float) -> np.ndarray:
    r = int(math.floor(tol))
    ax = np.arange(-r, r + 1)
    return (np.hypot(ax[:, None], ax[None, :]) <= tol)


def default_boundary_tolerance(shape) -> int:
    """0.8% of the image diagonal, rounded up (never below 1)."""
    return max(1, math.ceil(0.008 * math.hypot(*shape)))


def boundary_f(pred, gt, tol: float | None = None) -> float:
    """Boundary F-measure with pixel tolerance ``tol``.

    Precision/recall are computed by dilating each boundary with a
    Euclidean disk of radius tol, which matches thresholding the
    nearest-boundary distance at tol.
    """
    a, b = _pair(pred, gt)
    if tol is None:
        tol = default_boundary_tolerance(a.shape)
    if tol < 0:
        raise InputError("tolerance must be nonnegative")
    pb = mask_boundary(a)
    gb = mask_boundary(b)
    np_, ng = int(pb.sum()), int(gb.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    disk = _disk(tol)
    gb_dil = ndimage.binary_dilation(gb, structure=disk)
    pb_dil = ndimage.binary_dilation(pb, structure=disk)
    precision = int((pb & gb_dil).sum()) / np_
    recall = int((gb & pb_dil).sum()) / ng
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# Run-level reports


@dataclass
class MetricRow:
    volume_id: str
    dice: float
    j: float
    f: float
    class_id: int | None = None

    @property
    def jf(self) -> float:
        return (self.j + self.f) / 2.0


@dataclass
class MetricReport:
    """Per-volume table plus aggregate means, tagged with its protocol."""

    rows: list[MetricRow]
    protocol: str = ""
    seed: int | None = None
    extras: dict = field(default_factory=dict)

    COLUMNS = ("volume_id", "class", "dice", "j", "f", "jf")

    def aggregate(self) -> dict[str, float]:
        if not self.rows:
            return {k: float("nan") for k in ("dice", "j", "f", "jf")}
        return {
            "dice": float(np.mean([r.dice for r in self.rows])),
            "j": float(np.mean([r.j for r in self.rows])),
            "f": float(np.mean([r.f for r in self.rows])),
            "jf": float(np.mean([r.jf for r in self.rows])),
        }

    @staticmethod
    def _sort_key(row: MetricRow):
        return (row.volume_id, row.class_id if row.class_id is not None else -1)

    def to_tsv(self) -> str:
        lines = ["\t".join(self.COLUMNS)]
        for r in sorted(self.rows, key=self._sort_key):
            cls = "-" if r.class_id is None else str(r.class_id)
            lines.append(f"{r.volume_id}\t{cls}\t{r.dice:.6f}\t{r.j:.6f}"
                         f"\t{r.f:.6f}\t{r.jf:.6f}")
        agg = self.aggregate()
        lines.append("MEAN\t-\t{dice:.6f}\t{j:.6f}\t{f:.6f}\t{jf:.6f}".format(**agg))
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "rows": [
                {"volume_id": r.volume_id, "class_id": r.class_id,
                 "dice": r.dice, "j": r.j, "f": r.f, "jf": r.jf}
                for r in sorted(self.rows, key=self._sort_key)
            ],
            "aggregate": self.aggregate(),
            "extras": self.extras,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


def volume_metrics(pred, gt, volume_id: str = "",
                   class_id: int | None = None) -> MetricRow:
    """Voxel-set Dice/J over the stacked volume; F averaged over slices."""
    a, b = _pair(pred, gt)
    if a.ndim == 2:
        a, b = a[None], b[None]
    f_slices = [boundary_f(a[z], b[z]) for z in range(a.shape[0])]
    return MetricRow(volume_id=volume_id, dice=dice(a, b), j=jaccard(a, b),
                     f=float(np.mean(f_slices)), class_id=class_id)


def evaluate_run(predictions: dict, ground_truths: dict,
                 protocol: str = "", seed: int | None = None,
                 class_id: int | None = None) -> MetricReport:
    """Per-volume metrics for aligned {volume_id: mask volume} collections."""
    missing = sorted(set(ground_truths) - set(predictions))
    extra = sorted(set(predictions) - set(ground_truths))
    if missing or extra:
        raise InputError(
            f"prediction/ground-truth misalignment; missing={missing} extra={extra}"
        )
    rows = [volume_metrics(predictions[vid], ground_truths[vid], volume_id=vid,
                           class_id=class_id)
            for vid in sorted(predictions)]
    return MetricReport(rows=rows, protocol=protocol, seed=seed)


def mean_reports(reports: list[MetricReport]) -> MetricReport:
    """Average aligned reports (e.g. over evaluation seeds), row-wise."""
    if not reports:
        raise InputError("no reports to average")
    keys = [tuple(sorted(r.volume_id for r in rep.rows)) for rep in reports]
    if len(set(keys)) != 1:
        raise InputError("reports cover different volume sets; cannot average")
    by_id = {}
    for rep in reports:
        for row in rep.rows:
            by_id.setdefault(row.volume_id, []).append(row)
    rows = [
        MetricRow(volume_id=vid,
                  dice=float(np.mean([r.dice for r in rows])),
                  j=float(np.mean([r.j for r in rows])),
                  f=float(np.mean([r.f for r in rows])),
                  class_id=rows[0].class_id)
        for vid, rows in sorted(by_id.items())
    ]
    protocols = sorted({rep.protocol for rep in reports})
    return MetricReport(rows=rows, protocol="+".join(p for p in protocols if p),
                        extras={"averaged_over": len(reports)})
