"""Support-pool propagation across volumes.

A pool of (slice, mask, descriptor) entries is seeded from labeled
sequences; each volume is then segmented slice-by-slice using the n
pool entries most similar to the query (cosine similarity of pooled
backbone descriptors), and predictions passing quality control are
appended to the pool once the volume completes. Intra-volume mode is
the same loop with a single volume and supports drawn from it.
"""

import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .backbone import PooledDescriptor, pooled_descriptor
from .data import SupportSequence, Volume
from .errors import ConfigError, FormatError, InputError
from .model import MSFSegNet

_POOL_MAGIC = b"MSFPOOL1"
_POOL_VERSION = 1

GROUND_TRUTH = "ground_truth"
PREDICTED = "predicted"


@dataclass
class PoolEntry:
    image: np.ndarray               # (h, w) float32
    mask: np.ndarray                # (h, w) uint8
    descriptor: np.ndarray          # (c,) float32, unit norm (or zeros)
    provenance: str                 # GROUND_TRUTH or PREDICTED
    source: tuple[str, int]         # (volume id, slice index)
    ordinal: int
    sequence_id: str | None = None

    @property
    def fg_area(self) -> int:
        return int(self.mask.sum())


def backbone_fingerprint(model: MSFSegNet) -> str:
    """Stable digest of the backbone parameters; pools are tied to it."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.backbone.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype=np.float32).tobytes())
    return h.hexdigest()[:16]


def slice_descriptor(model: MSFSegNet, image: np.ndarray) -> np.ndarray:
    pyr = model.backbone(model._as_input(image))
    return pooled_descriptor(pyr).vector


@dataclass
class QCPolicy:
    """Gate deciding whether a prediction may enter the pool.

    Pass iff the prediction is nonempty, its foreground confidence
    reaches tau, and its foreground area is within the given ratio band
    of the top-ranked selected support's foreground area.
    """

    tau: float = 0.85
    area_band: tuple[float, float] = (0.25, 4.0)
    enabled: bool = True

    def __post_init__(self):
        if not self.area_band[0] < self.area_band[1]:
            raise ConfigError("area band lower bound must be below the upper bound")

    def accept(self, fg_confidence: float, fg_area: int, support_fg_area: int) -> bool:
        if not self.enabled:
            return True
        if fg_area == 0 or support_fg_area == 0:
            return False
        ratio = fg_area / support_fg_area
        return (fg_confidence >= self.tau
                and self.area_band[0] <= ratio <= self.area_band[1])


class SupportPool:
    """Ordered, append-only collection of support entries."""

    def __init__(self, fingerprint: str = ""):
        self.entries: list[PoolEntry] = []
        self.fingerprint = fingerprint
        self._sources: set[tuple[str, int]] = set()

    def __len__(self) -> int:
        return len(self.entries)

    def _append(self, entry: PoolEntry) -> None:
        if entry.source in self._sources:
            raise InputError(f"duplicate pool source {entry.source}")
        self.entries.append(entry)
        self._sources.add(entry.source)

    def add_sequence(self, model: MSFSegNet, seq: SupportSequence,
                     provenance: str = GROUND_TRUTH) -> None:
        if seq.volume_id is None or seq.slice_indices is None:
            raise InputError("pool sequences need volume_id and slice_indices")
        for k in range(seq.d):
            self._append(PoolEntry(
                image=np.asarray(seq.slices[k], dtype=np.float32),
                mask=np.asarray(seq.masks[k], dtype=np.uint8),
                descriptor=slice_descriptor(model, seq.slices[k]),
                provenance=provenance,
                source=(seq.volume_id, int(seq.slice_indices[k])),
                ordinal=len(self.entries),
                sequence_id=seq.sequence_id,
            ))

    def add_predicted(self, image, mask, descriptor, source) -> None:
        self._append(PoolEntry(
            image=np.asarray(image, dtype=np.float32),
            mask=np.asarray(mask, dtype=np.uint8),
            descriptor=np.asarray(descriptor, dtype=np.float32),
            provenance=PREDICTED,
            source=(source[0], int(source[1])),
            ordinal=len(self.entries),
            sequence_id=None,
        ))

    def refresh_descriptors(self, model: MSFSegNet) -> None:
        """Recompute every descriptor under the model's current backbone.

        Required after backbone parameters change; otherwise the stale
        pool is rejected by segment_volume.
        """
        for e in self.entries:
            e.descriptor = slice_descriptor(model, e.image)
        self.fingerprint = backbone_fingerprint(model)

    def ranked(self, query_descriptor) -> list[tuple[float, PoolEntry]]:
        """All entries sorted by descending cosine similarity, ties by ordinal."""
        if not self.entries:
            raise InputError("support pool is empty")
        q = np.asarray(getattr(query_descriptor, "vector", query_descriptor),
                       dtype=np.float64)
        sims = [float(np.dot(e.descriptor.astype(np.float64), q)) for e in self.entries]
        order = sorted(range(len(self.entries)),
                       key=lambda i: (-sims[i], self.entries[i].ordinal))
        return [(sims[i], self.entries[i]) for i in order]


def init_pool(model: MSFSegNet, labeled: list[SupportSequence]) -> SupportPool:
    """Seed a pool with one ground-truth entry per labeled slice."""
    if not labeled:
        raise InputError("at least one labeled sequence is required")
    pool = SupportPool(fingerprint=backbone_fingerprint(model))
    for seq in labeled:
        pool.add_sequence(model, seq, provenance=GROUND_TRUTH)
    return pool


def select_supports(pool: SupportPool, query_descriptor, n: int,
                    sequences: bool = False) -> list[PoolEntry]:
    """The n entries with highest cosine similarity to the query.

    With fewer than n entries the whole pool is returned,
    similarity-sorted. With ``sequences=True``, ranking is over entries
    but each selected item pulls in its whole sequence, and n counts
    distinct sequences.
    """
    if n < 1:
        raise InputError("n must be >= 1")
    ranked = pool.ranked(query_descriptor)
    if not sequences:
        return [e for _, e in ranked[:n]]
    picked: list[PoolEntry] = []
    seen: set[str] = set()
    for _, e in ranked:
        key = e.sequence_id or f"__solo_{e.ordinal}"
        if key in seen:
            continue
        seen.add(key)
        if e.sequence_id is None:
            picked.append(e)
        else:
            group = [x for x in pool.entries if x.sequence_id == e.sequence_id]
            picked.extend(sorted(group, key=lambda x: x.source[1]))
        if len(seen) == n:
            break
    return picked


def _entries_to_supports(entries: list[PoolEntry], sequences: bool) -> list[SupportSequence]:
    if not sequences:
        return [SupportSequence(slices=e.image[None], masks=e.mask[None],
                                volume_id=e.source[0], slice_indices=(e.source[1],),
                                sequence_id=e.sequence_id)
                for e in entries]
    groups: dict[str, list[PoolEntry]] = {}
    order: list[str] = []
    for e in entries:
        key = e.sequence_id or f"__solo_{e.ordinal}"
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(e)
    out = []
    for key in order:
        grp = sorted(groups[key], key=lambda x: x.source[1])
        out.append(SupportSequence(
            slices=np.stack([e.image for e in grp]),
            masks=np.stack([e.mask for e in grp]),
            volume_id=grp[0].source[0],
            slice_indices=tuple(e.source[1] for e in grp),
            sequence_id=grp[0].sequence_id,
        ))
    return out


def segment_volume(volume: Volume, pool: SupportPool, model: MSFSegNet,
                   n: int, qc: QCPolicy | None = None,
                   sequences: bool = False,
                   on_select=None) -> tuple[np.ndarray, SupportPool]:
    """Predict every slice of one volume from the pool, then grow the pool.

    QC-passing predictions are appended only after the whole volume is
    segmented, so selection within a volume never sees its own output.
    ``on_select(slice_index, entries)`` observes each slice's selection.
    """
    if pool.fingerprint and pool.fingerprint != backbone_fingerprint(model):
        raise ConfigError("pool descriptors were computed with different backbone params")
    qc = qc or QCPolicy()
    pred = np.zeros(volume.shape, dtype=np.uint8)
    passing = []
    for z in range(volume.depth):
        img = volume.intensities[z]
        desc = slice_descriptor(model, img)
        entries = select_supports(pool, desc, n, sequences=sequences)
        if on_select is not None:
            on_select(z, entries)
        supports = _entries_to_supports(entries, sequences)
        out = model.predict(img, supports)
        pred[z] = out.mask.astype(np.uint8)
        if qc.accept(out.fg_confidence, int(out.mask.sum()), entries[0].fg_area):
            passing.append((img, pred[z].copy(), desc, (volume.volume_id, z)))
    for img, mask, desc, source in passing:
        if source not in pool._sources:
            pool.add_predicted(img, mask, desc, source)
    return pred, pool


def propagate_dataset(volumes: list[Volume], labeled: list[SupportSequence],
                      model: MSFSegNet, n: int, qc: QCPolicy | None = None,
                      sequences: bool = False, pool: SupportPool | None = None,
                      on_volume=None):
    """Full workflow: seed the pool, then segment every volume in order."""
    if pool is None:
        pool = init_pool(model, labeled)
    predictions: dict[str, np.ndarray] = {}
    for vol in volumes:
        pred, pool = segment_volume(vol, pool, model, n, qc=qc, sequences=sequences)
        predictions[vol.volume_id] = pred
        if on_volume is not None:
            on_volume(vol, pred, pool)
    return predictions, pool


# ---------------------------------------------------------------------------
# Pool persistence


def save_pool(pool: SupportPool, path) -> None:
    entries_meta = []
    rasters = io.BytesIO()
    for e in pool.entries:
        entries_meta.append({
            "shape": list(e.image.shape),
            "descriptor_dim": int(e.descriptor.shape[0]),
            "provenance": e.provenance,
            "source": [e.source[0], int(e.source[1])],
            "ordinal": e.ordinal,
            "sequence_id": e.sequence_id,
        })
        rasters.write(np.ascontiguousarray(e.image, dtype="<f4").tobytes())
        rasters.write(np.ascontiguousarray(e.mask, dtype=np.uint8).tobytes())
        rasters.write(np.ascontiguousarray(e.descriptor, dtype="<f4").tobytes())
    header = json.dumps({"fingerprint": pool.fingerprint, "entries": entries_meta},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_POOL_MAGIC)
        f.write(np.uint32(_POOL_VERSION).tobytes())
        f.write(np.uint32(len(header)).tobytes())
        f.write(header)
        f.write(rasters.getvalue())


def load_pool(path) -> SupportPool:
    with open(path, "rb") as f:
        magic = f.read(len(_POOL_MAGIC))
        if magic != _POOL_MAGIC:
            raise FormatError("not a pool container (bad magic)", offset=0)
        version = int(np.frombuffer(f.read(4), dtype=np.uint32)[0])
        if version != _POOL_VERSION:
            raise FormatError(f"unsupported pool version {version}", offset=8)
        hlen = int(np.frombuffer(f.read(4), dtype=np.uint32)[0])
        header = json.loads(f.read(hlen).decode("utf-8"))
        pool = SupportPool(fingerprint=header["fingerprint"])
        for meta in header["entries"]:
            h, w = meta["shape"]
            c = meta["descriptor_dim"]
            need = h * w * 4 + h * w + c * 4
            buf = f.read(need)
            if len(buf) != need:
                raise FormatError("truncated pool rasters", offset=f.tell() - len(buf))
            img = np.frombuffer(buf[:h * w * 4], dtype="<f4").reshape(h, w)
            mask = np.frombuffer(buf[h * w * 4:h * w * 5], dtype=np.uint8).reshape(h, w)
            desc = np.frombuffer(buf[h * w * 5:], dtype="<f4")
            entry = PoolEntry(image=img.copy(), mask=mask.copy(), descriptor=desc.copy(),
                              provenance=meta["provenance"],
                              source=(meta["source"][0], int(meta["source"][1])),
                              ordinal=int(meta["ordinal"]),
                              sequence_id=meta["sequence_id"])
            pool.entries.append(entry)
            pool._sources.add(entry.source)
    return pool
