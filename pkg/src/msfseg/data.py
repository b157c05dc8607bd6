"""Synthetic volumes, episodic sampling, and volume I/O.

Volumes carry a D x H x W intensity grid plus optional per-class binary
masks. The generator builds tubular structures (swept disks along smooth
centerlines) and blob organs (rotated ellipsoids) over a noisy biased
background; blobs serve as training classes and tubes as unseen test
classes. Episodes pair one query slice with n support slices/sequences
drawn preferentially from other volumes.
"""

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ConfigError, FormatError, InputError

BLOB_CLASS = 1
TUBE_CLASS = 2
CLASS_NAMES = {BLOB_CLASS: "blob", TUBE_CLASS: "tube"}

_MAGIC = b"MSFVOL01"
_VERSION = 1


@dataclass
class Volume:
    """One 3D scan: intensities plus optional per-class masks."""

    intensities: np.ndarray                     # (D, H, W) float32 in [0, 1]
    masks: dict[int, np.ndarray] = field(default_factory=dict)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    volume_id: str = ""

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float32)
        if self.intensities.ndim != 3:
            raise InputError("intensities must be D x H x W")
        occupied = np.zeros(self.intensities.shape, dtype=bool)
        for cls, m in self.masks.items():
            m = np.asarray(m, dtype=np.uint8)
            if m.shape != self.intensities.shape:
                raise InputError(f"mask for class {cls} does not match volume shape")
            if np.any(occupied & (m > 0)):
                raise InputError("class masks must be voxel-disjoint")
            occupied |= m > 0
            self.masks[cls] = m

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.intensities.shape

    @property
    def depth(self) -> int:
        return self.intensities.shape[0]

    @property
    def has_masks(self) -> bool:
        return bool(self.masks)


@dataclass
class SupportSequence:
    """d consecutive labeled slices acting as one support (d=1 is a 2D support)."""

    slices: np.ndarray          # (d, h, w) float32
    masks: np.ndarray           # (d, h, w) uint8 in {0, 1}
    volume_id: str | None = None
    slice_indices: tuple[int, ...] | None = None
    sequence_id: str | None = None

    def __post_init__(self):
        self.slices = np.asarray(self.slices, dtype=np.float32)
        self.masks = np.asarray(self.masks, dtype=np.uint8)
        if self.slices.ndim != 3 or self.slices.shape != self.masks.shape:
            raise InputError("slices and masks must both be (d, h, w) with equal shapes")
        if self.slices.shape[0] < 1:
            raise InputError("a support sequence needs at least one slice")
        if not np.isin(self.masks, (0, 1)).all():
            raise InputError("support masks must be binary")

    @property
    def d(self) -> int:
        return self.slices.shape[0]


@dataclass
class Episode:
    """One (query, supports, class) sampling unit."""

    query_image: np.ndarray     # (h, w) float32
    query_mask: np.ndarray      # (h, w) uint8
    supports: list[SupportSequence]
    class_id: int
    setting: int
    query_source: tuple[str, int]

    def __post_init__(self):
        for s in self.supports:
            if s.volume_id == self.query_source[0] and s.slice_indices is not None \
                    and self.query_source[1] in s.slice_indices:
                raise InputError("supports must not include the query slice")


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic volume generator."""

    shape: tuple[int, int, int] = (24, 64, 64)
    volume_count: int = 1
    blob_count: int = 2
    blob_axes: tuple[float, float] = (5.0, 12.0)
    blob_intensity: tuple[float, float] = (0.5, 0.8)
    tube_count: int = 1
    tube_radius: tuple[float, float] = (2.0, 4.0)
    tube_wander: tuple[float, float] = (2.0, 6.0)
    tube_intensity: tuple[float, float] = (0.6, 0.9)
    background: float = 0.25
    bias_amplitude: float = 0.05
    noise: float = 0.03
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if any(s < 4 for s in self.shape) or len(self.shape) != 3:
            raise ConfigError("volume shape must be 3D with every dim >= 4")
        if self.volume_count < 1:
            raise ConfigError("volume_count must be >= 1")
        if self.tube_radius[0] < 1.0:
            raise ConfigError("tube radius must be >= 1 voxel")
        if self.blob_count < 0 or self.tube_count < 0 or self.noise < 0:
            raise ConfigError("counts and noise must be nonnegative")
        return self


@dataclass
class Corpus:
    """Volumes plus the train/test class split used by episodic sampling."""

    volumes: list[Volume]
    train_classes: tuple[int, ...] = (BLOB_CLASS,)
    test_classes: tuple[int, ...] = (TUBE_CLASS,)


def _tube_centerline(cfg: SynthConfig, rng: np.random.Generator):
    """Smooth parametric curve spanning the depth axis, in voxel coords."""
    d, h, w = cfg.shape
    r_max = cfg.tube_radius[1]
    amp_y, amp_x = rng.uniform(*cfg.tube_wander, size=2)
    freq_y, freq_x = rng.uniform(0.5, 1.5, size=2)
    phase_y, phase_x = rng.uniform(0, 2 * math.pi, size=2)
    margin_y = min(h / 2 - r_max - 1, amp_y + r_max + 2)
    margin_x = min(w / 2 - r_max - 1, amp_x + r_max + 2)
    cy = rng.uniform(margin_y, h - 1 - margin_y)
    cx = rng.uniform(margin_x, w - 1 - margin_x)

    # Dense samples, extended past both faces so the swept tube has no
    # end caps inside the grid.
    overhang = r_max + 1.0
    t = np.linspace(-overhang / max(d - 1, 1), 1 + overhang / max(d - 1, 1),
                    int(16 * (d + 2 * overhang)))
    z = t * (d - 1)
    y = cy + amp_y * np.sin(2 * math.pi * freq_y * t + phase_y)
    x = cx + amp_x * np.sin(2 * math.pi * freq_x * t + phase_x)
    pts = np.stack([z, y, x], axis=1)
    inside = (z >= -0.5) & (z <= d - 0.5)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    # Arc length of the in-grid portion, used by volume oracles.
    length = float(seg[inside[:-1] & inside[1:]].sum())
    return pts, length


def _rasterize_tube(shape, pts, radius) -> np.ndarray:
    grid = np.stack(np.meshgrid(*(np.arange(s) for s in shape), indexing="ij"), axis=-1)
    tree = cKDTree(pts)
    dist, _ = tree.query(grid.reshape(-1, 3).astype(np.float64), k=1)
    return (dist.reshape(shape) <= radius).astype(np.uint8)


def _rasterize_blob(shape, center, axes, rotation) -> np.ndarray:
    grid = np.stack(np.meshgrid(*(np.arange(s) for s in shape), indexing="ij"), axis=-1)
    rel = (grid.reshape(-1, 3) - center) @ rotation          # into the blob frame
    u = rel / axes
    return (np.einsum("ij,ij->i", u, u) <= 1.0).reshape(shape).astype(np.uint8)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def generate_volume(cfg: SynthConfig, seed: int) -> Volume:
    """Build one synthetic volume with exact masks.

    Tubes are swept disks along smooth centerlines (priority over blobs
    where they would overlap, keeping class masks disjoint); intensities
    are class-dependent bases plus a smooth bias field and white noise.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    shape = cfg.shape

    tube_mask = np.zeros(shape, dtype=np.uint8)
    tube_lengths = []
    for _ in range(cfg.tube_count):
        pts, length = _tube_centerline(cfg, rng)
        radius = rng.uniform(*cfg.tube_radius)
        tube_mask |= _rasterize_tube(shape, pts, radius)
        tube_lengths.append(length)

    blob_mask = np.zeros(shape, dtype=np.uint8)
    d, h, w = shape
    for _ in range(cfg.blob_count):
        axes = rng.uniform(*cfg.blob_axes, size=3)
        axes[0] = min(axes[0], d / 2 - 1)
        center = np.array([
            rng.uniform(axes[0], d - 1 - axes[0]),
            rng.uniform(axes[1], h - 1 - axes[1]) if 2 * axes[1] < h - 2 else h / 2,
            rng.uniform(axes[2], w - 1 - axes[2]) if 2 * axes[2] < w - 2 else w / 2,
        ])
        blob_mask |= _rasterize_blob(shape, center, axes, _random_rotation(rng))
    blob_mask &= 1 - tube_mask                                # tubes take priority

    intensities = np.full(shape, cfg.background, dtype=np.float64)
    if cfg.bias_amplitude > 0:
        coarse = rng.normal(0, 1, size=(3, 4, 4))
        zoom = [s / c for s, c in zip(shape, coarse.shape)]
        intensities += cfg.bias_amplitude * ndimage.zoom(coarse, zoom, order=1)
    if blob_mask.any():
        intensities[blob_mask > 0] = rng.uniform(*cfg.blob_intensity) \
            + intensities[blob_mask > 0] - cfg.background
    if tube_mask.any():
        intensities[tube_mask > 0] = rng.uniform(*cfg.tube_intensity) \
            + intensities[tube_mask > 0] - cfg.background
    if cfg.noise > 0:
        intensities += rng.normal(0, cfg.noise, size=shape)
    intensities = np.clip(intensities, 0.0, 1.0).astype(np.float32)

    masks = {}
    if cfg.blob_count > 0:
        masks[BLOB_CLASS] = blob_mask
    if cfg.tube_count > 0:
        masks[TUBE_CLASS] = tube_mask
    vol = Volume(intensities=intensities, masks=masks, volume_id=f"synth-{seed:05d}")
    vol.tube_lengths = tube_lengths  # retained for generator-level oracles
    return vol


def generate_corpus(cfg: SynthConfig) -> Corpus:
    cfg.validate()
    vols = [generate_volume(cfg, cfg.seed + i) for i in range(cfg.volume_count)]
    return Corpus(volumes=vols)


# ---------------------------------------------------------------------------
# Episodic sampling


def resize_slice(img: np.ndarray, size: int) -> np.ndarray:
    """Linear resampling of an intensity slice to size x size."""
    if img.shape == (size, size):
        return np.asarray(img, dtype=np.float32)
    zoom = (size / img.shape[0], size / img.shape[1])
    return ndimage.zoom(np.asarray(img, dtype=np.float32), zoom, order=1)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbor resampling of a binary mask to size x size."""
    if mask.shape == (size, size):
        return np.asarray(mask, dtype=np.uint8)
    zoom = (size / mask.shape[0], size / mask.shape[1])
    return ndimage.zoom(np.asarray(mask, dtype=np.uint8), zoom, order=0)


def _slice_has_class(vol: Volume, cls: int, z: int) -> bool:
    m = vol.masks.get(cls)
    return m is not None and bool(m[z].any())


def _leaky(vol: Volume, z: int, test_classes) -> bool:
    return any(_slice_has_class(vol, c, z) for c in test_classes)


def sample_episode(
    corpus: Corpus,
    class_id: int,
    n: int,
    d: int = 1,
    setting: int = 1,
    rng: np.random.Generator | int = 0,
    size: int | None = None,
) -> Episode:
    """Draw one episode for ``class_id`` with n supports of d slices each.

    Supports come from volumes other than the query's whenever enough
    candidates exist there, and never contain the query slice. Under
    setting 2 (and a train-class episode), every slice containing any
    test class is removed from both query and support candidates.
    """
    if n < 1 or d < 1:
        raise InputError("n and d must be >= 1")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    filter_leaks = setting == 2 and class_id not in corpus.test_classes

    eligible = []
    for vi, vol in enumerate(corpus.volumes):
        m = vol.masks.get(class_id)
        if m is None:
            continue
        for z in range(vol.depth):
            if not m[z].any():
                continue
            if filter_leaks and _leaky(vol, z, corpus.test_classes):
                continue
            eligible.append((vi, z))
    if not eligible:
        raise InputError(f"no slice containing class {class_id} is eligible")

    q_vi, q_z = eligible[int(rng.integers(len(eligible)))]
    q_vol = corpus.volumes[q_vi]

    if d == 1:
        cands = [(vi, z) for vi, z in eligible if (vi, z) != (q_vi, q_z)]
        windows = [(vi, z, 1) for vi, z in cands]
    else:
        windows = []
        for vi, vol in enumerate(corpus.volumes):
            m = vol.masks.get(class_id)
            if m is None:
                continue
            for start in range(vol.depth - d + 1):
                span = range(start, start + d)
                if not m[start + d // 2].any():
                    continue
                if vi == q_vi and q_z in span:
                    continue
                if filter_leaks and any(_leaky(vol, z, corpus.test_classes) for z in span):
                    continue
                windows.append((vi, start, d))

    other = [wnd for wnd in windows if wnd[0] != q_vi]
    same = [wnd for wnd in windows if wnd[0] == q_vi]
    ordered = list(rng.permutation(len(other))) if other else []
    ordered = [other[i] for i in ordered] + [same[i] for i in rng.permutation(len(same))]
    if len(ordered) < n:
        raise InputError(
            f"insufficient support candidates for class {class_id}: "
            f"need {n}, found {len(ordered)}"
        )
    chosen = ordered[:n]

    def _prep_image(img):
        return resize_slice(img, size) if size else np.asarray(img, dtype=np.float32)

    def _prep_mask(m):
        return resize_mask(m, size) if size else np.asarray(m, dtype=np.uint8)

    supports = []
    for vi, start, dd in chosen:
        vol = corpus.volumes[vi]
        idx = tuple(range(start, start + dd))
        supports.append(SupportSequence(
            slices=np.stack([_prep_image(vol.intensities[z]) for z in idx]),
            masks=np.stack([_prep_mask(vol.masks[class_id][z]) for z in idx]),
            volume_id=vol.volume_id,
            slice_indices=idx,
            sequence_id=f"{vol.volume_id}:{start}+{dd}",
        ))
    return Episode(
        query_image=_prep_image(q_vol.intensities[q_z]),
        query_mask=_prep_mask(q_vol.masks[class_id][q_z]),
        supports=supports,
        class_id=class_id,
        setting=setting,
        query_source=(q_vol.volume_id, q_z),
    )


def episode_manifest_line(ep: Episode) -> str:
    """One-line record of an episode's sources, for reproducibility audits."""
    sup = ",".join(f"{s.volume_id}:{s.slice_indices[0]}+{s.d}" for s in ep.supports)
    return (f"class={ep.class_id}\tsetting={ep.setting}\t"
            f"query={ep.query_source[0]}:{ep.query_source[1]}\tsupports={sup}")


def parse_episode_manifest_line(line: str) -> dict:
    fields = dict(part.split("=", 1) for part in line.strip().split("\t"))
    supports = []
    if fields.get("supports"):
        for token in fields["supports"].split(","):
            vol, span = token.rsplit(":", 1)
            start, d = span.split("+")
            supports.append({"volume_id": vol, "start": int(start), "d": int(d)})
    qvol, qz = fields["query"].rsplit(":", 1)
    return {
        "class_id": int(fields["class"]),
        "setting": int(fields["setting"]),
        "query": {"volume_id": qvol, "slice_index": int(qz)},
        "supports": supports,
    }


# ---------------------------------------------------------------------------
# Volume container I/O


def save_volume(volume: Volume, path) -> None:
    """Write the versioned binary container: header JSON + raw LE rasters."""
    class_ids = sorted(volume.masks)
    header = {
        "volume_id": volume.volume_id,
        "shape": list(volume.shape),
        "spacing": list(volume.spacing),
        "mask_classes": class_ids,
        "dtype": "<f4",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(np.uint32(_VERSION).tobytes())
        f.write(np.uint32(len(blob)).tobytes())
        f.write(blob)
        f.write(np.ascontiguousarray(volume.intensities, dtype="<f4").tobytes())
        for cls in class_ids:
            f.write(np.ascontiguousarray(volume.masks[cls], dtype=np.uint8).tobytes())


def _read_exact(f, count: int, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise FormatError(f"truncated volume file while reading {what}",
                          offset=f.tell() - len(data))
    return data


def load_volume(path) -> Volume:
    """Read a container written by save_volume; lossless round trip."""
    with open(path, "rb") as f:
        magic = _read_exact(f, len(_MAGIC), "magic")
        if magic != _MAGIC:
            raise FormatError("not a volume container (bad magic)", offset=0)
        version = int(np.frombuffer(_read_exact(f, 4, "version"), dtype=np.uint32)[0])
        if version != _VERSION:
            raise FormatError(f"unsupported container version {version}", offset=8)
        hlen = int(np.frombuffer(_read_exact(f, 4, "header length"), dtype=np.uint32)[0])
        hoff = f.tell()
        try:
            header = json.loads(_read_exact(f, hlen, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"unreadable header: {e}", offset=hoff) from None
        shape = tuple(header["shape"])
        count = int(np.prod(shape))
        inten = np.frombuffer(_read_exact(f, count * 4, "intensity raster"),
                              dtype="<f4").reshape(shape)
        masks = {}
        for cls in header["mask_classes"]:
            raster = np.frombuffer(_read_exact(f, count, f"mask raster for class {cls}"),
                                   dtype=np.uint8).reshape(shape)
            masks[int(cls)] = raster.copy()
        trailing = f.read(1)
        if trailing:
            raise FormatError("unexpected trailing bytes", offset=f.tell() - 1)
    return Volume(intensities=inten.copy(), masks=masks,
                  spacing=tuple(header["spacing"]), volume_id=header["volume_id"])


def save_corpus(corpus: Corpus, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for vol in corpus.volumes:
        name = f"{vol.volume_id}.msfvol"
        save_volume(vol, out / name)
        files.append(name)
    manifest = {
        "volumes": files,
        "train_classes": list(corpus.train_classes),
        "test_classes": list(corpus.test_classes),
    }
    (out / "corpus.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_corpus(path) -> Corpus:
    root = Path(path)
    manifest_path = root / "corpus.json"
    if not manifest_path.exists():
        raise InputError(f"no corpus.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    vols = [load_volume(root / name) for name in manifest["volumes"]]
    return Corpus(volumes=vols,
                  train_classes=tuple(manifest["train_classes"]),
                  test_classes=tuple(manifest["test_classes"]))
