"""Local HTTP service backing the annotation UI.

JSON everywhere; rasters cross the wire as base64-encoded little-endian
buffers with explicit dims. Model inference and pool mutation are each
serialized behind their own lock; every response carries the model and
pool version stamps. The pool version changes at most once per
propagation transaction.
"""

import base64
import threading

import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .data import Corpus
from .errors import InputError
from .model import MSFSegNet
from .propagation import (GROUND_TRUTH, PoolEntry, QCPolicy, SupportPool,
                          _entries_to_supports, backbone_fingerprint,
                          segment_volume, select_supports, slice_descriptor)

_DTYPES = {"<f4": np.dtype("<f4"), "u1": np.dtype(np.uint8)}


def encode_raster(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.uint8 or arr.dtype == bool:
        arr, dtype = arr.astype(np.uint8), "u1"
    else:
        arr, dtype = arr.astype("<f4"), "<f4"
    return {
        "shape": list(arr.shape),
        "dtype": dtype,
        "data_b64": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_raster(payload: dict) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in payload["shape"])
        dtype = _DTYPES[payload["dtype"]]
        raw = base64.b64decode(payload["data_b64"], validate=True)
    except (KeyError, ValueError, TypeError) as e:
        raise InputError(f"malformed raster payload: {e}") from None
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise InputError(
            f"raster payload carries {len(raw)} bytes, dims imply {expected}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


class RasterPayload(BaseModel):
    shape: list[int]
    dtype: str
    data_b64: str


class MaskCommit(BaseModel):
    raster: RasterPayload


class PoolAdd(BaseModel):
    volume_id: str
    slice_index: int
    raster: RasterPayload


class SimilarityQuery(BaseModel):
    volume_id: str
    slice_index: int


class SegmentRequest(BaseModel):
    volume_id: str
    slice_index: int
    n: int = Field(default=1, ge=1)
    qc: bool = True
    tau: float | None = None


class PropagateRequest(BaseModel):
    volume_id: str
    n: int = Field(default=1, ge=1)
    qc: bool = True
    tau: float | None = None


class ServiceState:
    def __init__(self, model: MSFSegNet, corpus: Corpus, model_version: str = ""):
        self.model = model
        self.volumes = {v.volume_id: v for v in corpus.volumes}
        self.stored_masks: dict[tuple[str, int], np.ndarray] = {}
        self.pool = SupportPool(fingerprint=backbone_fingerprint(model))
        self.pool_version = 0
        self.model_version = model_version or backbone_fingerprint(model)
        self.model_lock = threading.Lock()
        self.pool_lock = threading.Lock()

    def stamps(self) -> dict:
        return {"model_version": self.model_version,
                "pool_version": self.pool_version}

    def volume(self, vid: str):
        vol = self.volumes.get(vid)
        if vol is None:
            raise KeyError(vid)
        return vol

    def qc_policy(self, enabled: bool, tau: float | None) -> QCPolicy:
        if tau is None:
            return QCPolicy(enabled=enabled)
        return QCPolicy(tau=tau, enabled=enabled)


def _pool_listing(state: ServiceState) -> list[dict]:
    return [
        {
            "ordinal": e.ordinal,
            "provenance": e.provenance,
            "volume_id": e.source[0],
            "slice_index": e.source[1],
            "fg_area": e.fg_area,
            "sequence_id": e.sequence_id,
        }
        for e in state.pool.entries
    ]


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="msfseg annotation service")

    @app.exception_handler(InputError)
    async def _input_error(request, exc):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(KeyError)
    async def _missing(request, exc):
        return JSONResponse(status_code=404,
                            content={"error": f"unknown resource: {exc}"})

    @app.exception_handler(Exception)
    async def _internal(request, exc):
        return JSONResponse(status_code=500,
                            content={"error": f"{type(exc).__name__}: {exc}"})

    @app.get("/health")
    def health():
        return state.stamps()

    @app.get("/volumes")
    def volumes():
        items = [
            {
                "volume_id": v.volume_id,
                "depth": v.depth,
                "height": v.shape[1],
                "width": v.shape[2],
                "gt_classes": sorted(v.masks),
            }
            for v in state.volumes.values()
        ]
        return {"volumes": items, **state.stamps()}

    def _check_index(vol, z: int):
        if not 0 <= z < vol.depth:
            raise InputError(f"slice index {z} outside [0, {vol.depth})")

    @app.get("/volumes/{vid}/slices/{z}")
    def get_slice(vid: str, z: int):
        vol = state.volume(vid)
        _check_index(vol, z)
        return {"raster": encode_raster(vol.intensities[z]), **state.stamps()}

    @app.get("/volumes/{vid}/masks/{z}")
    def get_mask(vid: str, z: int):
        vol = state.volume(vid)
        _check_index(vol, z)
        stored = state.stored_masks.get((vid, z))
        if stored is None:
            raster = np.zeros(vol.intensities[z].shape, np.uint8)
            source = "empty"
        else:
            raster, source = stored, "stored"
        return {"raster": encode_raster(raster), "source": source, **state.stamps()}

    @app.put("/volumes/{vid}/masks/{z}")
    def put_mask(vid: str, z: int, commit: MaskCommit):
        vol = state.volume(vid)
        _check_index(vol, z)
        mask = decode_raster(commit.raster.model_dump())
        if mask.shape != vol.intensities[z].shape:
            raise InputError(
                f"mask shape {mask.shape} does not match slice {vol.intensities[z].shape}")
        if not np.isin(mask, (0, 1)).all():
            raise InputError("mask must be binary")
        state.stored_masks[(vid, z)] = mask.astype(np.uint8)
        return {"raster": encode_raster(state.stored_masks[(vid, z)]),
                **state.stamps()}

    @app.get("/pool")
    def pool_listing():
        return {"entries": _pool_listing(state), **state.stamps()}

    @app.post("/pool/entries")
    def pool_add(req: PoolAdd):
        vol = state.volume(req.volume_id)
        _check_index(vol, req.slice_index)
        mask = decode_raster(req.raster.model_dump())
        if mask.shape != vol.intensities[req.slice_index].shape:
            raise InputError("mask shape does not match the slice")
        if not np.isin(mask, (0, 1)).all():
            raise InputError("mask must be binary")
        image = vol.intensities[req.slice_index]
        with state.pool_lock:
            desc = slice_descriptor(state.model, image)
            entry_source = (req.volume_id, req.slice_index)
            state.pool._append(PoolEntry(
                image=np.asarray(image, np.float32), mask=mask.astype(np.uint8),
                descriptor=desc, provenance=GROUND_TRUTH, source=entry_source,
                ordinal=len(state.pool.entries)))
            state.pool_version += 1
        return {"entries": _pool_listing(state), **state.stamps()}

    @app.post("/pool/similarity")
    def pool_similarity(req: SimilarityQuery):
        vol = state.volume(req.volume_id)
        _check_index(vol, req.slice_index)
        if not len(state.pool):
            raise InputError("support pool is empty")
        with state.model_lock:
            desc = slice_descriptor(state.model, vol.intensities[req.slice_index])
        ranked = state.pool.ranked(desc)
        return {
            "ranked": [
                {"ordinal": e.ordinal, "similarity": sim,
                 "provenance": e.provenance, "volume_id": e.source[0],
                 "slice_index": e.source[1]}
                for sim, e in ranked
            ],
            **state.stamps(),
        }

    @app.post("/segment")
    def segment(req: SegmentRequest):
        vol = state.volume(req.volume_id)
        _check_index(vol, req.slice_index)
        if not len(state.pool):
            raise InputError("support pool is empty; label a slice first")
        note = None
        n = req.n
        if n > len(state.pool):
            note = f"n={n} exceeds pool size {len(state.pool)}; using whole pool"
            n = len(state.pool)
        img = vol.intensities[req.slice_index]
        with state.model_lock:
            desc = slice_descriptor(state.model, img)
            entries = select_supports(state.pool, desc, n)
            pred = state.model.predict(img, _entries_to_supports(entries, False))
        policy = state.qc_policy(req.qc, req.tau)
        qc_passed = policy.accept(pred.fg_confidence, int(pred.mask.sum()),
                                  entries[0].fg_area)
        return {
            "mask": encode_raster(pred.mask.astype(np.uint8)),
            "fg_confidence": pred.fg_confidence,
            "qc_passed": bool(qc_passed),
            "supports": [e.ordinal for e in entries],
            "note": note,
            **state.stamps(),
        }

    @app.post("/propagate")
    def propagate(req: PropagateRequest):
        vol = state.volume(req.volume_id)
        if not len(state.pool):
            raise InputError("support pool is empty; label a slice first")
        policy = state.qc_policy(req.qc, req.tau)
        with state.pool_lock, state.model_lock:
            version_before = state.pool_version
            size_before = len(state.pool)
            pred, _ = segment_volume(vol, state.pool, state.model,
                                     n=min(req.n, size_before), qc=policy)
            for z in range(vol.depth):
                state.stored_masks[(req.volume_id, z)] = pred[z].copy()
            added = len(state.pool) - size_before
            if added:
                state.pool_version += 1
        return {
            "slices": vol.depth,
            "added_to_pool": added,
            "pool_version_before": version_before,
            **state.stamps(),
        }

    return app
