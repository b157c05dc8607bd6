"""Versioned model checkpoints: magic bytes, config echo, named blobs."""

import hashlib
import json

import numpy as np
import torch

from .config import ModelConfig
from .errors import FormatError
from .model import MSFSegNet

_MAGIC = b"MSFCKPT1"
_VERSION = 1


def save_checkpoint(model: MSFSegNet, path, extra: dict | None = None) -> None:
    state = model.state_dict()
    manifest = []
    payload = bytearray()
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name].detach().cpu().numpy(), dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape)})
        payload.extend(arr.tobytes())
    header = {
        "config": model.config.to_dict(),
        "manifest": manifest,
        "extra": extra or {},
        "digest": hashlib.sha256(bytes(payload)).hexdigest()[:16],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(np.uint32(_VERSION).tobytes())
        f.write(np.uint32(len(blob)).tobytes())
        f.write(blob)
        f.write(bytes(payload))


def load_checkpoint(path) -> tuple[MSFSegNet, dict]:
    """Rebuild the model from a checkpoint; returns (model, header extras)."""
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise FormatError("not a checkpoint (bad magic)", offset=0)
        version = int(np.frombuffer(f.read(4), dtype=np.uint32)[0])
        if version != _VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=8)
        hlen = int(np.frombuffer(f.read(4), dtype=np.uint32)[0])
        hoff = f.tell()
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"unreadable checkpoint header: {e}", offset=hoff) from None
        config = ModelConfig.from_dict(header["config"])
        model = MSFSegNet(config)
        state = {}
        for item in header["manifest"]:
            shape = tuple(item["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 4)
            if len(buf) != count * 4:
                raise FormatError(f"truncated blob {item['name']}",
                                  offset=f.tell() - len(buf))
            state[item["name"]] = torch.from_numpy(
                np.frombuffer(buf, dtype="<f4").reshape(shape).copy())
    model.load_state_dict(state)
    model.eval()
    return model, header


def checkpoint_digest(path) -> str:
    """Short identity stamp of a checkpoint's parameters."""
    with open(path, "rb") as f:
        f.seek(len(_MAGIC) + 4)
        hlen = int(np.frombuffer(f.read(4), dtype=np.uint32)[0])
        header = json.loads(f.read(hlen).decode("utf-8"))
    return header["digest"]
