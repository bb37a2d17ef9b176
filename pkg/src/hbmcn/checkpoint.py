"""Binary checkpoint format.

Layout: ``b"HBMC"`` | version (u32 LE) | manifest length (u64 LE) |
manifest JSON | raw little-endian float32 blobs. The manifest holds the
model config, optimizer scalars and an ordered list of
``{name, shape, offset}`` entries whose offsets are relative to the start of
the blob section. Momentum buffers are stored under ``momentum/<param>``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import HBMCN, ModelConfig
from .train import OptimState

MAGIC = b"HBMC"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def _tensors(model: HBMCN, state: OptimState | None) -> list[tuple[str, np.ndarray]]:
    items = list(model.named_parameters())
    out = [(name, p.data) for name, p in items]
    out += list(model.named_buffers())
    if state is not None:
        for name, _ in items:
            buf = state.buffers.get(name)
            out.append((f"momentum/{name}", buf if buf is not None else np.zeros_like(model.parameters()[name].data)))
    return out


def dumps(model: HBMCN, state: OptimState | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in _tensors(model, state):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "config": model.cfg.to_dict(),
        "optimizer": None if state is None else {
            "momentum": state.momentum, "weight_decay": state.weight_decay,
            "step": state.step, "epoch": state.epoch,
        },
        "tensors": entries,
    }
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(body)) + body + b"".join(blobs)


def save_checkpoint(model: HBMCN, state: OptimState | None, path) -> None:
    Path(path).write_bytes(dumps(model, state))


def read_manifest(raw: bytes) -> tuple[dict, int]:
    if len(raw) < _HEADER.size:
        raise CheckpointError("file too short for checkpoint header")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _HEADER.size
    if start + mlen > len(raw):
        raise CheckpointError("truncated manifest")
    try:
        manifest = json.loads(raw[start : start + mlen])
    except ValueError as exc:
        raise CheckpointError("manifest is not valid JSON") from exc
    return manifest, start + mlen


def loads(raw: bytes) -> tuple[HBMCN, OptimState | None]:
    manifest, blob_start = read_manifest(raw)
    try:
        cfg = ModelConfig.from_dict(manifest["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid model config: {exc}") from exc
    model = HBMCN(cfg)
    opt = manifest.get("optimizer")
    state = None
    if opt is not None:
        state = OptimState(opt["momentum"], opt["weight_decay"], step=opt["step"], epoch=opt["epoch"])
    expected = [name for name, _ in _tensors(model, state)]
    listed = [e["name"] for e in manifest["tensors"]]
    if len(set(listed)) != len(listed):
        raise CheckpointError("manifest lists a tensor twice")
    if set(listed) != set(expected):
        missing = sorted(set(expected) - set(listed))[:3]
        extra = sorted(set(listed) - set(expected))[:3]
        raise CheckpointError(f"tensor name set mismatch (missing {missing}, unexpected {extra})")

    params = model.parameters()
    buffers = model.buffers()
    blob = memoryview(raw)[blob_start:]
    for entry in manifest["tensors"]:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        count = int(np.prod(shape))
        if off < 0 or off + 4 * count > len(blob):
            raise CheckpointError(f"truncated blob for {name}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        if name.startswith("momentum/"):
            target = params[name[len("momentum/") :]].data
            if target.shape != shape:
                raise CheckpointError(f"shape mismatch for {name}")
            state.buffers[name[len("momentum/") :]] = arr.astype(target.dtype)
            continue
        target = params[name].data if name in params else buffers[name]
        if target.shape != shape:
            raise CheckpointError(f"shape mismatch for {name}: {shape} vs {target.shape}")
        target[...] = arr
    return model, state


def load_checkpoint(path) -> tuple[HBMCN, OptimState | None]:
    return loads(Path(path).read_bytes())
