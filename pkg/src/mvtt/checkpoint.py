"""Model checkpoint file.

Layout::

    b"MVTTCKPT\\n"
    uint64 little-endian: length of the JSON manifest in bytes
    manifest (UTF-8 JSON): {"format_version": 1, "config": {...MvttConfig...},
                            "entries": [{"name", "shape", "offset"}...],
                            "blob_bytes": n}
    blob: float32 little-endian values, entries concatenated in manifest order

Entries are the trainable parameters (dotted names such as
``theta_s.blocks.block0.conv1.conv.weight``) followed by BatchNorm running
statistics (``<bn name>.running_mean`` / ``.running_var``).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .mvtt_net import MvttConfig, MvttNet

MAGIC = b"MVTTCKPT\n"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _arrays(model: MvttNet):
    for name, p in model.named_parameters():
        yield name, p.data
    for name, bn in model.named_buffers():
        yield f"{name}.running_mean", bn.running_mean
        yield f"{name}.running_var", bn.running_var


def save_checkpoint(model: MvttNet, path) -> Path:
    entries, chunks, offset = [], [], 0
    for name, arr in _arrays(model):
        raw = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "config": model.config.to_dict(),
                "entries": entries, "blob_bytes": offset}
    header = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    return path


def read_manifest(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated before manifest length")
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    try:
        manifest = json.loads(raw[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: manifest is not valid JSON ({exc})") from None
    if not isinstance(manifest, dict):
        raise CheckpointError(f"{path}: manifest must be a JSON object")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {manifest.get('format_version')!r}")
    for key in ("config", "entries", "blob_bytes"):
        if key not in manifest:
            raise CheckpointError(f"{path}: manifest missing {key!r}")
    blob = raw[pos + hlen:]
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"{path}: blob has {len(blob)} bytes, manifest declares {manifest['blob_bytes']}")
    return manifest, blob


def load_checkpoint(path) -> MvttNet:
    """Rebuild the model from its stored config and weights, in eval mode."""
    manifest, blob = read_manifest(path)
    try:
        config = MvttConfig.from_dict(manifest["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid model config ({exc})") from None
    model = MvttNet(config)
    expected = list(_arrays(model))
    entries = manifest["entries"]
    names = [e.get("name") for e in entries]
    want = [n for n, _ in expected]
    if names != want:
        missing = sorted(set(want) - set(names))
        extra = sorted(set(names) - set(want))
        raise CheckpointError(f"{path}: entries do not match the model built from its config "
                              f"(missing {missing[:5]}, unexpected {extra[:5]})")
    offset = 0
    values = {}
    for e, (name, arr) in zip(entries, expected):
        if list(e.get("shape", [])) != list(arr.shape):
            raise CheckpointError(f"{path}: entry {name} has shape {e.get('shape')}, model expects {list(arr.shape)}")
        if e.get("offset") != offset:
            raise CheckpointError(f"{path}: entry {name} offset {e.get('offset')} breaks contiguity (expected {offset})")
        n = int(np.prod(arr.shape)) * _F32.itemsize
        values[name] = np.frombuffer(blob[offset:offset + n], dtype=_F32).astype(np.float64).reshape(arr.shape)
        offset += n
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing blob bytes")
    for v in values.values():
        if not np.all(np.isfinite(v)):
            raise CheckpointError(f"{path}: non-finite parameter values")

    for name, p in model.named_parameters():
        p.data = values[name]
    for name, bn in model.named_buffers():
        bn.running_mean = values[f"{name}.running_mean"]
        bn.running_var = values[f"{name}.running_var"]
    model.eval()
    return model
