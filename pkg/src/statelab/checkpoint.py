"""Single-file checkpoint format.

Layout: 8-byte magic, little-endian uint64 manifest length, UTF-8 JSON
manifest, then raw little-endian float32 tensor blobs in manifest order.
The manifest lists tensor names, shapes, dtype and byte offsets (relative to
the payload start) plus the model config, an optional metadata dict, and the
run seed. No timestamps anywhere: identical parameters produce byte-identical
files, which the reproducibility contract relies on.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, Parameters

MAGIC = b"STATELAB"
FORMAT_VERSION = 1


@dataclass
class CheckpointData:
    params: Parameters
    seed: int | None
    meta: dict
    parent_hash: str | None


def save_checkpoint(
    path: str | Path,
    params: Parameters,
    seed: int | None = None,
    meta: dict | None = None,
    parent_hash: str | None = None,
) -> None:
    entries = []
    offset = 0
    for name, arr in params.tensors.items():
        if arr.dtype != np.float32:
            raise ValueError(f"checkpoint tensors must be float32, {name} is {arr.dtype}")
        nbytes = arr.size * 4
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "float32",
            "offset": offset,
            "nbytes": nbytes,
        })
        offset += nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": asdict(params.config),
        "seed": seed,
        "meta": meta or {},
        "parent_hash": parent_hash,
        "tensors": entries,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        for name, arr in params.tensors.items():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_manifest(path: str | Path) -> dict:
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise ValueError(f"{path}: not a statelab checkpoint")
        n = int.from_bytes(f.read(8), "little")
        return json.loads(f.read(n).decode("utf-8"))


def load_checkpoint(path: str | Path) -> CheckpointData:
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise ValueError(f"{path}: not a statelab checkpoint")
        n = int.from_bytes(f.read(8), "little")
        manifest = json.loads(f.read(n).decode("utf-8"))
        payload = f.read()
    config = ModelConfig(**manifest["config"])
    tensors: dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
        tensors[e["name"]] = arr
    return CheckpointData(
        params=Parameters(config=config, tensors=tensors),
        seed=manifest.get("seed"),
        meta=manifest.get("meta", {}),
        parent_hash=manifest.get("parent_hash"),
    )


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def describe(path: str | Path) -> str:
    manifest = read_manifest(path)
    lines = [f"checkpoint {path}"]
    lines.append(f"  format_version: {manifest['format_version']}")
    lines.append(f"  config: {json.dumps(manifest['config'], sort_keys=True)}")
    lines.append(f"  seed: {manifest.get('seed')}")
    if manifest.get("parent_hash"):
        lines.append(f"  parent_hash: {manifest['parent_hash']}")
    if manifest.get("meta"):
        lines.append(f"  meta: {json.dumps(manifest['meta'], sort_keys=True)}")
    total = 0
    for e in manifest["tensors"]:
        lines.append(f"  {e['name']}: {tuple(e['shape'])} {e['dtype']} @ {e['offset']}")
        total += e["nbytes"]
    lines.append(f"  payload bytes: {total}")
    lines.append(f"  sha256: {file_hash(path)}")
    return "\n".join(lines)
