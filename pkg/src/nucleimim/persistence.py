"""Checkpoints: a JSON manifest plus one raw little-endian array blob."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "arrays.bin"


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config: dict
    meta: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix.rstrip("/") + "/"
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], config: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    directory = {}
    offset = 0
    tmp_blob = path / (BLOB + ".tmp")
    with open(tmp_blob, "wb") as fh:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            fh.write(raw)
            directory[name] = {"shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)}
            offset += len(raw)
    manifest = {"schema_version": SCHEMA_VERSION, "config": config, "meta": meta or {},
                "arrays": directory, "blob_bytes": offset}
    tmp_manifest = path / (MANIFEST + ".tmp")
    tmp_manifest.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp_blob, path / BLOB)
    os.replace(tmp_manifest, path / MANIFEST)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no manifest in {path}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest {path / MANIFEST}: {exc.msg} at line {exc.lineno}") from None
    for key in ("schema_version", "arrays", "config"):
        if key not in manifest:
            raise CheckpointError(f"manifest missing field {key!r}")
    if manifest["schema_version"] != SCHEMA_VERSION:
        raise CheckpointError(f"checkpoint schema version {manifest['schema_version']} != supported {SCHEMA_VERSION}")
    blob = (path / BLOB).read_bytes() if (path / BLOB).exists() else b""
    if len(blob) != manifest.get("blob_bytes", len(blob)):
        raise CheckpointError(f"truncated blob: {len(blob)} bytes, manifest expects {manifest['blob_bytes']}")
    arrays = {}
    for name, entry in manifest["arrays"].items():
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(blob):
            raise CheckpointError(f"truncated blob: array {name!r} needs bytes [{start}, {start + n})")
        dt = np.dtype(entry["dtype"])
        arr = np.frombuffer(blob, dtype=dt, count=n // dt.itemsize if dt.itemsize else 0, offset=start)
        arrays[name] = arr.astype(dt.newbyteorder("="), copy=True).reshape(entry["shape"])
    return Checkpoint(arrays, manifest["config"], manifest.get("meta", {}))
