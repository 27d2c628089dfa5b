"""Checkpoint files: a JSON manifest beside a float32 little-endian payload."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import ModelConfig, ModelParams
from .tensor import Tensor

FORMAT = "camf-checkpoint-v1"
_DTYPE = np.dtype("<f4")


def _atomic_write(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def manifest_path(path) -> Path:
    path = Path(path)
    return path if path.suffix == ".json" else path.with_suffix(".json")


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig, vocab_path: str | None = None,
                    extra: dict | None = None) -> Path:
    """Write ``<stem>.json`` and ``<stem>.bin``; returns the manifest path."""
    mpath = manifest_path(path)
    mpath.parent.mkdir(parents=True, exist_ok=True)
    bpath = mpath.with_suffix(".bin")
    tensors, chunks, offset = [], [], 0
    for name, t in params.items():
        blob = np.ascontiguousarray(t.data, dtype=_DTYPE).tobytes()
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(blob)
        offset += len(blob)
    manifest = {
        "format": FORMAT,
        "dtype": "float32-le",
        "payload": bpath.name,
        "config": cfg.to_json(),
        "vocab_path": vocab_path,
        "tensors": tensors,
    }
    if extra:
        manifest["extra"] = extra
    _atomic_write(bpath, b"".join(chunks))
    _atomic_write(mpath, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode("utf-8"))
    return mpath


def read_manifest(path) -> dict:
    mpath = manifest_path(path)
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint manifest {mpath}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise DataError(f"{mpath} is not a {FORMAT} manifest")
    return manifest


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    """Returns (params, config, manifest); parameters come back as float64."""
    mpath = manifest_path(path)
    manifest = read_manifest(mpath)
    try:
        payload = (mpath.parent / manifest["payload"]).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint payload for {mpath}: {exc}") from exc
    params: ModelParams = {}
    for rec in manifest["tensors"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = rec["offset"]
        end = start + count * _DTYPE.itemsize
        if end > len(payload):
            raise DataError(f"checkpoint payload truncated at tensor {rec['name']!r}")
        data = np.frombuffer(payload[start:end], dtype=_DTYPE).astype(np.float64).reshape(shape)
        params[rec["name"]] = Tensor(data, requires_grad=True)
    return params, ModelConfig.from_json(manifest["config"]), manifest
