"""Checkpoint directory format: manifest.json + params.bin.

The blob holds every parameter's bytes little-endian, row-major, in
manifest order; the manifest records name, shape, dtype, offset, and
byte count per parameter next to the config snapshot. Loading validates
the manifest against the blob and fails naming the offending parameter.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict
from typing import Dict, Optional, Tuple

import numpy as np

from .model import ModelConfig
from .tensor import Tensor

FORMAT_TAG = "glt-checkpoint-v1"
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


class CheckpointError(ValueError):
    pass


def _le_dtype(dtype: np.dtype) -> str:
    return np.dtype(dtype).newbyteorder("<").str


def save_checkpoint(out_dir: str, params: Dict[str, Tensor], cfg: ModelConfig,
                    extra: Optional[dict] = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    entries = {}
    chunks = []
    offset = 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data)
        dtype = _le_dtype(arr.dtype)
        raw = arr.astype(dtype, copy=False).tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": dtype,
                         "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT_TAG, "model_config": asdict(cfg), "params": entries}
    manifest.update(extra or {})
    with open(os.path.join(out_dir, BLOB_NAME), "wb") as fh:
        fh.write(b"".join(chunks))
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=False)
        fh.write("\n")


def load_checkpoint(ckpt_dir: str,
                    expected: Optional[ModelConfig] = None
                    ) -> Tuple[Dict[str, Tensor], ModelConfig, dict]:
    """Returns (params, model config, full manifest); params require grad."""
    manifest_path = os.path.join(ckpt_dir, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise CheckpointError(f"no {MANIFEST_NAME} in {ckpt_dir}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT_TAG:
        raise CheckpointError(f"unrecognized checkpoint format {manifest.get('format')!r}")
    cfg = ModelConfig(**manifest["model_config"])
    if expected is not None and asdict(expected) != asdict(cfg):
        diffs = [k for k, v in asdict(expected).items() if asdict(cfg).get(k) != v]
        raise CheckpointError(f"checkpoint config does not match: differs on {diffs}")

    with open(os.path.join(ckpt_dir, BLOB_NAME), "rb") as fh:
        blob = fh.read()

    params: Dict[str, Tensor] = {}
    for name, entry in manifest["params"].items():
        shape = tuple(int(s) for s in entry["shape"])
        dtype = np.dtype(entry["dtype"])
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        want = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if want != nbytes:
            raise CheckpointError(
                f"parameter {name!r}: shape {shape} and dtype {dtype.str} imply "
                f"{want} bytes but manifest says {nbytes}")
        if offset + nbytes > len(blob):
            raise CheckpointError(
                f"parameter {name!r}: blob truncated (needs bytes up to "
                f"{offset + nbytes}, file has {len(blob)})")
        arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)),
                            offset=offset).reshape(shape)
        params[name] = Tensor(arr.copy(), requires_grad=True)
    total = sum(int(e["nbytes"]) for e in manifest["params"].values())
    if total != len(blob):
        raise CheckpointError(f"blob has {len(blob)} bytes but manifest accounts "
                              f"for {total}")
    return params, cfg, manifest
