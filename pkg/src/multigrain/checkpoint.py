"""Single-file checkpoint container.

Layout: an ASCII magic line, a decimal manifest length line, a JSON
manifest, then raw little-endian tensor bytes. The manifest names every
tensor with dtype, shape, offset and byte count, and also carries the
resolved run config, the vocabulary, epoch counters, rng stream states,
and optimizer scalars. Save then load is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

MAGIC = "multigrain-checkpoint"
VERSION = 1

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}
_CODE_DTYPES = {v: np.dtype(v) for v in _DTYPE_CODES.values()}


@dataclass
class Checkpoint:
    """Decoded checkpoint contents."""

    config: dict
    tensors: dict[str, np.ndarray]
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    opt_step: int = 0
    meta: dict = field(default_factory=dict)

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k[len("param."):]: v for k, v in self.tensors.items() if k.startswith("param.")}

    def moment_arrays(self, which: str) -> dict[str, np.ndarray]:
        prefix = f"adam.{which}."
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _tensor_entries(named: dict[str, np.ndarray]) -> tuple[list[dict], list[np.ndarray]]:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(named):
        arr = np.ascontiguousarray(named[name])
        code = _DTYPE_CODES.get(arr.dtype.name)
        if code is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        blob = arr.astype(code, copy=False).tobytes()
        entries.append({
            "name": name,
            "dtype": code,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    return entries, blobs


def save_checkpoint(path: Path, config: dict, params: dict[str, Tensor],
                    epoch: int = 0, rng_state: Optional[dict] = None,
                    opt: Optional[object] = None, meta: Optional[dict] = None) -> None:
    """Write params (plus optimizer moments when given) to ``path``."""
    named: dict[str, np.ndarray] = {f"param.{k}": p.data for k, p in params.items()}
    opt_step = 0
    if opt is not None:
        state = opt.state()
        opt_step = int(state["t"])
        for k, arr in state["m"].items():
            named[f"adam.m.{k}"] = arr
        for k, arr in state["v"].items():
            named[f"adam.v.{k}"] = arr
    entries, blobs = _tensor_entries(named)
    manifest = {
        "version": VERSION,
        "config": config,
        "epoch": int(epoch),
        "rng": rng_state or {},
        "opt_step": opt_step,
        "meta": meta or {},
        "tensors": entries,
    }
    body = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(f"{MAGIC} {VERSION}\n".encode("ascii"))
        fh.write(f"{len(body)}\n".encode("ascii"))
        fh.write(body)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        parts = header.split()
        if len(parts) != 2 or parts[0] != MAGIC:
            raise CheckpointError(f"not a checkpoint file: {path}")
        if int(parts[1]) != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {parts[1]}, expected {VERSION}")
        try:
            length = int(fh.readline().decode("ascii").strip())
            manifest = json.loads(fh.read(length).decode("utf-8"))
        except (ValueError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from exc
        payload = fh.read()

    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        code = entry["dtype"]
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"tensor {entry['name']!r} has unknown dtype code {code!r}")
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise CheckpointError(f"checkpoint payload truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(payload[start:start + n], dtype=_CODE_DTYPES[code])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(
        config=manifest["config"],
        tensors=tensors,
        epoch=int(manifest.get("epoch", 0)),
        rng_state=manifest.get("rng", {}),
        opt_step=int(manifest.get("opt_step", 0)),
        meta=manifest.get("meta", {}),
    )


def load_params_into(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into live parameter tensors, checking names
    and shapes both ways."""
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise CheckpointError(f"parameter sets differ; missing {missing[:4]}, unexpected {extra[:4]}")
    for name, p in params.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointError(f"shape mismatch for {name!r}: {arr.shape} vs {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
