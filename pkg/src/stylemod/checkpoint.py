"""Versioned checkpoint container.

Layout: 8-byte magic, 8-byte little-endian header length, a canonical JSON
header (sorted keys), then raw little-endian float32/int64 array payloads at
the offsets recorded in the header.  Writing is fully deterministic, so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SMCKPT1\n"
VERSION = 1
STAGES = ("stage0", "classifier", "fbcts", "eval_classifier")

_DTYPES = {"float32": "<f4", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: str
    config: dict
    arrays: dict[str, np.ndarray]
    extra: dict

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage {self.stage!r}")

    @property
    def catalog_dict(self) -> dict:
        return self.config["catalog"]

    def require_stage(self, *stages: str) -> None:
        if self.stage not in stages:
            raise CheckpointError(f"checkpoint stage is {self.stage!r}, need one of {stages}")

    def namespace(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays under "prefix." with the prefix stripped."""
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in self.arrays.items() if k.startswith(prefix + ".")}

    def checksum(self, prefix: str | None = None) -> str:
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            if prefix is None or name.startswith(prefix + "."):
                h.update(name.encode())
                h.update(self.arrays[name].tobytes())
        return h.hexdigest()


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    entries = {}
    offset = 0
    payload = []
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name])
        if arr.dtype == np.float64:
            arr = arr.astype(np.float32)
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"array {name!r} has unsupported dtype {dtype}")
        buf = arr.astype(_DTYPES[dtype]).tobytes()
        entries[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset}
        offset += len(buf)
        payload.append(buf)
    header = json.dumps(
        {"version": VERSION, "stage": ckpt.stage, "config": ckpt.config,
         "arrays": entries, "extra": ckpt.extra},
        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for buf in payload:
            fh.write(buf)


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    hlen = int.from_bytes(blob[8:16], "little")
    header = json.loads(blob[16:16 + hlen])
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    base = 16 + hlen
    arrays = {}
    for name, meta in header["arrays"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        dt = np.dtype(_DTYPES[meta["dtype"]])
        start = base + meta["offset"]
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=start)
        arrays[name] = arr.reshape(shape).astype(meta["dtype"])
    return Checkpoint(stage=header["stage"], config=header["config"],
                      arrays=arrays, extra=header["extra"])


def check_catalog_match(ckpt: Checkpoint, catalog_dict: dict) -> None:
    if ckpt.catalog_dict != catalog_dict:
        raise CheckpointError(
            "checkpoint catalog does not match the requested catalog:\n"
            f"  checkpoint: {json.dumps(ckpt.catalog_dict, sort_keys=True)}\n"
            f"  requested:  {json.dumps(catalog_dict, sort_keys=True)}")
