"""Checkpoint file: ``TNMT1`` magic, JSON header, then raw little-endian arrays.

Layout::

    b"TNMT1"
    uint64 LE   header length in bytes
    header      UTF-8 JSON (sorted keys) with a "manifest" list of
                {"name", "shape", "dtype"} entries
    blocks      the arrays named in the manifest, in manifest order

Model parameters come first, then the Adam first/second moments as
``adam.m.<name>`` / ``adam.v.<name>``.  Serialisation is canonical, so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"TNMT1"


@dataclass
class Checkpoint:
    model_config: dict
    params: "OrderedDict[str, np.ndarray]"
    adam_m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    adam_v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    step: int = 0
    rng_state: Optional[dict] = None
    dev_history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        manifest = []
        blocks = []

        def add(name, arr):
            arr = np.asarray(arr)
            le = arr.dtype.newbyteorder("<")
            manifest.append({"name": name, "shape": list(arr.shape), "dtype": le.str})
            blocks.append(np.ascontiguousarray(arr, dtype=le).tobytes())

        for name, arr in self.params.items():
            add(name, arr)
        for name, arr in self.adam_m.items():
            add(f"adam.m.{name}", arr)
        for name, arr in self.adam_v.items():
            add(f"adam.v.{name}", arr)
        header = {
            "format": 1,
            "model_config": self.model_config,
            "step": self.step,
            "rng_state": self.rng_state,
            "dev_history": self.dev_history,
            "extra": self.extra,
            "manifest": manifest,
        }
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(blocks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:5] != MAGIC:
            raise ValueError("not a TNMT1 checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", data[5:13])
        header = json.loads(data[13 : 13 + hlen].decode("utf-8"))
        offset = 13 + hlen
        params, m, v = OrderedDict(), OrderedDict(), OrderedDict()
        for entry in header["manifest"]:
            dt = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            arr = np.frombuffer(data, dtype=dt, count=n // dt.itemsize, offset=offset)
            arr = arr.reshape(shape).astype(dt.newbyteorder("="), copy=True)
            offset += n
            name = entry["name"]
            if name.startswith("adam.m."):
                m[name[7:]] = arr
            elif name.startswith("adam.v."):
                v[name[7:]] = arr
            else:
                params[name] = arr
        if offset != len(data):
            raise ValueError("checkpoint has trailing bytes or truncated blocks")
        return cls(
            header["model_config"],
            params,
            m,
            v,
            header["step"],
            header["rng_state"],
            header["dev_history"],
            header["extra"],
        )

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
