"""Versioned binary checkpoints.

Layout::

    b"MOFCKPT\\0"              8-byte magic
    uint32 LE                  format version
    uint64 LE                  header length H
    H bytes                    UTF-8 JSON header (sorted keys, compact)
    payload                    little-endian float64 tensors, in header order
    32 bytes                   SHA-256 of everything above

The header records kind, run config, free-form metadata, and for every tensor
its name, shape and payload offset (in float64 elements).  Serialization is
deterministic, so save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamState
from .errors import CheckpointError

MAGIC = b"MOFCKPT\0"
FORMAT_VERSION = 1
_DIGEST = 32


@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    adam: AdamState | None = None

    def to_bytes(self) -> bytes:
        index, chunks, offset = [], [], 0
        entries = list(self.tensors.items())
        adam_header = None
        if self.adam is not None:
            a = self.adam
            adam_header = {
                "t": a.t,
                "beta1": a.beta1,
                "beta2": a.beta2,
                "eps": a.eps,
                "weight_decay": a.weight_decay,
                "lr": dict(sorted(a.lr.items())),
            }
            entries += [(f"adam.m/{k}", v) for k, v in sorted(a.m.items())]
            entries += [(f"adam.v/{k}", v) for k, v in sorted(a.v.items())]
        for name, arr in entries:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            index.append({"name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.size
        header = {
            "kind": self.kind,
            "config": self.config,
            "meta": self.meta,
            "tensors": index,
            "adam": adam_header,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < len(MAGIC) + 12 + _DIGEST or not blob.startswith(MAGIC):
            raise CheckpointError("not a checkpoint file (bad magic)")
        body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
        if hashlib.sha256(body).digest() != digest:
            raise CheckpointError("checkpoint checksum mismatch; file is corrupt")
        version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        start = len(MAGIC) + 12
        header = json.loads(body[start : start + hlen].decode("utf-8"))
        payload = np.frombuffer(body, dtype="<f8", offset=start + hlen)
        tensors, m, v = {}, {}, {}
        for entry in header["tensors"]:
            n = int(np.prod(entry["shape"], dtype=np.int64))
            arr = payload[entry["offset"] : entry["offset"] + n].astype(np.float64).reshape(entry["shape"])
            name = entry["name"]
            if name.startswith("adam.m/"):
                m[name[7:]] = arr
            elif name.startswith("adam.v/"):
                v[name[7:]] = arr
            else:
                tensors[name] = arr
        adam = None
        if header["adam"] is not None:
            a = header["adam"]
            adam = AdamState(m, v, a["t"], a["beta1"], a["beta2"], a["eps"], a["weight_decay"], a["lr"])
        return cls(header["kind"], header["config"], tensors, header["meta"], adam)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            blob = Path(path).read_bytes()
        except OSError as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
        return cls.from_bytes(blob)


def check_compatible(expected: dict[str, tuple], found: dict[str, np.ndarray], what: str) -> None:
    """Raise with both shapes when a checkpoint does not fit a model."""
    problems = []
    for name, shape in expected.items():
        if name not in found:
            problems.append(f"{name}: missing (model expects {tuple(shape)})")
        elif tuple(found[name].shape) != tuple(shape):
            problems.append(f"{name}: checkpoint {tuple(found[name].shape)} vs model {tuple(shape)}")
    extra = sorted(set(found) - set(expected))
    if extra:
        problems.append(f"unexpected tensors: {', '.join(extra[:5])}")
    if problems:
        raise CheckpointError(f"{what} is incompatible: " + "; ".join(problems[:10]))
