"""Bit-exact tensor files (``.dst``) and JSON manifests for parameter sets.

Layout of a ``.dst`` file, all little-endian::

    b"DSAT"            magic
    0x01               version
    uint32             rank
    rank x uint64      extents
    prod(extents) x float64, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"DSAT"
VERSION = 1


class TensorFormatError(ValueError):
    pass


def encode_tensor(t: Tensor) -> bytes:
    head = MAGIC + bytes([VERSION]) + struct.pack("<I", t.ndim)
    head += struct.pack(f"<{t.ndim}Q", *t.shape)
    return head + t.data.astype("<f8").tobytes(order="C")


def decode_tensor(buf: bytes) -> Tensor:
    if len(buf) < 9 or buf[:4] != MAGIC:
        raise TensorFormatError("not a .dst tensor (bad magic)")
    if buf[4] != VERSION:
        raise TensorFormatError(f"unsupported .dst version {buf[4]}")
    (rank,) = struct.unpack_from("<I", buf, 5)
    off = 9 + 8 * rank
    if len(buf) < off:
        raise TensorFormatError("truncated .dst header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 9)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(buf) != off + 8 * count:
        raise TensorFormatError(f"payload holds {(len(buf) - off) / 8} values, header says {count}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape)
    return Tensor(data)


def save_tensor(path: str | Path, t: Tensor) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path: str | Path) -> Tensor:
    return decode_tensor(Path(path).read_bytes())


def save_bundle(directory: str | Path, tensors: Mapping[str, Tensor], meta: Mapping | None = None) -> Path:
    """Write one ``.dst`` per tensor plus ``manifest.json`` mapping name -> file.

    ``meta`` (config fields and the like) is stored verbatim under ``"meta"``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for i, (name, t) in enumerate(sorted(tensors.items())):
        fname = f"{i:04d}_{name.replace('/', '_')}.dst"
        save_tensor(directory / fname, t)
        files[name] = fname
    manifest = {"format": "dst", "version": VERSION, "tensors": files, "meta": dict(meta or {})}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_bundle(directory: str | Path) -> tuple[dict[str, Tensor], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    tensors = {name: load_tensor(directory / fname) for name, fname in manifest["tensors"].items()}
    return tensors, manifest.get("meta", {})
