"""Binary checkpoint format.

Layout: magic b"PKRL", u32 version, then one record per tensor:
u32 name length, utf-8 name, u32 rank, u32 dims, little-endian float32
payload in C order. Records run to end of file. Integers are little-endian.
Saving the result of a load reproduces the file byte for byte.
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from typing import BinaryIO, Mapping

import numpy as np

from .errors import ContractViolation

MAGIC = b"PKRL"
VERSION = 1


def write_tensor_record(f: BinaryIO, name: str, arr: np.ndarray) -> None:
    data = np.asarray(arr, dtype="<f4", order="C")  # keeps 0-d arrays 0-d
    raw = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    f.write(struct.pack("<I", data.ndim))
    f.write(struct.pack(f"<{data.ndim}I", *data.shape))
    f.write(data.tobytes())


def read_tensor_record(f: BinaryIO) -> tuple[str, np.ndarray] | None:
    head = f.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise ContractViolation("truncated tensor record header")
    (nlen,) = struct.unpack("<I", head)
    name = f.read(nlen).decode("utf-8")
    (rank,) = struct.unpack("<I", f.read(4))
    dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise ContractViolation(f"truncated payload for tensor {name!r}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return name, arr


def save_checkpoint(path: str, tensors: Mapping[str, np.ndarray], version: int = VERSION) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", version))
    for name, arr in tensors.items():
        if hasattr(arr, "requires_grad"):  # accept Tensor or ndarray
            arr = arr.data
        write_tensor_record(buf, name, np.asarray(arr))
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path: str) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ContractViolation(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise ContractViolation(f"{path}: unsupported checkpoint version {version}")
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        while True:
            rec = read_tensor_record(f)
            if rec is None:
                return out
            name, arr = rec
            if name in out:
                raise ContractViolation(f"{path}: duplicate tensor {name!r}")
            out[name] = arr
