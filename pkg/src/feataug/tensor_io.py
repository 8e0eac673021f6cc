"""Binary tensor files and checkpoint directories.

Tensor file layout (all integers little-endian)::

    b"TNSR" | u8 version | u8 dtype (0 = f32) | u8 ndim | ndim x u32 dims | f32 payload

A checkpoint is a directory of tensor files plus ``index.txt`` mapping
tensor names to file names, one ``name<TAB>file`` pair per line.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from feataug.errors import DataError

MAGIC = b"TNSR"
VERSION = 1
DTYPE_F32 = 0
INDEX_NAME = "index.txt"


def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.require(np.asarray(array, dtype="<f4"), requirements="C")
    if arr.ndim > 255:
        raise DataError(f"tensor has {arr.ndim} dims; at most 255 supported")
    header = MAGIC + struct.pack("<BBB", VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise DataError("not a tensor file: bad magic")
    version, dtype, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise DataError(f"unsupported tensor version {version}")
    if dtype != DTYPE_F32:
        raise DataError(f"unsupported tensor dtype code {dtype}")
    offset = 7 + 4 * ndim
    if len(buf) < offset:
        raise DataError("truncated tensor header")
    shape = struct.unpack_from(f"<{ndim}I", buf, 7)
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(buf) - offset != expected:
        raise DataError(
            f"payload is {len(buf) - offset} bytes, shape {shape} needs {expected}"
        )
    data = np.frombuffer(buf, dtype="<f4", offset=offset)
    return data.reshape(shape).astype(np.float32)


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write ``payload`` to ``path`` via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


def _file_name(name: str) -> str:
    return name.replace("/", "_") + ".tnsr"


def save_checkpoint(directory: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named tensors plus the plain-text index.

    The index is written last, so a directory with an index is complete.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, arr in tensors.items():
        if "\t" in name or "\n" in name:
            raise DataError(f"invalid tensor name {name!r}")
        fname = _file_name(name)
        save_tensor(directory / fname, arr)
        lines.append(f"{name}\t{fname}\n")
    atomic_write_bytes(directory / INDEX_NAME, "".join(lines).encode("utf-8"))


def load_checkpoint(directory: str | os.PathLike) -> dict[str, np.ndarray]:
    directory = Path(directory)
    index = directory / INDEX_NAME
    if not index.exists():
        raise DataError(f"no checkpoint index at {index}")
    out: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(index.read_text("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            name, fname = line.split("\t")
        except ValueError:
            raise DataError(f"{index}:{lineno}: expected 'name<TAB>file'") from None
        out[name] = load_tensor(directory / fname)
    return out
