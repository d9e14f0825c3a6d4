"""Small helpers shared by the binary file formats."""

import struct
from typing import BinaryIO

import numpy as np


def write_u32(f: BinaryIO, *values: int) -> None:
    f.write(struct.pack(f"<{len(values)}I", *values))


def write_u64(f: BinaryIO, *values: int) -> None:
    f.write(struct.pack(f"<{len(values)}Q", *values))


def read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated file: wanted {n} bytes for {what} at offset {f.tell() - len(buf)}")
    return buf


def read_u32(f: BinaryIO, count: int, what: str) -> tuple[int, ...]:
    return struct.unpack(f"<{count}I", read_exact(f, 4 * count, what))


def read_u64(f: BinaryIO, count: int, what: str) -> tuple[int, ...]:
    return struct.unpack(f"<{count}Q", read_exact(f, 8 * count, what))


def check_magic(f: BinaryIO, magic: bytes, version: int) -> None:
    got = read_exact(f, len(magic), "magic")
    if got != magic:
        raise ValueError(f"bad magic: expected {magic!r}, got {got!r}")
    (ver,) = read_u32(f, 1, "format version")
    if ver != version:
        raise ValueError(f"unsupported format version {ver} (supported: {version})")


def read_f32_array(f: BinaryIO, shape: tuple[int, ...], what: str) -> np.ndarray:
    n = int(np.prod(shape)) if shape else 1
    buf = read_exact(f, 4 * n, what)
    return np.frombuffer(buf, dtype="<f4").reshape(shape).copy()


def read_u32_array(f: BinaryIO, count: int, what: str) -> np.ndarray:
    buf = read_exact(f, 4 * count, what)
    return np.frombuffer(buf, dtype="<u4").copy()
