"""Checksummed little-endian binary containers.

Layout of every file written here::

    magic (8 bytes) | version (u32) | body | blake2b-64 of everything before

Writes go to a temporary sibling and are renamed into place, so readers
never observe a half-written file.
"""
import hashlib
import os
import struct

import numpy as np

from .errors import ChecksumError, FormatError

CHECKSUM_BYTES = 8


def checksum(data):
    return hashlib.blake2b(data, digest_size=CHECKSUM_BYTES).digest()


def atomic_write(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def pack_file(magic, version, body):
    assert len(magic) == 8
    head = magic + struct.pack("<I", version) + body
    return head + checksum(head)


def unpack_file(data, magic, version, name="file"):
    if len(data) < 12 + CHECKSUM_BYTES:
        raise FormatError(f"{name}: truncated")
    if data[:8] != magic:
        raise FormatError(f"{name}: bad magic {data[:8]!r}")
    if checksum(data[:-CHECKSUM_BYTES]) != data[-CHECKSUM_BYTES:]:
        raise ChecksumError(f"{name}: checksum mismatch")
    (got,) = struct.unpack_from("<I", data, 8)
    if got != version:
        raise FormatError(f"{name}: format version {got}, expected {version}")
    return data[12:-CHECKSUM_BYTES]


def write_file(path, magic, version, body):
    atomic_write(path, pack_file(magic, version, body))


def read_file(path, magic, version):
    with open(path, "rb") as f:
        data = f.read()
    return unpack_file(data, magic, version, name=os.fspath(path))


class Writer:
    def __init__(self):
        self.parts = []

    def u8(self, x):
        self.parts.append(struct.pack("<B", x))

    def u32(self, x):
        self.parts.append(struct.pack("<I", x))

    def u64(self, x):
        self.parts.append(struct.pack("<Q", x))

    def raw(self, b):
        self.u64(len(b))
        self.parts.append(bytes(b))

    def str(self, s):
        self.raw(s.encode("utf-8"))

    def array(self, a, dtype="<f8"):
        a = np.ascontiguousarray(a, dtype=dtype)
        self.u8(a.ndim)
        for n in a.shape:
            self.u64(n)
        self.parts.append(a.tobytes())

    def getvalue(self):
        return b"".join(self.parts)


class Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def _take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError("unexpected end of data")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self._take(1))[0]

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self._take(8))[0]

    def raw(self):
        return bytes(self._take(self.u64()))

    def str(self):
        return self.raw().decode("utf-8")

    def array(self, dtype="<f8"):
        ndim = self.u8()
        shape = tuple(self.u64() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        itemsize = np.dtype(dtype).itemsize
        buf = self._take(count * itemsize)
        return np.frombuffer(buf, dtype=dtype).reshape(shape).astype(dtype.lstrip("<"), copy=True)

    def done(self):
        return self.pos == len(self.data)
