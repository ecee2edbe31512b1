"""Little-endian, length-prefixed record framing shared by dataset and checkpoint files.

A file is ``magic(4) | version u32 | record*``; each record is
``length u64 | payload | blake2b-64(payload)``.
"""

from __future__ import annotations

import hashlib
import io
import struct


class CorruptFileError(ValueError):
    pass


class UnsupportedVersionError(ValueError):
    pass


def checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


class Writer:
    """Accumulates the fields of one record payload."""

    def __init__(self):
        self.buf = io.BytesIO()

    def u8(self, v): self.buf.write(struct.pack("<B", v))
    def u16(self, v): self.buf.write(struct.pack("<H", v))
    def u32(self, v): self.buf.write(struct.pack("<I", v))
    def u64(self, v): self.buf.write(struct.pack("<Q", v))
    def i64(self, v): self.buf.write(struct.pack("<q", v))

    def str(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.buf.write(b)

    def blob(self, b: bytes):
        self.u64(len(b))
        self.buf.write(b)

    def getvalue(self) -> bytes:
        return self.buf.getvalue()


class Reader:
    """Sequential field reader; any short read is reported as corruption."""

    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptFileError(f"corrupt {self.what}: truncated field")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def _unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def u8(self): return self._unpack("<B")
    def u16(self): return self._unpack("<H")
    def u32(self): return self._unpack("<I")
    def u64(self): return self._unpack("<Q")
    def i64(self): return self._unpack("<q")

    def str(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptFileError(f"corrupt {self.what}: bad string") from exc

    def blob(self) -> bytes:
        return self.take(self.u64())

    def done(self) -> bool:
        return self.pos == len(self.data)


def frame(payload: bytes) -> bytes:
    return struct.pack("<Q", len(payload)) + payload + checksum(payload)


def pack_file(magic: bytes, version: int, payloads) -> bytes:
    out = [magic, struct.pack("<I", version)]
    out += [frame(p) for p in payloads]
    return b"".join(out)


def unpack_file(data: bytes, magic: bytes, version: int, what: str) -> list:
    """Split a file into verified record payloads."""
    if len(data) < 8 or data[:4] != magic:
        raise CorruptFileError(f"corrupt {what}: bad magic")
    found = struct.unpack("<I", data[4:8])[0]
    if found != version:
        raise UnsupportedVersionError(f"unsupported version {found} (expected {version})")
    r = Reader(data[8:], what)
    payloads = []
    while not r.done():
        payload = r.blob()
        if r.take(8) != checksum(payload):
            raise CorruptFileError(f"corrupt {what}: checksum mismatch in record {len(payloads)}")
        payloads.append(payload)
    return payloads


def fmt_float(x) -> str:
    """Shortest round-trip text for a float (plain, never ``np.float64(...)``)."""
    return repr(float(x))
