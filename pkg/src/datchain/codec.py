"""Canonical byte encoding primitives.

Every hash and signature in the platform is computed over bytes produced
here, so the rules are frozen (see docs/FORMATS.md for the byte-exact
layout of each record):

  - integers are unsigned big-endian, fixed width (u8/u16/u32/u64)
  - variable-length byte fields carry a u32 length prefix
  - strings are UTF-8, length-prefixed like bytes
  - string->string maps are encoded sorted by key bytes, count-prefixed

Decoding is strict: trailing bytes, truncation, or out-of-range values
raise DecodeError rather than being ignored.
"""

from __future__ import annotations

import struct

U8_MAX = 0xFF
U32_MAX = 0xFFFF_FFFF
U64_MAX = 0xFFFF_FFFF_FFFF_FFFF


class DecodeError(ValueError):
    """Input bytes do not parse as the expected canonical record."""


def enc_u8(value: int) -> bytes:
    if not 0 <= value <= U8_MAX:
        raise ValueError(f"u8 out of range: {value}")
    return struct.pack(">B", value)


def enc_u32(value: int) -> bytes:
    if not 0 <= value <= U32_MAX:
        raise ValueError(f"u32 out of range: {value}")
    return struct.pack(">I", value)


def enc_u64(value: int) -> bytes:
    if not 0 <= value <= U64_MAX:
        raise ValueError(f"u64 out of range: {value}")
    return struct.pack(">Q", value)


def enc_bytes(value: bytes) -> bytes:
    return enc_u32(len(value)) + value


def enc_str(value: str) -> bytes:
    return enc_bytes(value.encode("utf-8"))


def enc_str_map(value: dict[str, str]) -> bytes:
    out = [enc_u32(len(value))]
    for key in sorted(value):
        out.append(enc_str(key))
        out.append(enc_str(value[key]))
    return b"".join(out)


class Reader:
    """Cursor over a canonical byte string."""

    __slots__ = ("data", "pos")

    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise DecodeError(f"truncated record: need {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def vbytes(self) -> bytes:
        return self.take(self.u32())

    def vstr(self) -> str:
        raw = self.vbytes()
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"invalid utf-8 string: {exc}") from exc

    def str_map(self) -> dict[str, str]:
        count = self.u32()
        out: dict[str, str] = {}
        prev: bytes | None = None
        for _ in range(count):
            key = self.vstr()
            raw = key.encode("utf-8")
            if prev is not None and raw <= prev:
                raise DecodeError("map keys not strictly ascending")
            prev = raw
            out[key] = self.vstr()
        return out

    def done(self) -> None:
        if self.pos != len(self.data):
            raise DecodeError(f"{len(self.data) - self.pos} trailing bytes")

    def remaining(self) -> int:
        return len(self.data) - self.pos
