"""Canonical byte encoding: big-endian fixed-width integers, length-prefixed
byte strings, and count-prefixed lists.

The same encoding serves as the wire format for protocol messages and as the
signing input for certificates, so it must be deterministic and decode must
reject anything outside the image of encode.
"""
from __future__ import annotations

import struct

from .errors import SazError


class CodecError(SazError):
    """Bad canonical encoding."""


class Malformed(CodecError):
    """Truncated, oversized, or otherwise non-canonical bytes."""


class UnknownTag(CodecError):
    """Message tag not in the protocol catalog."""


def pack_u8(value: int) -> bytes:
    return struct.pack(">B", value)


def pack_u32(value: int) -> bytes:
    return struct.pack(">I", value)


def pack_u64(value: int) -> bytes:
    return struct.pack(">Q", value)


def pack_bytes(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def pack_str(text: str) -> bytes:
    return pack_bytes(text.encode("utf-8"))


class Reader:
    """Bounds-checked sequential reader over a single encoded buffer."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def take(self, count: int) -> bytes:
        if count < 0 or count > self.remaining:
            raise Malformed("truncated input")
        out = self._data[self._pos : self._pos + count]
        self._pos += count
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "big")

    def u64(self) -> int:
        return int.from_bytes(self.take(8), "big")

    def bytes_lp(self) -> bytes:
        return self.take(self.u32())

    def str_lp(self) -> str:
        raw = self.bytes_lp()
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise Malformed(f"invalid UTF-8: {exc}") from exc

    def expect_end(self) -> None:
        if self.remaining:
            raise Malformed(f"{self.remaining} trailing bytes")
