"""Length-prefixed TCP frames and the protocol message catalog.

A connection carries a stream of frames, each a 32-bit big-endian length
followed by that many payload bytes.  Every payload is the canonical encoding
of exactly one message: a 1-byte tag, then the fields in declared order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Union

from .credential import Certificate, decode_certificate, decode_chain, encode_certificate, encode_chain
from .encoding import (
    Malformed,
    Reader,
    UnknownTag,
    pack_bytes,
    pack_str,
    pack_u8,
)
from .errors import SazError

FRAME_MAX = 1 << 20
EPHEMERAL_KEY_SIZE = 32
NONCE_SIZE = 16
MAC_SIZE = 32
OP_NAME_MAX = 64


class FrameError(SazError):
    """Bad framing on the byte stream."""


class Oversize(FrameError):
    pass


class Truncated(FrameError):
    pass


class ZeroLength(FrameError):
    pass


class ConnectionClosed(FrameError):
    """The stream ended cleanly at a frame boundary."""


def parse_host_port(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def encode_frame(payload: bytes) -> bytes:
    if len(payload) == 0:
        raise ZeroLength("refusing to send an empty frame")
    if len(payload) > FRAME_MAX:
        raise Oversize(f"payload of {len(payload)} bytes exceeds the {FRAME_MAX} byte cap")
    return struct.pack(">I", len(payload)) + payload


def decode_frame(stream: BinaryIO) -> bytes:
    """Read one frame; raises ConnectionClosed on EOF at a frame boundary."""
    header = stream.read(4)
    if not header:
        raise ConnectionClosed("stream closed")
    if len(header) < 4:
        raise Truncated("stream ended inside a frame header")
    (length,) = struct.unpack(">I", header)
    if length == 0:
        raise ZeroLength("zero-length frame")
    if length > FRAME_MAX:
        raise Oversize(f"declared length {length} exceeds the {FRAME_MAX} byte cap")
    payload = stream.read(length)
    if len(payload) < length:
        raise Truncated("stream ended inside a frame payload")
    return payload


# -- messages ----------------------------------------------------------------

@dataclass(frozen=True)
class ClientHello:
    version: int
    client_eph_pub: bytes
    client_nonce: bytes
    client_chain: tuple[Certificate, ...]

    def __post_init__(self):
        object.__setattr__(self, "client_chain", tuple(self.client_chain))
        if len(self.client_eph_pub) != EPHEMERAL_KEY_SIZE:
            raise ValueError("ephemeral public value must be 32 bytes")
        if len(self.client_nonce) != NONCE_SIZE:
            raise ValueError("nonce must be 16 bytes")


@dataclass(frozen=True)
class ServerAuth:
    server_eph_pub: bytes
    server_nonce: bytes
    server_chain: tuple[Certificate, ...]
    server_sig: bytes

    def __post_init__(self):
        object.__setattr__(self, "server_chain", tuple(self.server_chain))
        if len(self.server_eph_pub) != EPHEMERAL_KEY_SIZE:
            raise ValueError("ephemeral public value must be 32 bytes")
        if len(self.server_nonce) != NONCE_SIZE:
            raise ValueError("nonce must be 16 bytes")


@dataclass(frozen=True)
class ClientAuth:
    client_sig: bytes


@dataclass(frozen=True)
class ProtectedMessage:
    body: bytes
    mac: bytes

    def __post_init__(self):
        if len(self.mac) != MAC_SIZE:
            raise ValueError("MAC must be 32 bytes")


@dataclass(frozen=True)
class OperationRequest:
    op_name: str
    delegate: bool = False

    def __post_init__(self):
        encoded = self.op_name.encode("utf-8")
        if not 1 <= len(encoded) <= OP_NAME_MAX:
            raise ValueError(f"operation name must be 1..{OP_NAME_MAX} bytes")


@dataclass(frozen=True)
class DecisionMessage:
    verdict: str

    def __post_init__(self):
        if self.verdict not in ("YES", "NO"):
            raise ValueError(f"verdict must be YES or NO, got {self.verdict!r}")


@dataclass(frozen=True)
class DelegationKey:
    public_key: bytes

    def __post_init__(self):
        if len(self.public_key) != EPHEMERAL_KEY_SIZE:
            raise ValueError("delegation public key must be 32 bytes")


@dataclass(frozen=True)
class DelegationCert:
    cert: Certificate


Message = Union[
    ClientHello,
    ServerAuth,
    ClientAuth,
    ProtectedMessage,
    OperationRequest,
    DecisionMessage,
    DelegationKey,
    DelegationCert,
]

TAG_CLIENT_HELLO = 0x01
TAG_SERVER_AUTH = 0x02
TAG_CLIENT_AUTH = 0x03
TAG_PROTECTED = 0x04
TAG_OPERATION_REQUEST = 0x05
TAG_DECISION = 0x06
TAG_DELEGATION_KEY = 0x07
TAG_DELEGATION_CERT = 0x08


def encode_message(msg: Message) -> bytes:
    if isinstance(msg, ClientHello):
        return b"".join(
            (
                pack_u8(TAG_CLIENT_HELLO),
                pack_u8(msg.version),
                pack_bytes(msg.client_eph_pub),
                pack_bytes(msg.client_nonce),
                encode_chain(msg.client_chain),
            )
        )
    if isinstance(msg, ServerAuth):
        return server_auth_tbs(msg) + pack_bytes(msg.server_sig)
    if isinstance(msg, ClientAuth):
        return pack_u8(TAG_CLIENT_AUTH) + pack_bytes(msg.client_sig)
    if isinstance(msg, ProtectedMessage):
        return pack_u8(TAG_PROTECTED) + pack_bytes(msg.body) + pack_bytes(msg.mac)
    if isinstance(msg, OperationRequest):
        return (
            pack_u8(TAG_OPERATION_REQUEST)
            + pack_str(msg.op_name)
            + pack_u8(1 if msg.delegate else 0)
        )
    if isinstance(msg, DecisionMessage):
        return pack_u8(TAG_DECISION) + pack_str(msg.verdict)
    if isinstance(msg, DelegationKey):
        return pack_u8(TAG_DELEGATION_KEY) + pack_bytes(msg.public_key)
    if isinstance(msg, DelegationCert):
        return pack_u8(TAG_DELEGATION_CERT) + encode_certificate(msg.cert)
    raise TypeError(f"not a protocol message: {type(msg).__name__}")


def server_auth_tbs(msg: ServerAuth) -> bytes:
    """ServerAuth encoding with the signature field omitted; this is what the
    server signs together with the preceding transcript."""
    return b"".join(
        (
            pack_u8(TAG_SERVER_AUTH),
            pack_bytes(msg.server_eph_pub),
            pack_bytes(msg.server_nonce),
            encode_chain(msg.server_chain),
        )
    )


def decode_message(data: bytes) -> Message:
    """Decode exactly one message; any trailing or missing bytes reject."""
    reader = Reader(data)
    tag = reader.u8()
    try:
        if tag == TAG_CLIENT_HELLO:
            msg: Message = ClientHello(
                version=reader.u8(),
                client_eph_pub=reader.bytes_lp(),
                client_nonce=reader.bytes_lp(),
                client_chain=decode_chain(reader),
            )
        elif tag == TAG_SERVER_AUTH:
            msg = ServerAuth(
                server_eph_pub=reader.bytes_lp(),
                server_nonce=reader.bytes_lp(),
                server_chain=decode_chain(reader),
                server_sig=reader.bytes_lp(),
            )
        elif tag == TAG_CLIENT_AUTH:
            msg = ClientAuth(client_sig=reader.bytes_lp())
        elif tag == TAG_PROTECTED:
            msg = ProtectedMessage(body=reader.bytes_lp(), mac=reader.bytes_lp())
        elif tag == TAG_OPERATION_REQUEST:
            op_name = reader.str_lp()
            flag = reader.u8()
            if flag not in (0, 1):
                raise Malformed(f"bad delegate flag {flag}")
            msg = OperationRequest(op_name=op_name, delegate=bool(flag))
        elif tag == TAG_DECISION:
            msg = DecisionMessage(verdict=reader.str_lp())
        elif tag == TAG_DELEGATION_KEY:
            msg = DelegationKey(public_key=reader.bytes_lp())
        elif tag == TAG_DELEGATION_CERT:
            msg = DelegationCert(cert=decode_certificate(reader))
        else:
            raise UnknownTag(f"unknown message tag 0x{tag:02x}")
    except ValueError as exc:
        raise Malformed(str(exc)) from exc
    reader.expect_end()
    return msg
