"""Mutual authentication and the integrity-protected message channel.

The handshake is a three-token exchange.  The client opens with an ephemeral
X25519 public value, a fresh nonce, and its certificate chain.  The server
answers with its own ephemeral value, nonce, and chain, plus an Ed25519
signature by its leaf key over the SHA-256 hash of the transcript so far.
The client closes with a signature by its leaf key over the full two-token
transcript.  Both sides derive a 64-byte key block from the shared secret
with HKDF-SHA-256, salted by both nonces, and split it into one HMAC-SHA-256
key per direction.

Signing the transcript binds each identity to the ephemeral values and the
peer's chain, so splicing a different chain under an existing signature is
rejected.  After the handshake every message travels wrapped with an HMAC
over a per-direction sequence counter and the body, which refuses tampering,
reordering, and replay.  Payloads are authenticated but not encrypted.
"""
from __future__ import annotations

import hashlib
import hmac
import secrets
import struct
import time
from dataclasses import dataclass
from typing import BinaryIO, Callable, Iterable

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .credential import (
    Certificate,
    ChainError,
    CredentialChain,
    ExpiredChain,
    KeyPair,
    VerifiedIdentity,
    issue_certificate,
    random_serial,
    verify_chain,
    verify_signature,
)
from .encoding import CodecError
from .errors import SazError
from .wire import (
    ClientAuth,
    ClientHello,
    NONCE_SIZE,
    ProtectedMessage,
    ServerAuth,
    decode_frame,
    decode_message,
    encode_frame,
    encode_message,
    server_auth_tbs,
)

HANDSHAKE_VERSION = 1
KDF_INFO = b"SAZ-v1"

Rng = Callable[[int], bytes]


class HandshakeError(SazError):
    """The peer could not be authenticated."""


class UnsupportedVersion(HandshakeError):
    pass


class MalformedToken(HandshakeError):
    pass


class BadClientChain(HandshakeError):
    pass


class BadServerChain(HandshakeError):
    pass


class BadServerSignature(HandshakeError):
    pass


class BadClientSignature(HandshakeError):
    pass


class BadDelegation(HandshakeError):
    pass


class IntegrityFailure(SazError):
    """A protected message failed verification: tampering, reordering, or replay."""


def _mac(key: bytes, seq: int, body: bytes) -> bytes:
    return hmac.new(key, struct.pack(">Q", seq) + body, hashlib.sha256).digest()


def _derive_keys(shared: bytes, client_nonce: bytes, server_nonce: bytes) -> tuple[bytes, bytes]:
    block = HKDF(
        algorithm=hashes.SHA256(),
        length=64,
        salt=client_nonce + server_nonce,
        info=KDF_INFO,
    ).derive(shared)
    return block[:32], block[32:]


@dataclass
class SecurityContext:
    """Per-connection channel state; single-owner, not thread-safe."""

    role: str
    send_key: bytes
    recv_key: bytes
    peer: VerifiedIdentity
    transcript_hash: bytes
    send_seq: int = 0
    recv_seq: int = 0

    def wrap(self, body: bytes) -> ProtectedMessage:
        if self.send_seq >= 2**64 - 1:
            raise OverflowError("send sequence counter exhausted")
        msg = ProtectedMessage(body, _mac(self.send_key, self.send_seq, body))
        self.send_seq += 1
        return msg

    def unwrap(self, msg: ProtectedMessage) -> bytes:
        expected = _mac(self.recv_key, self.recv_seq, msg.body)
        if not hmac.compare_digest(expected, msg.mac):
            raise IntegrityFailure(f"MAC mismatch at sequence {self.recv_seq}")
        self.recv_seq += 1
        return msg.body


@dataclass
class PendingInitiator:
    chain: CredentialChain
    ephemeral: KeyPair
    nonce: bytes
    hello_bytes: bytes


@dataclass
class PendingAcceptor:
    send_key: bytes
    recv_key: bytes
    peer: VerifiedIdentity
    hello_bytes: bytes
    auth_bytes: bytes


def initiate(
    chain: CredentialChain, rng: Rng = secrets.token_bytes
) -> tuple[ClientHello, PendingInitiator]:
    """Open a handshake with a fresh ephemeral keypair and nonce."""
    ephemeral = KeyPair.generate_dh(rng)
    nonce = rng(NONCE_SIZE)
    hello = ClientHello(HANDSHAKE_VERSION, ephemeral.verifying_key, nonce, chain.certs)
    return hello, PendingInitiator(chain, ephemeral, nonce, encode_message(hello))


def respond(
    hello: ClientHello,
    server_chain: CredentialChain,
    trust_anchors: Iterable[Certificate],
    now: float,
    rng: Rng = secrets.token_bytes,
) -> tuple[ServerAuth, PendingAcceptor]:
    """Verify the client chain, authenticate over the transcript, and derive
    the session key block."""
    if hello.version != HANDSHAKE_VERSION:
        raise UnsupportedVersion(f"version {hello.version} is not supported")
    try:
        peer = verify_chain(hello.client_chain, trust_anchors, now)
    except ChainError as exc:
        raise BadClientChain(str(exc)) from exc

    ephemeral = KeyPair.generate_dh(rng)
    nonce = rng(NONCE_SIZE)
    unsigned = ServerAuth(ephemeral.verifying_key, nonce, server_chain.certs, b"")
    hello_bytes = encode_message(hello)
    digest = hashlib.sha256(hello_bytes + server_auth_tbs(unsigned)).digest()
    auth = ServerAuth(
        ephemeral.verifying_key, nonce, server_chain.certs, server_chain.leaf_key.sign(digest)
    )

    try:
        shared = ephemeral.exchange(hello.client_eph_pub)
    except ValueError as exc:
        raise MalformedToken(f"bad ephemeral public value: {exc}") from exc
    to_acceptor, to_initiator = _derive_keys(shared, hello.client_nonce, nonce)
    pending = PendingAcceptor(
        send_key=to_initiator,
        recv_key=to_acceptor,
        peer=peer,
        hello_bytes=hello_bytes,
        auth_bytes=encode_message(auth),
    )
    return auth, pending


def finish_initiate(
    pending: PendingInitiator,
    auth: ServerAuth,
    trust_anchors: Iterable[Certificate],
    now: float,
) -> tuple[ClientAuth, SecurityContext]:
    """Authenticate the server's token, then answer with the client signature."""
    try:
        server_identity = verify_chain(auth.server_chain, trust_anchors, now)
    except ChainError as exc:
        raise BadServerChain(str(exc)) from exc

    digest = hashlib.sha256(pending.hello_bytes + server_auth_tbs(auth)).digest()
    if not verify_signature(server_identity.leaf_key, auth.server_sig, digest):
        raise BadServerSignature("server signature does not cover this transcript")

    try:
        shared = pending.ephemeral.exchange(auth.server_eph_pub)
    except ValueError as exc:
        raise MalformedToken(f"bad ephemeral public value: {exc}") from exc
    to_acceptor, to_initiator = _derive_keys(shared, pending.nonce, auth.server_nonce)

    auth_bytes = encode_message(auth)
    client_sig = pending.chain.leaf_key.sign(
        hashlib.sha256(pending.hello_bytes + auth_bytes).digest()
    )
    client_auth = ClientAuth(client_sig)
    transcript = hashlib.sha256(
        pending.hello_bytes + auth_bytes + encode_message(client_auth)
    ).digest()
    context = SecurityContext(
        role="initiator",
        send_key=to_acceptor,
        recv_key=to_initiator,
        peer=server_identity,
        transcript_hash=transcript,
    )
    return client_auth, context


def finish_accept(pending: PendingAcceptor, auth: ClientAuth) -> SecurityContext:
    """Check the client signature against the transcript and open the channel."""
    digest = hashlib.sha256(pending.hello_bytes + pending.auth_bytes).digest()
    if not verify_signature(pending.peer.leaf_key, auth.client_sig, digest):
        raise BadClientSignature("client signature does not cover this transcript")
    transcript = hashlib.sha256(
        pending.hello_bytes + pending.auth_bytes + encode_message(auth)
    ).digest()
    return SecurityContext(
        role="acceptor",
        send_key=pending.send_key,
        recv_key=pending.recv_key,
        peer=pending.peer,
        transcript_hash=transcript,
    )


# -- protected channel -------------------------------------------------------

def protect(context: SecurityContext, message) -> bytes:
    """Frame a message for the protected channel."""
    return encode_frame(encode_message(context.wrap(encode_message(message))))


def receive_protected(context: SecurityContext, stream: BinaryIO) -> bytes:
    """Read one protected frame and return its authenticated body.

    Once the channel is up, the only conforming traffic is well-formed
    protected messages, so any frame that fails to decode counts as an
    integrity violation.  Frame-level errors (close, truncation) propagate
    unchanged.
    """
    payload = decode_frame(stream)
    try:
        msg = decode_message(payload)
    except CodecError as exc:
        raise IntegrityFailure(f"undecodable frame on protected channel: {exc}") from exc
    if not isinstance(msg, ProtectedMessage):
        raise IntegrityFailure(f"unexpected {type(msg).__name__} on protected channel")
    return context.unwrap(msg)


# -- optional credential delegation ------------------------------------------

def delegate_request(context: SecurityContext) -> KeyPair:
    """Fresh keypair whose public half is offered to the peer for delegation."""
    del context  # established context is the precondition; no state is read
    return KeyPair.generate()


def delegate_fulfill(
    context: SecurityContext,
    server_public_key: bytes,
    chain: CredentialChain,
    lifetime_seconds: int,
    *,
    now: float | None = None,
) -> Certificate:
    """Issue a proxy certificate over the peer's offered key, signed by the
    local leaf key, clipped to the leaf's own validity."""
    del context
    if now is None:
        now = time.time()
    leaf = chain.leaf
    if now >= leaf.not_after:
        raise ExpiredChain(f"leaf certificate expired at {leaf.not_after}")
    not_after = min(int(now) + int(lifetime_seconds), leaf.not_after)
    return issue_certificate(
        chain.leaf_key,
        leaf.subject,
        leaf.subject.with_proxy(),
        server_public_key,
        (int(now), not_after),
        random_serial(),
    )


def verify_delegation(
    context: SecurityContext,
    cert: Certificate,
    client_chain: Iterable[Certificate],
    trust_anchors: Iterable[Certificate],
    now: float,
    expected_key: bytes | None = None,
) -> VerifiedIdentity:
    """Check that a delegated certificate extends the peer's presented chain."""
    if expected_key is not None and cert.subject_key != expected_key:
        raise BadDelegation("delegated certificate is not over the requested key")
    try:
        identity = verify_chain((cert, *client_chain), trust_anchors, now)
    except ChainError as exc:
        raise BadDelegation(str(exc)) from exc
    if identity.base_dn != context.peer.base_dn:
        raise BadDelegation("delegated identity does not match the authenticated peer")
    return identity
