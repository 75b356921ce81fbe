"""Distinguished names, keypairs, certificates, and proxy credential chains.

A subject is identified by an ordered attribute/value list (its DN).  Users
hold a chain of certificates running leaf-first from short-lived proxies down
to a self-signed CA, plus the private key for the leaf.  Authorization always
happens against the base DN, which is the leaf subject with every trailing
``CN=proxy`` component stripped.

Everything here is immutable after construction and pure given an explicit
``now``, so values can be shared freely across threads.
"""
from __future__ import annotations

import os
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)

from .encoding import Malformed, Reader, pack_bytes, pack_str, pack_u32, pack_u64
from .errors import SazError

PROXY_COMPONENT = ("CN", "proxy")

_ATTR_RE = re.compile(r"[A-Za-z][A-Za-z0-9]*\Z")


class CredentialError(SazError):
    """Bad credential material."""


class MalformedDN(CredentialError):
    pass


class InvalidValidity(CredentialError):
    pass


class ExpiredChain(CredentialError):
    pass


class BadFileFormat(CredentialError):
    pass


class ChainError(CredentialError):
    """A certificate chain failed verification."""


class UntrustedAnchor(ChainError):
    pass


class BrokenLinkage(ChainError):
    pass


class BadSignature(ChainError):
    pass


class Expired(ChainError):
    pass


class NotYetValid(ChainError):
    pass


class MalformedProxy(ChainError):
    pass


@dataclass(frozen=True)
class DistinguishedName:
    """Ordered attribute/value components naming a subject."""

    components: tuple[tuple[str, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "components", tuple((a, v) for a, v in self.components))
        if not self.components:
            raise MalformedDN("a DN needs at least one component")
        for attr, value in self.components:
            if not isinstance(attr, str) or not _ATTR_RE.fullmatch(attr):
                raise MalformedDN(f"bad attribute {attr!r}")
            if not isinstance(value, str) or not value:
                raise MalformedDN(f"empty value for attribute {attr!r}")

    @classmethod
    def of(cls, *components: tuple[str, str]) -> "DistinguishedName":
        return cls(tuple(components))

    def with_proxy(self) -> "DistinguishedName":
        return DistinguishedName(self.components + (PROXY_COMPONENT,))

    def __str__(self) -> str:
        return serialize_dn(self)


def serialize_dn(dn: DistinguishedName) -> str:
    """Render a DN in slash notation, escaping '/' and '\\' inside values."""
    parts = []
    for attr, value in dn.components:
        escaped = value.replace("\\", "\\\\").replace("/", "\\/")
        parts.append(f"{attr}={escaped}")
    return "/" + "/".join(parts)


def parse_dn(text: str) -> DistinguishedName:
    """Exact inverse of :func:`serialize_dn`; rejects anything outside its image."""
    if not text:
        raise MalformedDN("empty DN text")
    if text[0] != "/":
        raise MalformedDN("DN text must start with '/'")
    components: list[tuple[str, str]] = []
    i, n = 1, len(text)
    while True:
        eq = text.find("=", i)
        if eq == -1:
            raise MalformedDN("component is missing '='")
        attr = text[i:eq]
        if not _ATTR_RE.fullmatch(attr):
            raise MalformedDN(f"bad attribute {attr!r}")
        value_chars: list[str] = []
        j = eq + 1
        while j < n and text[j] != "/":
            ch = text[j]
            if ch == "\\":
                if j + 1 >= n:
                    raise MalformedDN("dangling escape at end of DN")
                nxt = text[j + 1]
                if nxt not in ("/", "\\"):
                    raise MalformedDN(f"invalid escape '\\{nxt}'")
                value_chars.append(nxt)
                j += 2
            else:
                value_chars.append(ch)
                j += 1
        if not value_chars:
            raise MalformedDN(f"empty value for attribute {attr!r}")
        components.append((attr, "".join(value_chars)))
        if j == n:
            break
        i = j + 1
        if i == n:
            raise MalformedDN("trailing '/' without a component")
    return DistinguishedName(tuple(components))


def extract_base_dn(leaf_subject: DistinguishedName) -> DistinguishedName:
    """Strip every trailing proxy component; idempotent."""
    comps = leaf_subject.components
    while comps and comps[-1] == PROXY_COMPONENT:
        comps = comps[:-1]
    if not comps:
        raise MalformedProxy("DN consists only of proxy components")
    if len(comps) == len(leaf_subject.components):
        return leaf_subject
    return DistinguishedName(comps)


@dataclass(frozen=True, eq=False)
class KeyPair:
    """A private key plus its raw public half.

    Identity keys sign (Ed25519); ephemeral keys marked ``dh_capable`` do
    X25519 key agreement instead and refuse to sign.
    """

    signing_key: Union[Ed25519PrivateKey, X25519PrivateKey]
    verifying_key: bytes
    dh_capable: bool = False

    @classmethod
    def generate(cls) -> "KeyPair":
        key = Ed25519PrivateKey.generate()
        return cls(key, key.public_key().public_bytes_raw())

    @classmethod
    def generate_dh(cls, rand=os.urandom) -> "KeyPair":
        key = X25519PrivateKey.from_private_bytes(rand(32))
        return cls(key, key.public_key().public_bytes_raw(), dh_capable=True)

    def sign(self, message: bytes) -> bytes:
        if self.dh_capable:
            raise CredentialError("ephemeral DH keys cannot sign")
        return self.signing_key.sign(message)

    def exchange(self, peer_public: bytes) -> bytes:
        if not self.dh_capable:
            raise CredentialError("identity keys cannot run key agreement")
        return self.signing_key.exchange(X25519PublicKey.from_public_bytes(peer_public))

    def private_bytes(self) -> bytes:
        return self.signing_key.private_bytes_raw()


def verify_signature(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


def random_serial() -> int:
    return int.from_bytes(os.urandom(8), "big")


@dataclass(frozen=True)
class Certificate:
    """One link of a chain; the signature covers the canonical encoding of
    all preceding fields and was made by the issuer's signing key."""

    subject: DistinguishedName
    issuer: DistinguishedName
    serial: int
    not_before: int
    not_after: int
    subject_key: bytes
    signature: bytes

    def __post_init__(self):
        if not 0 <= self.serial < 2**64:
            raise CredentialError(f"serial {self.serial} out of range")
        if self.not_before >= self.not_after:
            raise InvalidValidity(
                f"not_before {self.not_before} is not earlier than not_after {self.not_after}"
            )

    @property
    def is_proxy(self) -> bool:
        return self.subject.components == self.issuer.components + (PROXY_COMPONENT,)

    @property
    def is_self_signed(self) -> bool:
        return self.subject == self.issuer

    def tbs_bytes(self) -> bytes:
        """Canonical encoding of everything the signature covers."""
        return b"".join(
            (
                encode_dn(self.subject),
                encode_dn(self.issuer),
                pack_u64(self.serial),
                pack_u64(self.not_before),
                pack_u64(self.not_after),
                pack_bytes(self.subject_key),
            )
        )


@dataclass(frozen=True)
class VerifiedIdentity:
    """Outcome of a successful chain verification."""

    base_dn: DistinguishedName
    leaf_dn: DistinguishedName
    leaf_key: bytes
    expires_at: int


@dataclass(frozen=True)
class CredentialChain:
    """Leaf-first certificates plus the private key for the leaf."""

    certs: tuple[Certificate, ...]
    leaf_key: KeyPair

    def __post_init__(self):
        object.__setattr__(self, "certs", tuple(self.certs))
        if not self.certs:
            raise CredentialError("chain has no certificates")
        if self.leaf_key.verifying_key != self.certs[0].subject_key:
            raise CredentialError("leaf key does not match the leaf certificate")

    @property
    def leaf(self) -> Certificate:
        return self.certs[0]


# Sentinel for issuing self-signed certificates.
SELF = None


def issue_certificate(
    issuer_key: KeyPair,
    issuer_subject: DistinguishedName | None,
    subject: DistinguishedName,
    subject_key: bytes,
    validity: tuple[int, int],
    serial: int,
) -> Certificate:
    """Sign a certificate; ``issuer_subject=SELF`` makes it self-signed."""
    not_before, not_after = int(validity[0]), int(validity[1])
    if not_before >= not_after:
        raise InvalidValidity(f"validity window ({not_before}, {not_after}) is empty")
    issuer = subject if issuer_subject is None else issuer_subject
    tbs = b"".join(
        (
            encode_dn(subject),
            encode_dn(issuer),
            pack_u64(serial),
            pack_u64(not_before),
            pack_u64(not_after),
            pack_bytes(subject_key),
        )
    )
    return Certificate(subject, issuer, serial, not_before, not_after, subject_key, issuer_key.sign(tbs))


def create_proxy(
    chain: CredentialChain, lifetime_seconds: int, *, now: float | None = None
) -> CredentialChain:
    """Extend a chain by one proxy level under a fresh keypair.

    The proxy subject is the old leaf subject plus one ``CN=proxy`` component,
    signed by the old leaf key, and never outlives its parent.
    """
    if lifetime_seconds <= 0:
        raise ValueError("lifetime_seconds must be positive")
    if now is None:
        now = time.time()
    leaf = chain.leaf
    if now >= leaf.not_after:
        raise ExpiredChain(f"leaf certificate expired at {leaf.not_after}")
    key = KeyPair.generate()
    not_after = min(int(now) + int(lifetime_seconds), leaf.not_after)
    cert = issue_certificate(
        chain.leaf_key,
        leaf.subject,
        leaf.subject.with_proxy(),
        key.verifying_key,
        (int(now), not_after),
        random_serial(),
    )
    return CredentialChain((cert,) + chain.certs, key)


def verify_chain(
    certs: Sequence[Certificate],
    trust_anchors: Iterable[Certificate],
    now: float,
) -> VerifiedIdentity:
    """Validate linkage, signatures, proxy structure, validity, and anchor
    membership; return the proxy-stripped identity of the leaf."""
    chain = tuple(certs)
    if not chain:
        raise BrokenLinkage("empty certificate chain")
    anchors = frozenset(trust_anchors)

    # Proxies must be well formed and must all sit leaf-side of the first
    # non-proxy certificate.
    seen_non_proxy = False
    for cert in chain:
        if cert.subject.components[-1] == PROXY_COMPONENT and not cert.is_proxy:
            raise MalformedProxy(
                f"{serialize_dn(cert.subject)} does not extend its issuer by exactly CN=proxy"
            )
        if cert.is_proxy:
            if seen_non_proxy:
                raise MalformedProxy("proxy certificate issued below a non-proxy certificate")
        else:
            seen_non_proxy = True

    for child, parent in zip(chain, chain[1:]):
        if child.issuer != parent.subject:
            raise BrokenLinkage(
                f"issuer {serialize_dn(child.issuer)} does not match {serialize_dn(parent.subject)}"
            )
        if not verify_signature(parent.subject_key, child.signature, child.tbs_bytes()):
            raise BadSignature(f"signature on {serialize_dn(child.subject)} does not verify")

    root = chain[-1]
    if not root.is_self_signed:
        raise BrokenLinkage("terminal certificate is not self-signed")
    if not verify_signature(root.subject_key, root.signature, root.tbs_bytes()):
        raise BadSignature("self-signature on terminal certificate does not verify")
    if root not in anchors:
        raise UntrustedAnchor(f"{serialize_dn(root.subject)} is not a trust anchor")

    for cert in chain:
        if now < cert.not_before:
            raise NotYetValid(f"{serialize_dn(cert.subject)} not valid before {cert.not_before}")
        if now >= cert.not_after:
            raise Expired(f"{serialize_dn(cert.subject)} expired at {cert.not_after}")

    leaf = chain[0]
    return VerifiedIdentity(
        base_dn=extract_base_dn(leaf.subject),
        leaf_dn=leaf.subject,
        leaf_key=leaf.subject_key,
        expires_at=min(c.not_after for c in chain),
    )


# -- canonical encoding ------------------------------------------------------

def encode_dn(dn: DistinguishedName) -> bytes:
    out = [pack_u32(len(dn.components))]
    for attr, value in dn.components:
        out.append(pack_str(attr))
        out.append(pack_str(value))
    return b"".join(out)


def decode_dn(reader: Reader) -> DistinguishedName:
    count = reader.u32()
    components = tuple((reader.str_lp(), reader.str_lp()) for _ in range(count))
    try:
        return DistinguishedName(components)
    except MalformedDN as exc:
        raise Malformed(str(exc)) from exc


def encode_certificate(cert: Certificate) -> bytes:
    return cert.tbs_bytes() + pack_bytes(cert.signature)


def decode_certificate(reader: Reader) -> Certificate:
    subject = decode_dn(reader)
    issuer = decode_dn(reader)
    serial = reader.u64()
    not_before = reader.u64()
    not_after = reader.u64()
    subject_key = reader.bytes_lp()
    signature = reader.bytes_lp()
    try:
        return Certificate(subject, issuer, serial, not_before, not_after, subject_key, signature)
    except CredentialError as exc:
        raise Malformed(str(exc)) from exc


# -- on-disk formats ---------------------------------------------------------

CHAIN_MAGIC = b"SAZC"
KEY_MAGIC = b"SAZK"

_KEY_KIND_ED25519 = 0
_KEY_KIND_X25519 = 1


def encode_chain(certs: Sequence[Certificate]) -> bytes:
    return pack_u32(len(certs)) + b"".join(encode_certificate(c) for c in certs)


def decode_chain(reader: Reader) -> tuple[Certificate, ...]:
    count = reader.u32()
    return tuple(decode_certificate(reader) for _ in range(count))


def write_chain_file(path: str | Path, certs: Sequence[Certificate]) -> None:
    Path(path).write_bytes(CHAIN_MAGIC + encode_chain(certs))


def read_chain_file(path: str | Path) -> tuple[Certificate, ...]:
    data = Path(path).read_bytes()
    if data[:4] != CHAIN_MAGIC:
        raise BadFileFormat(f"{path}: not a certificate chain file")
    reader = Reader(data[4:])
    try:
        certs = decode_chain(reader)
        reader.expect_end()
    except Malformed as exc:
        raise BadFileFormat(f"{path}: {exc}") from exc
    return certs


def write_key_file(path: str | Path, key: KeyPair) -> None:
    kind = _KEY_KIND_X25519 if key.dh_capable else _KEY_KIND_ED25519
    data = KEY_MAGIC + bytes([kind]) + pack_bytes(key.private_bytes())
    path = Path(path)
    path.write_bytes(data)
    os.chmod(path, 0o600)


def read_key_file(path: str | Path) -> KeyPair:
    data = Path(path).read_bytes()
    if data[:4] != KEY_MAGIC:
        raise BadFileFormat(f"{path}: not a key file")
    reader = Reader(data[4:])
    try:
        kind = reader.u8()
        raw = reader.bytes_lp()
        reader.expect_end()
    except Malformed as exc:
        raise BadFileFormat(f"{path}: {exc}") from exc
    try:
        if kind == _KEY_KIND_ED25519:
            key = Ed25519PrivateKey.from_private_bytes(raw)
            return KeyPair(key, key.public_key().public_bytes_raw())
        if kind == _KEY_KIND_X25519:
            dh = X25519PrivateKey.from_private_bytes(raw)
            return KeyPair(dh, dh.public_key().public_bytes_raw(), dh_capable=True)
    except ValueError as exc:
        raise BadFileFormat(f"{path}: {exc}") from exc
    raise BadFileFormat(f"{path}: unknown key kind {kind}")


def write_credential(prefix: str | Path, chain: CredentialChain) -> None:
    """Write ``<prefix>.chain`` and ``<prefix>.key`` side by side."""
    prefix = str(prefix)
    write_chain_file(prefix + ".chain", chain.certs)
    write_key_file(prefix + ".key", chain.leaf_key)


def load_credential(path: str | Path) -> CredentialChain:
    """Load a chain/key pair; ``path`` may be the prefix or the .chain file."""
    prefix = str(path)
    if prefix.endswith(".chain"):
        prefix = prefix[: -len(".chain")]
    certs = read_chain_file(prefix + ".chain")
    key = read_key_file(prefix + ".key")
    return CredentialChain(certs, key)


def read_anchor_file(path: str | Path) -> frozenset[Certificate]:
    return frozenset(read_chain_file(path))
