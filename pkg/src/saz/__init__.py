"""Site authorization suite: a stateless YES/NO policy daemon with a
mutually-authenticated token handshake, a journaled DN allowlist, the callout
client, a gatekeeper simulator, and credential tooling."""

from .client import ClientConfig, Outcome, authorize
from .credential import (
    Certificate,
    CredentialChain,
    DistinguishedName,
    KeyPair,
    VerifiedIdentity,
    create_proxy,
    extract_base_dn,
    issue_certificate,
    parse_dn,
    serialize_dn,
    verify_chain,
)
from .errors import SazError
from .gatekeeper import GridMapfile, compose, parse_mapfile, submit_job
from .policy_store import AllowRecord, PolicyStore, TimeWindow
from .server import SazServer, ServerConfig

__version__ = "0.1.0"

__all__ = [
    "AllowRecord",
    "Certificate",
    "ClientConfig",
    "CredentialChain",
    "DistinguishedName",
    "GridMapfile",
    "KeyPair",
    "Outcome",
    "PolicyStore",
    "SazError",
    "SazServer",
    "ServerConfig",
    "TimeWindow",
    "VerifiedIdentity",
    "authorize",
    "compose",
    "create_proxy",
    "extract_base_dn",
    "issue_certificate",
    "parse_dn",
    "parse_mapfile",
    "serialize_dn",
    "submit_job",
    "verify_chain",
    "__version__",
]
