"""Callout client: handshake, one operation request, one YES/NO decision.

Every invocation ends in exactly one of three outcomes.  Allow and Deny come
only from a well-formed decision message on the protected channel; anything
else is an Error carrying the failure kind, so a caller can apply fail-closed
policy without confusing "the server said no" with "something broke".
"""
from __future__ import annotations

import argparse
import contextlib
import socket
import sys
import time
from dataclasses import dataclass
from typing import Optional

from .credential import (
    Certificate,
    CredentialChain,
    load_credential,
    read_anchor_file,
)
from .encoding import CodecError
from .errors import SazError
from .handshake import (
    HandshakeError,
    IntegrityFailure,
    delegate_fulfill,
    finish_initiate,
    initiate,
    protect,
    receive_protected,
)
from .wire import (
    ConnectionClosed,
    DecisionMessage,
    DelegationCert,
    DelegationKey,
    FrameError,
    OperationRequest,
    ServerAuth,
    decode_frame,
    decode_message,
    encode_frame,
    encode_message,
    parse_host_port,
)


@dataclass(frozen=True)
class Outcome:
    """Allow, Deny, or Error(kind) with kind in Connect, Handshake, Protocol,
    Integrity, Timeout."""

    verdict: str
    error_kind: Optional[str] = None
    detail: str = ""

    @classmethod
    def allow(cls) -> "Outcome":
        return cls("Allow")

    @classmethod
    def deny(cls) -> "Outcome":
        return cls("Deny")

    @classmethod
    def error(cls, kind: str, detail: str = "") -> "Outcome":
        return cls("Error", kind, detail)

    @property
    def is_allow(self) -> bool:
        return self.verdict == "Allow"

    @property
    def is_deny(self) -> bool:
        return self.verdict == "Deny"

    @property
    def is_error(self) -> bool:
        return self.verdict == "Error"


@dataclass(frozen=True)
class ClientConfig:
    server_addr: tuple[str, int]
    chain: CredentialChain
    trust_anchors: frozenset[Certificate]
    op_name: str = "SAZ"
    delegate: bool = False
    timeout_seconds: float = 10.0
    delegation_lifetime: int = 3600


def authorize(config: ClientConfig) -> Outcome:
    """Run the full client side of one connection; never raises."""
    deadline = time.monotonic() + config.timeout_seconds
    try:
        sock = socket.create_connection(config.server_addr, timeout=config.timeout_seconds)
    except TimeoutError:
        return Outcome.error("Timeout", "connect timed out")
    except OSError as exc:
        return Outcome.error("Connect", str(exc))

    with contextlib.closing(sock):
        stream = sock.makefile("rb")

        def arm() -> None:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError("deadline exceeded")
            sock.settimeout(remaining)

        # Handshake phase: failures here mean the server could not be
        # authenticated or the token exchange broke down.
        try:
            hello, pending = initiate(config.chain)
            arm()
            sock.sendall(encode_frame(encode_message(hello)))
            arm()
            token = decode_message(decode_frame(stream))
            if not isinstance(token, ServerAuth):
                return Outcome.error("Handshake", f"unexpected {type(token).__name__}")
            client_auth, context = finish_initiate(
                pending, token, config.trust_anchors, time.time()
            )
            arm()
            sock.sendall(encode_frame(encode_message(client_auth)))
        except TimeoutError:
            return Outcome.error("Timeout", "handshake timed out")
        except HandshakeError as exc:
            return Outcome.error("Handshake", str(exc))
        except (FrameError, CodecError) as exc:
            return Outcome.error("Handshake", f"{type(exc).__name__}: {exc}")
        except OSError as exc:
            return Outcome.error("Handshake", str(exc))

        # Protected phase: the channel is authenticated, so a MAC failure is
        # tampering and a close without a decision is a protocol violation.
        try:
            arm()
            sock.sendall(protect(context, OperationRequest(config.op_name, config.delegate)))
            if config.delegate:
                arm()
                offer = decode_message(receive_protected(context, stream))
                if not isinstance(offer, DelegationKey):
                    return Outcome.error("Protocol", f"unexpected {type(offer).__name__}")
                cert = delegate_fulfill(
                    context, offer.public_key, config.chain, config.delegation_lifetime
                )
                arm()
                sock.sendall(protect(context, DelegationCert(cert)))
            arm()
            decision = decode_message(receive_protected(context, stream))
            if not isinstance(decision, DecisionMessage):
                return Outcome.error("Protocol", f"unexpected {type(decision).__name__}")
            return Outcome.allow() if decision.verdict == "YES" else Outcome.deny()
        except TimeoutError:
            return Outcome.error("Timeout", "no decision before deadline")
        except IntegrityFailure as exc:
            return Outcome.error("Integrity", str(exc))
        except ConnectionClosed:
            return Outcome.error("Protocol", "connection closed before a decision")
        except (FrameError, CodecError) as exc:
            return Outcome.error("Protocol", f"{type(exc).__name__}: {exc}")
        except SazError as exc:
            return Outcome.error("Protocol", str(exc))
        except OSError as exc:
            return Outcome.error("Protocol", str(exc))


def callout(
    server_addr: tuple[str, int],
    proxy_path: str,
    anchors_path: str,
    *,
    op_name: str = "SAZ",
    delegate: bool = False,
    timeout: float = 10.0,
) -> tuple[int, str]:
    """Gatekeeper-facing contract: exit code and one status line.

    Allow is (0, "SAZ: YES"), Deny is (1, "SAZ: NO"), and every error is
    (2, "SAZ: ERROR <kind>"), including unreadable credential files.
    """
    try:
        chain = load_credential(proxy_path)
        anchors = read_anchor_file(anchors_path)
    except (OSError, SazError):
        return 2, "SAZ: ERROR Config"
    outcome = authorize(
        ClientConfig(
            server_addr=server_addr,
            chain=chain,
            trust_anchors=anchors,
            op_name=op_name,
            delegate=delegate,
            timeout_seconds=timeout,
        )
    )
    if outcome.is_allow:
        return 0, "SAZ: YES"
    if outcome.is_deny:
        return 1, "SAZ: NO"
    return 2, f"SAZ: ERROR {outcome.error_kind}"


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="saz-client", description="authorization callout client")
    parser.add_argument("--server", required=True, metavar="HOST:PORT")
    parser.add_argument("--proxy", required=True, help="proxy credential prefix or .chain file")
    parser.add_argument("--anchors", required=True, help="trust anchor chain file")
    parser.add_argument("--op", default="SAZ", choices=("SAZ", "TIME"))
    parser.add_argument("--delegate", action="store_true")
    parser.add_argument("--timeout", type=float, default=10.0, metavar="SECS")
    args = parser.parse_args(argv)

    try:
        addr = parse_host_port(args.server)
    except ValueError as exc:
        print(f"saz-client: {exc}", file=sys.stderr)
        return 2
    code, line = callout(
        addr,
        args.proxy,
        args.anchors,
        op_name=args.op,
        delegate=args.delegate,
        timeout=args.timeout,
    )
    print(line)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
