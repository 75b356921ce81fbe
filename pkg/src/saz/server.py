"""Stateless authorization daemon.

Each accepted connection runs the acceptor side of the handshake, reads one
protected operation request, consults the policy store, answers YES or NO,
and closes.  Nothing about a client survives its connection: decisions are a
pure function of the presented chain, the store, and the clock, so repeated
or concurrent requests are independent by construction.

On any protocol failure the server closes the socket without sending a
decision; "NO" is reserved for a real authorization denial.
"""
from __future__ import annotations

import argparse
import signal
import socket
import sys
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

from .credential import (
    Certificate,
    CredentialChain,
    VerifiedIdentity,
    read_anchor_file,
    read_chain_file,
    read_key_file,
)
from .encoding import CodecError
from .errors import SazError
from .handshake import (
    HandshakeError,
    IntegrityFailure,
    MalformedToken,
    delegate_request,
    finish_accept,
    protect,
    receive_protected,
    respond,
    verify_delegation,
)
from .policy_store import PolicyStore, StoreError
from .wire import (
    ClientAuth,
    ClientHello,
    ConnectionClosed,
    DecisionMessage,
    DelegationCert,
    DelegationKey,
    FrameError,
    OperationRequest,
    decode_frame,
    decode_message,
    encode_frame,
    encode_message,
    parse_host_port,
)

KNOWN_HANDLERS = frozenset({"SAZ", "TIME"})

Handler = Callable[[VerifiedIdentity, PolicyStore, float], DecisionMessage]


class BindFailure(SazError):
    pass


class StoreOpenFailure(SazError):
    pass


@dataclass
class ServerConfig:
    listen_addr: tuple[str, int]
    server_chain: CredentialChain
    trust_anchors: frozenset[Certificate]
    store_path: str | Path
    enabled_handlers: frozenset[str] = KNOWN_HANDLERS
    max_connections: int = 32
    clock: Callable[[], float] = time.time
    io_timeout: float = 10.0

    def __post_init__(self):
        self.enabled_handlers = frozenset(self.enabled_handlers)
        if not self.enabled_handlers <= KNOWN_HANDLERS:
            unknown = ",".join(sorted(self.enabled_handlers - KNOWN_HANDLERS))
            raise ValueError(f"unknown handlers: {unknown}")
        if self.max_connections < 1:
            raise ValueError("max_connections must be at least 1")


def saz_handler(peer: VerifiedIdentity, store: PolicyStore, now: float) -> DecisionMessage:
    """YES iff the peer's base DN is on the allowlist."""
    return DecisionMessage("YES" if store.is_allowed(peer.base_dn) else "NO")


def time_handler(peer: VerifiedIdentity, store: PolicyStore, now: float) -> DecisionMessage:
    """YES iff some window for the peer's base DN contains the current moment."""
    windows = store.windows_for(peer.base_dn)
    return DecisionMessage("YES" if any(w.contains(now) for w in windows) else "NO")


def default_registry() -> dict[str, Handler]:
    return {"SAZ": saz_handler, "TIME": time_handler}


@dataclass
class ConnectionLog:
    ts: float
    peer_dn: Optional[str] = None
    op: Optional[str] = None
    verdict: Optional[str] = None
    reason: str = "ok"
    micros: int = 0

    def line(self) -> str:
        stamp = datetime.fromtimestamp(self.ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        return "\t".join(
            (
                stamp,
                self.peer_dn or "-",
                self.op or "-",
                self.verdict or "CLOSED",
                self.reason,
                str(self.micros),
            )
        )


def handle_connection(
    conn: socket.socket,
    config: ServerConfig,
    registry: dict[str, Handler],
    store: PolicyStore,
) -> ConnectionLog:
    """Run one full connection; returns a log entry and never raises."""
    started = time.perf_counter()
    log = ConnectionLog(ts=config.clock())
    notes: list[str] = []
    try:
        conn.settimeout(config.io_timeout)
        stream = conn.makefile("rb")

        hello = decode_message(decode_frame(stream))
        if not isinstance(hello, ClientHello):
            raise MalformedToken(f"expected ClientHello, got {type(hello).__name__}")
        auth, pending = respond(hello, config.server_chain, config.trust_anchors, config.clock())
        conn.sendall(encode_frame(encode_message(auth)))

        client_auth = decode_message(decode_frame(stream))
        if not isinstance(client_auth, ClientAuth):
            raise MalformedToken(f"expected ClientAuth, got {type(client_auth).__name__}")
        context = finish_accept(pending, client_auth)
        log.peer_dn = str(context.peer.base_dn)

        request = decode_message(receive_protected(context, stream))
        if not isinstance(request, OperationRequest):
            raise MalformedToken(f"expected OperationRequest, got {type(request).__name__}")
        log.op = request.op_name

        if request.delegate:
            # Delegated credentials are verified and recorded only; they do
            # not affect the decision.
            offered = delegate_request(context)
            conn.sendall(protect(context, DelegationKey(offered.verifying_key)))
            reply = decode_message(receive_protected(context, stream))
            if not isinstance(reply, DelegationCert):
                raise MalformedToken(f"expected DelegationCert, got {type(reply).__name__}")
            try:
                verify_delegation(
                    context,
                    reply.cert,
                    hello.client_chain,
                    config.trust_anchors,
                    config.clock(),
                    expected_key=offered.verifying_key,
                )
                notes.append("delegation=verified")
            except HandshakeError as exc:
                notes.append(f"delegation=failed({exc})")

        handler = registry.get(request.op_name)
        if handler is None or request.op_name not in config.enabled_handlers:
            log.reason = f"UnknownOperation: {request.op_name}"
        else:
            decision = handler(context.peer, store, config.clock())
            conn.sendall(protect(context, decision))
            log.verdict = decision.verdict
            log.reason = "ok"
    except TimeoutError:
        log.reason = "Timeout: connection idle"
    except ConnectionClosed:
        log.reason = "ClientClosed: connection closed mid-script"
    except (FrameError, CodecError, SazError) as exc:
        log.reason = f"{type(exc).__name__}: {exc}"
    except OSError as exc:
        log.reason = f"SocketError: {exc}"
    except Exception as exc:  # pragma: no cover - defensive, keeps the loop alive
        log.reason = f"InternalError: {type(exc).__name__}: {exc}"
    finally:
        try:
            conn.close()
        except OSError:
            pass
    if notes:
        log.reason = log.reason + " " + " ".join(notes)
    log.micros = int((time.perf_counter() - started) * 1_000_000)
    return log


class SazServer:
    """Accept loop dispatching each connection to its own thread, bounded by
    ``max_connections``; the policy store is shared read-only."""

    def __init__(
        self,
        config: ServerConfig,
        registry: Optional[dict[str, Handler]] = None,
        log_sink: Optional[Callable[[ConnectionLog], None]] = None,
    ):
        self.config = config
        self._registry = default_registry() if registry is None else registry
        self._log_sink = log_sink if log_sink is not None else self._print_log
        self._store: Optional[PolicyStore] = None
        self._sock: Optional[socket.socket] = None
        self._stop = threading.Event()
        self._accept_thread: Optional[threading.Thread] = None
        self._workers: set[threading.Thread] = set()
        self._workers_lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(config.max_connections)

    @staticmethod
    def _print_log(entry: ConnectionLog) -> None:
        print(entry.line(), flush=True)

    @property
    def address(self) -> tuple[str, int]:
        if self._sock is None:
            raise RuntimeError("server is not running")
        return self._sock.getsockname()[:2]

    def start(self) -> None:
        try:
            self._sock = socket.create_server(self.config.listen_addr, backlog=64)
        except OSError as exc:
            raise BindFailure(f"cannot bind {self.config.listen_addr}: {exc}") from exc
        try:
            self._store = PolicyStore.open(self.config.store_path, writable=False)
        except StoreError as exc:
            self._sock.close()
            self._sock = None
            raise StoreOpenFailure(str(exc)) from exc
        self._sock.settimeout(0.2)
        self._stop.clear()
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="saz-accept", daemon=True
        )
        self._accept_thread.start()

    def reload_store(self) -> None:
        """Reopen the journal; admin writes become visible to new decisions."""
        self._store = PolicyStore.open(self.config.store_path, writable=False)

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _addr = self._sock.accept()
            except TimeoutError:
                continue
            except OSError:
                break
            self._slots.acquire()
            worker = threading.Thread(target=self._serve_one, args=(conn,), daemon=True)
            with self._workers_lock:
                self._workers.add(worker)
            worker.start()

    def _serve_one(self, conn: socket.socket) -> None:
        try:
            entry = handle_connection(conn, self.config, self._registry, self._store)
            try:
                self._log_sink(entry)
            except Exception:
                pass
        finally:
            self._slots.release()
            with self._workers_lock:
                self._workers.discard(threading.current_thread())

    def shutdown(self) -> None:
        """Stop accepting and wait for in-flight connections to finish."""
        self._stop.set()
        if self._accept_thread is not None:
            self._accept_thread.join()
            self._accept_thread = None
        with self._workers_lock:
            workers = list(self._workers)
        for worker in workers:
            worker.join(timeout=self.config.io_timeout + 5)
        if self._sock is not None:
            self._sock.close()
            self._sock = None


def run(config: ServerConfig) -> None:
    """Serve until SIGTERM or SIGINT; SIGHUP reloads the policy store."""
    server = SazServer(config)
    server.start()
    done = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: done.set())
    signal.signal(signal.SIGINT, lambda *_: done.set())
    signal.signal(signal.SIGHUP, lambda *_: server.reload_store())
    host, port = server.address
    print(f"listening on {host}:{port}", file=sys.stderr, flush=True)
    done.wait()
    server.shutdown()


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="saz-server", description="site authorization daemon")
    parser.add_argument("--listen", required=True, metavar="HOST:PORT")
    parser.add_argument("--store", required=True, help="policy journal path")
    parser.add_argument("--chain", required=True, help="server certificate chain file")
    parser.add_argument("--key", required=True, help="server private key file")
    parser.add_argument("--anchors", required=True, help="trust anchor chain file")
    parser.add_argument("--handlers", default="SAZ,TIME", help="comma-separated operation names")
    parser.add_argument("--max-conns", type=int, default=32)
    args = parser.parse_args(argv)

    try:
        config = ServerConfig(
            listen_addr=parse_host_port(args.listen),
            server_chain=CredentialChain(read_chain_file(args.chain), read_key_file(args.key)),
            trust_anchors=read_anchor_file(args.anchors),
            store_path=args.store,
            enabled_handlers=frozenset(args.handlers.split(",")),
            max_connections=args.max_conns,
        )
        run(config)
    except (OSError, ValueError, SazError) as exc:
        print(f"saz-server: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
