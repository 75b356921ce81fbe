"""Shared test helpers: a throwaway certificate authority, an in-process
handshake runner, a live-server context manager, and a frame-level TCP relay
for recording and tampering with wire traffic."""
from __future__ import annotations

import contextlib
import socket
import threading
import time
from dataclasses import dataclass, field

from saz.credential import (
    SELF,
    CredentialChain,
    KeyPair,
    create_proxy,
    issue_certificate,
    parse_dn,
    random_serial,
)
from saz.handshake import finish_accept, finish_initiate, initiate, respond
from saz.policy_store import PolicyStore
from saz.server import ConnectionLog, SazServer, ServerConfig
from saz.wire import FrameError, decode_frame, encode_frame

DAY = 86_400


def previous_monday_noon(now: float | None = None) -> int:
    """Most recent Monday 12:00 UTC at or before ``now``; keeps injected
    clocks within the validity window of freshly issued test certificates."""
    from datetime import datetime, timedelta, timezone

    now = time.time() if now is None else now
    moment = datetime.fromtimestamp(now, tz=timezone.utc)
    monday = (moment - timedelta(days=moment.weekday())).replace(
        hour=12, minute=0, second=0, microsecond=0
    )
    stamp = int(monday.timestamp())
    if stamp > now:
        stamp -= 7 * DAY
    return stamp


@dataclass
class Authority:
    """Self-signed issuing authority pinned to a fixed ``now``."""

    now: int
    key: KeyPair
    cert: object
    chain: CredentialChain
    anchors: frozenset

    @classmethod
    def create(cls, dn_text: str = "/O=TestCA", now: int | None = None) -> "Authority":
        now = int(time.time()) if now is None else now
        key = KeyPair.generate()
        dn = parse_dn(dn_text)
        cert = issue_certificate(
            key, SELF, dn, key.verifying_key, (now - 10, now + 3650 * DAY), random_serial()
        )
        return cls(now, key, cert, CredentialChain((cert,), key), frozenset({cert}))

    def issue(self, dn_text: str, days: int = 30) -> CredentialChain:
        key = KeyPair.generate()
        cert = issue_certificate(
            self.key,
            self.cert.subject,
            parse_dn(dn_text),
            key.verifying_key,
            (self.now - 10, self.now + days * DAY),
            random_serial(),
        )
        return CredentialChain((cert, self.cert), key)

    def proxy_for(self, dn_text: str, hours: float = 1.0) -> CredentialChain:
        return create_proxy(self.issue(dn_text), int(hours * 3600), now=self.now)


def run_handshake(client_chain, server_chain, anchors, now):
    """Drive both sides in one process; returns (initiator, acceptor) contexts."""
    hello, pending_i = initiate(client_chain)
    auth, pending_a = respond(hello, server_chain, anchors, now)
    client_auth, ctx_i = finish_initiate(pending_i, auth, anchors, now)
    ctx_a = finish_accept(pending_a, client_auth)
    return ctx_i, ctx_a


def make_store(path, *dns, now: int | None = None) -> None:
    now = int(time.time()) if now is None else now
    with PolicyStore.open(path) as store:
        for dn_text in dns:
            store.add_dn(parse_dn(dn_text), "", now)


@contextlib.contextmanager
def running_server(store_path, server_chain, anchors, port: int = 0, **config_kwargs):
    logs: list[ConnectionLog] = []
    config = ServerConfig(
        listen_addr=("127.0.0.1", port),
        server_chain=server_chain,
        trust_anchors=anchors,
        store_path=store_path,
        **config_kwargs,
    )
    server = SazServer(config, log_sink=logs.append)
    server.start()
    try:
        yield server, logs
    finally:
        server.shutdown()


class FrameProxy:
    """Single-connection relay that re-frames traffic between a client and an
    upstream server, recording original payloads and optionally rewriting
    them via ``tamper(direction, index, payload) -> payload``."""

    def __init__(self, upstream: tuple[str, int], tamper=None):
        self._upstream_addr = upstream
        self._tamper = tamper
        self.frames: list[tuple[str, bytes]] = []
        self._frames_lock = threading.Lock()
        self._listener = socket.create_server(("127.0.0.1", 0))
        self._listener.settimeout(10)
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    def recorded(self, direction: str) -> list[bytes]:
        with self._frames_lock:
            return [p for d, p in self.frames if d == direction]

    def _run(self) -> None:
        try:
            client, _ = self._listener.accept()
        except OSError:
            return
        try:
            upstream = socket.create_connection(self._upstream_addr, timeout=10)
        except OSError:
            client.close()
            return
        counters = {"c2s": 0, "s2c": 0}

        def pump(src: socket.socket, dst: socket.socket, direction: str) -> None:
            src.settimeout(10)
            stream = src.makefile("rb")
            try:
                while True:
                    payload = decode_frame(stream)
                    with self._frames_lock:
                        index = counters[direction]
                        counters[direction] += 1
                        self.frames.append((direction, payload))
                    if self._tamper is not None:
                        payload = self._tamper(direction, index, payload)
                    dst.sendall(encode_frame(payload))
            except (FrameError, OSError):
                pass
            finally:
                for sock in (src, dst):
                    try:
                        sock.shutdown(socket.SHUT_RDWR)
                    except OSError:
                        pass

        pumps = [
            threading.Thread(target=pump, args=(client, upstream, "c2s"), daemon=True),
            threading.Thread(target=pump, args=(upstream, client, "s2c"), daemon=True),
        ]
        for t in pumps:
            t.start()
        for t in pumps:
            t.join()
        client.close()
        upstream.close()

    def close(self) -> None:
        self._listener.close()
        self._thread.join(timeout=10)
