"""Gatekeeper simulator: two-level authorization with deny-overrides.

A job runs only when the site callout answers Allow AND the local
grid-mapfile maps the submitter's base DN to a local user.  A deny (or any
callout error, which is treated as deny) at either level blocks the job, and
neither level can override the other.  The callout runs first; the first
failing stage is reported.

Local-user switching is simulated: the command executes as the invoking user
and the result is labeled with the mapped username.
"""
from __future__ import annotations

import argparse
import re
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from .client import ClientConfig, Outcome, authorize
from .credential import (
    Certificate,
    DistinguishedName,
    MalformedDN,
    extract_base_dn,
    load_credential,
    parse_dn,
    read_anchor_file,
)
from .errors import SazError
from .wire import parse_host_port

_USERNAME_RE = re.compile(r"[a-z_][a-z0-9_-]{0,31}\Z")


class MalformedLine(SazError):
    def __init__(self, line_number: int, reason: str):
        super().__init__(f"mapfile line {line_number}: {reason}")
        self.line_number = line_number
        self.reason = reason


@dataclass(frozen=True)
class GridMapfile:
    """DN to local-username map; later entries for the same DN win."""

    entries: dict[DistinguishedName, str]

    def lookup(self, dn: DistinguishedName) -> Optional[str]:
        return self.entries.get(dn)


def parse_mapfile(text: str) -> GridMapfile:
    """Parse ``"<serialized DN>" <username>`` lines; '#' and blanks ignored."""
    entries: dict[DistinguishedName, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if not line.startswith('"'):
            raise MalformedLine(number, "DN must be double-quoted")
        end = line.rfind('"')
        if end == 0:
            raise MalformedLine(number, "missing closing quote")
        dn_text = line[1:end]
        username = line[end + 1 :].strip()
        if not _USERNAME_RE.fullmatch(username):
            raise MalformedLine(number, f"bad username {username!r}")
        try:
            dn = parse_dn(dn_text)
        except MalformedDN as exc:
            raise MalformedLine(number, str(exc)) from exc
        entries[dn] = username
    return GridMapfile(entries)


def load_mapfile(path) -> GridMapfile:
    return parse_mapfile(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class GateDecision:
    run: bool
    denied_stage: Optional[str] = None  # "SAZ" or "Mapfile" when run is False


def compose(saz: Outcome, mapped: bool) -> GateDecision:
    """Deny-overrides composition: only (Allow, mapped) runs.

    A callout Error counts as a SAZ deny, so the gate fails closed.
    """
    if not saz.is_allow:
        return GateDecision(False, "SAZ")
    if not mapped:
        return GateDecision(False, "Mapfile")
    return GateDecision(True)


@dataclass(frozen=True)
class JobRequest:
    proxy_path: str
    command: tuple[str, ...]


@dataclass(frozen=True)
class Accepted:
    local_user: str
    command_output: str


@dataclass(frozen=True)
class Rejected:
    stage: str
    reason: str


JobResult = Union[Accepted, Rejected]


def submit_job(
    request: JobRequest,
    mapfile: GridMapfile,
    saz_addr: tuple[str, int],
    trust_anchors: frozenset[Certificate],
    *,
    timeout: float = 10.0,
) -> JobResult:
    """Callout first, then the mapfile, then run the command if both allow."""
    try:
        chain = load_credential(request.proxy_path)
    except (OSError, SazError) as exc:
        return Rejected("SAZ", f"proxy unreadable: {exc}")

    outcome = authorize(
        ClientConfig(
            server_addr=saz_addr,
            chain=chain,
            trust_anchors=trust_anchors,
            timeout_seconds=timeout,
        )
    )
    base_dn = extract_base_dn(chain.leaf.subject)
    local_user = mapfile.lookup(base_dn)
    decision = compose(outcome, local_user is not None)

    if not decision.run:
        if decision.denied_stage == "SAZ":
            if outcome.is_deny:
                reason = "site authorization denied"
            else:
                reason = f"callout error: {outcome.error_kind}"
        else:
            reason = f"no grid-mapfile entry for {base_dn}"
        return Rejected(decision.denied_stage, reason)

    proc = subprocess.run(list(request.command), capture_output=True, text=True)
    output = proc.stdout if proc.returncode == 0 else proc.stdout + proc.stderr
    return Accepted(local_user, output)


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="gatekeeper-sim",
        description="two-level authorization gatekeeper (callout plus grid-mapfile)",
    )
    parser.add_argument("--mapfile", required=True)
    parser.add_argument("--saz", required=True, metavar="HOST:PORT")
    parser.add_argument("--proxy", required=True)
    parser.add_argument("--anchors", required=True)
    parser.add_argument("--timeout", type=float, default=10.0)
    parser.add_argument("command", nargs=argparse.REMAINDER, metavar="-- CMD [ARGS...]")
    args = parser.parse_args(argv)

    command = args.command
    if command and command[0] == "--":
        command = command[1:]
    if not command:
        print("gatekeeper-sim: no command given", file=sys.stderr)
        return 2

    try:
        addr = parse_host_port(args.saz)
        mapfile = load_mapfile(args.mapfile)
        anchors = read_anchor_file(args.anchors)
    except (OSError, ValueError, SazError) as exc:
        print(f"gatekeeper-sim: {exc}", file=sys.stderr)
        return 2

    result = submit_job(
        JobRequest(args.proxy, tuple(command)), mapfile, addr, anchors, timeout=args.timeout
    )
    if isinstance(result, Accepted):
        print(f"GATEKEEPER: ACCEPTED user={result.local_user}")
        if result.command_output:
            sys.stdout.write(result.command_output)
        return 0
    print(f"GATEKEEPER: REJECTED stage={result.stage} reason={result.reason}")
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
