"""Operator CLIs: saz-admin edits the policy store, saz-ca mints credentials.

Both are thin shells: saz-admin maps one subcommand to one store operation,
and saz-ca drives certificate issuance (self-signed authority, end-entity
chains, and proxy extension).  A running server picks up admin writes after
a reload (SIGHUP) or restart; the journal's single-writer lock keeps admin
invocations from racing each other.
"""
from __future__ import annotations

import argparse
import sys
import time
from typing import Optional

from .credential import (
    CredentialChain,
    ExpiredChain,
    KeyPair,
    MalformedDN,
    create_proxy,
    issue_certificate,
    load_credential,
    parse_dn,
    random_serial,
    serialize_dn,
    write_credential,
    SELF,
)
from .errors import SazError
from .policy_store import PolicyStore, StoreError, TimeWindow, _escape

DAY_SECONDS = 86_400


def admin_main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="saz-admin", description="policy store administration")
    parser.add_argument("--store", required=True, help="policy journal path")
    sub = parser.add_subparsers(dest="command", required=True)

    p_add = sub.add_parser("add", help="allow a DN")
    p_add.add_argument("dn")
    p_add.add_argument("--note", default="")

    p_remove = sub.add_parser("remove", help="revoke a DN")
    p_remove.add_argument("dn")

    sub.add_parser("list", help="print live records")

    for name in ("window-add", "window-remove"):
        p = sub.add_parser(name, help=f"{name.split('-')[1]} a weekly time window")
        p.add_argument("dn")
        p.add_argument("day", type=int, help="0=Monday .. 6=Sunday (UTC)")
        p.add_argument("start", type=int, help="start minute 0..1439")
        p.add_argument("end", type=int, help="end minute 1..1440, exclusive")

    sub.add_parser("compact", help="rewrite the journal minimally")

    args = parser.parse_args(argv)
    now = time.time()

    try:
        if args.command == "list":
            with PolicyStore.open(args.store, writable=False) as store:
                for record in store.list():
                    ts = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(record.added_at))
                    print(f"{_escape(serialize_dn(record.dn))}\t{ts}\t{_escape(record.note)}")
            return 0

        if args.command == "compact":
            with PolicyStore.open(args.store) as store:
                store.compact()
            return 0

        try:
            dn = parse_dn(args.dn)
        except MalformedDN as exc:
            print(f"saz-admin: bad DN: {exc}", file=sys.stderr)
            return 1

        if args.command in ("window-add", "window-remove"):
            try:
                window = TimeWindow(args.day, args.start, args.end)
            except ValueError as exc:
                print(f"saz-admin: bad window: {exc}", file=sys.stderr)
                return 1

        with PolicyStore.open(args.store) as store:
            if args.command == "add":
                store.add_dn(dn, args.note, now)
            elif args.command == "remove":
                store.revoke_dn(dn, now)
            elif args.command == "window-add":
                store.add_window(dn, window, now)
            elif args.command == "window-remove":
                store.remove_window(dn, window, now)
        return 0
    except StoreError as exc:
        print(f"saz-admin: {exc}", file=sys.stderr)
        return 2


def ca_main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="saz-ca", description="mint authority, user, and proxy credentials"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_init = sub.add_parser("init", help="create a self-signed authority")
    p_init.add_argument("--dn", required=True)
    p_init.add_argument("--out", required=True, help="output prefix for .chain/.key")
    p_init.add_argument("--days", type=int, default=3650)

    p_issue = sub.add_parser("issue", help="issue an end-entity credential")
    p_issue.add_argument("--ca", required=True, help="authority prefix")
    p_issue.add_argument("--dn", required=True)
    p_issue.add_argument("--out", required=True)
    p_issue.add_argument("--days", type=int, default=365)

    p_proxy = sub.add_parser("proxy", help="extend a credential by one proxy level")
    p_proxy.add_argument("--chain", required=True, help="credential prefix")
    p_proxy.add_argument("--out", required=True)
    p_proxy.add_argument("--hours", type=float, default=12.0)

    args = parser.parse_args(argv)
    now = int(time.time())

    try:
        if args.command == "init":
            dn = parse_dn(args.dn)
            key = KeyPair.generate()
            cert = issue_certificate(
                key, SELF, dn, key.verifying_key, (now, now + args.days * DAY_SECONDS), random_serial()
            )
            write_credential(args.out, CredentialChain((cert,), key))
            print(f"authority {serialize_dn(dn)} written to {args.out}.chain / {args.out}.key")
        elif args.command == "issue":
            ca = load_credential(args.ca)
            dn = parse_dn(args.dn)
            key = KeyPair.generate()
            not_after = min(now + args.days * DAY_SECONDS, ca.leaf.not_after)
            cert = issue_certificate(
                ca.leaf_key, ca.leaf.subject, dn, key.verifying_key, (now, not_after), random_serial()
            )
            write_credential(args.out, CredentialChain((cert,) + ca.certs, key))
            print(f"credential {serialize_dn(dn)} written to {args.out}.chain / {args.out}.key")
        elif args.command == "proxy":
            chain = load_credential(args.chain)
            proxy = create_proxy(chain, int(args.hours * 3600), now=now)
            write_credential(args.out, proxy)
            print(
                f"proxy {serialize_dn(proxy.leaf.subject)} valid until {proxy.leaf.not_after} "
                f"written to {args.out}.chain / {args.out}.key"
            )
    except (MalformedDN, ValueError) as exc:
        print(f"saz-ca: {exc}", file=sys.stderr)
        return 1
    except ExpiredChain as exc:
        print(f"saz-ca: {exc}", file=sys.stderr)
        return 1
    except (OSError, SazError) as exc:
        print(f"saz-ca: {exc}", file=sys.stderr)
        return 2
    return 0
