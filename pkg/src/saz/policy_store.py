"""Durable allowlist of DNs plus per-DN weekly time windows.

State lives in an append-only journal of UTF-8, LF-terminated, TAB-separated
lines and is reconstructed on open by folding the records in order:

    ALLOW <TAB> dn <TAB> rfc3339_ts <TAB> note
    REVOKE <TAB> dn <TAB> rfc3339_ts
    WADD <TAB> dn <TAB> day <TAB> start <TAB> end <TAB> rfc3339_ts
    WDEL <TAB> dn <TAB> day <TAB> start <TAB> end <TAB> rfc3339_ts

TAB, LF, and backslash inside the dn and note fields are escaped as ``\\t``,
``\\n``, and ``\\\\``.  Every mutation is appended and fsynced before the
in-memory state changes, so a reopened store always reflects completed writes.

Concurrency: one writer, many readers.  Writers serialize on an exclusive
file lock (and an in-process mutex); readers see whole-dict snapshots that
are swapped atomically, never partial updates.
"""
from __future__ import annotations

import fcntl
import os
import tempfile
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .credential import DistinguishedName, MalformedDN, parse_dn, serialize_dn
from .errors import SazError


class StoreError(SazError):
    pass


class CorruptJournal(StoreError):
    def __init__(self, line_number: int, reason: str):
        super().__init__(f"journal line {line_number}: {reason}")
        self.line_number = line_number
        self.reason = reason


class StorageFailure(StoreError):
    pass


@dataclass(frozen=True)
class AllowRecord:
    dn: DistinguishedName
    added_at: int
    note: str


@dataclass(frozen=True, order=True)
class TimeWindow:
    """Half-open [start, end) minute range within one UTC weekday (0 = Monday)."""

    day: int
    start_minute: int
    end_minute: int

    def __post_init__(self):
        if not 0 <= self.day <= 6:
            raise ValueError(f"day {self.day} out of range 0..6")
        if not 0 <= self.start_minute <= 1439:
            raise ValueError(f"start minute {self.start_minute} out of range")
        if not 1 <= self.end_minute <= 1440:
            raise ValueError(f"end minute {self.end_minute} out of range")
        if self.start_minute >= self.end_minute:
            raise ValueError("window start must be earlier than end")

    def contains(self, now: float) -> bool:
        moment = datetime.fromtimestamp(now, tz=timezone.utc)
        minute = moment.hour * 60 + moment.minute
        return moment.weekday() == self.day and self.start_minute <= minute < self.end_minute


def _escape(field: str) -> str:
    return field.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape(field: str) -> str:
    out: list[str] = []
    i = 0
    while i < len(field):
        ch = field[i]
        if ch == "\\":
            if i + 1 >= len(field):
                raise ValueError("dangling escape")
            nxt = field[i + 1]
            if nxt == "t":
                out.append("\t")
            elif nxt == "n":
                out.append("\n")
            elif nxt == "\\":
                out.append("\\")
            else:
                raise ValueError(f"invalid escape '\\{nxt}'")
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


_TS_FORMAT = "%Y-%m-%dT%H:%M:%SZ"


def _format_ts(ts: float) -> str:
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime(_TS_FORMAT)


def _parse_ts(text: str) -> int:
    moment = datetime.strptime(text, _TS_FORMAT).replace(tzinfo=timezone.utc)
    return int(moment.timestamp())


class PolicyStore:
    """Journal-backed policy store; open writable for admin use, read-only
    for serving decisions."""

    def __init__(self, path, allows, windows, handle, writable):
        self._path = Path(path)
        self._allows: dict[DistinguishedName, AllowRecord] = allows
        self._windows: dict[DistinguishedName, frozenset[TimeWindow]] = windows
        self._handle = handle
        self._writable = writable
        self._write_lock = threading.Lock()
        self._closed = False

    @classmethod
    def open(cls, path, *, writable: bool = True) -> "PolicyStore":
        """Replay the journal at ``path``; an absent file is an empty store."""
        path = Path(path)
        allows: dict[DistinguishedName, AllowRecord] = {}
        windows: dict[DistinguishedName, frozenset[TimeWindow]] = {}
        if path.exists():
            _replay(path.read_bytes(), allows, windows)
        handle = None
        if writable:
            try:
                handle = open(path, "ab")
                fcntl.flock(handle.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError as exc:
                handle.close()
                raise StorageFailure(f"{path}: another writer holds the journal lock") from exc
            except OSError as exc:
                raise StorageFailure(f"{path}: {exc}") from exc
        return cls(path, allows, windows, handle, writable)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        if self._handle is not None:
            fcntl.flock(self._handle.fileno(), fcntl.LOCK_UN)
            self._handle.close()
            self._handle = None

    def __enter__(self) -> "PolicyStore":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    @property
    def path(self) -> Path:
        return self._path

    # -- mutations -----------------------------------------------------------

    def _append(self, line: str) -> None:
        if not self._writable or self._closed:
            raise StorageFailure("store is not open for writing")
        try:
            self._handle.write(line.encode("utf-8"))
            self._handle.flush()
            os.fsync(self._handle.fileno())
        except OSError as exc:
            raise StorageFailure(f"journal append failed: {exc}") from exc

    def add_dn(self, dn: DistinguishedName, note: str, ts: float) -> None:
        """Allow ``dn``; re-adding replaces the note and timestamp."""
        line = "\t".join(("ALLOW", _escape(serialize_dn(dn)), _format_ts(ts), _escape(note))) + "\n"
        with self._write_lock:
            self._append(line)
            allows = dict(self._allows)
            allows[dn] = AllowRecord(dn, int(ts), note)
            self._allows = allows

    def revoke_dn(self, dn: DistinguishedName, ts: float) -> None:
        """Remove ``dn`` from the allowlist; revoking an absent DN is a no-op."""
        line = "\t".join(("REVOKE", _escape(serialize_dn(dn)), _format_ts(ts))) + "\n"
        with self._write_lock:
            self._append(line)
            allows = dict(self._allows)
            allows.pop(dn, None)
            self._allows = allows

    def add_window(self, dn: DistinguishedName, window: TimeWindow, ts: float) -> None:
        line = _window_line("WADD", dn, window, ts)
        with self._write_lock:
            self._append(line)
            windows = dict(self._windows)
            windows[dn] = self._windows.get(dn, frozenset()) | {window}
            self._windows = windows

    def remove_window(self, dn: DistinguishedName, window: TimeWindow, ts: float) -> None:
        line = _window_line("WDEL", dn, window, ts)
        with self._write_lock:
            self._append(line)
            current = self._windows.get(dn, frozenset()) - {window}
            windows = dict(self._windows)
            if current:
                windows[dn] = current
            else:
                windows.pop(dn, None)
            self._windows = windows

    def compact(self) -> None:
        """Rewrite the journal to the minimal records for the current state.

        The replacement is written to a temp file and atomically renamed, so
        a failure leaves the original journal intact.
        """
        with self._write_lock:
            if not self._writable or self._closed:
                raise StorageFailure("store is not open for writing")
            now = time.time()
            lines: list[str] = []
            for record in sorted(self._allows.values(), key=lambda r: serialize_dn(r.dn)):
                lines.append(
                    "\t".join(
                        (
                            "ALLOW",
                            _escape(serialize_dn(record.dn)),
                            _format_ts(record.added_at),
                            _escape(record.note),
                        )
                    )
                    + "\n"
                )
            for dn in sorted(self._windows, key=serialize_dn):
                for window in sorted(self._windows[dn]):
                    lines.append(_window_line("WADD", dn, window, now))
            try:
                fd, tmp_name = tempfile.mkstemp(dir=self._path.parent, prefix=".compact-")
                try:
                    with os.fdopen(fd, "wb") as tmp:
                        tmp.write("".join(lines).encode("utf-8"))
                        tmp.flush()
                        os.fsync(tmp.fileno())
                    os.replace(tmp_name, self._path)
                except BaseException:
                    os.unlink(tmp_name)
                    raise
            except OSError as exc:
                raise StorageFailure(f"compact failed: {exc}") from exc
            # The lock lives on the old inode; move it to the new journal.
            old = self._handle
            try:
                self._handle = open(self._path, "ab")
                fcntl.flock(self._handle.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
            except OSError as exc:
                raise StorageFailure(f"compact failed to relock: {exc}") from exc
            finally:
                old.close()

    # -- lookups ---------------------------------------------------------------

    def is_allowed(self, dn: DistinguishedName) -> bool:
        """Exact component-wise membership; callers strip proxies first."""
        return dn in self._allows

    def windows_for(self, dn: DistinguishedName) -> list[TimeWindow]:
        return sorted(self._windows.get(dn, frozenset()))

    def list(self) -> list[AllowRecord]:
        """Snapshot of live records sorted by serialized DN."""
        return sorted(self._allows.values(), key=lambda r: serialize_dn(r.dn))


def _window_line(verb: str, dn: DistinguishedName, window: TimeWindow, ts: float) -> str:
    return (
        "\t".join(
            (
                verb,
                _escape(serialize_dn(dn)),
                str(window.day),
                str(window.start_minute),
                str(window.end_minute),
                _format_ts(ts),
            )
        )
        + "\n"
    )


def _replay(raw: bytes, allows: dict, windows: dict) -> None:
    if not raw:
        return
    if not raw.endswith(b"\n"):
        raise CorruptJournal(raw.count(b"\n") + 1, "unterminated final line")
    for number, line in enumerate(raw[:-1].split(b"\n"), start=1):
        try:
            text = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptJournal(number, f"invalid UTF-8: {exc}") from None
        fields = text.split("\t")
        verb = fields[0]
        try:
            if verb == "ALLOW" and len(fields) == 4:
                dn = parse_dn(_unescape(fields[1]))
                allows[dn] = AllowRecord(dn, _parse_ts(fields[2]), _unescape(fields[3]))
            elif verb == "REVOKE" and len(fields) == 3:
                dn = parse_dn(_unescape(fields[1]))
                _parse_ts(fields[2])
                allows.pop(dn, None)
            elif verb in ("WADD", "WDEL") and len(fields) == 6:
                dn = parse_dn(_unescape(fields[1]))
                window = TimeWindow(int(fields[2]), int(fields[3]), int(fields[4]))
                _parse_ts(fields[5])
                if verb == "WADD":
                    windows[dn] = windows.get(dn, frozenset()) | {window}
                else:
                    remaining = windows.get(dn, frozenset()) - {window}
                    if remaining:
                        windows[dn] = remaining
                    else:
                        windows.pop(dn, None)
            else:
                raise ValueError(f"unrecognized record {verb!r} with {len(fields)} fields")
        except (ValueError, MalformedDN) as exc:
            raise CorruptJournal(number, str(exc)) from None
