"""Process-level checks of the daemon CLI: startup, SIGHUP reload, SIGTERM."""
import signal
import subprocess
import sys
import time

import pytest

from saz.client import main as client_main
from saz.tools import admin_main, ca_main

ALICE = "/O=TestCA/CN=alice"
BOB = "/O=TestCA/CN=bob"


@pytest.fixture
def deployment(tmp_path):
    ca = str(tmp_path / "ca")
    server = str(tmp_path / "server")
    assert ca_main(["init", "--dn", "/O=TestCA", "--out", ca]) == 0
    assert ca_main(["issue", "--ca", ca, "--dn", "/O=TestCA/CN=saz server", "--out", server]) == 0
    proxies = {}
    for dn_text, name in ((ALICE, "alice"), (BOB, "bob")):
        user = str(tmp_path / name)
        proxy = str(tmp_path / f"{name}-proxy")
        assert ca_main(["issue", "--ca", ca, "--dn", dn_text, "--out", user]) == 0
        assert ca_main(["proxy", "--chain", user, "--out", proxy]) == 0
        proxies[dn_text] = proxy
    store = str(tmp_path / "journal")
    assert admin_main(["--store", store, "add", ALICE]) == 0
    return {
        "anchors": ca + ".chain",
        "server_prefix": server,
        "store": store,
        "proxies": proxies,
    }


def start_daemon(deployment):
    proc = subprocess.Popen(
        [
            sys.executable,
            "-m",
            "saz.server",
            "--listen",
            "127.0.0.1:0",
            "--store",
            deployment["store"],
            "--chain",
            deployment["server_prefix"] + ".chain",
            "--key",
            deployment["server_prefix"] + ".key",
            "--anchors",
            deployment["anchors"],
        ],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
    )
    # skip runpy noise until the startup banner
    for _ in range(10):
        banner = proc.stderr.readline().strip()
        if banner.startswith("listening on "):
            return proc, banner.removeprefix("listening on ")
    proc.kill()
    raise AssertionError(f"daemon never announced its address, last line: {banner!r}")


def ask(deployment, address, dn_text, capsys):
    code = client_main(
        [
            "--server",
            address,
            "--proxy",
            deployment["proxies"][dn_text],
            "--anchors",
            deployment["anchors"],
            "--timeout",
            "5",
        ]
    )
    return code, capsys.readouterr().out.strip()


def test_daemon_serves_reloads_and_stops(deployment, capsys):
    proc, address = start_daemon(deployment)
    try:
        assert ask(deployment, address, ALICE, capsys) == (0, "SAZ: YES")
        assert ask(deployment, address, BOB, capsys) == (1, "SAZ: NO")

        assert admin_main(["--store", deployment["store"], "add", BOB]) == 0
        proc.send_signal(signal.SIGHUP)
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            code, line = ask(deployment, address, BOB, capsys)
            if code == 0:
                break
            time.sleep(0.1)
        assert (code, line) == (0, "SAZ: YES")
    finally:
        proc.send_signal(signal.SIGTERM)
        out, err = proc.communicate(timeout=10)
    assert proc.returncode == 0
    # one log line per connection on stdout
    log_lines = [line for line in out.splitlines() if line]
    assert len(log_lines) >= 3
    assert all(len(line.split("\t")) == 6 for line in log_lines)


def test_daemon_startup_failure(deployment, tmp_path):
    proc = subprocess.run(
        [
            sys.executable,
            "-m",
            "saz.server",
            "--listen",
            "127.0.0.1:0",
            "--store",
            deployment["store"],
            "--chain",
            str(tmp_path / "missing.chain"),
            "--key",
            deployment["server_prefix"] + ".key",
            "--anchors",
            deployment["anchors"],
        ],
        capture_output=True,
        text=True,
        timeout=15,
    )
    assert proc.returncode == 1
    assert "saz-server:" in proc.stderr


def test_client_bad_server_argument(capsys):
    assert client_main(["--server", "nocolon", "--proxy", "x", "--anchors", "y"]) == 2
    assert "saz-client" in capsys.readouterr().err


def test_client_unreadable_proxy(tmp_path, capsys):
    code = client_main(
        [
            "--server",
            "127.0.0.1:1",
            "--proxy",
            str(tmp_path / "missing"),
            "--anchors",
            str(tmp_path / "missing.chain"),
        ]
    )
    assert code == 2
    assert capsys.readouterr().out.strip() == "SAZ: ERROR Config"
