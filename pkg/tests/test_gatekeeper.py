import pytest

from saz.client import Outcome
from saz.credential import parse_dn, write_credential
from saz.gatekeeper import (
    Accepted,
    GateDecision,
    JobRequest,
    MalformedLine,
    Rejected,
    compose,
    load_mapfile,
    parse_mapfile,
    submit_job,
)

from support import Authority, make_store, running_server

ALICE = "/O=TestCA/CN=alice"  # store only
BOB = "/O=TestCA/CN=bob"  # mapfile only
CAROL = "/O=TestCA/CN=carol"  # both
DAVE = "/O=TestCA/CN=dave"  # neither


# -- mapfile parsing -----------------------------------------------------------

def test_parse_single_entry():
    mapfile = parse_mapfile('"/O=T/CN=alice" alice01\n')
    assert mapfile.entries == {parse_dn("/O=T/CN=alice"): "alice01"}


def test_comments_and_blanks_ignored():
    text = "# header\n\n   \n" '"/O=T/CN=alice" alice01\n' "# trailing\n"
    assert len(parse_mapfile(text).entries) == 1


def test_bad_username_rejected():
    with pytest.raises(MalformedLine) as excinfo:
        parse_mapfile('# one\n"/O=T/CN=x" BadUser!\n')
    assert excinfo.value.line_number == 2


@pytest.mark.parametrize(
    "line",
    [
        "/O=T/CN=x alice01",  # missing quotes
        '"/O=T/CN=x alice01',  # unterminated quote
        '"/O=T/CN=x"',  # no username
        '"/O=T/CN=x" Alice',  # uppercase
        '"/O=T/CN=x" ' + "a" * 33,  # too long
        '"not-a-dn" alice01',  # DN does not parse
    ],
)
def test_malformed_lines(line):
    with pytest.raises(MalformedLine):
        parse_mapfile(line + "\n")


def test_last_entry_wins():
    text = '"/O=T/CN=x" first\n"/O=T/CN=x" second\n'
    assert parse_mapfile(text).entries[parse_dn("/O=T/CN=x")] == "second"


def test_escaped_dn_in_mapfile():
    mapfile = parse_mapfile('"/O=T/CN=a\\/b" slashy\n')
    assert mapfile.lookup(parse_dn("/O=T/CN=a\\/b")) == "slashy"


# -- composition ----------------------------------------------------------------

def test_compose_truth_table():
    assert compose(Outcome.allow(), True) == GateDecision(True)
    assert compose(Outcome.deny(), True) == GateDecision(False, "SAZ")
    assert compose(Outcome.allow(), False) == GateDecision(False, "Mapfile")
    assert compose(Outcome.error("Connect"), True) == GateDecision(False, "SAZ")


def test_compose_monotone_deny_and_unique_run():
    saz_inputs = [Outcome.allow(), Outcome.deny()] + [
        Outcome.error(kind) for kind in ("Connect", "Handshake", "Protocol", "Integrity", "Timeout")
    ]
    run_pairs = [
        (saz, mapped)
        for saz in saz_inputs
        for mapped in (True, False)
        if compose(saz, mapped).run
    ]
    assert run_pairs == [(Outcome.allow(), True)]
    # Restricting either input never turns a deny into a run.
    for mapped in (True, False):
        for saz in saz_inputs:
            if not compose(saz, mapped).run:
                assert not compose(saz, False).run
                for worse in saz_inputs[1:]:
                    assert not compose(worse, mapped).run


# -- job submission ---------------------------------------------------------------

@pytest.fixture
def site(tmp_path):
    authority = Authority.create()
    store_path = tmp_path / "journal"
    make_store(store_path, ALICE, CAROL, now=authority.now)
    mapfile = parse_mapfile(f'"{BOB}" bob01\n"{CAROL}" carol01\n')
    proxies = {}
    for dn_text, name in ((ALICE, "alice"), (BOB, "bob"), (CAROL, "carol"), (DAVE, "dave")):
        prefix = tmp_path / name
        write_credential(prefix, authority.proxy_for(dn_text))
        proxies[dn_text] = str(prefix)
    return {
        "authority": authority,
        "store_path": store_path,
        "server_chain": authority.issue("/O=TestCA/CN=saz server"),
        "mapfile": mapfile,
        "proxies": proxies,
    }


def test_submit_job_both_levels_allow(site):
    with running_server(site["store_path"], site["server_chain"], site["authority"].anchors) as (
        server,
        _logs,
    ):
        result = submit_job(
            JobRequest(site["proxies"][CAROL], ("echo", "job ran")),
            site["mapfile"],
            server.address,
            site["authority"].anchors,
        )
    assert isinstance(result, Accepted)
    assert result.local_user == "carol01"
    assert "job ran" in result.command_output


def test_submit_job_store_only_fails_mapfile_stage(site):
    with running_server(site["store_path"], site["server_chain"], site["authority"].anchors) as (
        server,
        _logs,
    ):
        result = submit_job(
            JobRequest(site["proxies"][ALICE], ("echo", "x")),
            site["mapfile"],
            server.address,
            site["authority"].anchors,
        )
    assert isinstance(result, Rejected) and result.stage == "Mapfile"


def test_submit_job_mapfile_only_fails_saz_stage(site):
    with running_server(site["store_path"], site["server_chain"], site["authority"].anchors) as (
        server,
        _logs,
    ):
        result = submit_job(
            JobRequest(site["proxies"][BOB], ("echo", "x")),
            site["mapfile"],
            server.address,
            site["authority"].anchors,
        )
    assert isinstance(result, Rejected) and result.stage == "SAZ"


def test_submit_job_unreadable_proxy(site, tmp_path):
    with running_server(site["store_path"], site["server_chain"], site["authority"].anchors) as (
        server,
        _logs,
    ):
        result = submit_job(
            JobRequest(str(tmp_path / "missing"), ("echo", "x")),
            site["mapfile"],
            server.address,
            site["authority"].anchors,
        )
    assert isinstance(result, Rejected) and result.stage == "SAZ"
    assert "proxy unreadable" in result.reason


def test_gatekeeper_cli(site, tmp_path, capsys):
    from saz.credential import write_chain_file
    from saz.gatekeeper import main

    anchors_path = tmp_path / "anchors.chain"
    write_chain_file(anchors_path, tuple(site["authority"].anchors))
    mapfile_path = tmp_path / "grid-mapfile"
    mapfile_path.write_text(f'"{BOB}" bob01\n"{CAROL}" carol01\n', encoding="utf-8")

    with running_server(site["store_path"], site["server_chain"], site["authority"].anchors) as (
        server,
        _logs,
    ):
        host, port = server.address
        base = [
            "--mapfile", str(mapfile_path),
            "--saz", f"{host}:{port}",
            "--anchors", str(anchors_path),
        ]
        code = main(base + ["--proxy", site["proxies"][CAROL], "--", "echo", "ok"])
        out = capsys.readouterr().out
        assert code == 0
        assert "GATEKEEPER: ACCEPTED user=carol01" in out
        assert "ok" in out

        code = main(base + ["--proxy", site["proxies"][DAVE], "--", "echo", "no"])
        out = capsys.readouterr().out
        assert code == 1
        assert "GATEKEEPER: REJECTED stage=SAZ" in out

        code = main(base + ["--proxy", site["proxies"][ALICE], "--", "echo", "no"])
        out = capsys.readouterr().out
        assert code == 1
        assert "GATEKEEPER: REJECTED stage=Mapfile" in out

        code = main(base + ["--proxy", site["proxies"][CAROL]])
        assert code == 2  # no command given


def test_load_mapfile(tmp_path):
    path = tmp_path / "grid-mapfile"
    path.write_text('"/O=T/CN=alice" alice01\n', encoding="utf-8")
    assert load_mapfile(path).lookup(parse_dn("/O=T/CN=alice")) == "alice01"
