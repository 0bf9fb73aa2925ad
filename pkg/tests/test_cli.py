import json
from pathlib import Path

import pytest

from collabiot.cli import main

from conftest import HOME_YAML

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"
OFFICE_GROUP = {"groups": [{"name": "OFFICE", "spec": {"attributes": {"location": {"includes": [{"name": "office"}]}}}}]}
YES = {"verdict": "yes", "reason": "same meaning"}


@pytest.fixture
def cli(tmp_path, capsys):
    store = str(tmp_path / "state")

    def run(*argv, json_mode=True):
        capsys.readouterr()
        code = main(["--store", store] + (["--json"] if json_mode else []) + list(argv))
        out, err = capsys.readouterr()
        data = json.loads(out) if json_mode and out.strip() else out
        return code, data, err

    return run


@pytest.fixture
def home(cli, tmp_path):
    doc = tmp_path / "home.yaml"
    doc.write_text(HOME_YAML)
    assert cli("policy", "load", str(doc))[0] == 0
    cli("device", "add", "lr-lock", "location=livingroom", "type=lock", "--native", "--address", "127.0.0.1:1")
    cli("device", "add", "laptop", "location=office", "type=laptop", "--native", "--address", "127.0.0.1:2")
    return cli


def test_policy_load_and_list(home):
    code, data, _ = home("policy", "list")
    assert code == 0
    assert data["groups"] == ["FD", "GD", "LR"] and data["policies"] == ["policy1", "policy2"]
    assert data["revision"] == 7


def test_policy_show(home):
    code, data, _ = home("policy", "show", "policy2")
    assert data["capability"]["includes"] == [{"name": "laptop_getinference", "limit": "10 req/sec"}]
    code, text, _ = home("policy", "show", "LR", json_mode=False)
    assert code == 0 and "name: LR" in text
    code, _, err = home("policy", "show", "nope")
    assert code == 1 and "no policy or group" in err


def test_guest_add_then_revoke(home):
    code, data, _ = home("device", "add", "phone-1", "relation=friend")
    assert code == 0
    assert sorted(e["proxy_address"] for e in data["reissued"]["phone-1"]) == ["127.0.0.1:1", "127.0.0.1:2"]
    code, data, _ = home("policy", "rm", "policy2")
    assert data["invalidated"] == [["phone-1", "laptop"]]
    # tokens minted by a running hub live in its ledger; a direct edit has none to name
    assert data["notices"] == []
    code, _, err = home("policy", "rm", "policy2")
    assert code == 1 and "ConflictError" in err


def test_remove_referenced_group_is_a_conflict(home):
    code, _, err = home("policy", "rm", "LR", "--group")
    assert code == 1 and "ConflictError" in err


def test_device_tag_list_remove(home):
    home("device", "add", "phone-1", "relation=stranger")
    code, data, _ = home("device", "tag", "phone-1", "relation=friend")
    assert code == 0 and "phone-1" in data["reissued"]
    code, data, _ = home("device", "list")
    assert [d["id"] for d in data] == ["laptop", "lr-lock", "phone-1"]
    code, data, _ = home("device", "remove", "phone-1")
    assert code == 0
    code, _, err = home("device", "tag", "phone-1", "relation=friend")
    assert code == 1 and "UnknownDevice" in err
    code, _, err = home("device", "remove", "ghost")
    assert code == 1 and "UnknownDevice" in err


@pytest.mark.parametrize("argv", [
    ("device", "add", "x", "novalue"),
    ("device", "add", "x", "type=lock", "--native"),
    ("device", "add", "x", "type=toaster", "--native", "--address", "127.0.0.1:5"),
    ("bench", "token_gen", "--caps", "1..21"),
    ("bench", "policy_resolution", "--groups", "0,5"),
    ("bench", "concurrency", "--guests", "1..x"),
    ("bench", "llm"),
    ("prompt", "group", "   "),
])
def test_usage_errors_exit_2(cli, argv):
    code, _, err = cli(*argv)
    assert code == 2 and "error:" in err


def test_argparse_errors_exit_2(cli):
    with pytest.raises(SystemExit) as exc:
        cli("policy")
    assert exc.value.code == 2


def test_bad_config_exits_1(cli, tmp_path):
    cfg = tmp_path / "hub.yaml"
    cfg.write_text("bogus: 1\n")
    code, _, err = cli("--config", str(cfg), "policy", "list")
    assert code == 1 and "ConfigError" in err


def test_prompt_commit_with_script(home, tmp_path):
    script = tmp_path / "script.json"
    script.write_text(json.dumps([OFFICE_GROUP, YES]))
    code, data, _ = home("prompt", "group", "devices in the office", "--script", str(script), "--commit")
    assert code == 0 and data["status"] == "accepted"
    assert [e["stage"] for e in data["transcript"]] == ["generate", "schema", "semantic", "attribute"]
    assert data["commit"]["op"] == "add_group"
    assert "OFFICE" in home("policy", "list")[1]["groups"]
    # the same prompt again names an existing group: a hard conflict, nothing committed
    code, data, _ = home("prompt", "group", "devices in the office", "--script", str(script), "--commit")
    assert code == 1 and data["status"] != "accepted" and "commit" not in data
    assert any(c["kind"] == "duplicate-name" for c in data["conflicts"])


def test_prompt_text_output(home, tmp_path):
    script = tmp_path / "script.json"
    script.write_text(json.dumps([OFFICE_GROUP, YES]))
    code, text, _ = home("prompt", "group", "devices in the office", "--script", str(script), json_mode=False)
    assert code == 0
    assert "[round 1] generate" in text and "status: accepted" in text and "name: OFFICE" in text


def test_scenario_run(cli, tmp_path):
    code, data, _ = cli("scenario", "run", str(SCENARIOS / "delivery-robot.yaml"), "--results", str(tmp_path / "r"))
    assert code == 0
    assert data["counts"]["issued"] == data["counts"]["admitted"] + data["counts"]["denied"]
    assert list((tmp_path / "r" / "delivery-robot").glob("*/report.csv"))


def test_scenario_run_csv(cli):
    code, text, _ = cli("scenario", "run", str(SCENARIOS / "empty.yaml"), "--csv", json_mode=False)
    assert code == 0 and text.splitlines()[0] == "metric,unit,count,mean,p50,p99"


def test_bad_scenario_exits_1(cli, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: bad\nduration: 1\nguests: [{id: g, arrival: 5}]\n")
    code, _, err = cli("scenario", "run", str(bad))
    assert code == 1 and "SetupError" in err


def test_bench_token_gen(cli):
    code, data, _ = cli("bench", "token_gen", "--caps", "1..3", "--repeats", "2")
    assert code == 0
    assert {m["name"] for m in data["metrics"]} >= {"token.size.1", "token.size.3"}


def test_bench_resolution_text(cli):
    code, text, _ = cli("bench", "policy_resolution", "--groups", "1,2", "--attributes", "1", "--repeats", "2",
                        json_mode=False)
    assert code == 0 and "resolve.groups.2" in text


def test_hub_mode_delivers_invalidations(home, tmp_path, capsys):
    import asyncio
    import threading

    from collabiot.engine import PolicyEngine
    from collabiot.rpc import HubClient, HubServer
    from collabiot.tokens import AcceptAll, TokenService, load_private_key

    state = tmp_path / "state"
    engine = PolicyEngine(path=str(state))
    tokens = TokenService(load_private_key(state / "issuer.key"), authenticator=AcceptAll())
    delivered = []
    loop = asyncio.new_event_loop()
    hub = HubServer(engine, tokens, deliver=lambda addr, n, sig: delivered.append((addr, n.jtis)))
    threading.Thread(target=loop.run_forever, daemon=True).start()
    try:
        asyncio.run_coroutine_threadsafe(hub.start(), loop).result(10)

        async def join():
            async with await HubClient.connect(hub.address) as c:
                return await c.join("phone-1", attributes={"relation": "friend"})

        reply = asyncio.run_coroutine_threadsafe(join(), loop).result(10)
        laptop = [e for e in reply["result"]["entries"] if e["device_type"] == "laptop"]
        assert len(laptop) == 1
        capsys.readouterr()
        code = main(["--store", str(state), "--hub", hub.address, "--json", "policy", "rm", "policy2"])
        data = json.loads(capsys.readouterr().out)
        assert code == 0 and data["invalidated"] == [["phone-1", "laptop"]]
        assert [addr for addr, _ in delivered] == ["127.0.0.1:2"]
        assert [n["jtis"] for n in data["notices"]] == [list(delivered[0][1])]
        code = main(["--store", str(state), "--hub", hub.address, "--json", "policy", "list"])
        assert json.loads(capsys.readouterr().out)["policies"] == ["policy1"]
    finally:
        asyncio.run_coroutine_threadsafe(hub.stop(), loop).result(10)
        loop.call_soon_threadsafe(loop.stop)


def test_tag_invalidations_equal_grant_diff(home, tmp_path):
    from collabiot.engine import PolicyEngine, grant_map

    home("device", "add", "phone-1", "relation=friend")
    home("device", "add", "phone-2", "relation=friend")
    before = grant_map(PolicyEngine(path=str(tmp_path / "state")).store)
    code, data, _ = home("device", "tag", "phone-1", "relation=stranger")
    after = grant_map(PolicyEngine(path=str(tmp_path / "state")).store)
    shrunk = sorted([g, n] for (g, n), caps in before.items()
                    if (g, n) not in after or set(after[(g, n)]) < set(caps))
    assert code == 0 and data["invalidated"] == shrunk == [["phone-1", "laptop"], ["phone-1", "lr-lock"]]


def test_bench_token_gen_csv(cli):
    code, text, _ = cli("bench", "token_gen", "--caps", "1..20", "--repeats", "2", "--csv", json_mode=False)
    lines = text.splitlines()
    assert code == 0 and lines[0] == "metric,unit,count,mean,p50,p99"
    assert [ln.split(",")[0] for ln in lines[1:]][:2] == ["token.time.1", "token.size.1"]
    assert len(lines) == 41


def _free_port():
    import socket

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_serve_then_external_join(cli, tmp_path):
    import asyncio
    import os
    import signal
    import subprocess
    import sys

    from collabiot.engine import GUEST, DeviceRecord, PolicyEngine, resolve_access
    from collabiot.rpc import HubClient, ProxyClient
    from collabiot.tokens import peek_claims

    doc = tmp_path / "home.yaml"
    doc.write_text(HOME_YAML)
    cli("policy", "load", str(doc))
    lock_addr = f"127.0.0.1:{_free_port()}"
    cli("device", "add", "lr-lock", "location=livingroom", "type=lock", "--native", "--address", lock_addr)
    hub_addr = f"127.0.0.1:{_free_port()}"
    proc = subprocess.Popen([sys.executable, "-m", "collabiot.cli", "--store", str(tmp_path / "state"),
                             "serve", "--listen", hub_addr], stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                            text=True, env={**os.environ, "PYTHONUNBUFFERED": "1"})
    try:
        assert "hub listening on" in proc.stdout.readline()

        async def session():
            async with await HubClient.connect(hub_addr) as hub:
                reply = await hub.join("phone-1", attributes={"relation": "friend"})
            [entry] = reply["result"]["entries"]
            async with await ProxyClient.connect(entry["proxy_address"]) as lock:
                await lock.establish(entry["token"])
                return entry, await lock.request("unlock")

        entry, reply = asyncio.run(asyncio.wait_for(session(), 20))
    finally:
        proc.send_signal(signal.SIGINT)
        assert proc.wait(10) == 0
    assert entry["proxy_address"] == lock_addr and reply["status"] == "ok"
    # the served grant equals an in-process resolution of the same store
    store = PolicyEngine(path=str(tmp_path / "state")).store
    [grant] = resolve_access(DeviceRecord("phone-1", {"relation": "friend"}, kind=GUEST), store, 0)
    claims = peek_claims(entry["token"])
    assert {c["capability"] for c in claims["inc_cap"]} == set(grant.capabilities)
    # the joined guest was registered and flushed to the store on shutdown
    assert store.devices["phone-1"].kind == GUEST
