import json

import pytest

from provhunt.cdr import EventStream, serialize_event
from provhunt.engine import Engine
from provhunt.harness import (BenignProfile, ScenarioError, ScenarioScript, UnknownScenario, attack_seqs,
                              compile_script, gen_benign, gen_scenario, ground_truth, interleave,
                              load_scenario, scenario_names, write_ground_truth)
from provhunt.hsg import ScoreParams
from provhunt.ttp import AptStage, load_rules

RULES = load_rules()
SHIPPED = {"running_example", "drive_by", "trojan_a", "trojan_b", "spyware", "eternal_blue_like", "rat",
           "webshell", "password_hijack", "rat_nginx"}


def lines(stream) -> list[str]:
    return [serialize_event(e) for e in stream]


def test_every_named_scenario_ships():
    assert set(scenario_names()) == SHIPPED


@pytest.mark.parametrize("name", sorted(SHIPPED))
def test_same_seed_gives_identical_streams(name):
    assert lines(gen_scenario(name, seed=5)) == lines(gen_scenario(name, seed=5))


def test_seed_changes_identifiers_not_structure():
    a, b = gen_scenario("drive_by", seed=1), gen_scenario("drive_by", seed=2)
    assert [e.family for e in a] == [e.family for e in b]
    assert lines(a) != lines(b)


def test_unknown_scenario_is_reported():
    with pytest.raises(UnknownScenario):
        gen_scenario("no_such_attack")


def test_bad_script_step_is_reported():
    script = ScenarioScript("bad", "linux", "h", [{"op": "teleport"}])
    with pytest.raises(ScenarioError):
        compile_script(script)
    with pytest.raises(ScenarioError):
        ScenarioScript.from_mapping({"name": "x"})


def test_drive_by_uses_the_published_entity_names():
    files = {e.object.local_id for e in gen_scenario("drive_by") if e.object.kind.value == "File"}
    assert any(f.endswith("/net") for f in files)
    assert any(f.endswith("company_secret.txt") for f in files)
    procs = [r for e in gen_scenario("drive_by") for r in (e.subject, e.object) if r.kind.value == "Process"]
    cmds = {r.attrs["exe_path"].rsplit("/", 1)[-1] for r in procs}
    assert {"whoami", "uname", "netstat"} <= cmds


@pytest.mark.parametrize("name", sorted(SHIPPED))
def test_attack_script_yields_one_alerting_hsg_with_declared_stages(name):
    script = load_scenario(name)
    eng = Engine(RULES, ScoreParams())
    eng.run(gen_scenario(name))
    alerted = {a.hsg_id for a in eng.alerts}
    assert len(alerted) == 1
    (root,) = alerted
    stages = {eng.hsg.ttps[i].rule.stage for i in eng.hsg.snapshot(root).nodes}
    assert stages == {AptStage.parse(s) for s in script.stages}
    assert str(eng.hsg.snapshot(root).threat_tuple()) == f"<{script.tuple}>"


# -- benign traffic ------------------------------------------------------------


@pytest.fixture(scope="module")
def hour_linux():
    return gen_benign(BenignProfile.for_platform("linux", "web-1"), 3600, 21)


def test_benign_stream_is_time_ordered(hour_linux):
    ts = [e.ts for e in hour_linux]
    assert ts == sorted(ts)
    assert [e.seq for e in hour_linux] == list(range(1, len(ts) + 1))


def test_benign_generation_is_seeded(hour_linux):
    again = gen_benign(BenignProfile.for_platform("linux", "web-1"), 3600, 21)
    assert lines(again) == lines(hour_linux)


def test_web_server_reads_the_password_database(hour_linux):
    assert any(e.object.local_id == "/etc/passwd" and "nginx" in e.subject.attrs["exe_path"]
               for e in hour_linux)


def test_benign_traffic_triggers_rules_to_learn_from(hour_linux):
    eng = Engine(RULES)
    eng.run(hour_linux)
    fired = {t.rule.name for t in eng.matcher.by_id.values()}
    assert {"Untrusted_Read", "Sensitive_Read"} <= fired


def test_zero_profile_is_empty():
    assert len(gen_benign(BenignProfile.zero(), 3600, 1).events) == 0


def test_duration_must_be_positive():
    with pytest.raises(ValueError):
        gen_benign(BenignProfile(), 0)


@pytest.mark.parametrize("platform", ["linux", "freebsd", "windows"])
def test_platform_paths_differ(platform):
    s = gen_benign(BenignProfile.for_platform(platform, "h"), 1800, 2)
    exes = {e.subject.attrs["exe_path"] for e in s}
    assert any(("\\" in x) == (platform == "windows") for x in exes)


# -- mixing --------------------------------------------------------------------


@pytest.fixture(scope="module")
def mixed(hour_linux):
    prof = BenignProfile.for_platform("linux", "web-1")
    return interleave(hour_linux, gen_scenario("webshell", start_ts=prof.start_ts + 1800 * 10**6))


def test_attack_is_a_small_share(mixed):
    share = len(attack_seqs(mixed)) / len(mixed.events)
    assert 0 < share < 0.01


def test_interleave_keeps_time_order_and_renumbers(mixed):
    keys = [e.ts for e in mixed]
    assert keys == sorted(keys)
    assert [e.seq for e in mixed] == list(range(1, len(mixed.events) + 1))


def test_interleave_with_nothing_is_identity(hour_linux):
    out = interleave(hour_linux, EventStream.from_events([]))
    assert lines(out) == lines(hour_linux)


def test_ground_truth_lists_exactly_the_attack_events(mixed, tmp_path):
    attack = gen_scenario("webshell")
    assert len(attack_seqs(mixed)) == len(attack.events)
    path = tmp_path / "truth.jsonl"
    write_ground_truth(mixed, path)
    rows = [json.loads(x) for x in path.read_text(encoding="utf-8").splitlines()]
    assert rows == ground_truth(mixed)
    assert {r["seq"] for r in rows} == attack_seqs(mixed)
    assert {r["scenario"] for r in rows} == {"webshell"}
    by_seq = {e.seq: e for e in mixed}
    assert all(by_seq[r["seq"]].host_id == attack.events[0].host_id for r in rows)
