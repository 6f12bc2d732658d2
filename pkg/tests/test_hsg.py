import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from provhunt.cdr import EntityKind, EntityRef, Family
from provhunt.engine import Engine
from provhunt.harness import gen_scenario
from provhunt.hsg import (Detector, Hsg, HsgNode, HsgState, ScoreParams, ThreatTuple, UnsupportedFormat,
                          calibrate_threshold, detect, export_hsg, normalized_score, threat_score)
from provhunt.ttp import AptStage, MatchedTTP, Severity, TTPRule, load_rules

GOLDEN = {
    "C,M,-,H,-,H,M": 1163881,
    "C,M,-,H,-,H,-": 55342,
    "C,M,-,H,-,-,M": 41780,
    "C,L,-,M,-,H,H": 339504,
    "C,L,-,-,-,-,M": 608,
    "L,L,H,M,-,H,-": 25162,
    "C,L,H,H,-,H,M": 4649220,
    "M,L,H,H,-,H,M": 2650614,
}
VALUES = {"L": 2, "M": 6, "H": 8, "C": 10, "-": 1}


def direct_product(text: str) -> float:
    out = 1.0
    for i, s in enumerate(text.split(","), 1):
        out *= VALUES[s] ** ((10 + i) / 10)
    return out


@pytest.mark.parametrize("text, expected", GOLDEN.items())
def test_golden_scores(text, expected):
    score = threat_score(ThreatTuple.parse(text))
    assert score == pytest.approx(expected, rel=0.005)
    assert score == pytest.approx(direct_product(text), rel=1e-12)


def test_absent_tuple_scores_one():
    assert threat_score(ThreatTuple.empty()) == 1.0


def test_normalized_scores_bracket_the_midpoint():
    assert normalized_score(338.25, 8.3) == pytest.approx(2.01, abs=0.01)
    assert normalized_score(608.26, 8.3) == pytest.approx(2.16, abs=0.01)
    assert normalized_score(1.0, 3.7) == 1.0


def test_default_threshold():
    p = ScoreParams()
    assert p.threshold() == pytest.approx(2.09 ** 9.8)
    assert p.threshold() == pytest.approx(1378, rel=0.01)
    assert ScoreParams(tau_policy="auto").threshold(multi_host=False) == pytest.approx(2.09 ** 8.3)
    assert ScoreParams(tau=500).threshold() == 500


def test_calibrated_midpoint():
    base = calibrate_threshold([608.26, 1163881], [338.25, 12.0], 8.3)
    assert base == pytest.approx(2.09, abs=0.01)


def test_bad_params_are_rejected():
    with pytest.raises(ValueError):
        ScoreParams(weights=(1.0,) * 6)
    with pytest.raises(ValueError):
        ScoreParams(severity_values={Severity.L: 6, Severity.M: 2, Severity.H: 8, Severity.C: 10})


def test_tuple_parse_and_render():
    t = ThreatTuple.parse("<C, m, -, H, -, H, M>")
    assert str(t) == "<C,M,-,H,-,H,M>"
    with pytest.raises(ValueError):
        ThreatTuple.parse("C,M")
    with pytest.raises(ValueError):
        ThreatTuple.parse("C,M,-,X,-,H,M")


sev = st.one_of(st.none(), st.sampled_from(list(Severity)))
tuples = st.tuples(*[sev] * 7).map(ThreatTuple)


@settings(max_examples=300)
@given(tuples, tuples)
def test_merging_never_lowers_the_score(a, b):
    merged = a.merge(b)
    assert threat_score(merged) >= max(threat_score(a), threat_score(b)) * (1 - 1e-12)


@settings(max_examples=200)
@given(st.lists(tuples, min_size=2, max_size=5), st.floats(1.1, 5.0))
def test_scaling_preserves_order_within_one_stage_set(ts, c):
    stages = ts[0].stages
    same = [t for t in ts if t.stages == stages]
    base = ScoreParams()
    scaled = ScoreParams(severity_values={s: v * c for s, v in base.severity_values.items()})
    for x in same:
        for y in same:
            if threat_score(x, base) < threat_score(y, base) * (1 - 1e-9):
                assert threat_score(x, scaled) < threat_score(y, scaled)


def node(i, stage, sev, name="T"):
    return HsgNode(i, name, stage, sev, {"P": "nginx"}, i * 10, "h1")


def sample_hsg() -> Hsg:
    nodes = {1: node(1, AptStage.INITIAL_COMPROMISE, Severity.L, "Untrusted_Read"),
             2: node(2, AptStage.INITIAL_COMPROMISE, Severity.M, "Make_Mem_Exec"),
             3: node(3, AptStage.CLEANUP_TRACKS, Severity.M, "Untrusted_File_RM")}
    return Hsg(1, nodes, {(1, 2, "Untrusted_Read->P"), (1, 3, "Initial_Compromise->P")}, {"h1"})


def test_tuple_takes_the_per_stage_maximum():
    assert str(sample_hsg().threat_tuple()) == "<M,-,-,-,-,-,M>"


def test_json_export_round_trips():
    h = sample_hsg()
    assert Hsg.from_json(json.loads(export_hsg(h, "json"))) == h


def test_dot_export_lists_nodes_and_labeled_edges():
    dot = export_hsg(sample_hsg(), "dot")
    assert dot.count("[label=") == 5
    assert '"Untrusted_Read->P"' in dot


def test_empty_hsg_exports_and_never_alerts():
    h = Hsg(7)
    assert export_hsg(h, "dot").startswith("digraph hsg_7")
    assert json.loads(export_hsg(h, "json"))["nodes"] == []
    assert detect(h, ScoreParams()) is None


def test_unknown_format_is_rejected():
    with pytest.raises(UnsupportedFormat):
        export_hsg(sample_hsg(), "svg")


def test_below_threshold_hsg_does_not_alert():
    assert detect(sample_hsg(), ScoreParams()) is None
    alert = detect(sample_hsg(), ScoreParams(tau=10))
    assert alert is not None and alert.hsg_id == 1
    doc = alert.to_json()
    assert set(doc) >= {"ts", "hsg_id", "score", "normalized_score", "tuple", "ttps", "hosts"}
    assert len(doc["tuple"]) == 7


@pytest.fixture(scope="module")
def drive_by_engine():
    eng = Engine(load_rules())
    eng.run(gen_scenario("drive_by"))
    return eng


def test_drive_by_scores_as_published(drive_by_engine):
    (h,) = drive_by_engine.hsg.hsgs()
    assert str(h.threat_tuple()) == "<C,M,-,H,-,H,M>"
    assert threat_score(h.threat_tuple()) == pytest.approx(1163881, rel=0.005)
    assert drive_by_engine.alerts


def test_every_ttp_sits_in_exactly_one_hsg(drive_by_engine):
    state = drive_by_engine.hsg
    seen = [i for h in state.hsgs() for i in h.nodes]
    assert sorted(seen) == sorted(state.ttps)


def test_alerts_repeat_only_when_stages_grow(drive_by_engine):
    alerts = drive_by_engine.alerts
    covered = [a.tuple.stages for a in alerts]
    for before, after in zip(covered, covered[1:]):
        assert before < after


def test_detector_folds_merged_components():
    def ttp(i, name, stage, sev, *ents):
        rule = TTPRule(name, stage, frozenset({Family.READ}), sev, (("P", "subject"),))
        refs = {f"P{k}": EntityRef(EntityKind.PROCESS, "h1", e, {"exe_path": "/bin/x"})
                for k, e in enumerate(ents)}
        return MatchedTTP(i, rule, {}, refs, i, "h1", i)

    state, det = HsgState(), Detector(ScoreParams(tau=1.5))
    state.add_ttp(ttp(1, "A", AptStage.INITIAL_COMPROMISE, Severity.L, "p1"))
    assert det.check(state, 1, 1, False) is not None
    state.add_ttp(ttp(2, "B", AptStage.INITIAL_COMPROMISE, Severity.L, "p2"))
    assert det.check(state, 2, 2, False) is not None
    # joining the two alerted components adds no stage, so no new alert
    root = state.add_ttp(ttp(3, "C", AptStage.INITIAL_COMPROMISE, Severity.M, "p1", "p2"))
    assert root == state.find(2) == 1
    assert det.check(state, root, 3, False) is None
    assert math.isclose(threat_score(state.threat_tuple(1)), 6 ** 1.1)


def test_dot_labels_escape_windows_paths_and_quotes():
    n = HsgNode(1, "Sensitive_Read", AptStage.INTERNAL_RECON, Severity.M,
                {"F": 'C:\\Users\\bob\\"notes".txt'}, 10, "win-1")
    dot = export_hsg(Hsg(1, {1: n}), "dot")
    assert 'F=C:\\\\Users\\\\bob\\\\\\"notes\\".txt)\\nInternal_Recon [M]"' in dot
