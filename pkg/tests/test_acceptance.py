"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed at the end of any pytest run that includes this module,
and by running the file directly.
"""

from __future__ import annotations

import random
import sys
import time
from dataclasses import dataclass, field

import pytest

from provhunt.cdr import Family
from provhunt.engine import Engine
from provhunt.harness import BenignProfile, attack_seqs, gen_benign, gen_scenario, interleave, load_scenario, scenario_names
from provhunt.hsg import ScoreParams, ThreatTuple, calibrate_threshold, export_hsg, normalized_score, threat_score
from provhunt.noise import NoiseModel, learn, noise_key, should_filter
from provhunt.provgraph import ProvGraph
from provhunt.ttp import load_rules
from streams import random_stream
from test_flowtrack import assert_matches_oracle, run_random
from test_provgraph import acyclic_stream, brute_deps, graph_deps, topo_order

RULES = load_rules()
HOUR = 3600
TRAIN_SEEDS = (101, 102)
TRAIN_HOURS = 8
HELD_OUT_SEED = 7
# benign hours around each attack; the attack starts halfway through
MIX_HOURS = 6

RESULTS: dict[int, str] = {}
# seconds spent building shared fixtures, charged to the criteria that use them
SETUP: dict[str, float] = {}


def record(n: int, title: str, ok: bool, detail: str, started: float, setup: float = 0.0) -> None:
    took = time.perf_counter() - started + setup
    RESULTS[n] = f"[{'PASS' if ok else 'FAIL'}] criterion {n} {title}: {detail} ({took:.2f}s)"


# -- 1 -------------------------------------------------------------------------

GOLDEN = {
    "C,M,-,H,-,H,M": 1163881, "C,M,-,H,-,H,-": 55342, "C,M,-,H,-,-,M": 41780, "C,L,-,M,-,H,H": 339504,
    "C,L,-,-,-,-,M": 608, "L,L,H,M,-,H,-": 25162, "C,L,H,H,-,H,M": 4649220, "M,L,H,H,-,H,M": 2650614,
}


def test_criterion_1_golden_scores():
    t0 = time.perf_counter()
    errors = {k: abs(threat_score(ThreatTuple.parse(k)) - v) / v for k, v in GOLDEN.items()}
    ok = all(e <= 0.005 for e in errors.values())
    record(1, "golden scores", ok, f"{sum(e <= 0.005 for e in errors.values())}/8 within 0.5%, "
                                   f"worst {max(errors.values()):.4%}", t0)
    assert ok, errors


# -- 2 -------------------------------------------------------------------------


def test_criterion_2_threshold_calibration():
    t0 = time.perf_counter()
    lo, hi = normalized_score(338.25, 8.3), normalized_score(608.26, 8.3)
    tau = ScoreParams().threshold(multi_host=True)
    ok = abs(lo - 2.01) <= 0.01 and abs(hi - 2.16) <= 0.01 and abs(tau - 1378) / 1378 <= 0.01
    record(2, "threshold calibration", ok, f"normalized {lo:.4f}, {hi:.4f}; tau {tau:.1f} vs 1378", t0)
    assert ok


# -- 3 -------------------------------------------------------------------------


def test_criterion_3_path_factor_oracle():
    t0 = time.perf_counter()
    failures, sizes = [], []
    for seed in range(200):
        t = run_random(seed)
        sizes.append(len(t.g.nodes))
        try:
            assert_matches_oracle(t)
        except AssertionError as exc:
            failures.append((seed, str(exc)))
    ok = not failures and max(sizes) <= 30
    record(3, "path_factor oracle", ok, f"{200 - len(failures)}/200 sequences exact, graphs up to {max(sizes)} nodes", t0)
    assert ok, failures[:3]


# -- 4 -------------------------------------------------------------------------

# Shell_Exec is left out: it is a medium foothold TTP, yet the published tuple
# puts a low severity on that stage (the foothold there is the C&C contact).
RUNNING_EXAMPLE_TTPS = {"Untrusted_Read", "Make_Mem_Exec", "CnC", "Switch_SU", "Sensitive_Read",
                        "Sensitive_Command", "Sensitive_Leak", "Sensitive_Temp_RM", "Untrusted_File_RM"}


def test_criterion_4_running_example():
    t0 = time.perf_counter()
    eng = Engine(RULES, ScoreParams())
    eng.run(gen_scenario("running_example"))
    hsgs = eng.hsg.hsgs()
    tup = str(hsgs[0].threat_tuple()) if len(hsgs) == 1 else None
    names = {n.name for n in hsgs[0].nodes.values()} if hsgs else set()
    dot = export_hsg(hsgs[0], "dot") if hsgs else ""
    alerted = bool(eng.alerts) and eng.alerts[-1].score >= ScoreParams().threshold(multi_host=True)
    ok = (len(hsgs) == 1 and tup == "<M,L,H,H,-,H,M>" and alerted and names == RUNNING_EXAMPLE_TTPS
          and all(n in dot for n in names))
    record(4, "running example", ok, f"{len(hsgs)} HSG, tuple {tup}, alert {alerted}, "
                                     f"{len(names)} TTP kinds", t0)
    assert ok, (tup, sorted(names))


# -- 6 -------------------------------------------------------------------------


def test_criterion_6_versioning():
    t0 = time.perf_counter()
    bad = []
    for seed in range(100):
        rng = random.Random(seed)
        events = random_stream(rng, rng.randint(5, 40))
        g = ProvGraph()
        for e in events:
            g.add_event(e)
            # an identical edge right away adds no ancestry
            if e.family in (Family.READ, Family.WRITE, Family.RECV, Family.SEND):
                if g.add_event(e).versions_created:
                    bad.append((seed, "repeat versioned"))
        if len(topo_order(g)) != len(g.nodes):
            bad.append((seed, "cycle"))
        brute, have = brute_deps(events), graph_deps(g)
        for key, deps in have.items():
            if not deps <= brute[key]:
                bad.append((seed, "spurious dependence"))
            if any(not brute[m] & (deps | {key}) for m in brute[key] - deps):
                bad.append((seed, "lost dependence"))
        loop_free = acyclic_stream(random.Random(1000 + seed), rng.randint(5, 40))
        g2 = ProvGraph()
        for e in loop_free:
            g2.add_event(e)
        if graph_deps(g2) != brute_deps(loop_free):
            bad.append((seed, "loop-free mismatch"))
    ok = not bad
    record(6, "versioning", ok, f"{100 - len({s for s, _ in bad})}/100 random streams acyclic, "
                                f"dependence-preserving, repeat-stable", t0)
    assert ok, bad[:5]


# -- 5, 7, 8 share trained model and merged runs ---------------------------------


@dataclass
class Run:
    name: str
    engine: Engine
    attack: set[int]
    attack_scores: list[float] = field(default_factory=list)
    benign_scores: list[float] = field(default_factory=list)
    attack_alerted: bool = False
    benign_alerted: bool = False


@pytest.fixture(scope="module")
def trained_model() -> NoiseModel:
    t0 = time.perf_counter()
    model = NoiseModel(meta={"duration": len(TRAIN_SEEDS) * TRAIN_HOURS * HOUR, "streams": []})
    for platform in ("linux", "freebsd", "windows"):
        for seed in TRAIN_SEEDS:
            eng = Engine(RULES)
            eng.run(gen_benign(BenignProfile.for_platform(platform, f"train-{platform}"), TRAIN_HOURS * HOUR, seed))
            learn(eng.training_matches(), model=model)
            model.meta["streams"].append(f"{platform}-{seed}")
    SETUP["model"] = time.perf_counter() - t0
    return model


@pytest.fixture(scope="module")
def merged_runs(trained_model) -> list[Run]:
    t0 = time.perf_counter()
    runs = []
    for name in scenario_names():
        script = load_scenario(name)
        profile = BenignProfile.for_platform(script.platform, script.host)
        benign = gen_benign(profile, MIX_HOURS * HOUR, HELD_OUT_SEED)
        attack = gen_scenario(name, seed=1, start_ts=profile.start_ts + MIX_HOURS * HOUR * 10**6 // 2)
        stream = interleave(benign, attack)
        eng = Engine(RULES, ScoreParams(), trained_model)
        eng.run(stream)
        run = Run(name, eng, attack_seqs(stream))
        alerted = {eng.hsg.find(a.hsg_id) for a in eng.alerts}
        for h in eng.hsg.hsgs():
            is_attack = any(eng.hsg.ttps[i].event_seq in run.attack for i in h.nodes)
            score = threat_score(h.threat_tuple(), eng.params)
            (run.attack_scores if is_attack else run.benign_scores).append(score)
            if h.id in alerted:
                if is_attack:
                    run.attack_alerted = True
                else:
                    run.benign_alerted = True
        runs.append(run)
    SETUP["runs"] = time.perf_counter() - t0
    return runs


def test_criterion_5_separation(merged_runs):
    t0 = time.perf_counter()
    attack = [s for r in merged_runs for s in r.attack_scores]
    benign = [s for r in merged_runs for s in r.benign_scores]
    n = ScoreParams().active_weight_sum(multi_host=False)
    separated = bool(attack) and min(attack) > max(benign, default=0)
    base = calibrate_threshold(attack, benign, n)
    tau = base ** n
    missing = [r.name for r in merged_runs if not any(s > tau for s in r.attack_scores)]
    false_alarms = sum(s > tau for s in benign)
    live_recall = sum(r.attack_alerted for r in merged_runs) / len(merged_runs)
    live_false = [r.name for r in merged_runs if r.benign_alerted]
    ok = separated and not missing and not false_alarms and live_recall == 1.0 and not live_false
    record(5, "separation", ok,
           f"min attack {min(attack):.1f} > max benign {max(benign, default=0):.1f}; calibrated base {base:.3f} "
           f"(tau {tau:.1f}): recall {1 - len(missing) / len(merged_runs):.2f}, "
           f"precision {1.0 if not false_alarms else 0.0:.2f}; live alerts recall {live_recall:.2f}, "
           f"benign alerts {len(live_false)}; incl. training and detection", t0,
           SETUP.get("model", 0) + SETUP.get("runs", 0))
    assert ok, (missing, false_alarms, live_false)


def test_criterion_7_compaction(merged_runs):
    t0 = time.perf_counter()
    ratios = {r.name: r.engine.summary()["edges"] / max(1, r.engine.summary()["hsg_edges"]) for r in merged_runs}
    worst = min(ratios, key=ratios.get)
    ok = all(v >= 100 for v in ratios.values())
    record(7, "HSG compaction", ok, f"edge ratio min {ratios[worst]:.0f}x ({worst}), "
                                    f"max {max(ratios.values()):.0f}x; incl. detection", t0,
           SETUP.get("runs", 0))
    assert ok, ratios


def test_criterion_8_noise_model(trained_model):
    t0 = time.perf_counter()
    stream = gen_benign(BenignProfile.for_platform("linux", "held-out"), 2 * HOUR, HELD_OUT_SEED)
    bare = Engine(RULES, model=NoiseModel())
    bare.run(stream)
    passwd = [(t, b) for t, b in bare.training_matches()
              if t.rule.name == "Sensitive_Read" and t.entities["F"].local_id == "/etc/passwd"
              and "nginx" in t.principal.attrs["exe_path"]]
    filtered = all(should_filter(t, b, trained_model) for t, b in passwd)
    above = [should_filter(t, trained_model.lookup(noise_key(t)).byte_threshold + 1, trained_model)
             for t, _ in passwd]
    quiet = Engine(RULES, model=trained_model)
    quiet.run(stream)
    active = [sum(t.status == "active" for t in e.matcher.by_id.values()) for e in (quiet, bare)]
    ok = bool(passwd) and filtered and not any(above) and active[1] > active[0]
    record(8, "noise model", ok, f"{len(passwd)} nginx /etc/passwd reads filtered {filtered}, "
                                 f"above threshold filtered {any(above)}; active matches "
                                 f"{active[0]} with model < {active[1]} without; incl. training", t0,
           SETUP.get("model", 0))
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
