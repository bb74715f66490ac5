import json

import pytest

from timeweave.canon import Suite
from timeweave.entangle import (
    BROKEN_PROOF, EVENT_MISMATCH, make_thread, verify_and_archive_thread, verify_bundle,
)
from timeweave.simnet import (
    NodeSpec, Scenario, ScenarioError, Simulation, affine_fit, single_exchange_scenario, fork_scenario,
    load_point, random_scenario, run, survivability,
)


def test_single_exchange_through_simulator():
    transcript, report = run(single_exchange_scenario())
    (m,) = report.mappings
    assert m.interval == (1, 5) and m.sound
    last = json.loads(transcript[-1])
    assert last["event"] == "mapping" and last["interval"] == [1, 5]


def test_transcript_records_have_stable_fields():
    transcript, _ = run(random_scenario(4, 3, 30, samples=2))
    for line in transcript:
        rec = json.loads(line)
        assert {"round", "step", "node", "event", "counters"} <= rec.keys()
        if rec["event"] == "step":
            assert set(rec["counters"]) == {"hash_calls", "hash_bytes", "blocks_read",
                                            "blocks_written", "bytes_sent"}


def test_same_seed_same_transcript():
    a, _ = run(random_scenario(11, 4, 120, samples=3, check_every=40))
    b, _ = run(random_scenario(11, 4, 120, samples=3, check_every=40))
    c, _ = run(random_scenario(12, 4, 120, samples=3, check_every=40))
    assert a == b and a != c


def test_worker_mode_matches_serial():
    scenario = random_scenario(5, 4, 80, samples=3)
    serial, _ = run(scenario)
    threaded, _ = run(scenario, workers=4)
    assert serial == threaded


@pytest.mark.parametrize("seed,n", [(21, 3), (22, 5)])
def test_honest_runs_are_sound_and_reject_nothing(seed, n):
    _, report = run(random_scenario(seed, n, 300, samples=8, check_every=100))
    assert report.accepted and report.ok
    assert not report.rejects


def test_resolution_improves_with_more_frequent_entanglement():
    widths = []
    for interval in (16, 8, 4, 2):
        nodes = [NodeSpec(n, interval=interval, offset=o) for n, o in (("A", 0), ("B", 1), ("C", 2))]
        _, report = run(Scenario(nodes, 260, seed=3, samples=25, check_every=65))
        assert report.ok
        widths.append(report.mean_width())
    assert widths == sorted(widths, reverse=True) and len(set(widths)) == 4


def test_fork_containment():
    sim = Simulation(fork_scenario())
    report = sim.run()
    assert report.ok
    by_viewer = {m.viewer: m for m in report.mappings if m.event == "N"}
    assert by_viewer["A"].sound
    assert by_viewer["C"].interval is None and by_viewer["C"].reason == EVENT_MISMATCH
    # each branch passes its own peers' checks
    assert not report.rejects
    # N lives only on the branch facing A
    digest = sim.event_digests["N"]
    assert sim.node("B", "A").event_step(digest) is not None
    assert sim.node("B", "C").event_step(digest) is None


def test_fork_cross_branch_thread_rejected():
    sim = Simulation(fork_scenario(rounds=20))
    sim.run()
    a_branch, c_branch = sim.node("B", "A"), sim.node("B", "C")
    thread = make_thread(a_branch, sim.sids["C"])
    assert verify_and_archive_thread(sim.node("C"), thread).reason == BROKEN_PROOF
    assert c_branch.timeline.head != a_branch.timeline.head


def test_survivability_bundles_outlive_the_source(tmp_path):
    bundles = survivability(store=tmp_path)
    assert set(bundles) == {"A", "C"}
    assert not (tmp_path / "B").exists()
    for viewer, data in bundles.items():
        result = verify_bundle(data, Suite())
        assert result.ok and result.local.id != result.remote.id
    assert verify_bundle(bundles["A"], Suite()).step == verify_bundle(bundles["C"], Suite()).step


def test_removed_node_stops_and_others_continue():
    nodes = [NodeSpec("A", interval=2), NodeSpec("B", interval=2), NodeSpec("C", interval=2)]
    transcript, report = run(Scenario(nodes, 40, remove={"B": 20}, samples=5))
    recs = [json.loads(x) for x in transcript]
    assert max(r["round"] for r in recs if r["node"] == "B" and r["event"] == "step") == 19
    assert max(r["round"] for r in recs if r["node"] == "C" and r["event"] == "step") == 40
    assert report.ok


def test_file_backed_simulation_matches_memory(tmp_path):
    scenario = random_scenario(8, 3, 40, samples=2)
    mem, _ = run(scenario)
    disk, _ = run(scenario, store=tmp_path)
    strip = lambda lines: [{k: v for k, v in json.loads(x).items() if k != "counters"} for x in lines]
    assert strip(mem) == strip(disk)


@pytest.mark.parametrize("raw", [
    {"nodes": [], "rounds": 3},
    {"nodes": [{"name": "A"}, {"name": "A"}], "rounds": 3},
    {"nodes": [{"name": "A", "period": 0}], "rounds": 3},
    {"nodes": [{"name": "A"}], "rounds": 3, "latency": 0},
    {"nodes": [{"name": "A"}], "rounds": 3, "events": [{"node": "Z", "round": 1, "label": "x"}]},
    {"nodes": [{"name": "A"}], "rounds": 3, "fork": {"node": "A", "at_step": 1, "branches": [[]]}},
    {"nodes": [{"name": "A"}], "rounds": 3, "bogus": 1},
    {"nodes": [{"name": "A"}], "rounds": 3, "hash": "md17"},
])
def test_scenario_validation(raw):
    with pytest.raises(ScenarioError):
        Scenario.from_dict(raw)


def test_scenario_json_round_trip(tmp_path):
    scenario = fork_scenario()
    path = tmp_path / "s.json"
    path.write_text(json.dumps(scenario.to_dict()))
    assert Scenario.load(path) == scenario


def test_affine_fit_exact_line():
    slope, intercept, r2 = affine_fit([0, 1, 2, 3], [1, 3, 5, 7])
    assert (round(slope, 9), round(intercept, 9), round(r2, 9)) == (2, 1, 1)


def test_load_point_counts_threads():
    point = load_point(2, min_steps=30, warmup=5)
    assert point["threads_per_step"] == 2
    assert point["hash_calls"] > load_point(1, min_steps=30, warmup=5)["hash_calls"]
