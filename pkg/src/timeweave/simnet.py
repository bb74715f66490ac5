"""Deterministic lock-step simulator for entangled Timeweave nodes.

Rounds are numbered from 1.  A node with period ``q`` and offset ``o``
ticks in every round ``r > o`` with ``(r - o) % q == 0``.  A message sent
in round ``r`` becomes visible to its destination from round
``r + latency`` and is consumed by the destination's next step.  The
simulator keeps the global execution order of every tick (the ground
truth) out of the nodes' reach and checks every accepted mapping against
it.
"""

from __future__ import annotations

import hashlib
import json
import random
import shutil
import statistics
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable

from .canon import SigningKey, Suite, encode
from .entangle import EVENT_MISMATCH, TemporalMapping, map_event, map_time, transfer_mapping
from .node import Node, NodeConfig
from .rbbtree import RbbConfig

COUNTERS = ("hash_calls", "hash_bytes", "blocks_read", "blocks_written", "bytes_sent")


class ScenarioError(ValueError):
    pass


@dataclass
class NodeSpec:
    name: str
    interval: int = 10
    period: int = 1
    offset: int = 0
    emit_steps: list[int] | None = None

    def ticks(self, rnd: int) -> bool:
        return rnd > self.offset and (rnd - self.offset) % self.period == 0


@dataclass
class EventSpec:
    node: str
    round: int
    label: str
    branch: int = 0


@dataclass
class ForkSpec:
    node: str
    at_step: int
    branches: list[list[str]]   # peer names facing each branch; unlisted peers see branch 0


@dataclass
class MappingQuery:
    viewer: str
    peer: str
    step: int | None = None     # map this peer step ...
    event: str | None = None    # ... or the step that committed this event label


@dataclass
class Scenario:
    nodes: list[NodeSpec]
    rounds: int
    seed: int = 0
    latency: int = 1
    events: list[EventSpec] = field(default_factory=list)
    event_rate: float = 0.0          # random client events per node step
    fork: ForkSpec | None = None
    remove: dict[str, int] = field(default_factory=dict)   # node -> round it disappears
    queries: list[MappingQuery] = field(default_factory=list)
    samples: int = 0                 # random mappings per (viewer, peer) at each check
    check_every: int = 0             # rounds between sampled checks; 0 = only at the end
    fetch: bool = True               # let viewers ask peers for finer proofs
    combine: bool = False            # one envelope per destination per step
    hash: str = "sha256"
    rbb_order: int | None = 8

    @classmethod
    def from_dict(cls, raw: dict) -> "Scenario":
        try:
            raw = dict(raw)
            raw["nodes"] = [n if isinstance(n, NodeSpec) else NodeSpec(**n) for n in raw["nodes"]]
            raw["events"] = [EventSpec(**e) for e in raw.get("events", [])]
            raw["queries"] = [MappingQuery(**q) for q in raw.get("queries", [])]
            if raw.get("fork") is not None:
                raw["fork"] = ForkSpec(**raw["fork"])
            scenario = cls(**raw)
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"bad scenario: {exc}") from exc
        scenario.validate()
        return scenario

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        names = [n.name for n in self.nodes]
        if not 1 <= len(names) or len(set(names)) != len(names):
            raise ScenarioError("node names must be present and unique")
        if self.rounds < 0 or self.latency < 1:
            raise ScenarioError("rounds must be >= 0 and latency >= 1")
        for n in self.nodes:
            if n.period < 1 or n.offset < 0 or n.interval < 0:
                raise ScenarioError(f"bad schedule for node {n.name}")
        for e in self.events:
            if e.node not in names:
                raise ScenarioError(f"event for unknown node {e.node}")
        for name in self.remove:
            if name not in names:
                raise ScenarioError(f"removal of unknown node {name}")
        for q in self.queries:
            if q.viewer not in names or q.peer not in names or (q.step is None) == (q.event is None):
                raise ScenarioError("a query names a viewer, a peer and one of step/event")
        if self.fork is not None:
            if self.fork.node not in names or self.fork.at_step < 0 or len(self.fork.branches) < 2:
                raise ScenarioError("fork needs a known node, a step and two or more branches")
            for peers in self.fork.branches:
                if any(p not in names or p == self.fork.node for p in peers):
                    raise ScenarioError("fork branches must list peers of the forked node")
        try:
            hashlib.new(self.hash)
        except ValueError as exc:
            raise ScenarioError(str(exc)) from exc


def random_scenario(seed: int, n_nodes: int, rounds: int, samples: int = 20,
                    check_every: int = 0) -> Scenario:
    """Randomized honest scenario: per-node period, offset, interval and event rate."""
    rng = random.Random(seed)
    nodes = [NodeSpec(f"N{i}", interval=rng.choice([2, 3, 5, 8, 13, 21]),
                      period=rng.choice([1, 1, 1, 2, 3]), offset=rng.randrange(4))
             for i in range(n_nodes)]
    return Scenario(nodes, rounds, seed=seed, latency=rng.choice([1, 1, 2]),
                    event_rate=0.2, samples=samples, check_every=check_every)


@dataclass
class MappingResult:
    round: int
    viewer: str
    peer: str
    step: int
    reason: str | None = None
    interval: tuple[int, int] | None = None
    truth: tuple[int, int, int] | None = None   # global order of (A,j), (B,i), (A,k)
    width: int | None = None                    # rounds spanned by [A,j]..[A,k]
    sound: bool | None = None
    event: str | None = None


@dataclass
class Report:
    scenario_seed: int
    rounds: int
    ticks: int
    mappings: list[MappingResult]
    rejects: Counter
    wall_seconds: float = 0.0

    @property
    def accepted(self) -> list[MappingResult]:
        return [m for m in self.mappings if m.interval is not None]

    @property
    def unsound(self) -> list[MappingResult]:
        return [m for m in self.accepted if not m.sound]

    @property
    def ok(self) -> bool:
        return not self.unsound

    def mean_width(self) -> float | None:
        widths = [m.width for m in self.accepted if m.event is None]
        return statistics.fmean(widths) if widths else None

    def to_dict(self) -> dict:
        reasons = Counter(m.reason for m in self.mappings if m.interval is None)
        return {
            "ok": self.ok, "seed": self.scenario_seed, "rounds": self.rounds, "ticks": self.ticks,
            "mappings": len(self.mappings), "accepted": len(self.accepted),
            "unsound": [asdict(m) for m in self.unsound],
            "inconclusive": dict(sorted(reasons.items())),
            "mean_width": self.mean_width(), "rejects": dict(sorted(self.rejects.items())),
            "wall_seconds": round(self.wall_seconds, 3),
        }


class Simulation:
    def __init__(self, scenario: Scenario, store: str | Path | None = None, workers: int = 0):
        scenario.validate()
        self.scenario = scenario
        self.store = None if store is None else Path(store)
        self.workers = workers
        self.specs = {n.name: n for n in scenario.nodes}
        self.order = [n.name for n in scenario.nodes]
        self.keys = {n: SigningKey.from_seed(f"{scenario.seed}/{n}".encode()) for n in self.order}
        self.sids = {n: self.keys[n].service_id(n) for n in self.order}
        self.names = {sid.id: n for n, sid in self.sids.items()}
        peers = list(self.sids.values())
        self.branches: dict[str, list[Node]] = {}
        for name in self.order:
            spec = self.specs[name]
            config = NodeConfig(name, spec.interval,
                                None if spec.emit_steps is None else frozenset(spec.emit_steps),
                                RbbConfig(order=scenario.rbb_order))
            suite = Suite(scenario.hash)
            if self.store is None:
                node = Node.memory(self.keys[name], config, peers, suite)
            else:
                node = Node.create(self.store / name, self.keys[name], config, peers, suite)
            self.branches[name] = [node]
        self.facing: dict[tuple[str, str], int] = {}   # (forked node, peer) -> branch
        self.forked = False
        self.removed: set[str] = set()
        self.inbox: dict[str, list[tuple[int, str, bytes]]] = {n: [] for n in self.order}
        self.truth: dict[tuple[str, int, int], tuple[int, int]] = {}   # (node, branch, step) -> (seq, round)
        self.seq = 0
        self.round = 0
        self.transcript: list[str] = []
        self.mappings: list[MappingResult] = []
        self.rejects: Counter = Counter()
        self.event_digests: dict[str, bytes] = {}
        self.event_rng = random.Random(f"events/{scenario.seed}")
        self.sample_rng = random.Random(f"samples/{scenario.seed}")
        self._last = {}

    # -- topology ---------------------------------------------------------------

    def branch_of(self, name: str, viewer: str) -> int:
        return self.facing.get((name, viewer), 0)

    def node(self, name: str, viewer: str | None = None) -> Node:
        return self.branches[name][0 if viewer is None else self.branch_of(name, viewer)]

    def tick_of(self, name: str, branch: int, step: int) -> tuple[int, int] | None:
        fork = self.scenario.fork
        if fork is not None and name == fork.node and step <= fork.at_step:
            branch = 0
        return self.truth.get((name, branch, step))

    # -- running ----------------------------------------------------------------------

    def _emit(self, record: dict) -> None:
        self.transcript.append(json.dumps(record, sort_keys=True, separators=(",", ":")))

    def _counters(self, node: Node, bytes_sent: int) -> dict:
        now = {k: node.suite.counters[k] for k in COUNTERS if k != "bytes_sent"}
        last = self._last.get(id(node), {})
        self._last[id(node)] = now
        diff = {k: v - last.get(k, 0) for k, v in now.items()}
        diff["bytes_sent"] = bytes_sent
        return diff

    def _rebase(self, node: Node) -> None:
        """Keep mapping work out of the next step's maintenance counters."""
        self._last[id(node)] = {k: node.suite.counters[k] for k in COUNTERS if k != "bytes_sent"}

    def event_digest(self, label: str) -> bytes:
        return hashlib.sha256(label.encode()).digest()

    def run(self, rounds: int | None = None) -> Report:
        start = time.perf_counter()
        target = self.scenario.rounds if rounds is None else self.round + rounds
        while self.round < target:
            self.step_round()
            every = self.scenario.check_every
            if every and self.round % every == 0 and self.round < self.scenario.rounds:
                self.sample_mappings()
        if self.round >= self.scenario.rounds:
            self.sample_mappings()
            self.run_queries()
        report = self.report()
        report.wall_seconds = time.perf_counter() - start
        return report

    def report(self) -> Report:
        return Report(self.scenario.seed, self.round, self.seq, self.mappings, self.rejects)

    def step_round(self) -> None:
        self.round += 1
        r = self.round
        sc = self.scenario
        for name, at in sc.remove.items():
            if at == r and name not in self.removed:
                self.removed.add(name)
                self._emit({"round": r, "step": None, "node": name, "event": "remove", "counters": {}})
        for e in sc.events:
            if e.round == r and e.node not in self.removed:
                digest = self.event_digest(e.label)
                self.event_digests[e.label] = digest
                branches = self.branches[e.node]
                branches[min(e.branch, len(branches) - 1)].submit_event(digest)
        jobs = []
        for name in self.order:
            if name in self.removed or not self.specs[name].ticks(r):
                continue
            for b, node in enumerate(self.branches[name]):
                if sc.event_rate and self.event_rng.random() < sc.event_rate:
                    node.submit_event(self.event_rng.randbytes(32))
                ready = [(sender, data) for at, sender, data in self.inbox[name]
                         if at <= r and self.branch_of(name, sender) == b]
                jobs.append((name, b, node, ready))
            self.inbox[name] = [m for m in self.inbox[name] if m[0] > r]
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                results = list(pool.map(lambda job: job[2].step([d for _, d in job[3]]), jobs))
        else:
            results = [job[2].step([d for _, d in job[3]]) for job in jobs]
        outgoing = []
        for (name, b, node, _), (out, record) in zip(jobs, results):
            self.seq += 1
            self.truth[(name, b, record.step)] = (self.seq, r)
            for kind, reason in record.rejects:
                self.rejects[f"{kind}:{reason}"] += 1
            delivered = []
            for dest, data in out:
                dest_name = self.names[dest.id]
                if self.forked and name == sc.fork.node and self.branch_of(name, dest_name) != b:
                    continue   # a branch only talks to the peers it faces
                delivered.append((dest_name, data))
            sent = self._wire_size(delivered)
            entry = {"round": r, "step": record.step, "node": name, "event": "step",
                     "counters": self._counters(node, sent),
                     "events": record.events, "threads_in": record.threads_in,
                     "threads_accepted": record.threads_accepted,
                     "receipts_in": record.receipts_in, "receipts_accepted": record.receipts_accepted,
                     "threads_out": record.threads_out, "receipts_out": record.receipts_out,
                     "rejects": [list(x) for x in record.rejects]}
            if len(self.branches[name]) > 1:
                entry["branch"] = b
            self._emit(entry)
            outgoing += [(dest_name, name, data) for dest_name, data in delivered]
        for dest, sender, data in outgoing:
            if dest not in self.removed:
                self.inbox[dest].append((r + sc.latency, sender, data))
        self._maybe_fork()

    def _wire_size(self, delivered: list[tuple[str, bytes]]) -> int:
        if not self.scenario.combine:
            return sum(len(d) for _, d in delivered)
        per_dest: dict[str, list[bytes]] = {}
        for dest, data in delivered:
            per_dest.setdefault(dest, []).append(data)
        return sum(len(encode(msgs)) for msgs in per_dest.values())

    def _maybe_fork(self) -> None:
        fork = self.scenario.fork
        if fork is None or self.forked or fork.node in self.removed:
            return
        original = self.branches[fork.node][0]
        if original.timeline.step < fork.at_step:
            return
        self.forked = True
        for b, peers in enumerate(fork.branches):
            for p in peers:
                self.facing[(fork.node, p)] = b
        self.branches[fork.node] += [original.clone() for _ in fork.branches[1:]]
        self._emit({"round": self.round, "step": original.timeline.step, "node": fork.node,
                    "event": "fork", "counters": {}})

    # -- mappings -------------------------------------------------------------------

    def fetcher(self, peer: str, viewer: str):
        if not self.scenario.fetch or peer in self.removed:
            return None
        target = self.node(peer, viewer)

        def fetch(a: int, b: int):
            if not 0 <= a <= b <= target.timeline.step:
                return None
            return target.timeline.prove_precedence(a, b)
        return fetch

    def _judge(self, viewer: str, peer: str, step: int, result, event: str | None = None
               ) -> MappingResult:
        if not isinstance(result, TemporalMapping):
            out = MappingResult(self.round, viewer, peer, step, result.reason, event=event)
        else:
            lo = self.tick_of(viewer, 0, result.lower)
            hi = self.tick_of(viewer, 0, result.upper)
            mid = self.tick_of(peer, self.branch_of(peer, viewer), step)
            sound = lo is not None and hi is not None and mid is not None and lo[0] <= mid[0] <= hi[0]
            out = MappingResult(self.round, viewer, peer, step, None, result.interval,
                                (lo[0], mid[0], hi[0]) if sound else None,
                                hi[1] - lo[1] if lo and hi else None, sound, event)
        self.mappings.append(out)
        self._rebase(self.node(viewer))
        self._emit({"round": self.round, "step": step, "node": viewer, "event": "mapping",
                    "counters": {}, "peer": peer, "reason": out.reason,
                    "interval": None if out.interval is None else list(out.interval),
                    "sound": out.sound, "label": event})
        return out

    def honest(self) -> list[str]:
        fork = self.scenario.fork
        return [n for n in self.order
                if n not in self.removed and (fork is None or n != fork.node)]

    def map(self, viewer: str, peer: str, step: int) -> MappingResult:
        node = self.node(viewer)
        return self._judge(viewer, peer, step,
                           map_time(node, self.sids[peer], step, self.fetcher(peer, viewer)))

    def map_event(self, viewer: str, peer: str, label: str) -> MappingResult:
        """Map the step of a peer's event, using the proof its client holds."""
        digest = self.event_digests[label]
        source = next((n for n in self.branches[peer] if n.event_step(digest) is not None), None)
        if source is None:
            out = MappingResult(self.round, viewer, peer, 0, EVENT_MISMATCH, event=label)
            self.mappings.append(out)
            return out
        proof = source.event_proof(digest)
        result = map_event(self.node(viewer), self.sids[peer], proof, self.fetcher(peer, viewer))
        return self._judge(viewer, peer, proof.step, result, label)

    def export_bundle(self, viewer: str, peer: str, label: str) -> bytes | None:
        digest = self.event_digests[label]
        source = next((n for n in self.branches[peer] if n.event_step(digest) is not None), None)
        if source is None:
            return None
        proof = source.event_proof(digest)
        node = self.node(viewer)
        result = map_event(node, self.sids[peer], proof, self.fetcher(peer, viewer))
        if not isinstance(result, TemporalMapping):
            return None
        return transfer_mapping(node, result, proof)

    def sample_mappings(self) -> None:
        n = self.scenario.samples
        if not n:
            return
        for viewer in self.honest():
            for peer in self.order:
                if peer == viewer:
                    continue
                top = self.node(peer, viewer).timeline.step
                if top < 1:
                    continue
                for _ in range(n):
                    self.map(viewer, peer, self.sample_rng.randint(1, top))

    def run_queries(self) -> None:
        for q in self.scenario.queries:
            if q.viewer in self.removed:
                continue
            if q.event is not None:
                self.map_event(q.viewer, q.peer, q.event)
            else:
                self.map(q.viewer, q.peer, q.step)

    def delete_node(self, name: str) -> None:
        """Remove a node for good, including its on-disk stores."""
        self.removed.add(name)
        for node in self.branches[name]:
            if node.path is not None:
                node.close()
                shutil.rmtree(node.path)
        self.branches[name] = []

    def close(self) -> None:
        for nodes in self.branches.values():
            for node in nodes:
                if node.path is not None:
                    node.close()


def run(scenario: Scenario, store=None, workers: int = 0) -> tuple[list[str], Report]:
    sim = Simulation(scenario, store, workers)
    try:
        report = sim.run()
    finally:
        sim.close()
    return sim.transcript, report


# -- canned scenarios -------------------------------------------------------------

def single_exchange_scenario() -> Scenario:
    """A entangles once at its step 1; B, one round behind, answers and entangles back at step 3."""
    return Scenario(
        nodes=[NodeSpec("A", emit_steps=[1]), NodeSpec("B", offset=1, emit_steps=[3])],
        rounds=6, queries=[MappingQuery("A", "B", step=2)])


def fork_scenario(seed: int = 0, rounds: int = 60) -> Scenario:
    """B forks at step 2: branch 0 faces A and commits event N at step 3, branch 1 faces C."""
    nodes = [NodeSpec("A", interval=2), NodeSpec("B", interval=2), NodeSpec("C", interval=2)]
    return Scenario(
        nodes=nodes, rounds=rounds, seed=seed, event_rate=0.3,
        events=[EventSpec("B", 3, "N", branch=0), EventSpec("A", 5, "a-doc")],
        fork=ForkSpec("B", 2, [["A"], ["C"]]),
        queries=[MappingQuery("A", "B", event="N"), MappingQuery("C", "B", event="N")],
        samples=15, check_every=20)


def survivability_scenario(seed: int = 0, rounds: int = 40) -> Scenario:
    nodes = [NodeSpec("A", interval=3), NodeSpec("B", interval=2, offset=1),
             NodeSpec("C", interval=2, period=2)]
    return Scenario(nodes=nodes, rounds=rounds, seed=seed, events=[EventSpec("B", 15, "N")])


def survivability(seed: int = 0, rounds: int = 40, store=None) -> dict[str, bytes]:
    """Map event N at B onto A and C, delete B, and return the exported bundles."""
    sim = Simulation(survivability_scenario(seed, rounds), store)
    sim.run()
    bundles = {}
    for viewer in ("A", "C"):
        data = sim.export_bundle(viewer, "B", "N")
        if data is not None:
            bundles[viewer] = data
    sim.delete_node("B")
    sim.close()
    return bundles


# -- load model ---------------------------------------------------------------------

def load_point(rate: Fraction, seed: int = 0, warmup: int = 20, min_steps: int = 120,
               hash_name: str = "sha256", combine: bool = True) -> dict:
    """Per-step maintenance counters of one node receiving ``rate`` threads per step.

    ``rate = n / interval``: ``n`` peers entangle with the measured node
    every ``interval`` steps, and it entangles back with each of them.
    """
    rate = Fraction(rate)
    peers, interval = rate.numerator, rate.denominator
    nodes = [NodeSpec("M", interval=interval)] + [NodeSpec(f"P{i}", interval=interval)
                                                  for i in range(peers)]
    steps = max(min_steps, 2 * interval)
    steps += -steps % interval
    scenario = Scenario(nodes=nodes, rounds=warmup + steps, seed=seed, hash=hash_name,
                        combine=combine, fetch=False)
    sim = Simulation(scenario)
    sim.run(warmup)
    mark = len(sim.transcript)
    sim.run(steps)
    totals = Counter()
    threads = 0
    for line in sim.transcript[mark:]:
        rec = json.loads(line)
        if rec["node"] == "M" and rec["event"] == "step":
            totals.update(rec["counters"])
            threads += rec["threads_in"]
    out = {k: totals[k] / steps for k in COUNTERS}
    out["threads_per_step"] = threads / steps
    return out


DEFAULT_RATES = (Fraction(1, 600), Fraction(1, 60), Fraction(1, 6), Fraction(1, 2),
                 Fraction(1), Fraction(2), Fraction(3), Fraction(4))


def affine_fit(xs: Iterable[float], ys: Iterable[float]) -> tuple[float, float, float]:
    """Least-squares ``y = a*x + b``; returns ``(a, b, r_squared)``."""
    xs, ys = list(xs), list(ys)
    slope, intercept = statistics.linear_regression(xs, ys)
    mean = statistics.fmean(ys)
    ss_tot = sum((y - mean) ** 2 for y in ys)
    ss_res = sum((y - (slope * x + intercept)) ** 2 for x, y in zip(xs, ys))
    return slope, intercept, 1.0 if ss_tot == 0 else 1 - ss_res / ss_tot


def load_sweep(rates=DEFAULT_RATES, seed: int = 0, **kwargs) -> tuple[list[dict], dict]:
    """Counters per step for each rate, plus an affine fit per counter."""
    points = []
    for rate in rates:
        point = load_point(Fraction(rate), seed, **kwargs)
        point["rate"] = float(Fraction(rate))
        points.append(point)
    fits = {k: affine_fit([p["rate"] for p in points], [p[k] for p in points]) for k in COUNTERS}
    return points, fits
